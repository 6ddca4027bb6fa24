use std::collections::BTreeMap;

use proptest::prelude::*;
use quali_core::chunking::{
    estimate_tokens, plan_batches, repack_fragments, BatchPlan, HeuristicEstimator, TokenBudget,
};
use quali_core::corpus::{ColumnMapping, DataType, Dataset, Record, Role};

fn dataset(records: Vec<(String, String)>) -> Dataset {
    Dataset {
        records: records
            .into_iter()
            .enumerate()
            .map(|(i, (label, text))| Record {
                record_id: format!("r{i}"),
                speaker_label: label,
                role: if i % 3 == 0 { Role::Participant } else { Role::Unlabeled },
                text,
                ordinal: i,
            })
            .collect(),
        data_type: DataType::Interview,
        description: String::new(),
        source_path: "generated".into(),
        column_mapping: ColumnMapping::default(),
    }
}

fn text_strategy(max_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            4 => "[a-z]{1,9}",
            1 => "[A-Z][a-z]{0,6}[.!?]",
            1 => "[a-zé]{1,4},",
            1 => Just("supercalifragilisticexpialidocious".repeat(3)),
        ],
        1..max_words,
    )
    .prop_map(|words| words.join(" "))
}

fn records_strategy() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec(
        (prop_oneof![Just(String::new()), "[A-Z][a-z]{1,5}"], text_strategy(700)),
        1..12,
    )
}

fn check_plan(ds: &Dataset, plan: &BatchPlan) -> Result<(), TestCaseError> {
    let effective = plan.budget.effective_budget();
    let mut rebuilt: BTreeMap<&str, String> = BTreeMap::new();
    let mut last_ordinal = 0;
    for (i, batch) in plan.batches.iter().enumerate() {
        prop_assert_eq!(batch.index, i + 1);
        prop_assert!(!batch.fragments.is_empty());
        prop_assert!(batch.estimated_tokens <= effective);
        prop_assert!(estimate_tokens(&batch.payload()) <= effective);
        for f in &batch.fragments {
            prop_assert!(f.ordinal >= last_ordinal);
            last_ordinal = f.ordinal;
            let text = rebuilt.entry(f.record_id.as_str()).or_default();
            prop_assert_eq!(f.offset, text.len());
            text.push_str(&f.text);
        }
    }
    prop_assert_eq!(rebuilt.len(), ds.len());
    for r in &ds.records {
        prop_assert_eq!(&rebuilt[r.record_id.as_str()], &r.text);
    }
    Ok(())
}

/// Next-fit packing by running sums, valid when every record fits alone.
fn next_fit_oracle(costs: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut sum = 0;
    for (i, &c) in costs.iter().enumerate() {
        if out.is_empty() || sum + c > budget {
            out.push(vec![i]);
            sum = c;
        } else {
            out.last_mut().unwrap().push(i);
            sum += c;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn plans_respect_budget_and_reassemble(records in records_strategy(), effective in 64usize..900) {
        let ds = dataset(records);
        let plan = plan_batches(&ds, TokenBudget::with_effective(effective)).unwrap();
        check_plan(&ds, &plan)?;
        prop_assert_eq!(plan_batches(&ds, TokenBudget::with_effective(effective)).unwrap(), plan);
    }

    #[test]
    fn larger_budget_never_needs_more_batches(records in records_strategy(), effective in 64usize..700, extra in 1usize..400) {
        let ds = dataset(records);
        let small = plan_batches(&ds, TokenBudget::with_effective(effective)).unwrap();
        let large = plan_batches(&ds, TokenBudget::with_effective(effective + extra)).unwrap();
        prop_assert!(large.len() <= small.len(), "{} > {}", large.len(), small.len());
    }

    #[test]
    fn fitting_records_pack_like_next_fit(sizes in prop::collection::vec(1usize..300, 1..40), effective in 300usize..1200) {
        let ds = dataset(sizes.iter().map(|&n| (String::new(), "w".repeat(n * 4 - 2))).collect());
        let plan = plan_batches(&ds, TokenBudget::with_effective(effective)).unwrap();
        let costs: Vec<usize> = ds.records.iter().map(|r| estimate_tokens(&format!("{}\n\n", r.text))).collect();
        prop_assert_eq!(&costs, &sizes);
        let groups: Vec<Vec<usize>> = plan
            .batches
            .iter()
            .map(|b| b.fragments.iter().map(|f| f.ordinal).collect())
            .collect();
        prop_assert_eq!(groups, next_fit_oracle(&costs, effective));
    }

    #[test]
    fn repacking_at_half_budget_keeps_order_and_text(records in records_strategy(), effective in 128usize..900) {
        let ds = dataset(records);
        let plan = plan_batches(&ds, TokenBudget::with_effective(effective)).unwrap();
        for batch in &plan.batches {
            let groups = repack_fragments(&batch.fragments, effective / 2, &HeuristicEstimator).unwrap();
            let before: Vec<(&str, String)> = batch.fragments.iter().map(|f| (f.record_id.as_str(), f.text.clone())).collect();
            let mut after: Vec<(&str, String)> = Vec::new();
            for f in groups.iter().flat_map(|(g, _)| g.iter()) {
                match after.last_mut() {
                    Some((id, text)) if *id == f.record_id => text.push_str(&f.text),
                    _ => after.push((f.record_id.as_str(), f.text.clone())),
                }
            }
            let mut merged_before: Vec<(&str, String)> = Vec::new();
            for (id, t) in before {
                match merged_before.last_mut() {
                    Some((prev, text)) if *prev == id => text.push_str(&t),
                    _ => merged_before.push((id, t)),
                }
            }
            prop_assert_eq!(merged_before, after);
            for (g, est) in &groups {
                prop_assert!(*est <= effective / 2);
                prop_assert!(!g.is_empty());
            }
        }
    }
}
