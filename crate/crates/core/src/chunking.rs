//! Token estimation and context-budget batching.
//!
//! Records are packed greedily in ordinal order. A record whose rendered
//! estimate exceeds the effective budget is split (sentence boundaries
//! first, then whitespace, then a hard character offset) and its fragments
//! open a fresh batch; later records may join the batch holding the last
//! fragment. Starting oversized records fresh keeps the batch count
//! non-increasing as the budget grows.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{Dataset, Record, Role};

pub const DEFAULT_CONTEXT_LIMIT: usize = 4096;
pub const DEFAULT_PROMPT_RESERVE: usize = 600;
pub const DEFAULT_COMPLETION_RESERVE: usize = 1200;
/// Smallest effective budget a fragment may be sized against.
pub const MIN_FRAGMENT_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChunkingError {
    #[error("effective budget of {effective} tokens is below the minimum fragment size of {minimum}")]
    BudgetTooSmall { effective: usize, minimum: usize },
    #[error("record `{record_id}` estimates {estimate} tokens and already fits the budget of {budget}")]
    RecordFits {
        record_id: String,
        estimate: usize,
        budget: usize,
    },
}

/// `ceil(utf8_bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Pluggable token counter. The default is the byte heuristic; an exact
/// tokenizer can be supplied behind the same contract.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;

    /// Estimate of a record as it appears in a batch payload.
    fn estimate_unit(&self, speaker_label: &str, role: Role, text: &str) -> usize {
        self.estimate(&render_unit(speaker_label, role, text))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicEstimator;

impl TokenEstimator for HeuristicEstimator {
    fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text)
    }

    fn estimate_unit(&self, speaker_label: &str, role: Role, text: &str) -> usize {
        (unit_prefix_len(speaker_label, role) + text.len() + UNIT_SEPARATOR.len()).div_ceil(4)
    }
}

const UNIT_SEPARATOR: &str = "\n\n";

/// Payload rendering of one record or fragment: `LABEL (role): text` followed
/// by a blank line. Unlabeled records are rendered bare.
pub fn render_unit(speaker_label: &str, role: Role, text: &str) -> String {
    let mut out = String::with_capacity(unit_prefix_len(speaker_label, role) + text.len() + 2);
    push_prefix(&mut out, speaker_label, role);
    out.push_str(text);
    out.push_str(UNIT_SEPARATOR);
    out
}

fn push_prefix(out: &mut String, speaker_label: &str, role: Role) {
    if speaker_label.is_empty() {
        return;
    }
    out.push_str(speaker_label);
    if role != Role::Unlabeled {
        out.push_str(" (");
        out.push_str(role.as_str());
        out.push(')');
    }
    out.push_str(": ");
}

fn unit_prefix_len(speaker_label: &str, role: Role) -> usize {
    if speaker_label.is_empty() {
        0
    } else if role == Role::Unlabeled {
        speaker_label.len() + 2
    } else {
        speaker_label.len() + role.as_str().len() + 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub context_limit: usize,
    pub prompt_reserve: usize,
    pub completion_reserve: usize,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget {
            context_limit: DEFAULT_CONTEXT_LIMIT,
            prompt_reserve: DEFAULT_PROMPT_RESERVE,
            completion_reserve: DEFAULT_COMPLETION_RESERVE,
        }
    }
}

impl TokenBudget {
    pub fn new(context_limit: usize, prompt_reserve: usize, completion_reserve: usize) -> Self {
        TokenBudget {
            context_limit,
            prompt_reserve,
            completion_reserve,
        }
    }

    /// Budget whose effective size is exactly `effective`, keeping the
    /// default completion reserve and no prompt reserve.
    pub fn with_effective(effective: usize) -> Self {
        TokenBudget::new(effective + DEFAULT_COMPLETION_RESERVE, 0, DEFAULT_COMPLETION_RESERVE)
    }

    pub fn effective_budget(&self) -> usize {
        self.context_limit
            .saturating_sub(self.prompt_reserve)
            .saturating_sub(self.completion_reserve)
    }

    pub fn check(&self) -> Result<usize, ChunkingError> {
        check_effective(self.effective_budget())
    }
}

fn check_effective(effective: usize) -> Result<usize, ChunkingError> {
    if effective < MIN_FRAGMENT_TOKENS {
        Err(ChunkingError::BudgetTooSmall {
            effective,
            minimum: MIN_FRAGMENT_TOKENS,
        })
    } else {
        Ok(effective)
    }
}

/// A whole record or a contiguous piece of one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFragment {
    pub record_id: String,
    pub ordinal: usize,
    pub speaker_label: String,
    pub role: Role,
    /// Position among the pieces the record was first split into.
    pub fragment_index: usize,
    pub fragment_count: usize,
    /// Byte offset of `text` within the parent record's text.
    pub offset: usize,
    pub text: String,
}

impl RecordFragment {
    pub fn whole(record: &Record) -> Self {
        RecordFragment {
            record_id: record.record_id.clone(),
            ordinal: record.ordinal,
            speaker_label: record.speaker_label.clone(),
            role: record.role,
            fragment_index: 0,
            fragment_count: 1,
            offset: 0,
            text: record.text.clone(),
        }
    }

    pub fn is_whole(&self) -> bool {
        self.fragment_count == 1 && self.offset == 0
    }

    pub fn render(&self) -> String {
        render_unit(&self.speaker_label, self.role, &self.text)
    }

    fn cost(&self, estimator: &dyn TokenEstimator) -> usize {
        estimator.estimate_unit(&self.speaker_label, self.role, &self.text)
    }

    fn piece(&self, start: usize, end: usize) -> RecordFragment {
        RecordFragment {
            offset: self.offset + start,
            text: self.text[start..end].to_string(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// 1-based position in the plan.
    pub index: usize,
    pub fragments: Vec<RecordFragment>,
    pub estimated_tokens: usize,
}

impl Batch {
    /// Text sent to the model as the data for this batch.
    pub fn payload(&self) -> String {
        self.fragments.iter().map(RecordFragment::render).collect()
    }

    pub fn record_ids(&self) -> impl Iterator<Item = &str> {
        self.fragments.iter().map(|f| f.record_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub budget: TokenBudget,
    pub total_estimated_tokens: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn fragments(&self) -> impl Iterator<Item = &RecordFragment> {
        self.batches.iter().flat_map(|b| b.fragments.iter())
    }
}

pub fn plan_batches(dataset: &Dataset, budget: TokenBudget) -> Result<BatchPlan, ChunkingError> {
    plan_batches_with(dataset, budget, &HeuristicEstimator)
}

pub fn plan_batches_with(
    dataset: &Dataset,
    budget: TokenBudget,
    estimator: &dyn TokenEstimator,
) -> Result<BatchPlan, ChunkingError> {
    let effective = budget.check()?;
    let units: Vec<RecordFragment> = dataset.records.iter().map(RecordFragment::whole).collect();
    let groups = pack_units(units, effective, estimator)?;
    let batches: Vec<Batch> = groups
        .into_iter()
        .enumerate()
        .map(|(i, (fragments, estimated_tokens))| Batch {
            index: i + 1,
            fragments,
            estimated_tokens,
        })
        .collect();
    let total_estimated_tokens = batches.iter().map(|b| b.estimated_tokens).sum();
    Ok(BatchPlan {
        batches,
        budget,
        total_estimated_tokens,
    })
}

/// Re-pack already planned fragments under a smaller effective budget.
/// Returned groups keep the input order; each carries its estimate.
pub fn repack_fragments(
    fragments: &[RecordFragment],
    effective_budget: usize,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<(Vec<RecordFragment>, usize)>, ChunkingError> {
    let effective = check_effective(effective_budget)?;
    pack_units(fragments.to_vec(), effective, estimator)
}

/// Split a record that does not fit the effective budget on its own.
pub fn split_oversized_record(
    record: &Record,
    effective_budget: usize,
) -> Result<Vec<RecordFragment>, ChunkingError> {
    split_oversized_record_with(record, effective_budget, &HeuristicEstimator)
}

pub fn split_oversized_record_with(
    record: &Record,
    effective_budget: usize,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<RecordFragment>, ChunkingError> {
    let effective = check_effective(effective_budget)?;
    let whole = RecordFragment::whole(record);
    let estimate = whole.cost(estimator);
    if estimate <= effective {
        return Err(ChunkingError::RecordFits {
            record_id: record.record_id.clone(),
            estimate,
            budget: effective,
        });
    }
    let mut pieces = split_unit(&whole, effective, estimator)?;
    let count = pieces.len();
    for (i, p) in pieces.iter_mut().enumerate() {
        p.fragment_index = i;
        p.fragment_count = count;
    }
    Ok(pieces)
}

fn unit_costs(units: &[RecordFragment], estimator: &dyn TokenEstimator) -> Vec<usize> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        units.par_iter().map(|u| u.cost(estimator)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        units.iter().map(|u| u.cost(estimator)).collect()
    }
}

fn pack_units(
    units: Vec<RecordFragment>,
    effective: usize,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<(Vec<RecordFragment>, usize)>, ChunkingError> {
    let costs = unit_costs(&units, estimator);
    let mut groups: Vec<(Vec<RecordFragment>, usize)> = Vec::new();

    for (unit, cost) in units.into_iter().zip(costs) {
        if cost <= effective {
            match groups.last_mut() {
                Some((items, sum)) if *sum + cost <= effective => {
                    items.push(unit);
                    *sum += cost;
                }
                _ => groups.push((vec![unit], cost)),
            }
            continue;
        }

        let mut pieces = split_unit(&unit, effective, estimator)?;
        if unit.is_whole() {
            let count = pieces.len();
            for (i, p) in pieces.iter_mut().enumerate() {
                p.fragment_index = i;
                p.fragment_count = count;
            }
        }
        let mut fresh = true;
        for piece in pieces {
            let c = piece.cost(estimator);
            match groups.last_mut() {
                Some((items, sum)) if !fresh && *sum + c <= effective => {
                    items.push(piece);
                    *sum += c;
                }
                _ => groups.push((vec![piece], c)),
            }
            fresh = false;
        }
    }
    Ok(groups)
}

/// Cut `unit.text` into contiguous pieces that each fit `effective`.
fn split_unit(
    unit: &RecordFragment,
    effective: usize,
    estimator: &dyn TokenEstimator,
) -> Result<Vec<RecordFragment>, ChunkingError> {
    let text = unit.text.as_str();
    let fits = |start: usize, end: usize| {
        estimator.estimate_unit(&unit.speaker_label, unit.role, &text[start..end]) <= effective
    };
    let too_small = || ChunkingError::BudgetTooSmall {
        effective,
        minimum: MIN_FRAGMENT_TOKENS,
    };

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut cur_start = 0usize;
    let mut cur_end = 0usize;

    for (seg_start, seg) in text.split_sentence_bound_indices() {
        let seg_end = seg_start + seg.len();
        if fits(cur_start, seg_end) {
            cur_end = seg_end;
            continue;
        }
        if cur_end > cur_start {
            spans.push((cur_start, cur_end));
            cur_start = cur_end;
        }
        if fits(cur_start, seg_end) {
            cur_end = seg_end;
            continue;
        }

        for (_, piece_end) in whitespace_pieces(text, seg_start, seg_end) {
            if fits(cur_start, piece_end) {
                cur_end = piece_end;
                continue;
            }
            if cur_end > cur_start {
                spans.push((cur_start, cur_end));
                cur_start = cur_end;
            }
            if fits(cur_start, piece_end) {
                cur_end = piece_end;
                continue;
            }
            // Hard cut at the longest fitting char boundary.
            loop {
                let bounds: Vec<usize> = text[cur_start..piece_end]
                    .char_indices()
                    .skip(1)
                    .map(|(i, _)| cur_start + i)
                    .chain(std::iter::once(piece_end))
                    .collect();
                let fitting = bounds.partition_point(|&end| fits(cur_start, end));
                if fitting == 0 {
                    return Err(too_small());
                }
                let cut = bounds[fitting - 1];
                if cut == piece_end {
                    cur_end = piece_end;
                    break;
                }
                spans.push((cur_start, cut));
                cur_start = cut;
            }
        }
    }
    if cur_end > cur_start {
        spans.push((cur_start, cur_end));
    }

    Ok(spans.into_iter().map(|(s, e)| unit.piece(s, e)).collect())
}

/// Word-plus-trailing-whitespace pieces of `text[start..end]`.
fn whitespace_pieces(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut piece_start = start;
    let mut prev_ws = false;
    for (i, c) in text[start..end].char_indices() {
        let abs = start + i;
        let ws = c.is_whitespace();
        if prev_ws && !ws {
            pieces.push((piece_start, abs));
            piece_start = abs;
        }
        prev_ws = ws;
    }
    if piece_start < end {
        pieces.push((piece_start, end));
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnMapping, DataType};

    fn record(id: &str, label: &str, text: &str, ordinal: usize) -> Record {
        Record {
            record_id: id.into(),
            speaker_label: label.into(),
            role: Role::Unlabeled,
            text: text.into(),
            ordinal,
        }
    }

    fn dataset(records: Vec<Record>) -> Dataset {
        Dataset {
            records,
            data_type: DataType::Interview,
            description: String::new(),
            source_path: "test".into(),
            column_mapping: ColumnMapping::default(),
        }
    }

    /// Unlabeled record whose rendered estimate is exactly `tokens`.
    fn sized(id: &str, tokens: usize, ordinal: usize) -> Record {
        record(id, "", &"a".repeat(tokens * 4 - UNIT_SEPARATOR.len()), ordinal)
    }

    #[test]
    fn heuristic_examples() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"x".repeat(400)), 100);
        assert_eq!(estimate_tokens("abcde"), 2);
        // multi-byte characters count by UTF-8 bytes
        assert_eq!(estimate_tokens("ééé"), 2);
    }

    #[test]
    fn heuristic_unit_estimate_matches_rendering() {
        for (label, role) in [("", Role::Unlabeled), ("P1", Role::Unlabeled), ("I1", Role::Interviewer)] {
            let text = "some words here";
            assert_eq!(
                HeuristicEstimator.estimate_unit(label, role, text),
                estimate_tokens(&render_unit(label, role, text))
            );
        }
        assert_eq!(render_unit("I1", Role::Interviewer, "hi"), "I1 (interviewer): hi\n\n");
    }

    #[test]
    fn default_budget_is_2296() {
        assert_eq!(TokenBudget::default().effective_budget(), 2296);
    }

    #[test]
    fn greedy_example_from_prefix_sums() {
        // 4096 - 1000 reserves = 3096; 1000 + 1000 + 1500 = 3500 > 3096.
        let budget = TokenBudget::new(4096, 400, 600);
        assert_eq!(budget.effective_budget(), 3096);
        let ds = dataset(vec![sized("a", 1000, 0), sized("b", 1000, 1), sized("c", 1500, 2)]);
        let plan = plan_batches(&ds, budget).unwrap();
        let shape: Vec<Vec<&str>> = plan
            .batches
            .iter()
            .map(|b| b.record_ids().collect())
            .collect();
        assert_eq!(shape, vec![vec!["a", "b"], vec!["c"]]);
        let estimates: Vec<_> = plan.batches.iter().map(|b| b.estimated_tokens).collect();
        assert_eq!(estimates, vec![2000, 1500]);
        assert_eq!(plan.total_estimated_tokens, 3500);
    }

    #[test]
    fn exact_fill_joins_current_batch() {
        let ds = dataset(vec![sized("a", 100, 0), sized("b", 100, 1)]);
        let plan = plan_batches(&ds, TokenBudget::with_effective(200)).unwrap();
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn empty_record_list_gives_empty_plan() {
        let plan = plan_batches(&dataset(vec![]), TokenBudget::default()).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.total_estimated_tokens, 0);
    }

    #[test]
    fn budget_below_minimum_fragment_is_rejected() {
        let err = plan_batches(&dataset(vec![sized("a", 10, 0)]), TokenBudget::with_effective(63)).unwrap_err();
        assert_eq!(err, ChunkingError::BudgetTooSmall { effective: 63, minimum: 64 });
        assert!(plan_batches(&dataset(vec![]), TokenBudget::new(1000, 600, 400)).is_err());
    }

    #[test]
    fn double_sized_record_splits_and_concatenates_back() {
        let sentence = "This is one sentence about remote work. ";
        let text: String = sentence.repeat(60).trim_end().to_string();
        let effective = 200;
        let rec = record("big", "P1", &text, 0);
        assert!(HeuristicEstimator.estimate_unit("P1", Role::Unlabeled, &text) >= 2 * effective);
        let plan = plan_batches(&dataset(vec![rec]), TokenBudget::with_effective(effective)).unwrap();
        assert!(plan.len() >= 2);
        for b in &plan.batches {
            assert!(b.estimated_tokens <= effective);
        }
        let joined: String = plan.fragments().map(|f| f.text.as_str()).collect();
        assert_eq!(joined, text);
        let offsets_ok = plan.fragments().all(|f| text[f.offset..].starts_with(&f.text));
        assert!(offsets_ok);
    }

    #[test]
    fn two_sentences_split_at_the_boundary() {
        let first = format!("{}. ", "a".repeat(300));
        let second = format!("{}.", "b".repeat(300));
        let rec = record("r", "", &format!("{first}{second}"), 0);
        let frags = split_oversized_record(&rec, 100).unwrap();
        assert_eq!(frags.len(), 2);
        assert_eq!(frags[0].text, first);
        assert_eq!(frags[1].text, second);
        assert_eq!((frags[1].fragment_index, frags[1].fragment_count), (1, 2));
        assert_eq!(frags[1].offset, first.len());
        assert!(frags.iter().all(|f| f.record_id == "r"));
    }

    #[test]
    fn record_that_fits_is_rejected_by_split() {
        let rec = record("r", "", "short", 0);
        assert!(matches!(
            split_oversized_record(&rec, 100),
            Err(ChunkingError::RecordFits { .. })
        ));
    }

    #[test]
    fn unbroken_text_falls_back_to_hard_cuts() {
        let text = "é".repeat(1000); // 2000 bytes, no spaces or sentence ends
        let rec = record("r", "", &text, 0);
        let frags = split_oversized_record(&rec, 64).unwrap();
        assert!(frags.len() >= 8);
        assert!(frags
            .iter()
            .all(|f| HeuristicEstimator.estimate_unit("", Role::Unlabeled, &f.text) <= 64));
        assert_eq!(frags.iter().map(|f| f.text.as_str()).collect::<String>(), text);
    }

    #[test]
    fn long_sentence_splits_at_whitespace() {
        let text = "word ".repeat(200);
        let frags = split_oversized_record(&record("r", "", &text, 0), 64).unwrap();
        assert!(frags.len() > 1);
        // every cut lands right after whitespace
        assert!(frags[..frags.len() - 1].iter().all(|f| f.text.ends_with(' ')));
    }

    #[test]
    fn oversized_fragments_start_a_fresh_batch() {
        let ds = dataset(vec![
            sized("small", 50, 0),
            record("big", "", &"x. ".repeat(200), 1),
            sized("tail", 10, 2),
        ]);
        let plan = plan_batches(&ds, TokenBudget::with_effective(100)).unwrap();
        assert_eq!(plan.batches[0].record_ids().collect::<Vec<_>>(), vec!["small"]);
        let last = plan.batches.last().unwrap();
        assert_eq!(last.fragments.last().unwrap().record_id, "tail");
        assert_eq!(last.fragments[0].record_id, "big");
    }

    #[test]
    fn repack_halves_without_losing_text() {
        let ds = dataset((0..6).map(|i| record(&format!("r{i}"), "P", &"talk about it. ".repeat(20), i)).collect());
        let plan = plan_batches(&ds, TokenBudget::with_effective(400)).unwrap();
        let batch = &plan.batches[0];
        let groups = repack_fragments(&batch.fragments, 200, &HeuristicEstimator).unwrap();
        assert!(groups.len() >= 2);
        assert!(groups.iter().all(|(_, est)| *est <= 200));
        let before: String = batch.fragments.iter().map(|f| f.text.as_str()).collect();
        let after: String = groups.iter().flat_map(|(g, _)| g.iter().map(|f| f.text.as_str())).collect();
        assert_eq!(before, after);
        assert!(repack_fragments(&batch.fragments, 50, &HeuristicEstimator).is_err());
    }
}
