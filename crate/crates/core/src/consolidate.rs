//! Merging per-batch theme tables into one table of the requested size.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::normalize::{merge_key, normalize_quote};
use crate::themeparse::{recount_participants, verify_quotes, SourceBatch, ThemeEntry, ThemeTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum MergeWarning {
    /// Fewer distinct themes were found than requested; all are returned.
    TargetExceedsThemes { target: usize, available: usize },
}

impl std::fmt::Display for MergeWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeWarning::TargetExceedsThemes { target, available } => write!(
                f,
                "requested {target} themes but only {available} distinct themes were found"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub table: ThemeTable,
    pub warnings: Vec<MergeWarning>,
}

struct Group {
    entry: ThemeEntry,
    seen_quotes: HashSet<String>,
    first_seen: usize,
}

/// Group entries by normalized theme name, pool their quotes, recount
/// participants and keep the `target` strongest groups.
///
/// Groups rank by recounted participant count, then verified quote count
/// (both descending), then by where the theme first appeared.
pub fn merge_tables(tables: &[ThemeTable], target: usize, dataset: &Dataset) -> MergeOutcome {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Group> = HashMap::new();

    for entry in tables.iter().flat_map(|t| t.entries.iter()) {
        let key = merge_key(&entry.theme);
        let group = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Group {
                entry: ThemeEntry {
                    theme: entry.theme.clone(),
                    description: String::new(),
                    quotes: Vec::new(),
                    participant_count: 0,
                    claimed_count: None,
                },
                seen_quotes: HashSet::new(),
                first_seen: order.len() - 1,
            }
        });
        if entry.description.chars().count() > group.entry.description.chars().count() {
            group.entry.description = entry.description.clone();
        }
        let claimed = entry.claimed_count.unwrap_or(entry.participant_count);
        group.entry.claimed_count = Some(group.entry.claimed_count.unwrap_or(0).max(claimed));
        for quote in &entry.quotes {
            if group.seen_quotes.insert(normalize_quote(&quote.text)) {
                group.entry.quotes.push(quote.clone());
            }
        }
    }

    let mut pooled: Vec<Group> = order.iter().filter_map(|k| groups.remove(k)).collect();
    let mut table = ThemeTable::new(pooled.iter_mut().map(|g| g.entry.clone()).collect());
    verify_quotes(&mut table, dataset);
    let table = recount_participants(table, dataset);
    for (group, entry) in pooled.iter_mut().zip(table.entries) {
        group.entry = entry;
    }

    pooled.sort_by(|a, b| {
        b.entry
            .participant_count
            .cmp(&a.entry.participant_count)
            .then(b.entry.verified_quotes().cmp(&a.entry.verified_quotes()))
            .then(a.first_seen.cmp(&b.first_seen))
    });

    let available = pooled.len();
    let mut warnings = Vec::new();
    if available < target {
        warnings.push(MergeWarning::TargetExceedsThemes { target, available });
    }
    pooled.truncate(target);

    let template = tables.first();
    MergeOutcome {
        table: ThemeTable {
            entries: pooled.into_iter().map(|g| g.entry).collect(),
            source_batch: SourceBatch::Merged,
            model_id: template.map(|t| t.model_id.clone()).unwrap_or_default(),
            preset_version: template.map(|t| t.preset_version.clone()).unwrap_or_default(),
            temperature: template.map(|t| t.temperature).unwrap_or_default(),
        },
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnMapping, DataType, Record, Role};
    use crate::themeparse::Quote;

    fn dataset() -> Dataset {
        let rows = [
            ("r1", "Alex", "I finally get to see my kids after school."),
            ("r2", "Priya", "My evenings are mine again since the commute is gone."),
            ("r3", "Alex", "The house is too quiet and I miss lunch with the team."),
            ("r4", "Jordan", "Video calls all day wear me out."),
        ];
        Dataset {
            records: rows
                .iter()
                .enumerate()
                .map(|(i, (id, who, text))| Record {
                    record_id: id.to_string(),
                    speaker_label: who.to_string(),
                    role: Role::Participant,
                    text: text.to_string(),
                    ordinal: i,
                })
                .collect(),
            data_type: DataType::FocusGroup,
            description: String::new(),
            source_path: "mem".into(),
            column_mapping: ColumnMapping::text("message"),
        }
    }

    fn entry(theme: &str, description: &str, quotes: &[&str]) -> ThemeEntry {
        ThemeEntry {
            theme: theme.into(),
            description: description.into(),
            quotes: quotes.iter().map(|q| Quote::new(*q)).collect(),
            participant_count: 9,
            claimed_count: None,
        }
    }

    #[test]
    fn same_theme_pools_quotes() {
        let ds = dataset();
        let a = ThemeTable::new(vec![entry("Work-life balance", "short", &["see my kids"])]);
        let b = ThemeTable::new(vec![entry(
            "work-life  balance.",
            "a longer description",
            &["evenings are mine again", "See my kids"],
        )]);
        let out = merge_tables(&[a, b], 5, &ds);
        assert_eq!(out.table.len(), 1);
        let e = &out.table.entries[0];
        assert_eq!(e.theme, "Work-life balance");
        assert_eq!(e.description, "a longer description");
        assert_eq!(e.quotes.len(), 2);
        assert_eq!(e.participant_count, 2);
        assert_eq!(e.claimed_count, Some(9));
        assert_eq!(out.table.source_batch, SourceBatch::Merged);
        assert_eq!(
            out.warnings,
            vec![MergeWarning::TargetExceedsThemes { target: 5, available: 1 }]
        );
    }

    #[test]
    fn ranking_and_truncation() {
        let ds = dataset();
        let t = ThemeTable::new(vec![
            entry("Fatigue", "d", &["video calls all day"]),
            entry("Isolation", "d", &["too quiet", "miss lunch"]),
            entry("Family", "d", &["see my kids", "evenings are mine"]),
            entry("Invented", "d", &["nobody said this"]),
        ]);
        let out = merge_tables(&[t], 3, &ds);
        let names: Vec<_> = out.table.entries.iter().map(|e| e.theme.as_str()).collect();
        assert_eq!(names, ["Family", "Isolation", "Fatigue"]);
        assert!(out.warnings.is_empty());
    }
}
