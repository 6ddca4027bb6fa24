//! Parsing model replies into theme tables and checking quote provenance.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::Dataset;
use crate::llmgateway::{ErrorKind, GatewayError};
use crate::normalize::{merge_key, normalize_quote, normalize_source};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub text: String,
    #[serde(default)]
    pub matched_record_id: Option<String>,
}

impl Quote {
    pub fn new(text: impl Into<String>) -> Self {
        Quote {
            text: text.into(),
            matched_record_id: None,
        }
    }

    pub fn is_verified(&self) -> bool {
        self.matched_record_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeEntry {
    pub theme: String,
    pub description: String,
    pub quotes: Vec<Quote>,
    pub participant_count: u32,
    /// Count reported by the model before recounting from verified quotes.
    #[serde(default)]
    pub claimed_count: Option<u32>,
}

impl ThemeEntry {
    pub fn verified_quotes(&self) -> usize {
        self.quotes.iter().filter(|q| q.is_verified()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceBatch {
    Batch(usize),
    #[default]
    Merged,
}

impl fmt::Display for SourceBatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceBatch::Batch(i) => write!(f, "{i}"),
            SourceBatch::Merged => f.write_str("merged"),
        }
    }
}

impl Serialize for SourceBatch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SourceBatch::Batch(i) => s.serialize_u64(*i as u64),
            SourceBatch::Merged => s.serialize_str("merged"),
        }
    }
}

impl<'de> Deserialize<'de> for SourceBatch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(i) => Ok(SourceBatch::Batch(i)),
            Repr::Tag(t) if t == "merged" => Ok(SourceBatch::Merged),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("unknown source batch `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThemeTable {
    pub entries: Vec<ThemeEntry>,
    pub source_batch: SourceBatch,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub preset_version: String,
    #[serde(default)]
    pub temperature: f64,
}

impl ThemeTable {
    pub fn new(entries: Vec<ThemeEntry>) -> Self {
        ThemeTable {
            entries,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn quote_count(&self) -> usize {
        self.entries.iter().map(|e| e.quotes.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmatchedQuote {
    pub theme: String,
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    pub verified: usize,
    pub unmatched: Vec<UnmatchedQuote>,
    pub verification_rate: f64,
}

impl ProvenanceReport {
    pub fn total(&self) -> usize {
        self.verified + self.unmatched.len()
    }
}

/// Parse failure carrying whatever rows were read before the problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseFailure {
    pub error: GatewayError,
    pub partial: Vec<ThemeEntry>,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for ParseFailure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Theme,
    Description,
    Quotes,
    Count,
}

fn classify_header(cell: &str) -> Option<Column> {
    let key: String = cell
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .to_lowercase();
    match key.split_whitespace().collect::<Vec<_>>().join(" ").as_str() {
        "theme" | "themes" => Some(Column::Theme),
        "description" | "descriptions" => Some(Column::Description),
        "quote" | "quotes" => Some(Column::Quotes),
        "participant count" | "participants count" | "participant counts" | "participantcount" => {
            Some(Column::Count)
        }
        _ => None,
    }
}

fn split_cells(line: &str) -> Vec<String> {
    let trimmed = line.trim();
    let inner = trimmed.strip_prefix('|').unwrap_or(trimmed);
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    inner.split('|').map(|c| strip_emphasis(c.trim()).to_string()).collect()
}

fn strip_emphasis(cell: &str) -> &str {
    let mut c = cell;
    for marker in ["**", "__"] {
        if c.len() >= 4 && c.starts_with(marker) && c.ends_with(marker) {
            c = c[2..c.len() - 2].trim();
        }
    }
    c
}

fn is_separator_row(cells: &[String]) -> bool {
    cells.iter().all(|c| {
        let c = c.trim();
        !c.is_empty() && c.trim_matches(':').chars().all(|ch| ch == '-') && c.contains('-')
    })
}

/// Pull quotes out of a Quotes cell: double-quoted segments when present,
/// otherwise semicolon-separated pieces.
pub fn split_quotes(cell: &str) -> Vec<String> {
    let mut quoted = Vec::new();
    let mut chars = cell.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '"' || c == '\u{201C}' {
            let start = i + c.len_utf8();
            let mut end = None;
            for (j, d) in chars.by_ref() {
                if d == '"' || d == '\u{201D}' {
                    end = Some(j);
                    break;
                }
            }
            match end {
                Some(e) => quoted.push(cell[start..e].trim().to_string()),
                None => quoted.push(cell[start..].trim().to_string()),
            }
        }
    }
    let quoted: Vec<String> = quoted.into_iter().filter(|q| !q.is_empty()).collect();
    if !quoted.is_empty() {
        return quoted;
    }
    cell.split(';')
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .collect()
}

fn parse_count(cell: &str) -> Option<u32> {
    let digits: String = cell
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn format_error(message: impl Into<String>, raw: &str, partial: Vec<ThemeEntry>) -> ParseFailure {
    ParseFailure {
        error: GatewayError::with_detail(ErrorKind::FormatError, raw, message),
        partial,
    }
}

/// Parse a pipe-delimited theme table from a model reply.
pub fn parse_theme_table(raw: &str, expected_themes: usize) -> Result<ThemeTable, ParseFailure> {
    if raw.trim().is_empty() {
        return Err(format_error("empty reply", raw, Vec::new()));
    }
    let lines: Vec<&str> = raw.lines().collect();

    let mut header: Option<(usize, Vec<Option<Column>>)> = None;
    let mut saw_pipe_line = false;
    for (i, line) in lines.iter().enumerate() {
        if !line.contains('|') {
            continue;
        }
        saw_pipe_line = true;
        let columns: Vec<Option<Column>> = split_cells(line).iter().map(|c| classify_header(c)).collect();
        let has_all = [Column::Theme, Column::Description, Column::Quotes, Column::Count]
            .iter()
            .all(|want| columns.iter().filter(|c| **c == Some(*want)).count() == 1);
        if has_all {
            header = Some((i, columns));
            break;
        }
    }
    let Some((header_line, columns)) = header else {
        let why = if saw_pipe_line {
            "table header does not name all four columns: Themes, Description, Quotes, Participant Count"
        } else {
            "reply contains no pipe-delimited table"
        };
        return Err(format_error(why, raw, Vec::new()));
    };
    let position = |want: Column| columns.iter().position(|c| *c == Some(want)).unwrap();
    let (theme_at, desc_at, quotes_at, count_at) = (
        position(Column::Theme),
        position(Column::Description),
        position(Column::Quotes),
        position(Column::Count),
    );

    let mut entries: Vec<ThemeEntry> = Vec::new();
    let mut keys = HashSet::new();
    let mut in_rows = false;
    for (offset, line) in lines[header_line + 1..].iter().enumerate() {
        let line_no = header_line + offset + 2;
        if line.trim().is_empty() {
            continue;
        }
        if !line.contains('|') {
            if in_rows {
                break;
            }
            continue;
        }
        let cells = split_cells(line);
        if !in_rows && is_separator_row(&cells) {
            continue;
        }
        in_rows = true;
        if cells.len() != columns.len() {
            return Err(format_error(
                format!("line {line_no} has {} cells, expected {}", cells.len(), columns.len()),
                raw,
                entries,
            ));
        }
        let missing = [theme_at, desc_at, quotes_at, count_at]
            .into_iter()
            .find(|&i| cells[i].is_empty());
        if missing.is_some() {
            return Err(format_error(format!("line {line_no} has an empty cell"), raw, entries));
        }
        let Some(count) = parse_count(&cells[count_at]) else {
            return Err(format_error(
                format!("line {line_no}: participant count `{}` is not a number", cells[count_at]),
                raw,
                entries,
            ));
        };
        let quotes = split_quotes(&cells[quotes_at]);
        if quotes.is_empty() {
            return Err(format_error(format!("line {line_no} has no quotes"), raw, entries));
        }
        let theme = cells[theme_at].clone();
        if !keys.insert(merge_key(&theme)) {
            return Err(format_error(
                format!("line {line_no} repeats theme `{theme}`"),
                raw,
                entries,
            ));
        }
        entries.push(ThemeEntry {
            theme,
            description: cells[desc_at].clone(),
            quotes: quotes.into_iter().map(Quote::new).collect(),
            participant_count: count,
            claimed_count: None,
        });
    }

    if entries.len() != expected_themes {
        return Err(ParseFailure {
            error: GatewayError::with_detail(
                ErrorKind::CountMismatch,
                raw,
                format!("expected {expected_themes} themes, received {}", entries.len()),
            ),
            partial: entries,
        });
    }
    Ok(ThemeTable::new(entries))
}

/// Dataset texts in normalized form, indexed by ordinal.
pub struct NormalizedCorpus<'a> {
    dataset: &'a Dataset,
    texts: Vec<String>,
}

impl<'a> NormalizedCorpus<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        #[cfg(feature = "parallel")]
        let texts = {
            use rayon::prelude::*;
            dataset.records.par_iter().map(|r| normalize_source(&r.text)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let texts = dataset.records.iter().map(|r| normalize_source(&r.text)).collect();
        NormalizedCorpus { dataset, texts }
    }

    /// First record (in ordinal order) containing the quote after normalization.
    pub fn find(&self, quote: &str) -> Option<&'a str> {
        let needle = normalize_quote(quote);
        if needle.is_empty() {
            return None;
        }
        self.texts
            .iter()
            .position(|t| t.contains(&needle))
            .map(|i| self.dataset.records[i].record_id.as_str())
    }
}

fn apply_matches(table: &mut ThemeTable, matches: Vec<Option<String>>) -> ProvenanceReport {
    let mut verified = 0;
    let mut unmatched = Vec::new();
    let mut it = matches.into_iter();
    for entry in &mut table.entries {
        for quote in &mut entry.quotes {
            quote.matched_record_id = it.next().flatten();
            if quote.matched_record_id.is_some() {
                verified += 1;
            } else {
                unmatched.push(UnmatchedQuote {
                    theme: entry.theme.clone(),
                    quote: quote.text.clone(),
                });
            }
        }
    }
    let total = verified + unmatched.len();
    ProvenanceReport {
        verified,
        verification_rate: if total == 0 { 1.0 } else { verified as f64 / total as f64 },
        unmatched,
    }
}

fn all_quotes(table: &ThemeTable) -> Vec<&str> {
    table
        .entries
        .iter()
        .flat_map(|e| e.quotes.iter().map(|q| q.text.as_str()))
        .collect()
}

/// Check every quote against the dataset and record the first matching
/// record. Uses the parallel path when the `parallel` feature is enabled.
pub fn verify_quotes(table: &mut ThemeTable, dataset: &Dataset) -> ProvenanceReport {
    #[cfg(feature = "parallel")]
    {
        verify_quotes_parallel(table, dataset)
    }
    #[cfg(not(feature = "parallel"))]
    {
        verify_quotes_sequential(table, dataset)
    }
}

pub fn verify_quotes_sequential(table: &mut ThemeTable, dataset: &Dataset) -> ProvenanceReport {
    let texts: Vec<String> = dataset.records.iter().map(|r| normalize_source(&r.text)).collect();
    let matches = all_quotes(table)
        .into_iter()
        .map(|q| {
            let needle = normalize_quote(q);
            if needle.is_empty() {
                return None;
            }
            texts
                .iter()
                .position(|t| t.contains(&needle))
                .map(|i| dataset.records[i].record_id.clone())
        })
        .collect();
    apply_matches(table, matches)
}

#[cfg(feature = "parallel")]
pub fn verify_quotes_parallel(table: &mut ThemeTable, dataset: &Dataset) -> ProvenanceReport {
    use rayon::prelude::*;
    let corpus = NormalizedCorpus::new(dataset);
    let matches = all_quotes(table)
        .into_par_iter()
        .map(|q| corpus.find(q).map(str::to_string))
        .collect();
    apply_matches(table, matches)
}

/// Replace model-reported participant counts with the number of distinct
/// speakers among the records matched by verified quotes. The reported value
/// is kept in `claimed_count`.
pub fn recount_participants(mut table: ThemeTable, dataset: &Dataset) -> ThemeTable {
    let index = dataset.record_index();
    for entry in &mut table.entries {
        if entry.claimed_count.is_none() {
            entry.claimed_count = Some(entry.participant_count);
        }
        let speakers: HashSet<&str> = entry
            .quotes
            .iter()
            .filter_map(|q| q.matched_record_id.as_deref())
            .filter_map(|id| index.get(id))
            .map(|r| r.participant_key())
            .collect();
        entry.participant_count = speakers.len() as u32;
    }
    table
}
