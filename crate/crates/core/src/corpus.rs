//! Dataset ingestion: plain text, delimited tables and spreadsheets are
//! normalized into an ordered sequence of role-labeled [`Record`]s.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use calamine::{Data, Reader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::{estimate_tokens, TokenBudget};
use crate::report::{Severity, ValidationReport};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("format mismatch: {0}")]
    FormatMismatch(String),
    #[error("column mapping error: {0}")]
    MappingError(String),
    #[error("dataset contains no usable records")]
    EmptyDataset,
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Interviewer,
    Participant,
    Moderator,
    Poster,
    Unlabeled,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Interviewer => "interviewer",
            Role::Participant => "participant",
            Role::Moderator => "moderator",
            Role::Poster => "poster",
            Role::Unlabeled => "unlabeled",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "interviewer" => Ok(Role::Interviewer),
            "participant" | "interviewee" => Ok(Role::Participant),
            "moderator" => Ok(Role::Moderator),
            "poster" => Ok(Role::Poster),
            "unlabeled" => Ok(Role::Unlabeled),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataType {
    Interview,
    FocusGroup,
    SocialMedia,
}

impl DataType {
    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Interview => "interview",
            DataType::FocusGroup => "focus_group",
            DataType::SocialMedia => "social_media",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "interview" | "interviews" => Ok(DataType::Interview),
            "focus_group" | "focus_groups" => Ok(DataType::FocusGroup),
            "social_media" | "social_media_posts" => Ok(DataType::SocialMedia),
            other => Err(format!("unknown data type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    PlainText,
    DelimitedTable,
    Spreadsheet,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "plain_text" | "text" | "txt" => Ok(InputFormat::PlainText),
            "delimited_table" | "csv" | "tsv" => Ok(InputFormat::DelimitedTable),
            "spreadsheet" | "xlsx" => Ok(InputFormat::Spreadsheet),
            other => Err(format!("unknown input format `{other}`")),
        }
    }
}

impl InputFormat {
    /// Guess from a file extension, falling back to plain text.
    pub fn from_extension(path: &Path) -> InputFormat {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("csv") | Some("tsv") => InputFormat::DelimitedTable,
            Some("xlsx") | Some("xlsm") | Some("xls") | Some("ods") => InputFormat::Spreadsheet,
            _ => InputFormat::PlainText,
        }
    }
}

/// A column addressed by header name or by 0-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    /// Strings are kept as names; resolution falls back to a numeric index
    /// only when no header carries that name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(ColumnRef::Name(s.to_string()))
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "#{i}"),
            ColumnRef::Name(n) => write!(f, "{n}"),
        }
    }
}

impl ColumnRef {
    fn resolve(&self, headers: &[String]) -> Option<usize> {
        match self {
            ColumnRef::Index(i) => (*i < headers.len()).then_some(*i),
            ColumnRef::Name(name) => {
                let want = name.trim();
                headers
                    .iter()
                    .position(|h| h.trim() == want)
                    .or_else(|| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(want)))
                    .or_else(|| {
                        want.parse::<usize>()
                            .ok()
                            .filter(|i| *i < headers.len())
                    })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    #[default]
    Comma,
    Tab,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
        }
    }
}

/// What each column of a tabular input means.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    #[serde(default)]
    pub speaker_column: Option<ColumnRef>,
    #[serde(default)]
    pub text_column: Option<ColumnRef>,
    #[serde(default)]
    pub id_column: Option<ColumnRef>,
    #[serde(default)]
    pub delimiter: Delimiter,
}

impl ColumnMapping {
    pub fn text(column: impl Into<String>) -> Self {
        ColumnMapping {
            text_column: Some(ColumnRef::Name(column.into())),
            ..Default::default()
        }
    }

    pub fn with_speaker(mut self, column: impl Into<String>) -> Self {
        self.speaker_column = Some(ColumnRef::Name(column.into()));
        self
    }

    pub fn with_id(mut self, column: impl Into<String>) -> Self {
        self.id_column = Some(ColumnRef::Name(column.into()));
        self
    }

    pub fn tab_delimited(mut self) -> Self {
        self.delimiter = Delimiter::Tab;
        self
    }
}

/// One labeled utterance or post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: String,
    pub speaker_label: String,
    pub role: Role,
    pub text: String,
    pub ordinal: usize,
}

impl Record {
    /// Identity used when counting distinct participants. Records without a
    /// speaker label each count as their own participant.
    pub fn participant_key(&self) -> &str {
        if self.speaker_label.is_empty() {
            &self.record_id
        } else {
            &self.speaker_label
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub data_type: DataType,
    pub description: String,
    pub source_path: String,
    pub column_mapping: ColumnMapping,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, record_id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    pub fn record_index(&self) -> HashMap<&str, &Record> {
        let mut index = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            index.entry(r.record_id.as_str()).or_insert(r);
        }
        index
    }

    pub fn speaker_labels(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| !r.speaker_label.is_empty())
            .map(|r| r.speaker_label.as_str())
            .collect()
    }

    pub fn distinct_participants(&self) -> usize {
        self.records
            .iter()
            .map(Record::participant_key)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn word_count(&self) -> usize {
        self.records.iter().map(|r| r.text.split_whitespace().count()).sum()
    }
}

/// Load a dataset from disk.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: InputFormat,
    mapping: &ColumnMapping,
    data_type: DataType,
    description: &str,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CorpusError::FileNotFound(shown.clone())
        } else {
            CorpusError::Io {
                path: shown.clone(),
                source: e,
            }
        }
    })?;
    load_dataset_from_bytes(&bytes, &shown, format, mapping, data_type, description)
}

/// Load a dataset from an in-memory upload. `source_name` is kept as provenance.
pub fn load_dataset_from_bytes(
    bytes: &[u8],
    source_name: &str,
    format: InputFormat,
    mapping: &ColumnMapping,
    data_type: DataType,
    description: &str,
) -> Result<Dataset, CorpusError> {
    let bom_stripped = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    if bom_stripped.iter().all(u8::is_ascii_whitespace) {
        return Err(CorpusError::EmptyDataset);
    }
    let rows = match format {
        InputFormat::PlainText => segment_plain_text(decode_utf8(bytes)?),
        InputFormat::DelimitedTable => {
            let text = decode_utf8(bytes)?;
            let (headers, rows) = read_delimited(text, mapping.delimiter)?;
            map_rows(&headers, rows, mapping)?
        }
        InputFormat::Spreadsheet => {
            let (headers, rows) = read_spreadsheet(bytes)?;
            map_rows(&headers, rows, mapping)?
        }
    };

    let records: Vec<Record> = rows
        .into_iter()
        .filter_map(|row| {
            let text = row.text.trim();
            (!text.is_empty()).then(|| (row.id, row.speaker.trim().to_string(), text.to_string()))
        })
        .enumerate()
        .map(|(ordinal, (id, speaker_label, text))| Record {
            record_id: id
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| format!("r{ordinal}")),
            speaker_label,
            role: Role::Unlabeled,
            text,
            ordinal,
        })
        .collect();

    if records.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }

    Ok(Dataset {
        records,
        data_type,
        description: description.to_string(),
        source_path: source_name.to_string(),
        column_mapping: mapping.clone(),
    })
}

/// Set each record's role from its speaker label; unmapped labels become
/// [`Role::Unlabeled`].
pub fn assign_roles(mut dataset: Dataset, role_map: &HashMap<String, Role>) -> Dataset {
    for record in &mut dataset.records {
        record.role = role_map
            .get(&record.speaker_label)
            .copied()
            .unwrap_or(Role::Unlabeled);
    }
    dataset
}

/// Check a dataset against the default batching budget.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    validate_dataset_with(dataset, &TokenBudget::default())
}

pub fn validate_dataset_with(dataset: &Dataset, budget: &TokenBudget) -> ValidationReport {
    let mut report = ValidationReport::default();
    if dataset.records.is_empty() {
        report.push(Severity::Blocking, "empty_dataset", "dataset contains no records");
    }

    let mut seen = HashSet::new();
    for r in &dataset.records {
        if !seen.insert(r.record_id.as_str()) {
            report.push(
                Severity::Blocking,
                "duplicate_record_id",
                format!("duplicate record_id `{}` at ordinal {}", r.record_id, r.ordinal),
            );
        }
    }

    for (expected, r) in dataset.records.iter().enumerate() {
        if r.ordinal != expected {
            report.push(
                Severity::Blocking,
                "ordinal_gap",
                format!("record `{}` has ordinal {} where {} was expected", r.record_id, r.ordinal, expected),
            );
            break;
        }
    }

    let ceiling = budget.effective_budget();
    for r in &dataset.records {
        if r.text.trim().is_empty() {
            report.push(
                Severity::Blocking,
                "empty_text",
                format!("empty text at ordinal {}", r.ordinal),
            );
            continue;
        }
        let estimate = estimate_tokens(&r.text);
        if estimate > ceiling {
            report.push(
                Severity::Warning,
                "exceeds_record_ceiling",
                format!(
                    "record exceeds single-record ceiling at ordinal {} ({estimate} > {ceiling} tokens); it will be split",
                    r.ordinal
                ),
            );
        }
    }

    report.unlabeled_count = dataset
        .records
        .iter()
        .filter(|r| r.role == Role::Unlabeled)
        .count();
    report
}

struct RawRow {
    id: Option<String>,
    speaker: String,
    text: String,
}

fn decode_utf8(bytes: &[u8]) -> Result<&str, CorpusError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::FormatMismatch(format!("input is not valid UTF-8: {e}")))?;
    if text.contains('\0') {
        return Err(CorpusError::FormatMismatch(
            "input contains NUL bytes; binary content is not accepted as text".into(),
        ));
    }
    Ok(text.strip_prefix('\u{feff}').unwrap_or(text))
}

/// Paragraphs are separated by blank lines. A leading `LABEL: ` on the first
/// line of a paragraph becomes the speaker label.
fn segment_plain_text(text: &str) -> Vec<RawRow> {
    let mut rows = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                rows.push(paragraph_row(&text[s..end]));
            }
        } else {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + line.len();
        }
        offset += line.len();
    }
    if let Some(s) = start {
        rows.push(paragraph_row(&text[s..end]));
    }
    rows
}

fn paragraph_row(paragraph: &str) -> RawRow {
    let trimmed = paragraph.trim_start();
    if let Some((label, rest)) = split_speaker_label(trimmed) {
        return RawRow {
            id: None,
            speaker: label.to_string(),
            text: rest.to_string(),
        };
    }
    RawRow {
        id: None,
        speaker: String::new(),
        text: paragraph.to_string(),
    }
}

fn split_speaker_label(paragraph: &str) -> Option<(&str, &str)> {
    let first_line = paragraph.lines().next()?;
    let colon = first_line.find(':')?;
    let label = &first_line[..colon];
    let after = &paragraph[colon + 1..];
    let valid_label = !label.is_empty()
        && label.chars().count() <= 40
        && !label.starts_with(char::is_whitespace)
        && !label.ends_with(char::is_whitespace)
        && label
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, ' ' | '_' | '-' | '.' | '#' | '\''));
    let followed_by_space = after.is_empty() || after.starts_with(char::is_whitespace);
    (valid_label && followed_by_space).then_some((label, after))
}

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_delimited(text: &str, delimiter: Delimiter) -> Result<Table, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::FormatMismatch(format!("unreadable header row: {e}")))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(CorpusError::FormatMismatch("missing header row".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            CorpusError::FormatMismatch(format!("malformed row {}: {e}", i + 2))
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn read_spreadsheet(bytes: &[u8]) -> Result<Table, CorpusError> {
    let mut workbook = calamine::open_workbook_auto_from_rs(Cursor::new(bytes))
        .map_err(|e| CorpusError::FormatMismatch(format!("not a readable spreadsheet: {e}")))?;
    let range = workbook
        .worksheet_range_at(0)
        .ok_or_else(|| CorpusError::FormatMismatch("workbook has no worksheets".into()))?
        .map_err(|e| CorpusError::FormatMismatch(format!("unreadable worksheet: {e}")))?;
    let mut rows = range.rows().map(|row| row.iter().map(cell_text).collect::<Vec<_>>());
    let headers = rows
        .next()
        .ok_or_else(|| CorpusError::FormatMismatch("worksheet has no header row".into()))?;
    Ok((headers, rows.collect()))
}

fn cell_text(cell: &Data) -> String {
    match cell {
        Data::Empty => String::new(),
        Data::Float(f) if f.fract() == 0.0 && f.abs() < 1e15 => format!("{}", *f as i64),
        other => other.to_string(),
    }
}

fn map_rows(
    headers: &[String],
    rows: Vec<Vec<String>>,
    mapping: &ColumnMapping,
) -> Result<Vec<RawRow>, CorpusError> {
    let text_ref = mapping
        .text_column
        .as_ref()
        .ok_or_else(|| CorpusError::MappingError("tabular input requires a text column".into()))?;
    let resolve = |r: &ColumnRef, what: &str| {
        r.resolve(headers).ok_or_else(|| {
            CorpusError::MappingError(format!(
                "{what} column `{r}` not found; available columns: {}",
                headers.join(", ")
            ))
        })
    };
    let text_col = resolve(text_ref, "text")?;
    let speaker_col = mapping
        .speaker_column
        .as_ref()
        .map(|r| resolve(r, "speaker"))
        .transpose()?;
    let id_col = mapping
        .id_column
        .as_ref()
        .map(|r| resolve(r, "id"))
        .transpose()?;

    let cell = |row: &[String], i: usize| row.get(i).cloned().unwrap_or_default();
    Ok(rows
        .into_iter()
        .map(|row| RawRow {
            id: id_col.map(|i| cell(&row, i)),
            speaker: speaker_col.map(|i| cell(&row, i)).unwrap_or_default(),
            text: cell(&row, text_col),
        })
        .collect())
}
