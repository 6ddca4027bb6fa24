//! CSV export/import of theme tables and plain-text session transcripts.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::pipeline::{AnalysisSession, RunStatus};
use crate::promptforge::RESULT_COLUMNS;
use crate::themeparse::{Quote, ThemeEntry, ThemeTable};

pub const CSV_HEADER: [&str; 4] = ["Theme", "Description", "Quotes", "Participant Count"];

/// Separator between quotes inside the Quotes cell.
pub const QUOTE_JOIN: &str = " || ";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unexpected header: {0}")]
    HeaderMismatch(String),
    #[error("row {row} has {found} fields, expected 4")]
    RowArityError { row: usize, found: usize },
    #[error("row {row}: invalid participant count `{value}`")]
    InvalidCount { row: usize, value: String },
    #[error("malformed csv: {0}")]
    Csv(String),
}

fn io_error(path: &Path, source: std::io::Error) -> ExportError {
    ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Join quotes with [`QUOTE_JOIN`], escaping `\` as `\\` and `||` as `\||`.
pub fn encode_quotes(quotes: &[Quote]) -> String {
    quotes
        .iter()
        .map(|q| q.text.replace('\\', "\\\\").replace("||", "\\||"))
        .collect::<Vec<_>>()
        .join(QUOTE_JOIN)
}

/// Inverse of [`encode_quotes`].
pub fn decode_quotes(cell: &str) -> Vec<Quote> {
    if cell.is_empty() {
        return Vec::new();
    }
    let mut quotes = Vec::new();
    let mut current = String::new();
    let mut rest = cell;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix("\\\\") {
            current.push('\\');
            rest = tail;
        } else if let Some(tail) = rest.strip_prefix("\\||") {
            current.push_str("||");
            rest = tail;
        } else if let Some(tail) = rest.strip_prefix(QUOTE_JOIN) {
            quotes.push(Quote::new(std::mem::take(&mut current)));
            rest = tail;
        } else {
            let c = rest.chars().next().expect("rest is non-empty");
            current.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    quotes.push(Quote::new(current));
    quotes
}

/// CSV text for a table: header row, one row per entry, trailing newline.
pub fn render_csv(table: &ThemeTable) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("writing to memory");
    for entry in &table.entries {
        writer
            .write_record([
                entry.theme.as_str(),
                entry.description.as_str(),
                &encode_quotes(&entry.quotes),
                &entry.participant_count.to_string(),
            ])
            .expect("writing to memory");
    }
    let bytes = writer.into_inner().expect("flushing to memory");
    String::from_utf8(bytes).expect("csv output of utf-8 input")
}

pub fn export_csv(table: &ThemeTable, path: impl AsRef<Path>) -> Result<usize, ExportError> {
    let path = path.as_ref();
    let text = render_csv(table);
    std::fs::write(path, &text).map_err(|e| io_error(path, e))?;
    Ok(text.len())
}

pub fn parse_csv(text: &str) -> Result<ThemeTable, ExportError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(row) => row.map_err(|e| ExportError::Csv(e.to_string()))?,
        None => return Err(ExportError::HeaderMismatch("empty file".into())),
    };
    if header.iter().ne(CSV_HEADER) {
        return Err(ExportError::HeaderMismatch(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut entries = Vec::new();
    for (i, row) in records.enumerate() {
        let row = row.map_err(|e| ExportError::Csv(e.to_string()))?;
        let line = i + 2;
        if row.len() != 4 {
            return Err(ExportError::RowArityError {
                row: line,
                found: row.len(),
            });
        }
        let participant_count = row[3].trim().parse().map_err(|_| ExportError::InvalidCount {
            row: line,
            value: row[3].to_string(),
        })?;
        entries.push(ThemeEntry {
            theme: row[0].to_string(),
            description: row[1].to_string(),
            quotes: decode_quotes(&row[2]),
            participant_count,
            claimed_count: None,
        });
    }
    Ok(ThemeTable::new(entries))
}

/// Read a file written by [`export_csv`]. Provenance links and model
/// metadata are not part of the CSV and come back empty.
pub fn import_csv(path: impl AsRef<Path>) -> Result<ThemeTable, ExportError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_csv(&text)
}

fn pipe_cell(text: &str) -> String {
    crate::normalize::collapse_whitespace(&text.replace('|', "/"))
}

/// Render a table in the same pipe layout the model is asked to produce.
pub fn render_pipe_table(table: &ThemeTable) -> String {
    let mut out = format!("| {} |\n|{}\n", RESULT_COLUMNS.join(" | "), "---|".repeat(4));
    for e in &table.entries {
        let quotes = e
            .quotes
            .iter()
            .map(|q| format!("\"{}\"", pipe_cell(&q.text).replace('"', "'")))
            .collect::<Vec<_>>()
            .join("; ");
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            pipe_cell(&e.theme),
            pipe_cell(&e.description),
            quotes,
            e.participant_count
        );
    }
    out
}

fn section(out: &mut String, name: &str) {
    if !out.is_empty() && !out.ends_with("\n\n") {
        out.push('\n');
    }
    let _ = writeln!(out, "== SECTION: {name} ==");
}

/// Plain-text record of a run. Sections appear in a fixed order, each
/// introduced by a `== SECTION: <name> ==` line: DATASET, PRESET, one
/// PROMPT per batch, one RESPONSE per batch, RESULT, COST, RECOVERY and
/// finally OUTCOME or ABORT. Every string in `secrets` is replaced by
/// `[redacted]`.
pub fn render_transcript(session: &AnalysisSession, secrets: &[&str]) -> String {
    let mut out = String::new();

    section(&mut out, "DATASET");
    let _ = writeln!(out, "source: {}", session.source);
    match &session.dataset {
        Some(ds) => {
            let _ = writeln!(out, "records: {}", ds.len());
            let _ = writeln!(out, "words: {}", ds.word_count());
            let _ = writeln!(out, "participants: {}", ds.distinct_participants());
            let _ = writeln!(out, "data type: {}", ds.data_type);
        }
        None => out.push_str("records: not loaded\n"),
    }

    section(&mut out, "PRESET");
    let _ = writeln!(out, "preset version: {}", session.preset_version);
    let _ = writeln!(out, "model: {}", session.options.model_id);
    let _ = writeln!(out, "temperature: {}", session.options.temperature);
    let _ = writeln!(out, "themes requested: {}", session.config.theme_count);
    let _ = writeln!(out, "role playing: {}", session.config.role_playing);
    if let Some(plan) = &session.plan {
        let _ = writeln!(
            out,
            "batches: {} (effective budget {} tokens)",
            plan.len(),
            plan.budget.effective_budget()
        );
    }

    for batch in &session.batches {
        section(&mut out, &format!("PROMPT (batch {})", batch.index));
        out.push_str(&batch.prompt);
        out.push('\n');
    }
    for batch in &session.batches {
        section(&mut out, &format!("RESPONSE (batch {})", batch.index));
        for attempt in &batch.attempts {
            let _ = writeln!(out, "-- attempt {} ({} records) --", attempt.attempt, attempt.record_ids.len());
            if let Some(text) = &attempt.response {
                out.push_str(text);
                out.push('\n');
            }
            if let Some(err) = &attempt.error {
                let _ = writeln!(out, "error: {}: {}", err.kind, err.raw_message);
            }
        }
    }

    section(&mut out, "RESULT");
    match &session.merged {
        Some(table) => {
            out.push_str(&render_pipe_table(table));
            if let Some(p) = &session.provenance {
                let _ = writeln!(
                    out,
                    "quotes verified: {}/{} ({:.1}%)",
                    p.verified,
                    p.total(),
                    p.verification_rate * 100.0
                );
                for u in &p.unmatched {
                    let _ = writeln!(out, "unmatched [{}]: {}", u.theme, u.quote);
                }
            }
            for w in &session.merge_warnings {
                let _ = writeln!(out, "warning: {w}");
            }
        }
        None => out.push_str("no result\n"),
    }

    section(&mut out, "COST");
    match &session.cost {
        Some(cost) => {
            let _ = writeln!(out, "estimated: {cost}");
        }
        None => out.push_str("estimated: n/a\n"),
    }
    let _ = writeln!(
        out,
        "reported usage: {} prompt tokens, {} completion tokens",
        session.usage.prompt_tokens, session.usage.completion_tokens
    );

    section(&mut out, "RECOVERY");
    if session.recovery_log.is_empty() {
        out.push_str("none\n");
    }
    for entry in &session.recovery_log {
        let _ = writeln!(
            out,
            "batch {} attempt {}: {} -> {} ({})",
            entry.batch_index, entry.attempt, entry.error_kind, entry.action, entry.detail
        );
    }

    match (&session.abort, session.status) {
        (Some(cause), _) => {
            section(&mut out, "ABORT");
            let _ = writeln!(out, "{cause}");
        }
        (None, status) => {
            section(&mut out, "OUTCOME");
            let _ = writeln!(
                out,
                "{}",
                match status {
                    RunStatus::Complete => "complete",
                    RunStatus::Aborted => "aborted",
                    RunStatus::Idle => "idle",
                    RunStatus::Running | RunStatus::NeedsAttention => "running",
                }
            );
        }
    }

    redact(out, secrets)
}

fn redact(mut text: String, secrets: &[&str]) -> String {
    for secret in secrets.iter().filter(|s| !s.is_empty()) {
        if text.contains(secret) {
            text = text.replace(secret, "[redacted]");
        }
    }
    text
}

pub fn export_transcript(
    session: &AnalysisSession,
    secrets: &[&str],
    path: impl AsRef<Path>,
) -> Result<usize, ExportError> {
    let path = path.as_ref();
    let text = render_transcript(session, secrets);
    std::fs::write(path, &text).map_err(|e| io_error(path, e))?;
    Ok(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::themeparse::parse_theme_table;

    fn entry(theme: &str, description: &str, quotes: &[&str], count: u32) -> ThemeEntry {
        ThemeEntry {
            theme: theme.into(),
            description: description.into(),
            quotes: quotes.iter().map(|q| Quote::new(*q)).collect(),
            participant_count: count,
            claimed_count: None,
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(
            render_csv(&ThemeTable::default()),
            "Theme,Description,Quotes,Participant Count\r\n"
        );
    }

    #[test]
    fn rfc4180_quoting() {
        let t = ThemeTable::new(vec![entry("A", "one, \"two\"", &["q"], 1)]);
        let csv = render_csv(&t);
        assert!(csv.contains("\"one, \"\"two\"\"\""));
        assert_eq!(parse_csv(&csv).unwrap(), t);
    }

    #[test]
    fn quote_cell_escaping_round_trips() {
        for quotes in [
            vec!["a || b", "c"],
            vec!["ends with \\", "\\|| literal"],
            vec!["a ", " b"],
            vec!["x |", "| y"],
            vec!["a|||b"],
        ] {
            let q: Vec<Quote> = quotes.iter().map(|s| Quote::new(*s)).collect();
            assert_eq!(decode_quotes(&encode_quotes(&q)), q, "{quotes:?}");
        }
    }

    #[test]
    fn bad_header_and_arity() {
        assert!(matches!(parse_csv("a,b,c,d\n"), Err(ExportError::HeaderMismatch(_))));
        let text = "Theme,Description,Quotes,Participant Count\nA,b,c,1,extra\n";
        assert!(matches!(
            parse_csv(text),
            Err(ExportError::RowArityError { row: 2, found: 5 })
        ));
    }

    #[test]
    fn pipe_rendering_parses_back() {
        let t = ThemeTable::new(vec![
            entry("Isolation", "Missing colleagues", &["too quiet", "miss lunch"], 2),
            entry("Flexibility", "Own schedule", &["my evenings are mine"], 1),
        ]);
        let parsed = parse_theme_table(&render_pipe_table(&t), 2).unwrap();
        assert_eq!(parsed.entries.len(), 2);
        for (a, b) in parsed.entries.iter().zip(&t.entries) {
            assert_eq!(a.theme, b.theme);
            assert_eq!(a.description, b.description);
            assert_eq!(a.quotes, b.quotes);
            assert_eq!(a.participant_count, b.participant_count);
        }
    }
}
