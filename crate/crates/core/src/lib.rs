//! Thematic analysis of labeled text corpora through a chat-completion model.
//!
//! The pipeline ingests a dataset ([`corpus`]), packs it into batches that fit
//! the model context ([`chunking`]), composes a standardized prompt per batch
//! ([`promptforge`]), submits each batch with failure classification and
//! recovery ([`llmgateway`]), parses and verifies the returned theme tables
//! ([`themeparse`]), merges them ([`consolidate`]) and exports the result
//! ([`exporter`]). [`pipeline`] wires the stages together for the CLI and the
//! local service.

pub mod chunking;
pub mod consolidate;
pub mod corpus;
pub mod exporter;
pub mod llmgateway;
pub mod normalize;
pub mod pipeline;
pub mod promptforge;
pub mod report;
pub mod themeparse;

pub use chunking::{plan_batches, Batch, BatchPlan, RecordFragment, TokenBudget};
pub use corpus::{ColumnMapping, DataType, Dataset, InputFormat, Record, Role};
pub use promptforge::{compose, PromptBundle, PromptConfig};
pub use report::ValidationReport;
pub use themeparse::{ProvenanceReport, ThemeEntry, ThemeTable};
