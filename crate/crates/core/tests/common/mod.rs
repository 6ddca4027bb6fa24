#![allow(dead_code)]

use std::path::PathBuf;

use quali_core::corpus::{ColumnMapping, DataType};
use quali_core::llmgateway::{Cancellation, Clock, ManualClock, MockBackend};
use quali_core::pipeline::{run_analysis, AnalysisSession, DatasetInput, IngestSpec, NoopObserver, RunContext, RunOptions};
use quali_core::PromptConfig;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn focus_group_input() -> DatasetInput {
    DatasetInput::Path(fixture("remote_work_focus_group.csv"))
}

pub fn focus_group_spec() -> IngestSpec {
    IngestSpec {
        format: None,
        mapping: ColumnMapping::text("message").with_speaker("name").with_id("id"),
        role_map: Default::default(),
    }
}

pub fn focus_group_config() -> PromptConfig {
    let mut config = PromptConfig::new(DataType::FocusGroup, 20);
    config.role_playing = true;
    config
}

pub fn script() -> String {
    std::fs::read_to_string(fixture("remote_work_mock_script.json")).unwrap()
}

/// The fixture script's entry list with `extra` entries spliced in front.
pub fn script_with(extra: serde_json::Value) -> String {
    let mut entries: Vec<serde_json::Value> = serde_json::from_str(&script()).unwrap();
    let extra = extra.as_array().unwrap().clone();
    entries.splice(0..0, extra);
    serde_json::to_string(&entries).unwrap()
}

pub fn run_with(backend: &MockBackend, clock: &dyn Clock, options: &RunOptions) -> AnalysisSession {
    let cancel = Cancellation::new();
    let ctx = RunContext {
        backend,
        clock,
        observer: &NoopObserver,
        cancel: &cancel,
    };
    run_analysis(&focus_group_input(), &focus_group_spec(), &focus_group_config(), options, &ctx)
}

pub fn run_script(json: &str) -> (AnalysisSession, ManualClock, MockBackend) {
    let backend = MockBackend::from_json(json).unwrap();
    let clock = ManualClock::new();
    let session = run_with(&backend, &clock, &RunOptions::default());
    (session, clock, backend)
}
