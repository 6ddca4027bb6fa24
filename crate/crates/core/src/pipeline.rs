//! End-to-end analysis run: ingest, validate, plan, compose, submit with
//! recovery, parse, verify, recount and merge.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunking::{plan_batches, repack_fragments, BatchPlan, HeuristicEstimator, RecordFragment, TokenBudget};
use crate::consolidate::{merge_tables, MergeWarning};
use crate::corpus::{
    assign_roles, load_dataset, load_dataset_from_bytes, validate_dataset_with, ColumnMapping, CorpusError,
    Dataset, InputFormat, Role,
};
use crate::llmgateway::{
    estimate_cost, recovery_policy, submit, ActionKind, AttemptState, Backend, Cancellation, Clock, CostEstimate,
    ErrorKind, GatewayError, LlmRequest, RatesTable, RecoveryAction, Usage, DEFAULT_MODEL, DEFAULT_TEMPERATURE,
};
use crate::promptforge::{compose, PromptAugment, PromptBundle, PromptConfig};
use crate::report::ValidationReport;
use crate::themeparse::{
    parse_theme_table, recount_participants, verify_quotes, ProvenanceReport, SourceBatch, ThemeTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Running,
    NeedsAttention,
    Complete,
    Aborted,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Complete | RunStatus::Aborted)
    }
}

/// Pipeline stage an abort came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Validation,
    Planning,
    Prompt,
    Gateway,
    Parse,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortCause {
    pub stage: Stage,
    /// Machine-readable cause, e.g. `empty_dataset` or `network`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_index: Option<usize>,
}

impl AbortCause {
    fn new(stage: Stage, code: &str, message: impl Into<String>) -> Self {
        AbortCause {
            stage,
            code: code.to_string(),
            message: message.into(),
            batch_index: None,
        }
    }
}

impl std::fmt::Display for AbortCause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.batch_index {
            Some(i) => write!(f, "{} ({}) in batch {i}: {}", self.code, stage_name(self.stage), self.message),
            None => write!(f, "{} ({}): {}", self.code, stage_name(self.stage), self.message),
        }
    }
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Ingest => "ingest",
        Stage::Validation => "validation",
        Stage::Planning => "planning",
        Stage::Prompt => "prompt",
        Stage::Gateway => "gateway",
        Stage::Parse => "parse",
        Stage::Cancelled => "cancelled",
    }
}

fn corpus_code(e: &CorpusError) -> &'static str {
    match e {
        CorpusError::FileNotFound(_) => "file_not_found",
        CorpusError::FormatMismatch(_) => "format_mismatch",
        CorpusError::MappingError(_) => "mapping_error",
        CorpusError::EmptyDataset => "empty_dataset",
        CorpusError::Io { .. } => "io_error",
    }
}

/// Where the dataset comes from.
#[derive(Debug, Clone)]
pub enum DatasetInput {
    Path(PathBuf),
    Bytes { name: String, bytes: Arc<Vec<u8>> },
    Loaded(Dataset),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSpec {
    /// Detected from the file extension when absent.
    #[serde(default)]
    pub format: Option<InputFormat>,
    #[serde(default)]
    pub mapping: ColumnMapping,
    #[serde(default)]
    pub role_map: HashMap<String, Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub model_id: String,
    pub temperature: f64,
    pub budget: TokenBudget,
    /// Batches submitted concurrently. 1 keeps strict submission order.
    pub parallelism: usize,
    #[serde(default)]
    pub rates: RatesTable,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            model_id: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            budget: TokenBudget::default(),
            parallelism: 1,
            rates: RatesTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryLogEntry {
    pub batch_index: usize,
    /// 1-based attempt number within the batch that failed.
    pub attempt: u32,
    pub error_kind: ErrorKind,
    pub action: RecoveryAction,
    pub detail: String,
}

/// One request sent for a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// Records covered by this request (fewer than the batch after a resplit).
    pub record_ids: Vec<String>,
    pub augment: PromptAugment,
    pub response: Option<String>,
    pub error: Option<GatewayError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub index: usize,
    pub prompt: String,
    pub attempts: Vec<AttemptRecord>,
    pub tables: Vec<ThemeTable>,
    pub provenance: Vec<ProvenanceReport>,
    pub recovery_log: Vec<RecoveryLogEntry>,
    pub completed: bool,
}

/// Full record of one analysis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSession {
    pub status: RunStatus,
    pub source: String,
    pub config: PromptConfig,
    pub options: RunOptions,
    pub dataset: Option<Dataset>,
    pub validation: Option<ValidationReport>,
    pub plan: Option<BatchPlan>,
    pub preset_version: String,
    pub batches: Vec<BatchRun>,
    pub merged: Option<ThemeTable>,
    pub merge_warnings: Vec<MergeWarning>,
    pub provenance: Option<ProvenanceReport>,
    pub cost: Option<CostEstimate>,
    pub usage: Usage,
    pub recovery_log: Vec<RecoveryLogEntry>,
    pub abort: Option<AbortCause>,
}

impl AnalysisSession {
    pub fn new(source: String, config: PromptConfig, options: RunOptions) -> Self {
        AnalysisSession {
            status: RunStatus::Idle,
            source,
            config,
            options,
            dataset: None,
            validation: None,
            plan: None,
            preset_version: String::new(),
            batches: Vec::new(),
            merged: None,
            merge_warnings: Vec::new(),
            provenance: None,
            cost: None,
            usage: Usage::default(),
            recovery_log: Vec::new(),
            abort: None,
        }
    }

    pub fn aborted(mut self, cause: AbortCause) -> Self {
        self.status = RunStatus::Aborted;
        self.abort = Some(cause);
        self
    }

    /// Per-batch result tables in batch order.
    pub fn results(&self) -> impl Iterator<Item = &ThemeTable> {
        self.batches.iter().flat_map(|b| b.tables.iter())
    }
}

/// Progress callbacks. All methods may be called from worker threads.
pub trait Observer: Send + Sync {
    fn status(&self, _status: RunStatus) {}
    fn planned(&self, _batches: usize, _cost: &CostEstimate) {}
    fn batch_done(&self, _index: usize) {}
    fn recovery(&self, _entry: &RecoveryLogEntry) {}
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

/// Everything up to submission: dataset, plan, prompt and cost.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub validation: ValidationReport,
    pub plan: BatchPlan,
    pub bundles: Vec<PromptBundle>,
    pub cost: CostEstimate,
}

/// Load a dataset according to `spec`; the data type and description come
/// from the prompt configuration.
pub fn ingest(input: &DatasetInput, spec: &IngestSpec, config: &PromptConfig) -> Result<Dataset, CorpusError> {
    let dataset = match input {
        DatasetInput::Path(path) => {
            let format = spec.format.unwrap_or_else(|| InputFormat::from_extension(path));
            load_dataset(path, format, &spec.mapping, config.data_type, &config.dataset_description)?
        }
        DatasetInput::Bytes { name, bytes } => {
            let format = spec
                .format
                .unwrap_or_else(|| InputFormat::from_extension(std::path::Path::new(name)));
            load_dataset_from_bytes(
                bytes,
                name,
                format,
                &spec.mapping,
                config.data_type,
                &config.dataset_description,
            )?
        }
        DatasetInput::Loaded(dataset) => dataset.clone(),
    };
    Ok(if spec.role_map.is_empty() {
        dataset
    } else {
        assign_roles(dataset, &spec.role_map)
    })
}

/// Provenance label for an input.
pub fn source_name(input: &DatasetInput) -> String {
    match input {
        DatasetInput::Path(p) => p.display().to_string(),
        DatasetInput::Bytes { name, .. } => name.clone(),
        DatasetInput::Loaded(d) => d.source_path.clone(),
    }
}

/// Budget with the prompt reserve raised, if needed, so the longest prompt
/// a recovery path can send still fits.
pub fn fit_prompt_reserve(budget: TokenBudget, bundle: &PromptBundle) -> TokenBudget {
    TokenBudget {
        prompt_reserve: budget.prompt_reserve.max(bundle.worst_case_tokens()),
        ..budget
    }
}

/// Ingest, validate, plan and compose without contacting the model.
pub fn prepare(
    input: &DatasetInput,
    spec: &IngestSpec,
    config: &PromptConfig,
    options: &RunOptions,
) -> Result<Prepared, AbortCause> {
    let probe = compose(config, 1, 1).map_err(|e| AbortCause::new(Stage::Prompt, "config_invalid", e.to_string()))?;
    let budget = fit_prompt_reserve(options.budget, &probe);
    budget
        .check()
        .map_err(|e| AbortCause::new(Stage::Planning, "budget_too_small", e.to_string()))?;

    let dataset =
        ingest(input, spec, config).map_err(|e| AbortCause::new(Stage::Ingest, corpus_code(&e), e.to_string()))?;
    let validation = validate_dataset_with(&dataset, &budget);
    if let Some(finding) = validation.blocking().next() {
        return Err(AbortCause::new(Stage::Validation, &finding.code, finding.message.clone()));
    }
    let plan = plan_batches(&dataset, budget).map_err(|e| AbortCause::new(Stage::Planning, "planning", e.to_string()))?;
    let total = plan.len();
    let bundles = (1..=total)
        .map(|i| compose(config, i, total))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AbortCause::new(Stage::Prompt, "config_invalid", e.to_string()))?;
    let rates = options.rates.lookup_or_default(&options.model_id);
    let cost = estimate_cost(&plan, &bundles[0], rates);
    Ok(Prepared {
        dataset,
        validation,
        plan,
        bundles,
        cost,
    })
}

pub struct RunContext<'a> {
    pub backend: &'a dyn Backend,
    pub clock: &'a dyn Clock,
    pub observer: &'a dyn Observer,
    pub cancel: &'a Cancellation,
}

/// Run the whole pipeline. Always returns a session; failures are reported
/// through `status` and `abort`.
pub fn run_analysis(
    input: &DatasetInput,
    spec: &IngestSpec,
    config: &PromptConfig,
    options: &RunOptions,
    ctx: &RunContext<'_>,
) -> AnalysisSession {
    let mut session = AnalysisSession::new(source_name(input), config.clone(), options.clone());
    session.status = RunStatus::Running;
    ctx.observer.status(RunStatus::Running);

    let prepared = match prepare(input, spec, config, options) {
        Ok(p) => p,
        Err(cause) => {
            ctx.observer.status(RunStatus::Aborted);
            return session.aborted(cause);
        }
    };
    ctx.observer.planned(prepared.plan.len(), &prepared.cost);
    execute(session, prepared, ctx)
}

/// Submit an already prepared run.
pub fn execute(mut session: AnalysisSession, prepared: Prepared, ctx: &RunContext<'_>) -> AnalysisSession {
    let Prepared {
        dataset,
        validation,
        plan,
        bundles,
        cost,
    } = prepared;
    session.status = RunStatus::Running;
    session.preset_version = bundles[0].preset_version.clone();
    session.cost = Some(cost);

    let halt = Cancellation::new();
    let worker = BatchWorker {
        dataset: &dataset,
        config: &session.config,
        options: &session.options,
        context_limit: plan.budget.context_limit,
        completion_reserve: plan.budget.completion_reserve,
        effective_budget: plan.budget.effective_budget(),
        ctx,
        halt: &halt,
    };
    let jobs: Vec<(&crate::chunking::Batch, &PromptBundle)> = plan.batches.iter().zip(bundles.iter()).collect();
    let outcomes = run_jobs(&worker, &jobs, session.options.parallelism);

    let mut abort: Option<AbortCause> = None;
    for (run, failure, usage) in outcomes {
        session.usage.prompt_tokens += usage.prompt_tokens;
        session.usage.completion_tokens += usage.completion_tokens;
        session.recovery_log.extend(run.recovery_log.iter().cloned());
        if abort.is_none() {
            abort = failure;
        }
        session.batches.push(run);
    }
    session.dataset = Some(dataset);
    session.validation = Some(validation);
    session.plan = Some(plan);

    if abort.is_none() && ctx.cancel.is_cancelled() {
        abort = Some(AbortCause::new(Stage::Cancelled, "cancelled", "run cancelled"));
    }
    if let Some(cause) = abort {
        ctx.observer.status(RunStatus::Aborted);
        return session.aborted(cause);
    }

    let dataset = session.dataset.as_ref().expect("set above");
    let tables: Vec<ThemeTable> = session.results().cloned().collect();
    let outcome = merge_tables(&tables, session.config.theme_count as usize, dataset);
    let mut merged = outcome.table;
    let provenance = verify_quotes(&mut merged, dataset);
    session.merged = Some(merged);
    session.merge_warnings = outcome.warnings;
    session.provenance = Some(provenance);
    session.status = RunStatus::Complete;
    ctx.observer.status(RunStatus::Complete);
    session
}

type JobOutcome = (BatchRun, Option<AbortCause>, Usage);

fn run_jobs(
    worker: &BatchWorker<'_>,
    jobs: &[(&crate::chunking::Batch, &PromptBundle)],
    parallelism: usize,
) -> Vec<JobOutcome> {
    #[cfg(feature = "parallel")]
    if parallelism > 1 && jobs.len() > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
            return pool.install(|| jobs.par_iter().map(|(b, p)| worker.run(b, p)).collect());
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallelism;
    jobs.iter().map(|(b, p)| worker.run(b, p)).collect()
}

struct BatchWorker<'a> {
    dataset: &'a Dataset,
    config: &'a PromptConfig,
    options: &'a RunOptions,
    context_limit: usize,
    completion_reserve: usize,
    effective_budget: usize,
    ctx: &'a RunContext<'a>,
    halt: &'a Cancellation,
}

struct Pending {
    fragments: Vec<RecordFragment>,
    state: AttemptState,
    augment: PromptAugment,
}

impl BatchWorker<'_> {
    fn stopped(&self) -> bool {
        self.ctx.cancel.is_cancelled() || self.halt.is_cancelled()
    }

    fn run(&self, batch: &crate::chunking::Batch, bundle: &PromptBundle) -> JobOutcome {
        let mut run = BatchRun {
            index: batch.index,
            prompt: bundle.assembled.clone(),
            attempts: Vec::new(),
            tables: Vec::new(),
            provenance: Vec::new(),
            recovery_log: Vec::new(),
            completed: false,
        };
        let mut usage = Usage::default();
        let expected = self.config.theme_count as usize;
        let mut queue = VecDeque::from([Pending {
            fragments: batch.fragments.clone(),
            state: AttemptState::new(self.effective_budget),
            augment: PromptAugment::default(),
        }]);

        while let Some(mut pending) = queue.pop_front() {
            loop {
                if self.stopped() {
                    return (run, None, usage);
                }
                let attempt = run.attempts.len() as u32 + 1;
                let request = LlmRequest {
                    model_id: self.options.model_id.clone(),
                    prompt: bundle.render(&pending.augment),
                    payload: pending.fragments.iter().map(RecordFragment::render).collect(),
                    temperature: self.options.temperature,
                    max_completion_tokens: self.completion_reserve,
                    context_limit: self.context_limit,
                    batch_index: batch.index,
                };
                let mut record = AttemptRecord {
                    attempt,
                    record_ids: pending.fragments.iter().map(|f| f.record_id.clone()).collect(),
                    augment: pending.augment.clone(),
                    response: None,
                    error: None,
                };

                let failure = match submit(&request, self.ctx.backend, self.ctx.cancel) {
                    Ok(raw) => {
                        usage.prompt_tokens += raw.usage.prompt_tokens;
                        usage.completion_tokens += raw.usage.completion_tokens;
                        record.response = Some(raw.text.clone());
                        match parse_theme_table(&raw.text, expected) {
                            Ok(mut table) => {
                                table.source_batch = SourceBatch::Batch(batch.index);
                                table.model_id = self.options.model_id.clone();
                                table.preset_version = bundle.preset_version.clone();
                                table.temperature = self.options.temperature;
                                let report = verify_quotes(&mut table, self.dataset);
                                run.tables.push(recount_participants(table, self.dataset));
                                run.provenance.push(report);
                                run.attempts.push(record);
                                break;
                            }
                            Err(failure) => (failure.error, failure.partial.len()),
                        }
                    }
                    Err(e) => (e, 0),
                };
                let (error, partial) = failure;
                record.error = Some(error.clone());
                run.attempts.push(record);
                if self.stopped() {
                    return (run, None, usage);
                }

                let action = recovery_policy(&error, &pending.state);
                let entry = RecoveryLogEntry {
                    batch_index: batch.index,
                    attempt,
                    error_kind: error.kind,
                    action: action.clone(),
                    detail: error.detail.clone(),
                };
                self.ctx.observer.recovery(&entry);
                run.recovery_log.push(entry);

                if action.action == ActionKind::Abort {
                    self.halt.cancel();
                    let stage = if error.kind.is_parse_failure() {
                        Stage::Parse
                    } else {
                        Stage::Gateway
                    };
                    let mut cause = AbortCause::new(stage, error.kind.as_str(), action.to_string());
                    cause.batch_index = Some(batch.index);
                    return (run, Some(cause), usage);
                }

                self.ctx.observer.status(RunStatus::NeedsAttention);
                pending.state.record(&action);
                match action.action {
                    ActionKind::RetryBackoff | ActionKind::WaitThenRetry => {
                        if let Some(delay) = action.delay() {
                            if !self.ctx.clock.sleep(delay, self.ctx.cancel) {
                                return (run, None, usage);
                            }
                        }
                    }
                    ActionKind::ReclarifyPrompt => pending.augment.clarify = true,
                    ActionKind::ReinjectTail => pending.augment.reinject = Some((partial, expected)),
                    ActionKind::ReassertFormat => pending.augment.reassert_format = true,
                    ActionKind::ResplitSmaller => {
                        let budget = pending.state.effective_budget;
                        match repack_fragments(&pending.fragments, budget, &HeuristicEstimator) {
                            Ok(groups) => {
                                let state = pending.state.clone();
                                let augment = pending.augment.clone();
                                let mut parts: VecDeque<Pending> = groups
                                    .into_iter()
                                    .map(|(fragments, _)| Pending {
                                        fragments,
                                        state: state.clone(),
                                        augment: augment.clone(),
                                    })
                                    .collect();
                                pending = parts.pop_front().expect("repacking keeps every fragment");
                                while let Some(p) = parts.pop_back() {
                                    queue.push_front(p);
                                }
                            }
                            Err(e) => {
                                self.halt.cancel();
                                let mut cause = AbortCause::new(Stage::Gateway, ErrorKind::TokenLimit.as_str(), e.to_string());
                                cause.batch_index = Some(batch.index);
                                return (run, Some(cause), usage);
                            }
                        }
                    }
                    ActionKind::Abort => unreachable!("handled above"),
                }
                self.ctx.observer.status(RunStatus::Running);
            }
        }
        run.completed = true;
        self.ctx.observer.batch_done(batch.index);
        (run, None, usage)
    }
}
