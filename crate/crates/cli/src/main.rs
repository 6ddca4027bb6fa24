use std::collections::HashMap;
use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use quali_core::chunking::TokenBudget;
use quali_core::corpus::{ColumnMapping, ColumnRef, DataType, Delimiter, InputFormat, Role};
use quali_core::exporter::{export_csv, export_transcript};
use quali_core::llmgateway::{
    ApiKey, Backend, Cancellation, Clock, ManualClock, CostEstimate, HttpBackend, MockBackend, RatesTable, SystemClock, API_KEY_ENV,
    DEFAULT_ENDPOINT, DEFAULT_MODEL, DEFAULT_TEMPERATURE,
};
use quali_core::pipeline::{
    execute, prepare, source_name, AnalysisSession, DatasetInput, IngestSpec, Observer, RecoveryLogEntry,
    RunContext, RunOptions, RunStatus, Stage,
};
use quali_core::PromptConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_INGEST: u8 = 2;
const EXIT_GATEWAY: u8 = 3;
const EXIT_PARSE: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "quali", version, about = "Thematic analysis of qualitative text data with a chat model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a dataset and write the theme table as CSV.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Real,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum TypeArg {
    Interview,
    FocusGroup,
    SocialMedia,
}

impl From<TypeArg> for DataType {
    fn from(t: TypeArg) -> Self {
        match t {
            TypeArg::Interview => DataType::Interview,
            TypeArg::FocusGroup => DataType::FocusGroup,
            TypeArg::SocialMedia => DataType::SocialMedia,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Dataset file (.txt, .csv, .tsv or .xlsx).
    #[arg(long)]
    input: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_parser = parse_format)]
    format: Option<InputFormat>,
    /// Column holding the text, by header name or 0-based index.
    #[arg(long)]
    text_col: Option<String>,
    #[arg(long)]
    speaker_col: Option<String>,
    #[arg(long)]
    id_col: Option<String>,
    /// Read delimited input as tab-separated (implied for .tsv files).
    #[arg(long)]
    tab: bool,
    /// Speaker role, as LABEL=ROLE (repeatable).
    #[arg(long = "role", value_parser = parse_role)]
    roles: Vec<(String, Role)>,
    #[arg(long = "type", value_enum)]
    data_type: TypeArg,
    /// Number of themes to report.
    #[arg(long, default_value_t = 10)]
    themes: u32,
    /// Ask the model to act as an expert qualitative analyst.
    #[arg(long)]
    role_play: bool,
    /// Additional instructions appended to the analysis process.
    #[arg(long, default_value = "")]
    extra: String,
    /// Short description of the dataset for the prompt background.
    #[arg(long, default_value = "")]
    describe: String,
    #[arg(long, value_enum, default_value = "real")]
    backend: BackendArg,
    /// JSON script of replies for the mock backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Model context window in tokens.
    #[arg(long, default_value_t = quali_core::chunking::DEFAULT_CONTEXT_LIMIT)]
    budget: usize,
    /// Batches submitted at the same time.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Chat-completion endpoint for the real backend.
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    endpoint: String,
    /// JSON price list: {"model": {"rate_in": 0.0015, "rate_out": 0.002}}.
    #[arg(long)]
    rates: Option<PathBuf>,
    /// CSV output path.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Also write a full transcript of the session.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Load, plan and price the run without contacting the model.
    #[arg(long)]
    dry_run: bool,
    /// Skip the cost confirmation for the real backend.
    #[arg(long)]
    yes: bool,
    #[arg(long, env = API_KEY_ENV, hide_env_values = true, hide = true)]
    api_key: Option<String>,
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    s.parse()
}

fn parse_role(s: &str) -> Result<(String, Role), String> {
    let (label, role) = s.rsplit_once('=').ok_or("expected LABEL=ROLE")?;
    Ok((label.to_string(), role.parse()?))
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Command::Run(args) = cli.command;
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn column(s: &Option<String>) -> Option<ColumnRef> {
    s.as_deref().map(|c| c.parse().expect("column refs parse infallibly"))
}

struct Progress;

impl Observer for Progress {
    fn batch_done(&self, index: usize) {
        eprintln!("batch {index} done");
    }

    fn recovery(&self, entry: &RecoveryLogEntry) {
        eprintln!(
            "batch {} attempt {}: {} -> {}",
            entry.batch_index, entry.attempt, entry.error_kind, entry.action
        );
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let config = PromptConfig {
        data_type: args.data_type.into(),
        role_playing: args.role_play,
        theme_count: args.themes,
        extra_instructions: args.extra.clone(),
        dataset_description: args.describe.clone(),
    };
    let is_tsv = args
        .input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    let spec = IngestSpec {
        format: args.format,
        mapping: ColumnMapping {
            speaker_column: column(&args.speaker_col),
            text_column: column(&args.text_col),
            id_column: column(&args.id_col),
            delimiter: if args.tab || is_tsv { Delimiter::Tab } else { Delimiter::Comma },
        },
        role_map: args.roles.iter().cloned().collect::<HashMap<_, _>>(),
    };
    let rates = match &args.rates {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .map_err(fail(EXIT_IO))?;
            RatesTable::from_json(&text)
                .with_context(|| format!("invalid price list {}", path.display()))
                .map_err(fail(EXIT_USAGE))?
        }
        None => RatesTable::default(),
    };
    let options = RunOptions {
        model_id: args.model.clone(),
        temperature: args.temperature,
        budget: TokenBudget {
            context_limit: args.budget,
            ..TokenBudget::default()
        },
        parallelism: args.parallel.max(1),
        rates,
    };

    let backend: Box<dyn Backend> = match args.backend {
        BackendArg::Mock => {
            let path = args
                .mock_script
                .as_ref()
                .ok_or_else(|| anyhow!("--backend mock needs --mock-script"))
                .map_err(fail(EXIT_USAGE))?;
            Box::new(MockBackend::from_path(path).map_err(|e| {
                let code = match e {
                    quali_core::llmgateway::MockScriptError::Io { .. } => EXIT_IO,
                    quali_core::llmgateway::MockScriptError::Invalid(_) => EXIT_USAGE,
                };
                Failure { code, error: e.into() }
            })?)
        }
        BackendArg::Real if args.dry_run => Box::new(MockBackend::new(Vec::new()).expect("empty script is valid")),
        BackendArg::Real => {
            let key = args
                .api_key
                .clone()
                .filter(|k| !k.is_empty())
                .ok_or_else(|| anyhow!("set {API_KEY_ENV} to use the real backend"))
                .map_err(fail(EXIT_USAGE))?;
            let backend = HttpBackend::new(&args.endpoint, ApiKey::new(key), Duration::from_secs(120))
                .map_err(|e| fail(EXIT_GATEWAY)(e.into()))?;
            backend.ping().map_err(|e| fail(EXIT_GATEWAY)(e.into()))?;
            Box::new(backend)
        }
    };

    let input = DatasetInput::Path(args.input.clone());
    let mut session = AnalysisSession::new(source_name(&input), config.clone(), options.clone());
    let prepared = match prepare(&input, &spec, &config, &options) {
        Ok(p) => p,
        Err(cause) => {
            let code = match cause.stage {
                Stage::Prompt => EXIT_USAGE,
                _ => EXIT_INGEST,
            };
            session = session.aborted(cause.clone());
            write_transcript(&args, &session)?;
            return Err(Failure {
                code,
                error: anyhow!("{cause}"),
            });
        }
    };

    for w in prepared.validation.warnings() {
        eprintln!("warning: {}", w.message);
    }
    println!(
        "{} records, {} batches (effective budget {} tokens)",
        prepared.dataset.len(),
        prepared.plan.len(),
        prepared.plan.budget.effective_budget()
    );
    println!("estimated cost: {}", prepared.cost);
    if args.dry_run {
        return Ok(());
    }
    if matches!(args.backend, BackendArg::Real) && !args.yes {
        confirm(&prepared.cost)?;
    }

    // mock runs log recovery waits instead of sleeping
    let virtual_clock = ManualClock::new();
    let clock: &dyn Clock = match args.backend {
        BackendArg::Mock => &virtual_clock,
        BackendArg::Real => &SystemClock,
    };
    let cancel = Cancellation::new();
    let ctx = RunContext {
        backend: backend.as_ref(),
        clock,
        observer: &Progress,
        cancel: &cancel,
    };
    let session = execute(session, prepared, &ctx);
    if !virtual_clock.total().is_zero() {
        eprintln!("simulated waiting: {}s", virtual_clock.total().as_secs());
    }
    write_transcript(&args, &session)?;

    match (&session.status, &session.abort) {
        (RunStatus::Complete, _) => {
            let merged = session.merged.as_ref().expect("complete runs have a table");
            let out = args.out.as_ref().expect("required unless dry run");
            export_csv(merged, out)
                .with_context(|| format!("cannot write {}", out.display()))
                .map_err(fail(EXIT_IO))?;
            for w in &session.merge_warnings {
                eprintln!("warning: {w}");
            }
            if let Some(p) = &session.provenance {
                println!("quotes verified: {}/{}", p.verified, p.total());
            }
            println!("wrote {} themes to {}", merged.len(), out.display());
            Ok(())
        }
        (_, Some(cause)) => Err(Failure {
            code: if cause.stage == Stage::Parse { EXIT_PARSE } else { EXIT_GATEWAY },
            error: anyhow!("run aborted: {cause}"),
        }),
        (status, None) => Err(Failure {
            code: EXIT_GATEWAY,
            error: anyhow!("run ended in state {status:?}"),
        }),
    }
}

fn write_transcript(args: &RunArgs, session: &AnalysisSession) -> Result<(), Failure> {
    let Some(path) = &args.transcript else {
        return Ok(());
    };
    let secrets: Vec<&str> = args.api_key.iter().map(String::as_str).collect();
    export_transcript(session, &secrets, path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(fail(EXIT_IO))?;
    Ok(())
}

fn confirm(cost: &CostEstimate) -> Result<(), Failure> {
    let stdin = std::io::stdin();
    if !stdin.is_terminal() {
        return Err(fail(EXIT_USAGE)(anyhow!(
            "the real backend needs confirmation; pass --yes to accept the estimated cost of ${}",
            cost.total.normalize()
        )));
    }
    print!("Submit to the model for about ${}? [y/N] ", cost.total.normalize());
    std::io::stdout().flush().ok();
    let mut line = String::new();
    stdin.lock().read_line(&mut line).ok();
    if matches!(line.trim(), "y" | "Y" | "yes") {
        Ok(())
    } else {
        Err(fail(EXIT_USAGE)(anyhow!("cancelled")))
    }
}
