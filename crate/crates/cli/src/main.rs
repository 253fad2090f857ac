use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use labelbias_core::backend::{server, MockBackend};
use labelbias_core::brp::{estimate_brp, BrpMethod, BrpOptions};
use labelbias_core::runner::{self, store, BackendSpec, ConfigError, PermutationPolicy, QuestionSample, RunConfig, RunError, StoreError};
use labelbias_core::{DatasetFormat, LeadingSpace, Method};
use tracing_subscriber::EnvFilter;

/// Measure and correct label bias in multiple-choice answering.
#[derive(Parser)]
#[command(name = "labelbias", version = labelbias_core::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-label base rates on a content-free prompt.
    Brp(BrpArgs),
    /// Start a new evaluation run.
    Run(RunArgs),
    /// Continue an interrupted run.
    Resume(ResumeArgs),
    /// Rebuild report/ from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Serve a mock backend over the native HTTP protocol.
    MockServe {
        /// Mock configuration (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Print the default run configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct BackendArg {
    /// mock:PATH, native:URL, openai:MODEL@URL, or a bare http(s) URL.
    #[arg(long, env = runner::BACKEND_ENV)]
    backend: Option<BackendSpec>,
}

#[derive(Args)]
struct BrpArgs {
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long, default_value = "cloze")]
    method: BrpMethod,
    #[arg(long, default_value = "all24")]
    permutations: PermutationPolicy,
    #[arg(long, default_value = labelbias_core::prompts::DEFAULT_FILLER_QUESTION)]
    filler_question: String,
    #[arg(long, default_value = labelbias_core::prompts::DEFAULT_FILLER_CHOICE)]
    filler_choice: String,
    #[arg(long, default_value = "on")]
    leading_space: LeadingSpace,
    /// Also store the estimate as brp.json in this directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Base configuration (TOML, or JSON by extension); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    dataset_format: Option<DatasetFormat>,
    /// Comma-separated: cloze, cf, cf_cot, apricot.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// all24, identity or sample:COUNT:SEED.
    #[arg(long)]
    permutations: Option<PermutationPolicy>,
    /// all, first:N, sample:N:SEED or per-subject:N:SEED.
    #[arg(long)]
    questions: Option<QuestionSample>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    max_new_tokens: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    leading_space: Option<LeadingSpace>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<Method>,
    #[arg(long)]
    brp_method: Option<BrpMethod>,
    #[arg(long)]
    no_brp: bool,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Must match the stored configuration on every result-affecting field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    retries: Option<u32>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $value:expr),* $(,)?) => {
                $(if let Some(v) = $value { c.$field = v; })*
            };
        }
        set! {
            dataset <- self.dataset,
            dataset_format <- self.dataset_format,
            methods <- self.methods,
            permutations <- self.permutations,
            questions <- self.questions,
            iterations <- self.iterations,
            max_new_tokens <- self.max_new_tokens,
            temperature <- self.temperature,
            leading_space <- self.leading_space,
            base_seed <- self.seed,
            max_in_flight <- self.max_in_flight,
            retries <- self.retries,
            run_dir <- self.run_dir,
            baseline_method <- self.baseline,
        }
        if let Some(b) = self.backend.backend {
            c.backend = Some(b);
        }
        if let Some(m) = self.brp_method {
            c.brp.method = m;
        }
        if self.no_brp {
            c.brp.enabled = false;
        }
        Ok(c)
    }
}

fn backend_for(spec: Option<BackendSpec>, base: &RunConfig) -> Result<Box<dyn labelbias_core::Backend>, RunError> {
    let mut c = base.clone();
    if spec.is_some() {
        c.backend = spec;
    }
    runner::open_backend(&c)
}

fn exec(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Brp(a) => {
            let backend = backend_for(a.backend.backend, &RunConfig::default())?;
            let options = BrpOptions {
                filler_question: a.filler_question,
                filler_choice: a.filler_choice,
                leading_space: a.leading_space,
            };
            let est = estimate_brp(backend.as_ref(), &a.permutations.permutations(), &options, a.method)?;
            let json = serde_json::to_string_pretty(&est).expect("estimate serializes") + "\n";
            if let Some(dir) = a.run_dir {
                std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
                    path: dir.clone(),
                    source,
                })?;
                store::write_atomic(&dir.join(runner::BRP_FILE), json.as_bytes())?;
            }
            print!("{json}");
        }
        Command::Run(a) => {
            let config = a.into_config()?;
            config.validate()?;
            let backend = runner::open_backend(&config)?;
            let out = runner::run(&config, backend.as_ref())?;
            println!(
                "{}: {} selections, {} trials measured",
                out.run_dir.display(),
                out.selections_new,
                out.trials_new
            );
        }
        Command::Resume(a) => {
            let manifest = runner::read_manifest(&a.run_dir)?;
            let mut over = match &a.config {
                Some(p) => RunConfig::from_file(p)?,
                None => manifest.config.clone(),
            };
            if let Some(n) = a.max_in_flight {
                over.max_in_flight = n;
            }
            if let Some(n) = a.retries {
                over.retries = n;
            }
            if let Some(b) = a.backend.backend {
                over.backend = Some(b);
            }
            // Surface a config mismatch before touching the backend.
            let diff = manifest.config.result_affecting_diff(&over);
            if !diff.is_empty() {
                return Err(RunError::ConfigMismatch(diff));
            }
            let backend = runner::open_backend(&over)?;
            let out = runner::resume(&a.run_dir, Some(&over), backend.as_ref())?;
            println!(
                "{}: {} of {} selections newly completed, {} trials measured, {} reused",
                out.run_dir.display(),
                out.selections_new,
                out.selections_total,
                out.trials_new,
                out.trials_reused
            );
        }
        Command::Report { run_dir } => {
            let summary = runner::report(&run_dir)?;
            for (method, m) in &summary.methods {
                println!(
                    "{method:>8}  accuracy {:.4}  entropy {:.4}  n {}",
                    m.accuracy, m.entropy, m.n_selections
                );
            }
        }
        Command::MockServe { config, addr } => {
            let cfg = match config {
                Some(p) => runner::load_mock_config(&p)?,
                None => Default::default(),
            };
            let mock = MockBackend::new(cfg).map_err(ConfigError::Invalid)?;
            tracing::info!(%addr, "serving mock backend");
            server::serve_blocking(Arc::new(mock), addr).map_err(|e| {
                RunError::BackendUnavailable(labelbias_core::BackendError::Transport(e.to_string()))
            })?;
        }
        Command::DefaultConfig => {
            print!("{}", toml::to_string_pretty(&RunConfig::default()).expect("config serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match exec(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
