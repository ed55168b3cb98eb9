use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use flash_core::executor::synthetic::benchmark_family_spec;
use flash_core::executor::{make_synthetic, spawn_external};
use flash_core::graph::PipelineSpec;
use flash_core::orchestrator::report::summarize;
use flash_core::orchestrator::trace::{read_trace_file, TraceWriter};
use flash_core::orchestrator::{run_flash, run_random_search, Budget, BudgetConfig, TuningOutcome};

#[derive(Parser, Debug)]
#[command(name = "flash", version, about = "Budgeted search over analytic pipeline configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search a pipeline spec and write a trace.
    Run(Box<RunArgs>),
    /// Summarize a trace written by `run`.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Also write the best-so-far series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the built-in 4-step benchmark spec as JSON.
    SpecTemplate,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Flash,
    Random,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// `synthetic` or `subprocess:"<worker command>"`.
    #[arg(long, default_value = "synthetic")]
    executor: String,
    /// Budget config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Phase 1 budget: runs (`30`) or seconds (`45s`).
    #[arg(long)]
    t_init: Option<Budget>,
    /// Phase 2 budget: runs (`30`) or seconds (`45s`).
    #[arg(long)]
    t_prune: Option<Budget>,
    /// Seconds for the whole search.
    #[arg(long)]
    t_total: Option<f64>,
    #[arg(long)]
    top_r: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    ridge_lambda: Option<f64>,
    /// Prefix cache budget in bytes (0 disables caching).
    #[arg(long)]
    cache_bytes: Option<u64>,
    /// Paths scored per selection when the spec is too large to enumerate.
    #[arg(long)]
    candidate_budget: Option<usize>,
    #[arg(long)]
    per_run_timeout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trace_out: PathBuf,
    /// Observation noise of the synthetic executor.
    #[arg(long, default_value_t = 0.02)]
    noise_sd: f64,
    /// Seed of the synthetic ground truth (defaults to `--seed`).
    #[arg(long)]
    bench_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Strategy::Flash)]
    strategy: Strategy,
}

impl RunArgs {
    fn budget_config(&self) -> Result<BudgetConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                BudgetConfig::from_json_str(&text)?
            }
            None => BudgetConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(if let Some(v) = self.$flag { cfg.$field = v; })*};
        }
        set!(t_init => t_init, t_prune => t_prune, t_total => t_total, top_r => top_r, xi => xi,
            ridge_lambda => ridge_lambda, cache_bytes => cache_budget_bytes,
            candidate_budget => candidate_budget, per_run_timeout => per_run_timeout, seed => seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_spec(path: &Path) -> Result<PipelineSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PipelineSpec::from_json_str(&text).with_context(|| format!("parsing spec {}", path.display()))
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.spec)?;
    let cfg = args.budget_config()?;
    let writer = TraceWriter::create(&args.trace_out)?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing interrupt handler")?;
    }
    info!("spec {}: {} steps, {} paths", spec.name(), spec.n_steps(), spec.path_count());
    let outcome: TuningOutcome = if args.executor == "synthetic" {
        let bench = make_synthetic(&spec, args.bench_seed.unwrap_or(cfg.seed), args.noise_sd);
        match args.strategy {
            Strategy::Flash => run_flash(&spec, bench, cfg, Some(writer), Some(stop))?,
            Strategy::Random => run_random_search(&spec, bench, cfg, Some(writer))?,
        }
    } else if let Some(cmd) = args.executor.strip_prefix("subprocess:") {
        let worker = spawn_external(cmd, &spec, cfg.per_run_timeout)?;
        match args.strategy {
            Strategy::Flash => run_flash(&spec, worker, cfg, Some(writer), Some(stop))?,
            Strategy::Random => run_random_search(&spec, worker, cfg, Some(writer))?,
        }
    } else {
        bail!("unknown executor `{}` (expected `synthetic` or `subprocess:<cmd>`)", args.executor);
    };
    print!("{}", outcome.summary());
    println!("trace: {}", args.trace_out.display());
    Ok(if outcome.interrupted { ExitCode::from(130) } else { ExitCode::SUCCESS })
}

fn report(trace: &Path, csv: Option<&Path>) -> Result<()> {
    let rows = read_trace_file(trace)?;
    let summary = summarize(&rows)?;
    print!("{}", summary.render());
    if let Some(out) = csv {
        let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
        summary.write_plot_csv(file)?;
        println!("series: {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::Report { trace, csv } => report(&trace, csv.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::SpecTemplate => {
            println!("{:#}", benchmark_family_spec().to_json_value());
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

