use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use roadnorms::experiment::{load_metrics, run_batch, run_to_file, write_report, ProviderChoice};
use roadnorms::render::render_state;
use roadnorms::{replay, EpisodeOutcome, ExperimentConfig, Reward};

#[derive(Parser)]
#[command(
    name = "roadnorms",
    version,
    about = "Multi-agent driving games with chat-model agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Remote,
    Mock,
}

impl From<ProviderArg> for ProviderChoice {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::Remote => ProviderChoice::Remote,
            ProviderArg::Mock => ProviderChoice::Mock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode and write its log.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Print the grid after every step.
        #[arg(long)]
        render: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "remote")]
        provider: ProviderArg,
        /// Background vehicles; defaults to the config's scenario.n_background.
        #[arg(long)]
        n_background: Option<u32>,
    },
    /// Run the configured sweep, then write the report next to the logs.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Defaults to batch.output_dir from the config, else `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "remote")]
        provider: ProviderArg,
    },
    /// Compute metrics and plot data from a directory of episode logs.
    Report {
        logs_dir: PathBuf,
        /// Defaults to the logs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_owned).unwrap_or_default()
}

fn load(config: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(config).with_context(|| format!("invalid config {}", config.display()))
}

fn cmd_run(
    config: &Path,
    render: bool,
    out: &Path,
    provider: ProviderArg,
    n_background: Option<u32>,
) -> Result<ExitCode> {
    let exp = load(config)?;
    let n = n_background.unwrap_or(exp.scenario.n_background);
    let cfg = exp.episode_config(n, exp.rng_seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join("episode.jsonl");
    let log = run_to_file(&exp, &cfg, provider.into(), &config_dir(config), None, &path)?;
    let states = replay(&log).context("replay of the fresh log failed")?;

    if render {
        let spec = log.config.effective_scenario();
        for state in &states {
            println!("{}", render_state(state, &spec));
        }
    }
    println!("outcome: {} after {} steps", log.outcome, log.steps.len());
    for v in log.final_state.vehicles.values() {
        println!(
            "  {:<8} {:<10} {:?} reward {}",
            v.id, v.color, v.status, v.cumulative_reward
        );
    }
    println!("log: {}", path.display());
    if log.outcome == EpisodeOutcome::Aborted {
        eprintln!("error: episode aborted: {}", log.abort_reason.unwrap_or_default());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_batch(config: &Path, parallel: usize, out: Option<PathBuf>, provider: ProviderArg) -> Result<ExitCode> {
    let exp = load(config)?;
    let base = config_dir(config);
    let out = out
        .or_else(|| exp.batch.output_dir.as_ref().map(|d| base.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let logs = out.join("logs");
    let run = run_batch(&exp, &base, &logs, provider.into(), parallel)?;

    let skipped = run.episodes.iter().filter(|e| e.skipped).count();
    println!(
        "{} episodes ({} run, {} already done)",
        run.episodes.len(),
        run.episodes.len() - skipped,
        skipped
    );
    for e in run.aborted() {
        eprintln!(
            "aborted: {} ({})",
            e.path.display(),
            e.abort_reason.as_deref().unwrap_or("unknown reason")
        );
    }
    if run.all_aborted() {
        eprintln!("error: every episode aborted");
        return Ok(ExitCode::from(2));
    }
    let metrics = load_metrics::<Reward>(&logs)?;
    let doc = write_report(&metrics, &out)?;
    print_summary(&doc);
    println!("report: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn print_summary(doc: &roadnorms::experiment::ReportDocument) {
    println!("n_background  n_tests  n_success  rate");
    for (n, s) in &doc.by_background {
        println!("{n:>12}  {:>7}  {:>9}  {}", s.n_episodes, s.n_success, s.rate_text());
    }
}

fn cmd_report(logs_dir: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let metrics = load_metrics::<Reward>(logs_dir)?;
    let out = out.unwrap_or_else(|| logs_dir.to_owned());
    let doc = write_report(&metrics, &out)?;
    print_summary(&doc);
    println!("report: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(config: &Path) -> Result<ExitCode> {
    let exp = load(config)?;
    exp.validate()?;
    if let Some(file) = &exp.mock_responses {
        let path = config_dir(config).join(file);
        if !path.is_file() {
            bail!("mock_responses: {} does not exist", path.display());
        }
    }
    println!("{}: ok", config.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            render,
            out,
            provider,
            n_background,
        } => cmd_run(&config, render, &out, provider, n_background),
        Command::Batch {
            config,
            parallel,
            out,
            provider,
        } => cmd_batch(&config, parallel, out, provider),
        Command::Report { logs_dir, out } => cmd_report(&logs_dir, out),
        Command::Validate { config } => cmd_validate(&config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
