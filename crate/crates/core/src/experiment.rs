//! Experiment configuration files, batch sweeps and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Role, VehicleId};
use crate::llm::{ChatProvider, MockFallback, MockProvider, MockResponses, ProviderConfig, RemoteProvider};
use crate::logfile::{Journal, LogError};
use crate::metrics::{episode_metrics, summarize, summarize_by_background, BatchSummary, EpisodeMetrics, MetricsError};
use crate::orchestrator::{run_episode_with, ConfigError, EpisodeConfig, EpisodeLog, EpisodeOutcome, RunError};
use crate::policy::PolicyKind;
use crate::prompt::PromptTemplateSet;
use crate::scalar::RewardScalar;
use crate::scenario::{build, RewardOverrides, Route, ScenarioKind, ScenarioSpec};

pub const DEFAULT_EPISODES_PER_CELL: u32 = 50;

/// Scenario section of a config file: a built-in layout plus tweaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct ScenarioRef<R> {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub n_background: u32,
    #[serde(default)]
    pub rewards: RewardOverrides<R>,
    #[serde(default)]
    pub step_cap: Option<u32>,
    #[serde(default)]
    pub swap_is_crash: Option<bool>,
    #[serde(default)]
    pub platoon_max_gap: Option<u32>,
    /// Replaces the generated vehicle list entirely.
    #[serde(default)]
    pub routes: Option<Vec<Route>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    #[serde(default = "default_sweep")]
    pub sweep: Vec<u32>,
    #[serde(default = "default_episodes")]
    pub episodes_per_cell: u32,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_sweep() -> Vec<u32> {
    (0..=4).collect()
}

fn default_episodes() -> u32 {
    DEFAULT_EPISODES_PER_CELL
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            sweep: default_sweep(),
            episodes_per_cell: DEFAULT_EPISODES_PER_CELL,
            output_dir: None,
        }
    }
}

/// One JSON document describing a run or a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct ExperimentConfig<R> {
    pub scenario: ScenarioRef<R>,
    #[serde(default)]
    pub templates: Option<PromptTemplateSet>,
    /// Policy per strategic vehicle id.
    #[serde(default)]
    pub bindings: BTreeMap<VehicleId, PolicyKind>,
    /// Policy for strategic vehicles missing from `bindings`.
    #[serde(default)]
    pub default_policy: Option<PolicyKind>,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    /// Canned responses for the mock provider; relative to the config file.
    #[serde(default)]
    pub mock_responses: Option<PathBuf>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub batch: BatchSpec,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("scenario: {0}")]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("batch: {0}")]
    Batch(String),
    #[error("mock_responses: {0}")]
    Mock(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{}: {source}", path.display())]
    Log { path: PathBuf, source: LogError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no episode logs found in {0}")]
    NoLogs(PathBuf),
    #[error("cannot write report: {0}")]
    Report(String),
}

/// Where LLM-bound agents get their replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderChoice {
    Remote,
    Mock,
}

impl<R: RewardScalar> ExperimentConfig<R> {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io(path.to_owned(), e))?;
        Self::parse(&text)
    }

    pub fn scenario_for(&self, n_background: u32) -> Result<ScenarioSpec<R>, ExperimentError> {
        let s = &self.scenario;
        let mut spec = build(s.kind, n_background, &s.rewards)?;
        if let Some(cap) = s.step_cap {
            spec.step_cap = cap;
        }
        if let Some(swap) = s.swap_is_crash {
            spec.swap_is_crash = swap;
        }
        if s.platoon_max_gap.is_some() {
            spec.platoon_max_gap = s.platoon_max_gap;
        }
        if let Some(routes) = &s.routes {
            spec.routes = routes.clone();
            spec.n_background = routes.iter().filter(|r| r.role == Role::Background).count() as u32;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn episode_config(&self, n_background: u32, rng_seed: u64) -> Result<EpisodeConfig<R>, ExperimentError> {
        let scenario = self.scenario_for(n_background)?;
        let mut bindings = self.bindings.clone();
        if let Some(default) = &self.default_policy {
            for r in scenario.routes.iter().filter(|r| r.role == Role::Strategic) {
                bindings.entry(r.id.clone()).or_insert_with(|| default.clone());
            }
        }
        let uses_llm = bindings.values().any(PolicyKind::is_llm);
        let cfg = EpisodeConfig {
            scenario,
            templates: self.templates.clone(),
            bindings,
            provider: match (&self.provider, uses_llm) {
                (Some(p), _) => Some(p.clone()),
                (None, true) => Some(ProviderConfig::default()),
                (None, false) => None,
            },
            rng_seed,
            step_cap: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the batch section and every sweep cell.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.batch.episodes_per_cell == 0 {
            return Err(ExperimentError::Batch("episodes_per_cell must be at least 1".into()));
        }
        if self.batch.sweep.is_empty() {
            return Err(ExperimentError::Batch(
                "sweep must list at least one background count".into(),
            ));
        }
        self.episode_config(self.scenario.n_background, self.rng_seed)?;
        if self.scenario.routes.is_none() {
            for &n in &self.batch.sweep {
                self.episode_config(n, self.rng_seed)?;
            }
        }
        Ok(())
    }

    fn mock_responses(&self, base_dir: &Path, seed: u64) -> Result<MockResponses, ExperimentError> {
        match &self.mock_responses {
            Some(p) => {
                let path = base_dir.join(p);
                MockResponses::load(&path).map_err(|e| ExperimentError::Mock(format!("{}: {e}", path.display())))
            }
            None => {
                let mut choices = vec![Action::Go.label().to_owned(), Action::Stop.label().to_owned()];
                if self.scenario.kind == ScenarioKind::Platoon {
                    choices.push(Action::LaneChange.label().to_owned());
                }
                Ok(MockResponses {
                    responses: BTreeMap::new(),
                    fallback: MockFallback::HashedChoice { choices, seed },
                })
            }
        }
    }
}

/// Seed of episode `index` in the sweep cell with `n_background` vehicles.
pub fn episode_seed(base: u64, n_background: u32, index: u32) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((u64::from(n_background) << 32) | u64::from(index))
}

pub fn log_file_name(n_background: u32, index: u32) -> String {
    format!("bg{n_background}_ep{index:03}.jsonl")
}

/// Runs one episode with the requested provider and writes its log to
/// `log_path`, journaling decisions while the episode is in progress.
pub fn run_to_file<R: RewardScalar>(
    exp: &ExperimentConfig<R>,
    cfg: &EpisodeConfig<R>,
    choice: ProviderChoice,
    base_dir: &Path,
    shared_remote: Option<&RemoteProvider>,
    log_path: &Path,
) -> Result<EpisodeLog<R>, ExperimentError> {
    let log_err = |source: LogError| ExperimentError::Log {
        path: log_path.to_owned(),
        source,
    };
    let mut journal = Journal::create(log_path).map_err(|e| log_err(e.into()))?;
    let log = if !cfg.uses_llm() {
        run_episode_with(cfg, None, &mut journal)?
    } else {
        match choice {
            ProviderChoice::Mock => {
                let mock = MockProvider::new(exp.mock_responses(base_dir, cfg.rng_seed)?);
                run_episode_with(cfg, Some(&mock as &dyn ChatProvider), &mut journal)?
            }
            ProviderChoice::Remote => {
                let owned;
                let remote = match shared_remote {
                    Some(r) => r,
                    None => {
                        owned = RemoteProvider::new(cfg.provider.as_ref().expect("validated"));
                        &owned
                    }
                };
                run_episode_with(cfg, Some(remote as &dyn ChatProvider), &mut journal)?
            }
        }
    };
    log.write(log_path).map_err(log_err)?;
    journal.finish().map_err(|e| log_err(e.into()))?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeStatus {
    pub n_background: u32,
    pub index: u32,
    pub path: PathBuf,
    pub skipped: bool,
    pub outcome: EpisodeOutcome,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRun {
    pub episodes: Vec<EpisodeStatus>,
}

impl BatchRun {
    pub fn aborted(&self) -> impl Iterator<Item = &EpisodeStatus> {
        self.episodes.iter().filter(|e| e.outcome == EpisodeOutcome::Aborted)
    }

    pub fn all_aborted(&self) -> bool {
        !self.episodes.is_empty() && self.aborted().count() == self.episodes.len()
    }
}

fn finished_log<R: RewardScalar>(path: &Path) -> Option<EpisodeOutcome> {
    let log = EpisodeLog::<R>::read(path).ok()?;
    (log.outcome != EpisodeOutcome::Aborted).then_some(log.outcome)
}

/// Runs every sweep cell, writing one log per episode into `logs_dir`.
/// Episodes whose finished log already exists are skipped; aborted or
/// unreadable logs are run again.
pub fn run_batch<R: RewardScalar>(
    exp: &ExperimentConfig<R>,
    base_dir: &Path,
    logs_dir: &Path,
    choice: ProviderChoice,
    parallel: usize,
) -> Result<BatchRun, ExperimentError> {
    exp.validate()?;
    fs::create_dir_all(logs_dir).map_err(|e| ExperimentError::Io(logs_dir.to_owned(), e))?;
    let jobs: Vec<(u32, u32)> = exp
        .batch
        .sweep
        .iter()
        .flat_map(|&n| (0..exp.batch.episodes_per_cell).map(move |i| (n, i)))
        .collect();
    let remote = match (choice, &exp.provider) {
        (ProviderChoice::Remote, p) => Some(RemoteProvider::new(&p.clone().unwrap_or_default())),
        _ => None,
    };

    let run_job = |&(n, i): &(u32, u32)| -> Result<EpisodeStatus, ExperimentError> {
        let path = logs_dir.join(log_file_name(n, i));
        if let Some(outcome) = finished_log::<R>(&path) {
            return Ok(EpisodeStatus {
                n_background: n,
                index: i,
                path,
                skipped: true,
                outcome,
                abort_reason: None,
            });
        }
        let cfg = exp.episode_config(n, episode_seed(exp.rng_seed, n, i))?;
        let log = run_to_file(exp, &cfg, choice, base_dir, remote.as_ref(), &path)?;
        Ok(EpisodeStatus {
            n_background: n,
            index: i,
            path,
            skipped: false,
            outcome: log.outcome,
            abort_reason: log.abort_reason,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| ExperimentError::Batch(e.to_string()))?;
    let episodes = pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>, _>>())?;
    Ok(BatchRun { episodes })
}

/// Every `*.jsonl` file under `dir`, sorted by path.
pub fn find_logs(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| ExperimentError::Io(d.clone(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| ExperimentError::Io(d.clone(), e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_metrics<R: RewardScalar>(dir: &Path) -> Result<Vec<(PathBuf, EpisodeMetrics<R>)>, ExperimentError> {
    let paths = find_logs(dir)?;
    if paths.is_empty() {
        return Err(ExperimentError::NoLogs(dir.to_owned()));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let log = EpisodeLog::<R>::read(&path).map_err(|source| ExperimentError::Log {
            path: path.clone(),
            source,
        })?;
        out.push((path, episode_metrics(&log)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub overall: BatchSummary,
    pub by_background: BTreeMap<u32, BatchSummary>,
}

/// Report file names written by [`write_report`].
pub const REPORT_FILES: [&str; 7] = [
    "summary.csv",
    "summary.json",
    "episodes.csv",
    "early_stops.csv",
    "lane_change_counts.csv",
    "lane_change_times.csv",
    "platoon_fractions.csv",
];

fn csv_file(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ExperimentError> {
    let err = |e: csv::Error| ExperimentError::Report(format!("{name}: {e}"));
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| ExperimentError::Report(format!("{name}: {e}")))
}

fn ratio_text(r: num_rational::Ratio<u32>) -> String {
    format!("{:.4}", r.to_f64().unwrap_or(f64::NAN))
}

fn long_rows(series: &BTreeMap<String, BTreeMap<u32, u32>>) -> Vec<Vec<String>> {
    series
        .iter()
        .flat_map(|(c, bins)| {
            bins.iter()
                .map(move |(k, n)| vec![c.clone(), k.to_string(), n.to_string()])
        })
        .collect()
}

/// Writes the summary table, per-episode metrics and histogram series.
pub fn write_report<R: RewardScalar>(
    metrics: &[(PathBuf, EpisodeMetrics<R>)],
    out_dir: &Path,
) -> Result<ReportDocument, ExperimentError> {
    let all: Vec<EpisodeMetrics<R>> = metrics.iter().map(|(_, m)| m.clone()).collect();
    let overall = summarize(&all)?;
    let by_background = summarize_by_background(&all)?;
    fs::create_dir_all(out_dir).map_err(|e| ExperimentError::Io(out_dir.to_owned(), e))?;

    csv_file(
        out_dir,
        "summary.csv",
        &["n_background", "n_tests", "n_success", "rate"],
        by_background
            .iter()
            .map(|(n, s)| {
                vec![
                    n.to_string(),
                    s.n_episodes.to_string(),
                    s.n_success.to_string(),
                    s.rate_text(),
                ]
            })
            .collect(),
    )?;

    let doc = ReportDocument { overall, by_background };
    let json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    fs::write(out_dir.join("summary.json"), json + "\n").map_err(|e| ExperimentError::Io(out_dir.to_owned(), e))?;

    // Simulation index counts from 1 within each background-vehicle group.
    let mut sim_index: BTreeMap<u32, u32> = BTreeMap::new();
    let mut indexed = Vec::with_capacity(metrics.len());
    for (path, m) in metrics {
        let k = sim_index.entry(m.n_background).or_insert(0);
        *k += 1;
        indexed.push((path, m, *k));
    }

    let file_name = |p: &PathBuf| {
        p.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    csv_file(
        out_dir,
        "episodes.csv",
        &[
            "log",
            "n_background",
            "simulation",
            "outcome",
            "steps",
            "success",
            "yield_events",
            "early_stops",
            "lane_changes",
            "platoon_time_fraction",
        ],
        indexed
            .iter()
            .map(|(p, m, k)| {
                vec![
                    file_name(p),
                    m.n_background.to_string(),
                    k.to_string(),
                    m.outcome.to_string(),
                    m.steps.to_string(),
                    m.success().to_string(),
                    m.yield_events.len().to_string(),
                    m.early_stops.values().sum::<u32>().to_string(),
                    m.lane_changes.len().to_string(),
                    m.platoon.map(|p| ratio_text(p.time_fraction)).unwrap_or_default(),
                ]
            })
            .collect(),
    )?;

    let counted = || indexed.iter().filter(|(_, m, _)| m.outcome != EpisodeOutcome::Aborted);
    csv_file(
        out_dir,
        "early_stops.csv",
        &["n_background", "simulation", "color", "early_stops"],
        counted()
            .flat_map(|(_, m, k)| {
                m.early_stops
                    .iter()
                    .map(move |(c, n)| vec![m.n_background.to_string(), k.to_string(), c.clone(), n.to_string()])
            })
            .collect(),
    )?;
    csv_file(
        out_dir,
        "lane_change_counts.csv",
        &["color", "lane_changes", "episodes"],
        long_rows(&doc.overall.lane_change_counts),
    )?;
    csv_file(
        out_dir,
        "lane_change_times.csv",
        &["color", "time_step", "lane_changes"],
        long_rows(&doc.overall.lane_change_times),
    )?;
    csv_file(
        out_dir,
        "platoon_fractions.csv",
        &["n_background", "simulation", "platoon_time_fraction"],
        counted()
            .filter_map(|(_, m, k)| {
                m.platoon
                    .map(|p| vec![m.n_background.to_string(), k.to_string(), ratio_text(p.time_fraction)])
            })
            .collect(),
    )?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SummaryRow {
    pub n_background: u32,
    pub n_tests: u32,
    pub n_success: u32,
    pub rate: String,
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::Report(e.to_string()))?;
    r.deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(|e| ExperimentError::Report(e.to_string()))
}
