//! Line-delimited JSON episode logs: a header line, one line per step and a
//! footer line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::VehicleId;
use crate::orchestrator::{AgentTurn, EpisodeConfig, EpisodeLog, EpisodeObserver, EpisodeOutcome, StepRecord};
use crate::scalar::RewardScalar;
use crate::world::WorldState;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
struct Header<R> {
    schema_version: u32,
    config: EpisodeConfig<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
struct Footer<R> {
    final_state: WorldState<R>,
    outcome: EpisodeOutcome,
    #[serde(default)]
    abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", bound = "R: RewardScalar")]
enum Line<R> {
    Header(Box<Header<R>>),
    Step(StepRecord<R>),
    Footer(Footer<R>),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("log has no footer (episode unfinished)")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl<R: RewardScalar> EpisodeLog<R> {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &Line<R>| {
            out.push_str(&serde_json::to_string(line).expect("log line serializes"));
            out.push('\n');
        };
        push(&Line::Header(Box::new(Header {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
        })));
        for step in &self.steps {
            push(&Line::Step(step.clone()));
        }
        push(&Line::Footer(Footer {
            final_state: self.final_state.clone(),
            outcome: self.outcome,
            abort_reason: self.abort_reason.clone(),
        }));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut footer = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| LogError::Corrupt { line, message };
            if footer.is_some() {
                return Err(corrupt("content after footer".into()));
            }
            let parsed: Line<R> = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
            match parsed {
                Line::Header(h) if header.is_none() && line == 1 => {
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(LogError::Schema(h.schema_version));
                    }
                    header = Some(*h);
                }
                Line::Header(_) => return Err(corrupt("unexpected header".into())),
                Line::Step(_) | Line::Footer(_) if header.is_none() => {
                    return Err(corrupt("first line must be the header".into()))
                }
                Line::Step(s) => steps.push(s),
                Line::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or(LogError::Corrupt {
            line: 1,
            message: "empty log".into(),
        })?;
        let footer = footer.ok_or(LogError::Truncated)?;
        Ok(EpisodeLog {
            config: header.config,
            steps,
            final_state: footer.final_state,
            outcome: footer.outcome,
            abort_reason: footer.abort_reason,
        })
    }

    /// Writes via a temporary file and rename, so a log file on disk is
    /// always complete.
    pub fn write(&self, path: &Path) -> Result<(), LogError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Append-only record of each step's decisions, written and flushed before
/// the step is applied. Sits next to the final log as `<log>.partial` and is
/// removed once the log is complete.
pub struct Journal {
    path: std::path::PathBuf,
    file: fs::File,
}

#[derive(Serialize)]
#[serde(bound = "R: RewardScalar")]
struct JournalLine<'a, R> {
    time_step: u32,
    turns: &'a BTreeMap<VehicleId, AgentTurn<R>>,
}

impl Journal {
    pub fn path_for(log_path: &Path) -> std::path::PathBuf {
        let mut p = log_path.as_os_str().to_owned();
        p.push(".partial");
        p.into()
    }

    pub fn create(log_path: &Path) -> std::io::Result<Self> {
        let path = Self::path_for(log_path);
        let file = fs::File::create(&path)?;
        Ok(Journal { path, file })
    }

    /// Deletes the journal; call after the final log is written.
    pub fn finish(self) -> std::io::Result<()> {
        drop(self.file);
        fs::remove_file(&self.path)
    }
}

impl<R: RewardScalar> EpisodeObserver<R> for Journal {
    fn on_decisions(&mut self, time_step: u32, turns: &BTreeMap<VehicleId, AgentTurn<R>>) -> std::io::Result<()> {
        let line = serde_json::to_string(&JournalLine { time_step, turns }).map_err(std::io::Error::other)?;
        writeln!(self.file, "{line}")?;
        self.file.sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockProvider, MockResponses, ProviderConfig};
    use crate::orchestrator::run_episode;
    use crate::policy::PolicyKind;
    use crate::scenario::{build_platoon, RewardOverrides};
    use num_rational::Ratio;

    #[test]
    fn round_trip_with_llm_turns() {
        let spec = build_platoon::<i64>(1, &RewardOverrides::default()).unwrap();
        let mut cfg = crate::orchestrator::EpisodeConfig::uniform(spec, PolicyKind::Llm);
        cfg.provider = Some(ProviderConfig::default());
        let mock = MockProvider::new(MockResponses::fixed("Go"));
        let log = run_episode(&cfg, Some(&mock)).unwrap();
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), log.steps.len() + 2);
        assert!(text.starts_with("{\"record\":\"header\",\"schema_version\":1,"));
        let back = EpisodeLog::<i64>::from_jsonl(&text).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn journal_holds_decisions_until_finished() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("ep.jsonl");
        let spec = build_platoon::<i64>(0, &RewardOverrides::default()).unwrap();
        let cfg = crate::orchestrator::EpisodeConfig::uniform(spec, PolicyKind::AlwaysGo);
        let mut journal = Journal::create(&log_path).unwrap();
        let log = crate::orchestrator::run_episode_with(&cfg, None, &mut journal).unwrap();
        let partial = fs::read_to_string(Journal::path_for(&log_path)).unwrap();
        assert_eq!(partial.lines().count(), log.steps.len());
        log.write(&log_path).unwrap();
        journal.finish().unwrap();
        assert!(!Journal::path_for(&log_path).exists());
        assert_eq!(EpisodeLog::<i64>::read(&log_path).unwrap(), log);
    }

    #[test]
    fn exact_rewards_round_trip() {
        let over = RewardOverrides {
            go_cost: Some(Ratio::new(-5, 2)),
            ..Default::default()
        };
        let spec = build_platoon::<Ratio<i64>>(0, &over).unwrap();
        let cfg = crate::orchestrator::EpisodeConfig::uniform(spec, PolicyKind::AlwaysGo);
        let log = run_episode(&cfg, None).unwrap();
        let back = EpisodeLog::<Ratio<i64>>::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn truncated_and_corrupt_logs() {
        let spec = build_platoon::<i64>(0, &RewardOverrides::default()).unwrap();
        let cfg = crate::orchestrator::EpisodeConfig::uniform(spec, PolicyKind::AlwaysGo);
        let text = run_episode(&cfg, None).unwrap().to_jsonl();
        let without_footer: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            EpisodeLog::<i64>::from_jsonl(&without_footer),
            Err(LogError::Truncated)
        ));
        let broken = text.replacen("\"record\":\"step\"", "\"record\":\"stp\"", 1);
        assert!(matches!(
            EpisodeLog::<i64>::from_jsonl(&broken),
            Err(LogError::Corrupt { line: 2, .. })
        ));
        let future = text.replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert!(matches!(
            EpisodeLog::<i64>::from_jsonl(&future),
            Err(LogError::Schema(7))
        ));
    }
}
