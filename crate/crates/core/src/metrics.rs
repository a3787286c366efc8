//! Per-episode and per-batch norm statistics computed from episode logs.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, Heading, Role, VehicleId};
use crate::orchestrator::{EpisodeLog, EpisodeOutcome};
use crate::scalar::RewardScalar;
use crate::scenario::{is_platoon, ScenarioKind, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("WrongScenario: metric needs a {expected} episode, log is {actual}")]
    WrongScenario {
        expected: ScenarioKind,
        actual: ScenarioKind,
    },
    #[error("no strategic vehicle with colour {0}")]
    UnknownColor(String),
    #[error("MixedScenarios: logs mix {0} and {1}")]
    MixedScenarios(ScenarioKind, ScenarioKind),
}

fn require<R>(log: &EpisodeLog<R>, kind: ScenarioKind) -> Result<(), MetricsError> {
    let actual = log.config.scenario.name;
    if actual != kind {
        return Err(MetricsError::WrongScenario { expected: kind, actual });
    }
    Ok(())
}

fn strategic_id<R: RewardScalar>(log: &EpisodeLog<R>, color: &str) -> Result<VehicleId, MetricsError> {
    log.config
        .scenario
        .routes
        .iter()
        .find(|r| r.role == Role::Strategic && r.color == color)
        .map(|r| r.id.clone())
        .ok_or_else(|| MetricsError::UnknownColor(color.to_owned()))
}

fn color_of<R: RewardScalar>(spec: &ScenarioSpec<R>, id: &VehicleId) -> String {
    spec.route(id)
        .map(|r| r.color.clone())
        .unwrap_or_else(|| id.to_string())
}

/// Steps from `pos` to the nearest conflict cell ahead on the same road.
pub fn steps_to_conflict(pos: Cell, heading: Heading, conflicts: &BTreeSet<Cell>) -> Option<u32> {
    conflicts
        .iter()
        .filter_map(|c| match heading {
            Heading::East if c.row == pos.row && c.col > pos.col => Some(c.col - pos.col),
            Heading::South if c.col == pos.col && c.row > pos.row => Some(c.row - pos.row),
            _ => None,
        })
        .min()
}

/// Stops taken at least two cells before the conflict cell, i.e. before
/// reaching the approach cell.
pub fn count_early_stops<R: RewardScalar>(log: &EpisodeLog<R>, color: &str) -> Result<u32, MetricsError> {
    require(log, ScenarioKind::Intersection)?;
    let id = strategic_id(log, color)?;
    let conflicts = &log.config.scenario.conflict_cells;
    let n = log
        .steps
        .iter()
        .filter_map(|s| s.turns.get(&id))
        .filter(|t| t.decision.action == Action::Stop)
        .filter(|t| {
            steps_to_conflict(t.observation.self_position, t.observation.self_heading, conflicts)
                .is_some_and(|d| d >= 2)
        })
        .count();
    Ok(n as u32)
}

/// Crash-free completion of every trip within the step cap.
pub fn norm_adherence<R>(log: &EpisodeLog<R>) -> bool {
    log.outcome == EpisodeOutcome::AllCompleted
}

/// Waiting spells at the approach cell after which another strategic
/// vehicle is the first to pass through the conflict cell. One entry per
/// spell, stamped with the spell's first time step.
pub fn yield_events<R: RewardScalar>(log: &EpisodeLog<R>) -> Result<Vec<(String, u32)>, MetricsError> {
    require(log, ScenarioKind::Intersection)?;
    let spec = &log.config.scenario;
    let conflicts = &spec.conflict_cells;
    let mut events = Vec::new();
    for route in spec.routes.iter().filter(|r| r.role == Role::Strategic) {
        let mut in_spell = false;
        for (i, step) in log.steps.iter().enumerate() {
            let Some(turn) = step.turns.get(&route.id) else {
                break;
            };
            let at_approach = steps_to_conflict(turn.observation.self_position, route.heading, conflicts) == Some(1);
            let waiting = at_approach && turn.decision.action == Action::Stop;
            if waiting && !in_spell {
                let first_through = log.steps[i..].iter().find_map(|s| {
                    s.outcome
                        .next_state
                        .vehicles
                        .values()
                        .find(|v| conflicts.contains(&v.position))
                        .map(|v| (v.id.clone(), v.role, s.outcome.crash_ids.contains(&v.id)))
                });
                if let Some((other, Role::Strategic, false)) = first_through {
                    if other != route.id {
                        events.push((route.color.clone(), step.time_step));
                    }
                }
            }
            in_spell = waiting;
        }
    }
    events.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));
    Ok(events)
}

/// Every lane-change decision of a strategic vehicle, in time order.
pub fn lane_change_events<R: RewardScalar>(log: &EpisodeLog<R>) -> Result<Vec<(String, u32)>, MetricsError> {
    require(log, ScenarioKind::Platoon)?;
    let spec = &log.config.scenario;
    Ok(log
        .steps
        .iter()
        .flat_map(|s| {
            s.turns
                .iter()
                .filter(|(_, t)| t.observation.self_role == Role::Strategic)
                .filter(|(_, t)| t.decision.action == Action::LaneChange)
                .map(|(id, _)| (color_of(spec, id), s.time_step))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatoonStats {
    pub success: bool,
    /// Steps ending in platoon formation over the steps taken before the
    /// first strategic vehicle finishes (all steps if none finishes).
    pub time_fraction: Ratio<u32>,
    pub platoon_steps: u32,
    pub counted_steps: u32,
}

pub fn platoon_stats<R: RewardScalar>(log: &EpisodeLog<R>) -> Result<PlatoonStats, MetricsError> {
    require(log, ScenarioKind::Platoon)?;
    let spec = &log.config.scenario;
    let formed: Vec<bool> = log
        .steps
        .iter()
        .map(|s| is_platoon(&s.outcome.next_state, spec).expect("platoon scenario"))
        .collect();
    let strategic: BTreeSet<&VehicleId> = spec
        .routes
        .iter()
        .filter(|r| r.role == Role::Strategic)
        .map(|r| &r.id)
        .collect();
    let counted = log
        .steps
        .iter()
        .position(|s| s.outcome.completed_ids.iter().any(|id| strategic.contains(id)))
        .unwrap_or(log.steps.len());
    let platoon_steps = formed[..counted].iter().filter(|f| **f).count() as u32;
    let counted = counted as u32;
    Ok(PlatoonStats {
        success: formed.iter().any(|f| *f) && log.outcome == EpisodeOutcome::AllCompleted,
        time_fraction: if counted == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(platoon_steps, counted)
        },
        platoon_steps,
        counted_steps: counted,
    })
}

/// Sum of logged per-step rewards for each vehicle.
pub fn recompute_rewards<R: RewardScalar>(log: &EpisodeLog<R>) -> BTreeMap<VehicleId, R> {
    let mut totals: BTreeMap<VehicleId, R> = log
        .config
        .scenario
        .routes
        .iter()
        .map(|r| (r.id.clone(), R::zero()))
        .collect();
    for step in &log.steps {
        for (id, r) in &step.outcome.per_vehicle_reward {
            *totals.entry(id.clone()).or_insert_with(R::zero) += *r;
        }
    }
    totals
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "R: RewardScalar")]
pub struct EpisodeMetrics<R> {
    pub scenario: ScenarioKind,
    pub n_background: u32,
    pub outcome: EpisodeOutcome,
    pub steps: u32,
    pub norm_adherent: bool,
    /// Intersection only.
    pub early_stops: BTreeMap<String, u32>,
    pub yield_events: Vec<(String, u32)>,
    /// Platoon only.
    pub lane_changes: Vec<(String, u32)>,
    pub platoon: Option<PlatoonStats>,
    /// Final cumulative reward of each strategic vehicle, by colour.
    pub total_rewards: BTreeMap<String, R>,
}

impl<R> EpisodeMetrics<R> {
    /// The per-episode success used for rate columns: crash-free completion
    /// at the intersection, platoon success on the highway.
    pub fn success(&self) -> bool {
        match self.platoon {
            Some(p) => p.success,
            None => self.norm_adherent,
        }
    }
}

pub fn episode_metrics<R: RewardScalar>(log: &EpisodeLog<R>) -> EpisodeMetrics<R> {
    let spec = &log.config.scenario;
    let mut m = EpisodeMetrics {
        scenario: spec.name,
        n_background: spec.n_background,
        outcome: log.outcome,
        steps: log.steps.len() as u32,
        norm_adherent: norm_adherence(log),
        early_stops: BTreeMap::new(),
        yield_events: Vec::new(),
        lane_changes: Vec::new(),
        platoon: None,
        total_rewards: log
            .final_state
            .vehicles
            .values()
            .filter(|v| v.role == Role::Strategic)
            .map(|v| (v.color.clone(), v.cumulative_reward))
            .collect(),
    };
    match spec.name {
        ScenarioKind::Intersection => {
            for color in spec.strategic_colors() {
                let n = count_early_stops(log, &color).expect("intersection log");
                m.early_stops.insert(color, n);
            }
            m.yield_events = yield_events(log).expect("intersection log");
        }
        ScenarioKind::Platoon => {
            m.lane_changes = lane_change_events(log).expect("platoon log");
            m.platoon = Some(platoon_stats(log).expect("platoon log"));
        }
    }
    m
}

/// Number of equal-width bins used for the platoon time-fraction histogram.
pub const FRACTION_BINS: u32 = 10;

/// Bin index of a fraction in [0, 1]; 1 falls in the last bin.
pub fn fraction_bin(f: Ratio<u32>) -> u32 {
    let scaled = f * FRACTION_BINS;
    scaled.to_integer().min(FRACTION_BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenario: Option<ScenarioKind>,
    /// Set when every episode had the same number of background vehicles.
    pub n_background: Option<u32>,
    /// Episodes counted; aborted ones are excluded.
    pub n_episodes: u32,
    pub n_aborted: u32,
    pub n_success: u32,
    /// `None` when no episode was counted.
    pub rate: Option<Ratio<u32>>,
    pub n_crash_free: u32,
    /// Episodes with at least one yield event (intersection).
    pub n_yield_episodes: u32,
    pub mean_early_stops: BTreeMap<String, Ratio<u32>>,
    /// Colour → (lane changes in an episode → number of episodes).
    pub lane_change_counts: BTreeMap<String, BTreeMap<u32, u32>>,
    /// Colour → (time step → lane changes at that step).
    pub lane_change_times: BTreeMap<String, BTreeMap<u32, u32>>,
    /// Fraction bin index → number of episodes.
    pub platoon_fraction_bins: BTreeMap<u32, u32>,
}

impl BatchSummary {
    pub fn rate_f64(&self) -> Option<f64> {
        self.rate.and_then(|r| r.to_f64())
    }

    /// Rate with two decimals, or `NA` when undefined.
    pub fn rate_text(&self) -> String {
        self.rate_f64().map_or_else(|| "NA".to_owned(), |r| format!("{r:.2}"))
    }
}

/// Aggregates episode metrics. Aborted episodes are counted separately and
/// left out of every other figure.
pub fn summarize<R>(metrics: &[EpisodeMetrics<R>]) -> Result<BatchSummary, MetricsError> {
    let scenario = metrics.first().map(|m| m.scenario);
    if let Some(first) = scenario {
        if let Some(m) = metrics.iter().find(|m| m.scenario != first) {
            return Err(MetricsError::MixedScenarios(first, m.scenario));
        }
    }
    let n_background = metrics
        .first()
        .map(|m| m.n_background)
        .filter(|n| metrics.iter().all(|m| m.n_background == *n));
    let counted: Vec<&EpisodeMetrics<R>> = metrics
        .iter()
        .filter(|m| m.outcome != EpisodeOutcome::Aborted)
        .collect();
    let n = counted.len() as u32;
    let n_success = counted.iter().filter(|m| m.success()).count() as u32;

    let mut stop_totals: BTreeMap<String, u32> = BTreeMap::new();
    let mut lane_change_counts: BTreeMap<String, BTreeMap<u32, u32>> = BTreeMap::new();
    let mut lane_change_times: BTreeMap<String, BTreeMap<u32, u32>> = BTreeMap::new();
    let mut platoon_fraction_bins = BTreeMap::new();
    for m in &counted {
        for (c, k) in &m.early_stops {
            *stop_totals.entry(c.clone()).or_default() += k;
        }
        if m.platoon.is_some() {
            for color in m.total_rewards.keys() {
                let k = m.lane_changes.iter().filter(|(c, _)| c == color).count() as u32;
                *lane_change_counts
                    .entry(color.clone())
                    .or_default()
                    .entry(k)
                    .or_default() += 1;
            }
        }
        for (c, t) in &m.lane_changes {
            *lane_change_times.entry(c.clone()).or_default().entry(*t).or_default() += 1;
        }
        if let Some(p) = m.platoon {
            *platoon_fraction_bins.entry(fraction_bin(p.time_fraction)).or_default() += 1;
        }
    }

    Ok(BatchSummary {
        scenario,
        n_background,
        n_episodes: n,
        n_aborted: metrics.len() as u32 - n,
        n_success,
        rate: (n > 0).then(|| Ratio::new(n_success, n)),
        n_crash_free: counted
            .iter()
            .filter(|m| m.outcome != EpisodeOutcome::CrashOccurred)
            .count() as u32,
        n_yield_episodes: counted.iter().filter(|m| !m.yield_events.is_empty()).count() as u32,
        mean_early_stops: stop_totals
            .into_iter()
            .map(|(c, total)| (c, Ratio::new(total, n.max(1))))
            .collect(),
        lane_change_counts,
        lane_change_times,
        platoon_fraction_bins,
    })
}

/// One summary per background-vehicle count.
pub fn summarize_by_background<R>(metrics: &[EpisodeMetrics<R>]) -> Result<BTreeMap<u32, BatchSummary>, MetricsError>
where
    R: Clone,
{
    summarize(metrics)?;
    let mut groups: BTreeMap<u32, Vec<EpisodeMetrics<R>>> = BTreeMap::new();
    for m in metrics {
        groups.entry(m.n_background).or_default().push(m.clone());
    }
    groups
        .into_iter()
        .map(|(k, ms)| summarize(&ms).map(|s| (k, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflict_distance() {
        let conflicts: BTreeSet<Cell> = [Cell::new(5, 5)].into_iter().collect();
        assert_eq!(steps_to_conflict(Cell::new(4, 5), Heading::South, &conflicts), Some(1));
        assert_eq!(steps_to_conflict(Cell::new(5, 2), Heading::East, &conflicts), Some(3));
        assert_eq!(steps_to_conflict(Cell::new(6, 5), Heading::South, &conflicts), None);
        assert_eq!(steps_to_conflict(Cell::new(4, 5), Heading::East, &conflicts), None);
    }

    #[test]
    fn fraction_bins() {
        assert_eq!(fraction_bin(Ratio::new(0, 1)), 0);
        assert_eq!(fraction_bin(Ratio::new(3, 5)), 6);
        assert_eq!(fraction_bin(Ratio::new(1, 1)), 9);
        assert_eq!(fraction_bin(Ratio::new(99, 100)), 9);
    }

    #[test]
    fn empty_summary_has_undefined_rate() {
        let s = summarize::<i64>(&[]).unwrap();
        assert_eq!(s.n_episodes, 0);
        assert_eq!(s.rate, None);
        assert_eq!(s.rate_text(), "NA");
    }
}
