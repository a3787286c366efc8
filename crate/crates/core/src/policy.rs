//! Observations and the non-LLM decision rules.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, Heading, Role, Status, VehicleId};
use crate::scalar::RewardScalar;
use crate::scenario::{legal_actions, ScenarioKind, ScenarioSpec};
use crate::world::WorldState;

/// Another vehicle as seen by an agent: colour and location, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtherVehicle {
    pub color: String,
    pub position: Cell,
}

/// What one agent can see at the start of a time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct Observation<R> {
    pub self_id: VehicleId,
    pub self_color: String,
    pub self_role: Role,
    pub self_position: Cell,
    pub self_heading: Heading,
    pub self_cumulative_reward: R,
    /// Sorted by colour, then position.
    pub others: Vec<OtherVehicle>,
    pub time_step: u32,
    pub legal: BTreeSet<Action>,
}

impl<R> Observation<R> {
    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.others.iter().any(|o| o.position == cell)
    }

    pub fn cell_ahead(&self) -> Cell {
        self.self_position.ahead(self.self_heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionSource {
    Scripted,
    RuleBased,
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decision {
    pub action: Action,
    pub source: DecisionSource,
    #[serde(default)]
    pub raw_response: Option<String>,
    #[serde(default)]
    pub latency_ms: Option<u64>,
}

impl Decision {
    pub fn new(action: Action, source: DecisionSource) -> Self {
        Decision {
            action,
            source,
            raw_response: None,
            latency_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObserveError {
    #[error("UnknownVehicle: {0}")]
    UnknownVehicle(VehicleId),
    #[error("InactiveVehicle: {0} is no longer in the game")]
    InactiveVehicle(VehicleId),
}

/// Builds the private observation of `id`. Completed vehicles are invisible
/// and other vehicles' rewards are never included.
pub fn observe<R: RewardScalar>(
    state: &WorldState<R>,
    id: &VehicleId,
    spec: &ScenarioSpec<R>,
) -> Result<Observation<R>, ObserveError> {
    let me = state
        .vehicle(id)
        .ok_or_else(|| ObserveError::UnknownVehicle(id.clone()))?;
    if !me.is_active() {
        return Err(ObserveError::InactiveVehicle(id.clone()));
    }
    let mut others: Vec<OtherVehicle> = state
        .vehicles
        .values()
        .filter(|v| &v.id != id && v.status != Status::Completed)
        .map(|v| OtherVehicle {
            color: v.color.clone(),
            position: v.position,
        })
        .collect();
    others.sort();
    Ok(Observation {
        self_id: me.id.clone(),
        self_color: me.color.clone(),
        self_role: me.role,
        self_position: me.position,
        self_heading: me.heading,
        self_cumulative_reward: me.cumulative_reward,
        others,
        time_step: state.time_step,
        legal: legal_actions(spec, me),
    })
}

/// Go unless the cell ahead is occupied.
pub fn background_policy<R>(obs: &Observation<R>) -> Decision {
    let action = if obs.is_occupied(obs.cell_ahead()) {
        Action::Stop
    } else {
        Action::Go
    };
    Decision::new(action, DecisionSource::Scripted)
}

/// Parameters of the scripted strategic baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineParams {
    /// Strategic colours, highest right of way first. Colours not listed
    /// (background vehicles) are always yielded to.
    #[serde(default = "default_priority")]
    pub priority: Vec<String>,
    /// Colour of the agent that changes lanes to join the other.
    #[serde(default = "default_joiner")]
    pub joiner: String,
}

fn default_priority() -> Vec<String> {
    vec!["green".into(), "red".into()]
}

fn default_joiner() -> String {
    "green".into()
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            priority: default_priority(),
            joiner: default_joiner(),
        }
    }
}

impl BaselineParams {
    fn rank(&self, color: &str) -> Option<usize> {
        self.priority.iter().position(|c| c == color)
    }

    /// Whether a vehicle of colour `other` goes before one of colour `me`.
    fn yields_to(&self, me: &str, other: &str) -> bool {
        match (self.rank(me), self.rank(other)) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => b < a,
        }
    }
}

/// Crash-free stand-in for a model-driven strategic agent.
///
/// Intersection: drive forward unless blocked; at the approach cell, wait
/// while a higher-priority vehicle also waits at an approach cell of the
/// same crossing. Platoon: the joiner switches into the other strategic
/// vehicle's lane once that vehicle is strictly ahead and both the target
/// cell and the cell behind it are free, waiting while level with it.
pub fn rule_based_strategic<R: RewardScalar>(
    obs: &Observation<R>,
    spec: &ScenarioSpec<R>,
    params: &BaselineParams,
) -> Decision {
    let action = match spec.name {
        ScenarioKind::Intersection => intersection_rule(obs, spec, params),
        ScenarioKind::Platoon => platoon_rule(obs, params),
    };
    Decision::new(action, DecisionSource::RuleBased)
}

fn intersection_rule<R: RewardScalar>(obs: &Observation<R>, spec: &ScenarioSpec<R>, params: &BaselineParams) -> Action {
    let ahead = obs.cell_ahead();
    if obs.is_occupied(ahead) {
        return Action::Stop;
    }
    if spec.conflict_cells.contains(&ahead) {
        let entries = [Heading::East, Heading::South]
            .into_iter()
            .filter_map(|h| ahead.behind(h))
            .filter(|c| *c != obs.self_position);
        for entry in entries {
            let rival = obs.others.iter().find(|o| o.position == entry);
            if let Some(rival) = rival {
                if params.yields_to(&obs.self_color, &rival.color) {
                    return Action::Stop;
                }
            }
        }
    }
    Action::Go
}

fn platoon_rule<R: RewardScalar>(obs: &Observation<R>, params: &BaselineParams) -> Action {
    let go_unless_blocked = if obs.is_occupied(obs.cell_ahead()) {
        Action::Stop
    } else {
        Action::Go
    };
    if obs.self_color != params.joiner || !obs.legal.contains(&Action::LaneChange) {
        return go_unless_blocked;
    }
    let leader = obs
        .others
        .iter()
        .find(|o| o.color != obs.self_color && params.rank(&o.color).is_some());
    let Some(leader) = leader else {
        return go_unless_blocked;
    };
    if leader.position.col == obs.self_position.col {
        return go_unless_blocked;
    }
    let me = obs.self_position;
    if leader.position.row <= me.row {
        return Action::Stop;
    }
    let target = Cell::new(me.row, leader.position.col);
    let behind_target_free = target.behind(obs.self_heading).is_none_or(|c| !obs.is_occupied(c));
    if !obs.is_occupied(target) && behind_target_free {
        Action::LaneChange
    } else {
        go_unless_blocked
    }
}

/// Scripted stand-ins used for experiments and tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    RuleBased {
        #[serde(default)]
        params: BaselineParams,
    },
    Llm,
    AlwaysGo,
    AlwaysStop,
    /// Plays `actions[t]` at time step `t`, then `then` forever.
    Scripted {
        actions: Vec<Action>,
        #[serde(default = "default_then")]
        then: Action,
    },
    /// Uniform choice among legal actions from the episode RNG.
    Random,
    Background,
}

fn default_then() -> Action {
    Action::Stop
}

impl PolicyKind {
    pub fn is_llm(&self) -> bool {
        matches!(self, PolicyKind::Llm)
    }
}

/// Evaluates every non-LLM policy kind. Returns `None` for `Llm`.
pub fn decide_scripted<R: RewardScalar, G: Rng>(
    kind: &PolicyKind,
    obs: &Observation<R>,
    spec: &ScenarioSpec<R>,
    rng: &mut G,
) -> Option<Decision> {
    let pick = |want: Action| {
        if obs.legal.contains(&want) {
            Decision::new(want, DecisionSource::Scripted)
        } else {
            Decision::new(Action::Stop, DecisionSource::Fallback)
        }
    };
    Some(match kind {
        PolicyKind::Llm => return None,
        PolicyKind::RuleBased { params } => rule_based_strategic(obs, spec, params),
        PolicyKind::Background => background_policy(obs),
        PolicyKind::AlwaysGo => pick(Action::Go),
        PolicyKind::AlwaysStop => pick(Action::Stop),
        PolicyKind::Scripted { actions, then } => pick(actions.get(obs.time_step as usize).copied().unwrap_or(*then)),
        PolicyKind::Random => {
            let action = obs.legal.iter().copied().choose(rng).unwrap_or(Action::Stop);
            Decision::new(action, DecisionSource::Scripted)
        }
    })
}
