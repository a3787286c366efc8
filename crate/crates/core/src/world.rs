//! World state and the simultaneous-move transition function.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, Heading, Role, Status, VehicleId};
use crate::scalar::RewardScalar;
use crate::scenario::{is_platoon, legal_actions, ScenarioKind, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct VehicleState<R> {
    pub id: VehicleId,
    pub color: String,
    pub role: Role,
    pub position: Cell,
    pub heading: Heading,
    pub cumulative_reward: R,
    pub status: Status,
}

impl<R> VehicleState<R> {
    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminalFlag {
    Running,
    AllCompleted,
    CrashOccurred,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct WorldState<R> {
    pub time_step: u32,
    pub vehicles: BTreeMap<VehicleId, VehicleState<R>>,
    pub terminal_flag: TerminalFlag,
}

impl<R: RewardScalar> WorldState<R> {
    pub fn vehicle(&self, id: &VehicleId) -> Option<&VehicleState<R>> {
        self.vehicles.get(id)
    }

    pub fn active(&self) -> impl Iterator<Item = &VehicleState<R>> {
        self.vehicles.values().filter(|v| v.is_active())
    }

    /// Canonical text form: compact JSON with keys in a fixed order.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("world state serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct StepOutcome<R> {
    pub next_state: WorldState<R>,
    pub per_vehicle_reward: BTreeMap<VehicleId, R>,
    pub crash_ids: BTreeSet<VehicleId>,
    pub completed_ids: BTreeSet<VehicleId>,
}

impl<R: RewardScalar> StepOutcome<R> {
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("step outcome serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("IllegalAction: {action} is not permitted for vehicle {id}")]
    IllegalAction { id: VehicleId, action: Action },
    #[error("MissingAction: active vehicle {0} has no action")]
    MissingAction(VehicleId),
    #[error("UnexpectedAction: vehicle {0} is not active")]
    UnexpectedAction(VehicleId),
    #[error("StaleState: state is already terminal ({0:?})")]
    StaleState(TerminalFlag),
    #[error("vehicle {id} would leave the grid at {cell}")]
    OffGrid { id: VehicleId, cell: Cell },
}

/// Cell a vehicle tries to occupy after taking `action`.
pub fn intended_cell<R: RewardScalar>(
    vehicle: &VehicleState<R>,
    action: Action,
    scenario: &ScenarioSpec<R>,
) -> Result<Cell, EngineError> {
    let illegal = || EngineError::IllegalAction {
        id: vehicle.id.clone(),
        action,
    };
    if !vehicle.is_active() {
        return Err(illegal());
    }
    let target = match action {
        Action::Go => vehicle.position.ahead(vehicle.heading),
        Action::Stop => vehicle.position,
        Action::LaneChange => {
            let other = scenario
                .other_lane(vehicle.position.col)
                .filter(|_| vehicle.heading == Heading::South)
                .ok_or_else(illegal)?;
            Cell::new(vehicle.position.row, other)
        }
    };
    if !scenario.grid.contains(target) {
        return Err(EngineError::OffGrid {
            id: vehicle.id.clone(),
            cell: target,
        });
    }
    Ok(target)
}

pub fn is_terminal<R>(state: &WorldState<R>) -> bool {
    state.terminal_flag != TerminalFlag::Running
}

/// Advances the game by one time step with every active vehicle moving at once.
///
/// Intended cells are computed from the pre-step state only. Every vehicle
/// whose intended cell is shared with another vehicle crashes, as does any
/// pair trading cells when `swap_is_crash` is set. Crashed vehicles take the
/// crash penalty instead of their action cost.
pub fn apply_actions<R: RewardScalar>(
    state: &WorldState<R>,
    actions: &BTreeMap<VehicleId, Action>,
    scenario: &ScenarioSpec<R>,
) -> Result<StepOutcome<R>, EngineError> {
    if is_terminal(state) {
        return Err(EngineError::StaleState(state.terminal_flag));
    }
    for id in actions.keys() {
        match state.vehicles.get(id) {
            Some(v) if v.is_active() => {}
            _ => return Err(EngineError::UnexpectedAction(id.clone())),
        }
    }

    let mut intents: BTreeMap<&VehicleId, (Action, Cell)> = BTreeMap::new();
    for v in state.active() {
        let action = *actions
            .get(&v.id)
            .ok_or_else(|| EngineError::MissingAction(v.id.clone()))?;
        if !legal_actions(scenario, v).contains(&action) {
            return Err(EngineError::IllegalAction {
                id: v.id.clone(),
                action,
            });
        }
        intents.insert(&v.id, (action, intended_cell(v, action, scenario)?));
    }

    let mut claims: BTreeMap<Cell, Vec<&VehicleId>> = BTreeMap::new();
    for (id, (_, cell)) in &intents {
        claims.entry(*cell).or_default().push(*id);
    }
    let contested: BTreeSet<&VehicleId> = claims.values().filter(|ids| ids.len() > 1).flatten().copied().collect();
    let mut swapped: BTreeSet<&VehicleId> = BTreeSet::new();
    if scenario.swap_is_crash {
        for (a, (_, a_to)) in &intents {
            for (b, (_, b_to)) in &intents {
                if a < b && *a_to == state.vehicles[*b].position && *b_to == state.vehicles[*a].position {
                    swapped.insert(a);
                    swapped.insert(b);
                }
            }
        }
    }
    // A vehicle in both sets is drawn at its contested cell.
    swapped.retain(|id| !contested.contains(id));

    let reward = &scenario.reward;
    let mut next = state.clone();
    let mut per_vehicle_reward = BTreeMap::new();
    let mut crash_ids = BTreeSet::new();
    let mut completed_ids = BTreeSet::new();

    for (id, (action, target)) in &intents {
        let v = next.vehicles.get_mut(*id).expect("active vehicle present");
        let crashed = contested.contains(id) || swapped.contains(id);
        let step_reward = if crashed {
            reward.crash_penalty
        } else {
            reward.action_cost(*action)
        };
        if !swapped.contains(id) {
            v.position = *target;
        }
        if crashed {
            v.status = Status::Crashed;
            crash_ids.insert((*id).clone());
        } else if scenario.grid.is_exit(v.position, v.heading) {
            v.status = Status::Completed;
            completed_ids.insert((*id).clone());
        }
        per_vehicle_reward.insert((*id).clone(), step_reward);
    }

    if scenario.name == ScenarioKind::Platoon {
        if let Some(bonus) = reward.platoon_bonus {
            if is_platoon(&next, scenario).unwrap_or(false) {
                for v in next.active().filter(|v| v.role == Role::Strategic) {
                    *per_vehicle_reward.get_mut(&v.id).expect("rewarded") += bonus;
                }
            }
        }
    }

    for (id, r) in &per_vehicle_reward {
        next.vehicles.get_mut(id).expect("present").cumulative_reward += *r;
    }
    next.time_step = state.time_step + 1;
    next.terminal_flag = if next.vehicles.values().any(|v| v.status == Status::Crashed) {
        TerminalFlag::CrashOccurred
    } else if next.vehicles.values().all(|v| v.status == Status::Completed) {
        TerminalFlag::AllCompleted
    } else if next.time_step >= scenario.step_cap {
        TerminalFlag::TimedOut
    } else {
        TerminalFlag::Running
    };

    Ok(StepOutcome {
        next_state: next,
        per_vehicle_reward,
        crash_ids,
        completed_ids,
    })
}
