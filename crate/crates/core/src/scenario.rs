//! Scenario geometry, reward tables and spawn plans.
//!
//! Two scenarios are built in: an unsignalized intersection on a 9×9 grid
//! where a west→east road (row 5) crosses a north→south road (column 5), and
//! a two-lane southbound highway on a 9-row × 2-column grid. Background
//! vehicles are placed downstream of the strategic agents, alternating
//! between roads (or lanes) and spread as evenly as the free cells allow.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, GridSize, Heading, Role, Status, VehicleId};
use crate::scalar::{partial_min, RewardScalar};
use crate::world::{TerminalFlag, VehicleState, WorldState};

pub const DEFAULT_STEP_CAP: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Intersection,
    Platoon,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Platoon => "platoon",
        })
    }
}

/// A straight one-way road: either a whole row driven eastward or a whole
/// column driven southward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Road {
    East { row: u32 },
    South { col: u32 },
}

impl Road {
    pub fn heading(self) -> Heading {
        match self {
            Road::East { .. } => Heading::East,
            Road::South { .. } => Heading::South,
        }
    }

    pub fn contains(self, cell: Cell) -> bool {
        match self {
            Road::East { row } => cell.row == row,
            Road::South { col } => cell.col == col,
        }
    }

    pub fn exit(self, grid: GridSize) -> Cell {
        match self {
            Road::East { row } => Cell::new(row, grid.cols),
            Road::South { col } => Cell::new(grid.rows, col),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub id: VehicleId,
    pub color: String,
    pub role: Role,
    pub heading: Heading,
    pub start: Cell,
    pub finish: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct RewardSpec<R> {
    pub go_cost: R,
    pub stop_cost: R,
    /// Only meaningful when the scenario has parallel lanes.
    #[serde(default)]
    pub lane_change_cost: Option<R>,
    pub crash_penalty: R,
    #[serde(default)]
    pub platoon_bonus: Option<R>,
}

impl<R: RewardScalar> RewardSpec<R> {
    pub fn action_cost(&self, action: Action) -> R {
        match action {
            Action::Go => self.go_cost,
            Action::Stop => self.stop_cost,
            Action::LaneChange => self.lane_change_cost.unwrap_or_else(R::zero),
        }
    }

    fn apply(&mut self, o: &RewardOverrides<R>) {
        if let Some(v) = o.go_cost {
            self.go_cost = v;
        }
        if let Some(v) = o.stop_cost {
            self.stop_cost = v;
        }
        if let Some(v) = o.lane_change_cost {
            self.lane_change_cost = Some(v);
        }
        if let Some(v) = o.crash_penalty {
            self.crash_penalty = v;
        }
        if let Some(v) = o.platoon_bonus {
            self.platoon_bonus = Some(v);
        }
    }
}

/// Partial reward table; unset fields keep the scenario default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct RewardOverrides<R> {
    #[serde(default)]
    pub go_cost: Option<R>,
    #[serde(default)]
    pub stop_cost: Option<R>,
    #[serde(default)]
    pub lane_change_cost: Option<R>,
    #[serde(default)]
    pub crash_penalty: Option<R>,
    #[serde(default)]
    pub platoon_bonus: Option<R>,
}

impl<R> Default for RewardOverrides<R> {
    fn default() -> Self {
        RewardOverrides {
            go_cost: None,
            stop_cost: None,
            lane_change_cost: None,
            crash_penalty: None,
            platoon_bonus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct ScenarioSpec<R> {
    pub name: ScenarioKind,
    pub grid: GridSize,
    pub roads: Vec<Road>,
    pub routes: Vec<Route>,
    pub reward: RewardSpec<R>,
    #[serde(default)]
    pub conflict_cells: BTreeSet<Cell>,
    /// Columns of parallel southbound lanes.
    #[serde(default)]
    pub lanes: BTreeSet<u32>,
    /// Largest row gap between strategic vehicles that still counts as a
    /// platoon. `None` means any gap.
    #[serde(default)]
    pub platoon_max_gap: Option<u32>,
    pub n_background: u32,
    #[serde(default = "default_step_cap")]
    pub step_cap: u32,
    #[serde(default = "default_true")]
    pub swap_is_crash: bool,
}

fn default_step_cap() -> u32 {
    DEFAULT_STEP_CAP
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("SpawnOverflow: {0}")]
    SpawnOverflow(String),
    #[error("invalid route for {id}: {reason}")]
    InvalidRoute { id: VehicleId, reason: String },
    #[error("duplicate vehicle id {0}")]
    DuplicateId(VehicleId),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid reward table: {0}")]
    InvalidReward(String),
    #[error("WrongScenario: expected {expected}, got {actual}")]
    WrongScenario {
        expected: ScenarioKind,
        actual: ScenarioKind,
    },
}

impl<R: RewardScalar> ScenarioSpec<R> {
    /// The lane a vehicle in column `col` would switch into.
    pub fn other_lane(&self, col: u32) -> Option<u32> {
        if self.lanes.len() != 2 || !self.lanes.contains(&col) {
            return None;
        }
        self.lanes.iter().copied().find(|&c| c != col)
    }

    pub fn route(&self, id: &VehicleId) -> Option<&Route> {
        self.routes.iter().find(|r| &r.id == id)
    }

    /// World state at time step 0 with every vehicle at its spawn cell.
    pub fn initial_state(&self) -> WorldState<R> {
        let vehicles = self
            .routes
            .iter()
            .map(|r| {
                (
                    r.id.clone(),
                    VehicleState {
                        id: r.id.clone(),
                        color: r.color.clone(),
                        role: r.role,
                        position: r.start,
                        heading: r.heading,
                        cumulative_reward: R::zero(),
                        status: Status::Active,
                    },
                )
            })
            .collect();
        WorldState {
            time_step: 0,
            vehicles,
            terminal_flag: TerminalFlag::Running,
        }
    }

    pub fn strategic_colors(&self) -> Vec<String> {
        let mut colors: Vec<String> = self
            .routes
            .iter()
            .filter(|r| r.role == Role::Strategic)
            .map(|r| r.color.clone())
            .collect();
        colors.sort();
        colors.dedup();
        colors
    }

    /// Checks geometry, routes, spawn cells and the reward table.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let expected = match self.name {
            ScenarioKind::Intersection => GridSize::new(9, 9),
            ScenarioKind::Platoon => GridSize::new(9, 2),
        };
        if self.grid != expected {
            return Err(ScenarioError::InvalidGeometry(format!(
                "{} grid must be {}x{}, got {}x{}",
                self.name, expected.rows, expected.cols, self.grid.rows, self.grid.cols
            )));
        }
        validate_layout(self)?;

        let r = &self.reward;
        let mut costs = vec![r.go_cost, r.stop_cost];
        if !self.lanes.is_empty() {
            costs.push(r.lane_change_cost.unwrap_or_else(R::zero));
        }
        let min_cost = partial_min(&costs).expect("non-empty");
        if r.crash_penalty > min_cost {
            return Err(ScenarioError::InvalidReward(format!(
                "crash_penalty {} exceeds the cheapest action cost {}",
                r.crash_penalty, min_cost
            )));
        }
        if self.name == ScenarioKind::Platoon && r.lane_change_cost.is_none() {
            return Err(ScenarioError::InvalidReward(
                "lane_change_cost is required for the platoon scenario".into(),
            ));
        }
        let n_bg = self.routes.iter().filter(|r| r.role == Role::Background).count();
        if n_bg as u32 != self.n_background {
            return Err(ScenarioError::InvalidGeometry(format!(
                "n_background is {} but {} background routes are declared",
                self.n_background, n_bg
            )));
        }
        if self.step_cap == 0 {
            return Err(ScenarioError::InvalidGeometry("step_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Layout checks that apply to any grid size.
pub fn validate_layout<R: RewardScalar>(spec: &ScenarioSpec<R>) -> Result<(), ScenarioError> {
    let grid = spec.grid;
    for road in &spec.roads {
        let ok = match *road {
            Road::East { row } => (1..=grid.rows).contains(&row),
            Road::South { col } => (1..=grid.cols).contains(&col),
        };
        if !ok {
            return Err(ScenarioError::InvalidGeometry(format!("road {road:?} is off the grid")));
        }
    }
    if spec.lanes.len() > 2 {
        return Err(ScenarioError::InvalidGeometry("at most two lanes are supported".into()));
    }
    for lane in &spec.lanes {
        if !spec.roads.contains(&Road::South { col: *lane }) {
            return Err(ScenarioError::InvalidGeometry(format!(
                "lane column {lane} is not a southbound road"
            )));
        }
    }
    for c in &spec.conflict_cells {
        if !grid.contains(*c) {
            return Err(ScenarioError::InvalidGeometry(format!(
                "conflict cell {c} is off the grid"
            )));
        }
    }

    let mut ids = BTreeSet::new();
    let mut spawns: BTreeMap<Cell, &VehicleId> = BTreeMap::new();
    for r in &spec.routes {
        if !ids.insert(&r.id) {
            return Err(ScenarioError::DuplicateId(r.id.clone()));
        }
        let bad = |reason: String| ScenarioError::InvalidRoute {
            id: r.id.clone(),
            reason,
        };
        let road = spec
            .roads
            .iter()
            .copied()
            .find(|rd| rd.heading() == r.heading && rd.contains(r.start))
            .ok_or_else(|| bad(format!("start {} is not on a {:?}-bound road", r.start, r.heading)))?;
        if !grid.contains(r.start) {
            return Err(bad(format!("start {} is off the grid", r.start)));
        }
        if !road.contains(r.finish) || road.exit(grid) != r.finish {
            return Err(bad(format!("finish {} is not the end of its road", r.finish)));
        }
        if r.start == r.finish {
            return Err(bad("start and finish coincide".into()));
        }
        if let Some(other) = spawns.insert(r.start, &r.id) {
            return Err(ScenarioError::SpawnOverflow(format!(
                "vehicles {} and {} both spawn at {}",
                other, r.id, r.start
            )));
        }
    }
    if !spec.routes.iter().any(|r| r.role == Role::Strategic) {
        return Err(ScenarioError::InvalidGeometry("no strategic vehicle declared".into()));
    }
    Ok(())
}

/// Picks `k` of `m` ordered slots, spread as evenly as possible.
fn spread(m: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|j| (2 * (j + 1) * (m + 1) + (k + 1)) / (2 * (k + 1)) - 1)
        .collect()
}

fn background_routes(n_background: u32, lines: &[(Heading, Vec<Cell>, Cell)]) -> Result<Vec<Route>, ScenarioError> {
    let n_lines = lines.len();
    let mut per_line = vec![0usize; n_lines];
    for i in 0..n_background as usize {
        per_line[i % n_lines] += 1;
    }
    let mut placed: Vec<Vec<Cell>> = Vec::with_capacity(n_lines);
    for ((_, slots, _), &k) in lines.iter().zip(&per_line) {
        if k > slots.len() {
            return Err(ScenarioError::SpawnOverflow(format!(
                "{n_background} background vehicles need {k} cells on one road but only {} are free",
                slots.len()
            )));
        }
        placed.push(spread(slots.len(), k).into_iter().map(|i| slots[i]).collect());
    }
    let mut cursors = vec![0usize; n_lines];
    let routes = (0..n_background as usize)
        .map(|i| {
            let line = i % n_lines;
            let (heading, _, finish) = &lines[line];
            let start = placed[line][cursors[line]];
            cursors[line] += 1;
            Route {
                id: VehicleId(format!("bv{}", i + 1)),
                color: "white".into(),
                role: Role::Background,
                heading: *heading,
                start,
                finish: *finish,
            }
        })
        .collect();
    Ok(routes)
}

fn warn_large(n_background: u32) {
    if n_background > 4 {
        log::warn!("{n_background} background vehicles is beyond the studied range of 0-4");
    }
}

/// Unsignalized intersection: green drives row 5 eastward from (5,1), red
/// drives column 5 southward from (1,5); they cross at (5,5).
pub fn build_intersection<R: RewardScalar>(
    n_background: u32,
    overrides: &RewardOverrides<R>,
) -> Result<ScenarioSpec<R>, ScenarioError> {
    warn_large(n_background);
    let grid = GridSize::new(9, 9);
    let conflict = Cell::new(5, 5);
    let mut reward = RewardSpec {
        go_cost: R::from_units(-2),
        stop_cost: R::from_units(-2),
        lane_change_cost: None,
        crash_penalty: R::from_units(-5),
        platoon_bonus: None,
    };
    reward.apply(overrides);

    let east_exit = Cell::new(5, 9);
    let south_exit = Cell::new(9, 5);
    let mut routes = vec![
        Route {
            id: "green".into(),
            color: "green".into(),
            role: Role::Strategic,
            heading: Heading::East,
            start: Cell::new(5, 1),
            finish: east_exit,
        },
        Route {
            id: "red".into(),
            color: "red".into(),
            role: Role::Strategic,
            heading: Heading::South,
            start: Cell::new(1, 5),
            finish: south_exit,
        },
    ];
    let lines = [
        (
            Heading::East,
            (conflict.col + 1..grid.cols).map(|c| Cell::new(5, c)).collect(),
            east_exit,
        ),
        (
            Heading::South,
            (conflict.row + 1..grid.rows).map(|r| Cell::new(r, 5)).collect(),
            south_exit,
        ),
    ];
    routes.extend(background_routes(n_background, &lines)?);

    let spec = ScenarioSpec {
        name: ScenarioKind::Intersection,
        grid,
        roads: vec![Road::East { row: 5 }, Road::South { col: 5 }],
        routes,
        reward,
        conflict_cells: [conflict].into_iter().collect(),
        lanes: BTreeSet::new(),
        platoon_max_gap: None,
        n_background,
        step_cap: DEFAULT_STEP_CAP,
        swap_is_crash: true,
    };
    spec.validate()?;
    Ok(spec)
}

/// Two-lane southbound highway: red starts at (1,1), green at (1,2).
pub fn build_platoon<R: RewardScalar>(
    n_background: u32,
    overrides: &RewardOverrides<R>,
) -> Result<ScenarioSpec<R>, ScenarioError> {
    warn_large(n_background);
    let grid = GridSize::new(9, 2);
    let mut reward = RewardSpec {
        go_cost: R::from_units(-4),
        stop_cost: R::from_units(-4),
        lane_change_cost: Some(R::from_units(-4)),
        crash_penalty: R::from_units(-5),
        platoon_bonus: Some(R::from_units(2)),
    };
    reward.apply(overrides);

    let lane_exit = |col| Cell::new(grid.rows, col);
    let mut routes = vec![
        Route {
            id: "red".into(),
            color: "red".into(),
            role: Role::Strategic,
            heading: Heading::South,
            start: Cell::new(1, 1),
            finish: lane_exit(1),
        },
        Route {
            id: "green".into(),
            color: "green".into(),
            role: Role::Strategic,
            heading: Heading::South,
            start: Cell::new(1, 2),
            finish: lane_exit(2),
        },
    ];
    let lines: Vec<(Heading, Vec<Cell>, Cell)> = [1u32, 2]
        .iter()
        .map(|&col| {
            (
                Heading::South,
                (2..grid.rows).map(|r| Cell::new(r, col)).collect(),
                lane_exit(col),
            )
        })
        .collect();
    routes.extend(background_routes(n_background, &lines)?);

    let spec = ScenarioSpec {
        name: ScenarioKind::Platoon,
        grid,
        roads: vec![Road::South { col: 1 }, Road::South { col: 2 }],
        routes,
        reward,
        conflict_cells: BTreeSet::new(),
        lanes: [1, 2].into_iter().collect(),
        platoon_max_gap: None,
        n_background,
        step_cap: DEFAULT_STEP_CAP,
        swap_is_crash: true,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build<R: RewardScalar>(
    kind: ScenarioKind,
    n_background: u32,
    overrides: &RewardOverrides<R>,
) -> Result<ScenarioSpec<R>, ScenarioError> {
    match kind {
        ScenarioKind::Intersection => build_intersection(n_background, overrides),
        ScenarioKind::Platoon => build_platoon(n_background, overrides),
    }
}

pub fn legal_actions<R: RewardScalar>(spec: &ScenarioSpec<R>, vehicle: &VehicleState<R>) -> BTreeSet<Action> {
    if !vehicle.is_active() {
        return BTreeSet::new();
    }
    let mut legal: BTreeSet<Action> = [Action::Go, Action::Stop].into_iter().collect();
    if spec.lanes.len() >= 2 {
        legal.insert(Action::LaneChange);
    }
    legal
}

/// True when at least two strategic vehicles are active, all share one lane,
/// and (if configured) no two are further apart than the platoon gap.
pub fn is_platoon<R: RewardScalar>(state: &WorldState<R>, spec: &ScenarioSpec<R>) -> Result<bool, ScenarioError> {
    if spec.name != ScenarioKind::Platoon {
        return Err(ScenarioError::WrongScenario {
            expected: ScenarioKind::Platoon,
            actual: spec.name,
        });
    }
    let members: Vec<Cell> = state
        .active()
        .filter(|v| v.role == Role::Strategic)
        .map(|v| v.position)
        .collect();
    if members.len() < 2 {
        return Ok(false);
    }
    let lane = members[0].col;
    if !spec.lanes.contains(&lane) || members.iter().any(|c| c.col != lane) {
        return Ok(false);
    }
    if let Some(gap) = spec.platoon_max_gap {
        let mut rows: Vec<u32> = members.iter().map(|c| c.row).collect();
        rows.sort_unstable();
        if rows.windows(2).any(|w| w[1] - w[0] > gap) {
            return Ok(false);
        }
    }
    Ok(true)
}
