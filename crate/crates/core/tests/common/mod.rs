//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use roadnorms::grid::{Action, Cell, GridSize, Heading, Role, Status, VehicleId};
use roadnorms::llm::{ChatExchange, ChatProvider, ExchangeRequest, ProviderConfig, ProviderError};
use roadnorms::orchestrator::{replay, run_episode, EpisodeConfig, EpisodeLog};
use roadnorms::policy::PolicyKind;
use roadnorms::prompt::RenderedPrompt;
use roadnorms::scenario::{build, legal_actions, RewardOverrides, RewardSpec, Road, ScenarioKind, ScenarioSpec};
use roadnorms::world::{apply_actions, EngineError, TerminalFlag, VehicleState, WorldState};
use roadnorms::Reward;

// ---------------------------------------------------------------------------
// Brute-force transition oracle on tiny grids.

pub struct Tiny {
    pub name: &'static str,
    pub spec: ScenarioSpec<Reward>,
    /// Every (cell, heading) a vehicle may be placed at.
    pub placements: Vec<(Cell, Heading)>,
}

fn tiny_spec(kind: ScenarioKind, grid: GridSize, roads: Vec<Road>, swap: bool) -> ScenarioSpec<Reward> {
    let lanes: BTreeSet<u32> = roads
        .iter()
        .filter_map(|r| match r {
            Road::South { col } if kind == ScenarioKind::Platoon => Some(*col),
            _ => None,
        })
        .collect();
    let conflict_cells = match (roads.as_slice(), kind) {
        ([Road::East { row }, Road::South { col }], ScenarioKind::Intersection) => {
            [Cell::new(*row, *col)].into_iter().collect()
        }
        _ => BTreeSet::new(),
    };
    ScenarioSpec {
        name: kind,
        grid,
        roads,
        routes: Vec::new(),
        reward: RewardSpec {
            go_cost: -2,
            stop_cost: -3,
            lane_change_cost: (kind == ScenarioKind::Platoon).then_some(-4),
            crash_penalty: -5,
            platoon_bonus: None,
        },
        conflict_cells,
        lanes,
        platoon_max_gap: None,
        n_background: 0,
        step_cap: 30,
        swap_is_crash: swap,
    }
}

pub fn tiny_scenarios() -> Vec<Tiny> {
    let mut out = Vec::new();
    for swap in [true, false] {
        out.push(Tiny {
            name: "1x3 single road",
            spec: tiny_spec(
                ScenarioKind::Intersection,
                GridSize::new(1, 3),
                vec![Road::East { row: 1 }],
                swap,
            ),
            placements: (1..=3).map(|c| (Cell::new(1, c), Heading::East)).collect(),
        });
        out.push(Tiny {
            name: "3x3 crossing",
            spec: tiny_spec(
                ScenarioKind::Intersection,
                GridSize::new(3, 3),
                vec![Road::East { row: 2 }, Road::South { col: 2 }],
                swap,
            ),
            placements: (1..=3)
                .map(|c| (Cell::new(2, c), Heading::East))
                .chain((1..=3).map(|r| (Cell::new(r, 2), Heading::South)))
                .collect(),
        });
        out.push(Tiny {
            name: "3x3 two lanes",
            spec: tiny_spec(
                ScenarioKind::Platoon,
                GridSize::new(3, 3),
                vec![Road::South { col: 1 }, Road::South { col: 2 }],
                swap,
            ),
            placements: (1..=3)
                .flat_map(|r| [(Cell::new(r, 1), Heading::South), (Cell::new(r, 2), Heading::South)])
                .collect(),
        });
    }
    out
}

pub fn two_vehicle_state(a: (Cell, Heading), b: (Cell, Heading)) -> WorldState<Reward> {
    let v = |id: &str, (position, heading): (Cell, Heading)| VehicleState {
        id: id.into(),
        color: id.to_owned(),
        role: Role::Strategic,
        position,
        heading,
        cumulative_reward: 0,
        status: Status::Active,
    };
    WorldState {
        time_step: 0,
        vehicles: [("a".into(), v("a", a)), ("b".into(), v("b", b))].into_iter().collect(),
        terminal_flag: TerminalFlag::Running,
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum OracleOutcome {
    OffGrid,
    Moved {
        positions: Vec<Cell>,
        crashed: Vec<bool>,
        completed: Vec<bool>,
        rewards: Vec<Reward>,
    },
}

/// Direct simultaneous-occupancy rule, written without the engine.
pub fn oracle(spec: &ScenarioSpec<Reward>, vehicles: &[(Cell, Heading)], actions: &[Action]) -> OracleOutcome {
    let rows = spec.grid.rows;
    let cols = spec.grid.cols;
    let mut targets = Vec::new();
    for (&(p, h), &a) in vehicles.iter().zip(actions) {
        let (r, c) = match (a, h) {
            (Action::Stop, _) => (p.row, p.col),
            (Action::Go, Heading::East) => (p.row, p.col + 1),
            (Action::Go, Heading::South) => (p.row + 1, p.col),
            (Action::LaneChange, _) => (p.row, if p.col == 1 { 2 } else { 1 }),
        };
        if r > rows || c > cols {
            return OracleOutcome::OffGrid;
        }
        targets.push(Cell::new(r, c));
    }
    let n = vehicles.len();
    let mut positions = Vec::new();
    let mut crashed = Vec::new();
    let mut completed = Vec::new();
    let mut rewards = Vec::new();
    for i in 0..n {
        let shared = (0..n).any(|j| j != i && targets[j] == targets[i]);
        let swapped =
            spec.swap_is_crash && (0..n).any(|j| j != i && targets[i] == vehicles[j].0 && targets[j] == vehicles[i].0);
        let pos = if swapped && !shared { vehicles[i].0 } else { targets[i] };
        let crash = shared || swapped;
        let done = !crash
            && match vehicles[i].1 {
                Heading::East => pos.col == cols,
                Heading::South => pos.row == rows,
            };
        positions.push(pos);
        crashed.push(crash);
        completed.push(done);
        rewards.push(if crash {
            -5
        } else {
            match actions[i] {
                Action::Go => -2,
                Action::Stop => -3,
                Action::LaneChange => -4,
            }
        });
    }
    OracleOutcome::Moved {
        positions,
        crashed,
        completed,
        rewards,
    }
}

// ---------------------------------------------------------------------------
// Random scripted episodes.

pub fn random_policy(rng: &mut ChaCha8Rng, kind: ScenarioKind) -> PolicyKind {
    match rng.random_range(0..5) {
        0 => PolicyKind::Random,
        1 => PolicyKind::RuleBased {
            params: Default::default(),
        },
        2 => PolicyKind::AlwaysGo,
        3 => PolicyKind::AlwaysStop,
        _ => {
            let menu: &[Action] = match kind {
                ScenarioKind::Intersection => &[Action::Go, Action::Stop],
                ScenarioKind::Platoon => &Action::ALL,
            };
            let len = rng.random_range(0..12);
            PolicyKind::Scripted {
                actions: (0..len).map(|_| menu[rng.random_range(0..menu.len())]).collect(),
                then: Action::Go,
            }
        }
    }
}

/// A scripted-policy episode config fully determined by `seed`.
pub fn random_config(seed: u64) -> EpisodeConfig<Reward> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if rng.random_bool(0.5) {
        ScenarioKind::Intersection
    } else {
        ScenarioKind::Platoon
    };
    let n_background = rng.random_range(0..=4);
    let spec = build(kind, n_background, &RewardOverrides::default()).unwrap();
    let bindings = spec
        .routes
        .iter()
        .filter(|r| r.role == Role::Strategic)
        .map(|r| (r.id.clone(), random_policy(&mut rng, kind)))
        .collect();
    let mut cfg = EpisodeConfig::new(spec, bindings);
    cfg.rng_seed = rng.random();
    cfg
}

// ---------------------------------------------------------------------------
// Prompt isolation.

/// Mock model whose every reply carries a token unique to the prompt, so a
/// leaked reply is detectable in later prompts.
pub struct TokenProvider;

impl TokenProvider {
    pub fn token(prompt: &RenderedPrompt) -> String {
        format!("ref{}", &prompt.content_hash()[..16])
    }
}

impl ChatProvider for TokenProvider {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &ProviderConfig) -> Result<ChatExchange, ProviderError> {
        let hash = prompt.content_hash();
        let pick = u8::from_str_radix(&hash[..2], 16).unwrap();
        let action = match pick % 8 {
            0 => "Stop",
            1 if prompt.system_message.contains("Lane change") => "Lane change",
            _ => "Go",
        };
        Ok(ChatExchange {
            request: ExchangeRequest {
                prompt: prompt.clone(),
                provider: cfg.clone(),
            },
            response_text: format!("{action} {}", Self::token(prompt)),
            token_usage: None,
            wall_time_ms: 0,
        })
    }

    fn is_remote(&self) -> bool {
        false
    }
}

pub fn llm_config(kind: ScenarioKind, n_background: u32, seed: u64) -> EpisodeConfig<Reward> {
    let spec = build(kind, n_background, &RewardOverrides::default()).unwrap();
    let mut cfg = EpisodeConfig::uniform(spec, PolicyKind::Llm);
    cfg.provider = Some(ProviderConfig {
        max_retries: 0,
        backoff_base_ms: 0,
        ..Default::default()
    });
    cfg.rng_seed = seed;
    cfg
}

/// Checks every prompt of a log against the state at the start of its step,
/// independently of the prompt renderer. Returns one line per violation.
pub fn isolation_violations(log: &EpisodeLog<Reward>) -> Vec<String> {
    let mut out = Vec::new();
    let states = log.states();
    for (t, step) in log.steps.iter().enumerate() {
        let before = &states[t];
        let step_tokens: Vec<(VehicleId, String)> = step
            .turns
            .iter()
            .flat_map(|(id, turn)| {
                turn.exchanges
                    .iter()
                    .filter_map(|ex| ex.response_text.split_whitespace().last().map(str::to_owned))
                    .map(move |tok| (id.clone(), tok))
            })
            .collect();
        for v in before.vehicles.values().filter(|v| v.status != Status::Active) {
            if step.turns.contains_key(&v.id) {
                out.push(format!("step {t}: finished vehicle {} was prompted", v.id));
            }
        }
        for (id, turn) in &step.turns {
            let Some(prompt) = &turn.prompt else { continue };
            let full = format!("{}\n{}", prompt.system_message, prompt.user_message);
            for (other, tok) in &step_tokens {
                if other != id && full.contains(tok.as_str()) {
                    out.push(format!("step {t}: prompt of {id} contains a reply of {other}"));
                }
            }
            let me = &before.vehicles[id];
            let user = &prompt.user_message;
            if user.matches("reward").count() != 1
                || !user.contains(&format!("cumulative reward is {}.", me.cumulative_reward))
            {
                out.push(format!("step {t}: prompt of {id} shows a reward other than its own"));
            }
            let mut expected: Vec<String> = before
                .vehicles
                .values()
                .filter(|v| &v.id != id && v.status != Status::Completed)
                .map(|v| format!("There is a {} car at ({},{}).", v.color, v.position.row, v.position.col))
                .collect();
            let mut seen: Vec<String> = user
                .lines()
                .filter(|l| l.starts_with("There is a"))
                .map(str::to_owned)
                .collect();
            expected.sort();
            seen.sort();
            if expected != seen {
                out.push(format!(
                    "step {t}: prompt of {id} lists {seen:?}, expected {expected:?}"
                ));
            }
            for v in before.vehicles.values().filter(|v| v.status == Status::Completed) {
                let unique = before.vehicles.values().filter(|w| w.color == v.color).count() == 1;
                if unique && user.contains(&v.color) {
                    out.push(format!("step {t}: prompt of {id} mentions finished vehicle {}", v.id));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Hand-traced metric fixtures.

pub struct MetricFixture {
    pub name: &'static str,
    pub log: EpisodeLog<Reward>,
    pub early_stops: Option<BTreeMap<&'static str, u32>>,
    pub yield_events: Option<Vec<(&'static str, u32)>>,
    pub lane_changes: Option<Vec<(&'static str, u32)>>,
    /// (success, platoon steps, counted steps)
    pub platoon: Option<(bool, u32, u32)>,
    pub adherent: bool,
}

fn scripted(actions: &[Action], then: Action) -> PolicyKind {
    PolicyKind::Scripted {
        actions: actions.to_vec(),
        then,
    }
}

fn play(kind: ScenarioKind, green: PolicyKind, red: PolicyKind, step_cap: Option<u32>) -> EpisodeLog<Reward> {
    let spec = build(kind, 0, &RewardOverrides::default()).unwrap();
    let bindings = [("green".into(), green), ("red".into(), red)].into_iter().collect();
    let mut cfg = EpisodeConfig::new(spec, bindings);
    cfg.step_cap = step_cap;
    run_episode(&cfg, None).unwrap()
}

pub fn metric_fixtures() -> Vec<MetricFixture> {
    use Action::{Go, LaneChange as Lane, Stop};
    let inter = ScenarioKind::Intersection;
    let plat = ScenarioKind::Platoon;
    let stops = |g: u32, r: u32| Some([("green", g), ("red", r)].into_iter().collect());
    vec![
        // Neither car slows down; both enter (5,5) on the fourth move.
        MetricFixture {
            name: "crash without early stops",
            log: play(inter, PolicyKind::AlwaysGo, PolicyKind::AlwaysGo, None),
            early_stops: stops(0, 0),
            yield_events: Some(vec![]),
            lane_changes: None,
            platoon: None,
            adherent: false,
        },
        // Red waits twice at (2,5), green twice at (5,4); both move into
        // (5,5) at t=5.
        MetricFixture {
            name: "crash after early stops",
            log: play(
                inter,
                scripted(&[Go, Go, Go, Stop, Stop, Go], Go),
                scripted(&[Go, Stop, Stop, Go, Go, Go], Go),
                None,
            ),
            early_stops: stops(0, 2),
            yield_events: Some(vec![]),
            lane_changes: None,
            platoon: None,
            adherent: false,
        },
        MetricFixture {
            name: "red stops once at (2,5)",
            log: play(inter, PolicyKind::AlwaysGo, scripted(&[Go, Stop], Go), None),
            early_stops: stops(0, 1),
            yield_events: Some(vec![]),
            lane_changes: None,
            platoon: None,
            adherent: true,
        },
        MetricFixture {
            name: "red yields at the approach cell",
            log: play(
                inter,
                PolicyKind::AlwaysGo,
                scripted(&[Go, Go, Go, Stop, Stop], Go),
                None,
            ),
            early_stops: stops(0, 0),
            yield_events: Some(vec![("red", 3)]),
            lane_changes: None,
            platoon: None,
            adherent: true,
        },
        // Stops at (1,5), (3,5) and (4,5).
        MetricFixture {
            name: "stops at three distances",
            log: play(
                inter,
                PolicyKind::AlwaysGo,
                scripted(&[Stop, Go, Go, Stop, Go, Stop], Go),
                None,
            ),
            early_stops: stops(0, 2),
            yield_events: Some(vec![]),
            lane_changes: None,
            platoon: None,
            adherent: true,
        },
        MetricFixture {
            name: "mutual stop until the cap",
            log: play(inter, PolicyKind::AlwaysStop, PolicyKind::AlwaysStop, None),
            early_stops: stops(30, 30),
            yield_events: Some(vec![]),
            lane_changes: None,
            platoon: None,
            adherent: false,
        },
        // Green merges behind red at t=1; red finishes at t=7.
        MetricFixture {
            name: "single lane change at t=1",
            log: play(plat, scripted(&[Stop, Lane], Go), PolicyKind::AlwaysGo, None),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![("green", 1)]),
            platoon: Some((true, 6, 7)),
            adherent: true,
        },
        MetricFixture {
            name: "platoon every counted step",
            log: play(plat, scripted(&[Lane], Go), PolicyKind::AlwaysGo, None),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![("green", 0)]),
            platoon: Some((true, 7, 7)),
            adherent: true,
        },
        MetricFixture {
            name: "lane changes at t=2,3,3",
            log: play(
                plat,
                scripted(&[Go, Stop, Lane, Lane], Go),
                scripted(&[Go, Go, Go, Lane], Go),
                None,
            ),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![("green", 2), ("green", 3), ("red", 3)]),
            platoon: Some((true, 6, 8)),
            adherent: true,
        },
        // Platoon after t=0, then green drives into red at t=1.
        MetricFixture {
            name: "platoon then crash",
            log: play(plat, scripted(&[Lane, Go], Go), scripted(&[Go, Stop], Go), None),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![("green", 0)]),
            platoon: Some((false, 1, 2)),
            adherent: false,
        },
        MetricFixture {
            name: "platoon three of five steps",
            log: play(
                plat,
                scripted(&[Lane, Lane, Go, Lane], Go),
                PolicyKind::AlwaysGo,
                Some(5),
            ),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![("green", 0), ("green", 1), ("green", 3)]),
            platoon: Some((false, 3, 5)),
            adherent: false,
        },
        MetricFixture {
            name: "parallel lanes, no platoon",
            log: play(plat, PolicyKind::AlwaysGo, PolicyKind::AlwaysGo, None),
            early_stops: None,
            yield_events: None,
            lane_changes: Some(vec![]),
            platoon: Some((false, 0, 7)),
            adherent: true,
        },
    ]
}

pub fn fraction(platoon_steps: u32, counted: u32) -> Ratio<u32> {
    if counted == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(platoon_steps, counted)
    }
}

/// Early stops by a plain scan of (decision, position) pairs, using the
/// fixed road layout of the intersection.
pub fn scan_early_stops(log: &EpisodeLog<Reward>, color: &str) -> u32 {
    let mut n = 0;
    for step in &log.steps {
        for turn in step.turns.values() {
            let o = &turn.observation;
            if o.self_color != color || turn.decision.action != Action::Stop {
                continue;
            }
            let p = o.self_position;
            let before_approach = match o.self_heading {
                Heading::South => p.col == 5 && p.row < 4,
                Heading::East => p.row == 5 && p.col < 4,
            };
            if before_approach {
                n += 1;
            }
        }
    }
    n
}

// ---------------------------------------------------------------------------
// Response corpus.

#[derive(Debug, Deserialize)]
pub struct CorpusCase {
    pub text: String,
    pub legal: BTreeSet<Action>,
    pub expected: Option<Action>,
}

pub fn response_corpus() -> Vec<CorpusCase> {
    serde_json::from_str(include_str!("../data/response_corpus.json")).unwrap()
}

// ---------------------------------------------------------------------------
// Shared sweeps.

/// Runs every two-vehicle placement and joint action on the tiny grids and
/// returns (cases checked, disagreements).
pub fn oracle_sweep() -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for tiny in tiny_scenarios() {
        for &pa in &tiny.placements {
            for &pb in &tiny.placements {
                if pa.0 == pb.0 {
                    continue;
                }
                let state = two_vehicle_state(pa, pb);
                let legal_a = legal_actions(&tiny.spec, &state.vehicles[&VehicleId::from("a")]);
                let legal_b = legal_actions(&tiny.spec, &state.vehicles[&VehicleId::from("b")]);
                for &aa in &legal_a {
                    for &ab in &legal_b {
                        checked += 1;
                        let actions: BTreeMap<VehicleId, Action> =
                            [("a".into(), aa), ("b".into(), ab)].into_iter().collect();
                        let got = apply_actions(&state, &actions, &tiny.spec);
                        let want = oracle(&tiny.spec, &[pa, pb], &[aa, ab]);
                        let agree = match (&got, &want) {
                            (Err(EngineError::OffGrid { .. }), OracleOutcome::OffGrid) => true,
                            (
                                Ok(out),
                                OracleOutcome::Moved {
                                    positions,
                                    crashed,
                                    completed,
                                    rewards,
                                },
                            ) => ["a", "b"].iter().enumerate().all(|(i, id)| {
                                let id = VehicleId::from(*id);
                                let v = &out.next_state.vehicles[&id];
                                v.position == positions[i]
                                    && (v.status == Status::Crashed) == crashed[i]
                                    && out.crash_ids.contains(&id) == crashed[i]
                                    && (v.status == Status::Completed) == completed[i]
                                    && out.completed_ids.contains(&id) == completed[i]
                                    && out.per_vehicle_reward[&id] == rewards[i]
                            }),
                            _ => false,
                        };
                        if !agree {
                            bad.push(format!(
                                "{} swap={} a={:?}/{aa} b={:?}/{ab}: engine {got:?}, oracle {want:?}",
                                tiny.name, tiny.spec.swap_is_crash, pa, pb
                            ));
                        }
                    }
                }
            }
        }
    }
    (checked, bad)
}

pub fn log_round_trips(seed: u64) -> Result<(), String> {
    let cfg = random_config(seed);
    let log = run_episode(&cfg, None).map_err(|e| e.to_string())?;
    let again = run_episode(&cfg, None).map_err(|e| e.to_string())?;
    let text = log.to_jsonl();
    if text != again.to_jsonl() {
        return Err(format!("seed {seed}: two runs differ"));
    }
    let back = EpisodeLog::<Reward>::from_jsonl(&text).map_err(|e| e.to_string())?;
    if back.to_jsonl() != text {
        return Err(format!("seed {seed}: reserialized log differs"));
    }
    let states = replay(&back).map_err(|e| format!("seed {seed}: {e}"))?;
    if states.last() != Some(&log.final_state) {
        return Err(format!("seed {seed}: replay ends elsewhere"));
    }
    Ok(())
}

/// Compares every metric fixture with its hand trace; one line per mismatch.
pub fn fixture_mismatches(fixtures: &[MetricFixture]) -> Vec<String> {
    use roadnorms::metrics::{count_early_stops, lane_change_events, norm_adherence, platoon_stats, yield_events};
    let owned = |v: &[(&str, u32)]| v.iter().map(|(c, t)| (c.to_string(), *t)).collect::<Vec<_>>();
    let mut out = Vec::new();
    for f in fixtures {
        if let Err(e) = replay(&f.log) {
            out.push(format!("{}: does not replay: {e}", f.name));
        }
        for (color, n) in f.early_stops.iter().flatten() {
            let got = count_early_stops(&f.log, color).ok();
            if got != Some(*n) {
                out.push(format!("{}: early stops of {color} {got:?}, expected {n}", f.name));
            }
        }
        if let Some(expected) = &f.yield_events {
            let got = yield_events(&f.log).ok();
            if got.as_deref() != Some(&owned(expected)[..]) {
                out.push(format!("{}: yield events {got:?}", f.name));
            }
        }
        if let Some(expected) = &f.lane_changes {
            let got = lane_change_events(&f.log).ok();
            if got.as_deref() != Some(&owned(expected)[..]) {
                out.push(format!("{}: lane changes {got:?}", f.name));
            }
        }
        if let Some((success, formed, counted)) = f.platoon {
            match platoon_stats(&f.log) {
                Ok(p)
                    if (p.success, p.platoon_steps, p.counted_steps, p.time_fraction)
                        == (success, formed, counted, fraction(formed, counted)) => {}
                other => out.push(format!("{}: platoon stats {other:?}", f.name)),
            }
        }
        if norm_adherence(&f.log) != f.adherent {
            out.push(format!("{}: adherence should be {}", f.name, f.adherent));
        }
    }
    out
}
