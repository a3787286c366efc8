//! Turn-based episode loop and replay.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Role, VehicleId};
use crate::llm::{decide_llm, ChatExchange, ChatProvider, LlmTurn, ProviderConfig, ProviderError};
use crate::policy::{decide_scripted, observe, Decision, Observation, PolicyKind};
use crate::prompt::{PromptTemplateSet, RenderedPrompt, TemplateError};
use crate::scalar::RewardScalar;
use crate::scenario::{ScenarioError, ScenarioSpec};
use crate::world::{apply_actions, is_terminal, EngineError, StepOutcome, TerminalFlag, WorldState};

/// Everything needed to run one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct EpisodeConfig<R> {
    pub scenario: ScenarioSpec<R>,
    /// Defaults to the built-in templates for the scenario kind.
    #[serde(default)]
    pub templates: Option<PromptTemplateSet>,
    /// Policy per vehicle id. Background vehicles may be left out.
    pub bindings: BTreeMap<VehicleId, PolicyKind>,
    #[serde(default)]
    pub provider: Option<ProviderConfig>,
    #[serde(default)]
    pub rng_seed: u64,
    /// Overrides `scenario.step_cap` when set.
    #[serde(default)]
    pub step_cap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("templates: {0}")]
    Template(#[from] TemplateError),
    #[error("bindings: strategic vehicle {0} has no policy")]
    MissingBinding(VehicleId),
    #[error("bindings: no vehicle named {0}")]
    UnknownBinding(VehicleId),
    #[error("bindings: background vehicle {0} must use the background policy")]
    BackgroundBinding(VehicleId),
    #[error("bindings: strategic vehicle {0} cannot use the background policy")]
    StrategicAsBackground(VehicleId),
    #[error("provider: an llm binding needs a provider section")]
    MissingProvider,
    #[error("{0}")]
    Provider(String),
    #[error("step_cap must be at least 1")]
    StepCap,
}

impl<R: RewardScalar> EpisodeConfig<R> {
    pub fn new(scenario: ScenarioSpec<R>, bindings: BTreeMap<VehicleId, PolicyKind>) -> Self {
        EpisodeConfig {
            scenario,
            templates: None,
            bindings,
            provider: None,
            rng_seed: 0,
            step_cap: None,
        }
    }

    /// Binds every strategic vehicle to `kind`.
    pub fn uniform(scenario: ScenarioSpec<R>, kind: PolicyKind) -> Self {
        let bindings = scenario
            .routes
            .iter()
            .filter(|r| r.role == Role::Strategic)
            .map(|r| (r.id.clone(), kind.clone()))
            .collect();
        EpisodeConfig::new(scenario, bindings)
    }

    pub fn templates(&self) -> PromptTemplateSet {
        self.templates
            .clone()
            .unwrap_or_else(|| PromptTemplateSet::defaults(self.scenario.name))
    }

    pub fn uses_llm(&self) -> bool {
        self.bindings.values().any(PolicyKind::is_llm)
    }

    /// Scenario with the step cap override applied.
    pub fn effective_scenario(&self) -> ScenarioSpec<R> {
        let mut spec = self.scenario.clone();
        if let Some(cap) = self.step_cap {
            spec.step_cap = cap;
        }
        spec
    }

    pub fn binding(&self, id: &VehicleId) -> PolicyKind {
        self.bindings.get(id).cloned().unwrap_or(PolicyKind::Background)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.step_cap == Some(0) {
            return Err(ConfigError::StepCap);
        }
        self.effective_scenario().validate()?;
        for id in self.bindings.keys() {
            if self.scenario.route(id).is_none() {
                return Err(ConfigError::UnknownBinding(id.clone()));
            }
        }
        for route in &self.scenario.routes {
            match (route.role, self.bindings.get(&route.id)) {
                (Role::Strategic, None) => return Err(ConfigError::MissingBinding(route.id.clone())),
                (Role::Strategic, Some(PolicyKind::Background)) => {
                    return Err(ConfigError::StrategicAsBackground(route.id.clone()))
                }
                (Role::Background, Some(k)) if *k != PolicyKind::Background => {
                    return Err(ConfigError::BackgroundBinding(route.id.clone()))
                }
                _ => {}
            }
        }
        if self.uses_llm() {
            self.templates().validate()?;
            self.provider
                .as_ref()
                .ok_or(ConfigError::MissingProvider)?
                .validate()
                .map_err(ConfigError::Provider)?;
        }
        Ok(())
    }
}

/// One vehicle's part of a time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct AgentTurn<R> {
    pub observation: Observation<R>,
    #[serde(default)]
    pub prompt: Option<RenderedPrompt>,
    #[serde(default)]
    pub exchanges: Vec<ChatExchange>,
    #[serde(default)]
    pub failures: Vec<String>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "R: RewardScalar")]
pub struct StepRecord<R> {
    pub time_step: u32,
    /// Keyed by vehicle id; one entry per vehicle active at step start.
    pub turns: BTreeMap<VehicleId, AgentTurn<R>>,
    pub outcome: StepOutcome<R>,
}

impl<R: RewardScalar> StepRecord<R> {
    pub fn actions(&self) -> BTreeMap<VehicleId, Action> {
        self.turns
            .iter()
            .map(|(id, t)| (id.clone(), t.decision.action))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpisodeOutcome {
    AllCompleted,
    CrashOccurred,
    TimedOut,
    Aborted,
}

impl EpisodeOutcome {
    pub fn from_flag(flag: TerminalFlag) -> Option<Self> {
        match flag {
            TerminalFlag::Running => None,
            TerminalFlag::AllCompleted => Some(EpisodeOutcome::AllCompleted),
            TerminalFlag::CrashOccurred => Some(EpisodeOutcome::CrashOccurred),
            TerminalFlag::TimedOut => Some(EpisodeOutcome::TimedOut),
        }
    }
}

impl std::fmt::Display for EpisodeOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog<R> {
    pub config: EpisodeConfig<R>,
    pub steps: Vec<StepRecord<R>>,
    pub final_state: WorldState<R>,
    pub outcome: EpisodeOutcome,
    pub abort_reason: Option<String>,
}

impl<R: RewardScalar> EpisodeLog<R> {
    /// States before each step, followed by the final state.
    pub fn states(&self) -> Vec<WorldState<R>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(self.config.effective_scenario().initial_state());
        out.extend(self.steps.iter().map(|s| s.outcome.next_state.clone()));
        out
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Hooks into the episode loop.
pub trait EpisodeObserver<R> {
    /// Called with every decision of a step before the step is applied. An
    /// error aborts the episode without applying the step.
    fn on_decisions(&mut self, _time_step: u32, _turns: &BTreeMap<VehicleId, AgentTurn<R>>) -> std::io::Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _record: &StepRecord<R>) {}
}

impl<R> EpisodeObserver<R> for () {}

/// Runs one episode to a terminal state.
///
/// Non-LLM decisions are taken in vehicle-id order so the episode RNG is
/// consumed deterministically. LLM queries for one step run concurrently;
/// each sees only the observation built from the state at step start.
/// An authentication failure ends the episode with outcome `Aborted`.
pub fn run_episode<R: RewardScalar>(
    cfg: &EpisodeConfig<R>,
    provider: Option<&dyn ChatProvider>,
) -> Result<EpisodeLog<R>, RunError> {
    run_episode_with(cfg, provider, &mut ())
}

/// [`run_episode`] reporting to an observer.
pub fn run_episode_with<R: RewardScalar>(
    cfg: &EpisodeConfig<R>,
    provider: Option<&dyn ChatProvider>,
    observer: &mut dyn EpisodeObserver<R>,
) -> Result<EpisodeLog<R>, RunError> {
    cfg.validate()?;
    let provider = match (cfg.uses_llm(), provider) {
        (true, None) => return Err(ConfigError::MissingProvider.into()),
        (_, p) => p,
    };
    let spec = cfg.effective_scenario();
    let templates = cfg.templates();
    let provider_cfg = cfg.provider.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let mut state = spec.initial_state();
    let mut steps = Vec::new();
    let mut abort_reason = None;

    while !is_terminal(&state) {
        let mut turns: BTreeMap<VehicleId, AgentTurn<R>> = BTreeMap::new();
        let mut llm_queue: Vec<Observation<R>> = Vec::new();
        let ids: Vec<VehicleId> = state.active().map(|v| v.id.clone()).collect();
        for id in &ids {
            let obs = observe(&state, id, &spec).expect("active vehicle observable");
            match decide_scripted(&cfg.binding(id), &obs, &spec, &mut rng) {
                Some(decision) => {
                    turns.insert(
                        id.clone(),
                        AgentTurn {
                            observation: obs,
                            prompt: None,
                            exchanges: Vec::new(),
                            failures: Vec::new(),
                            decision,
                        },
                    );
                }
                None => llm_queue.push(obs),
            }
        }

        if !llm_queue.is_empty() {
            let provider = provider.expect("checked above");
            let results: Vec<Result<LlmTurn, ProviderError>> = std::thread::scope(|s| {
                let handles: Vec<_> = llm_queue
                    .iter()
                    .map(|obs| {
                        let (spec, templates, pc) = (&spec, &templates, &provider_cfg);
                        s.spawn(move || decide_llm(obs, spec, templates, provider, pc))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("llm worker panicked"))
                    .collect()
            });
            for (obs, result) in llm_queue.into_iter().zip(results) {
                match result {
                    Ok(turn) => {
                        turns.insert(
                            obs.self_id.clone(),
                            AgentTurn {
                                observation: obs,
                                prompt: turn.prompt,
                                exchanges: turn.exchanges,
                                failures: turn.failures,
                                decision: turn.decision,
                            },
                        );
                    }
                    Err(e) => {
                        abort_reason.get_or_insert_with(|| format!("{}: {e}", obs.self_id));
                    }
                }
            }
            if abort_reason.is_some() {
                break;
            }
        }

        if let Err(e) = observer.on_decisions(state.time_step, &turns) {
            abort_reason = Some(format!("cannot record decisions: {e}"));
            break;
        }
        let actions = turns.iter().map(|(id, t)| (id.clone(), t.decision.action)).collect();
        let outcome = apply_actions(&state, &actions, &spec)?;
        let record = StepRecord {
            time_step: state.time_step,
            turns,
            outcome,
        };
        observer.on_step(&record);
        state = record.outcome.next_state.clone();
        steps.push(record);
    }

    let outcome = match abort_reason {
        Some(ref reason) => {
            log::error!("episode aborted: {reason}");
            EpisodeOutcome::Aborted
        }
        None => EpisodeOutcome::from_flag(state.terminal_flag).expect("loop ends on terminal state"),
    };
    Ok(EpisodeLog {
        config: cfg.clone(),
        steps,
        final_state: state,
        outcome,
        abort_reason,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("ReplayDivergence at time step {time_step}: {detail}")]
    Divergence { time_step: u32, detail: String },
    #[error("replay failed at time step {time_step}: {source}")]
    Engine { time_step: u32, source: EngineError },
}

/// Re-applies the logged decisions and checks every state against the log.
/// Returns the initial state followed by each post-step state.
pub fn replay<R: RewardScalar>(log: &EpisodeLog<R>) -> Result<Vec<WorldState<R>>, ReplayError> {
    let spec = log.config.effective_scenario();
    let mut state = spec.initial_state();
    let mut states = vec![state.clone()];
    for step in &log.steps {
        let diverge = |detail: String| ReplayError::Divergence {
            time_step: step.time_step,
            detail,
        };
        if step.time_step != state.time_step {
            return Err(diverge(format!(
                "logged step index {}, expected {}",
                step.time_step, state.time_step
            )));
        }
        for (id, turn) in &step.turns {
            let expected = observe(&state, id, &spec).map_err(|e| diverge(e.to_string()))?;
            if turn.observation != expected {
                return Err(diverge(format!("observation of {id} differs")));
            }
        }
        let outcome = apply_actions(&state, &step.actions(), &spec).map_err(|source| ReplayError::Engine {
            time_step: step.time_step,
            source,
        })?;
        if outcome != step.outcome {
            let which = if outcome.next_state != step.outcome.next_state {
                let moved: Vec<String> = outcome
                    .next_state
                    .vehicles
                    .iter()
                    .filter(|(id, v)| step.outcome.next_state.vehicles.get(*id) != Some(v))
                    .map(|(id, _)| id.to_string())
                    .collect();
                format!("state of {} differs", moved.join(", "))
            } else {
                "rewards or event sets differ".to_owned()
            };
            return Err(diverge(which));
        }
        state = outcome.next_state;
        states.push(state.clone());
    }
    if state != log.final_state {
        return Err(ReplayError::Divergence {
            time_step: state.time_step,
            detail: "final state differs".into(),
        });
    }
    Ok(states)
}
