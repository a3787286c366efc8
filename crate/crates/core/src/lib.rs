//! Multi-agent gridworld driving games played by chat-model or scripted
//! agents, with episode logging, replay and norm metrics.
//!
//! Everything that carries a reward is generic over [`RewardScalar`]. The
//! aliases below fix the scalar for common use: [`Reward`] (`i64`) matches
//! the integer reward tables, [`ExactReward`] allows fractional costs
//! without rounding, [`FloatReward`] is there for quick sweeps.

pub mod experiment;
pub mod grid;
pub mod llm;
pub mod logfile;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod prompt;
pub mod render;
pub mod scalar;
pub mod scenario;
pub mod world;

pub use grid::{Action, Cell, GridSize, Heading, Role, Status, VehicleId};
pub use orchestrator::{replay, run_episode, EpisodeOutcome};
pub use policy::{Decision, DecisionSource, PolicyKind};
pub use scalar::RewardScalar;
pub use scenario::ScenarioKind;

pub type Reward = i64;
pub type ExactReward = num_rational::Ratio<i64>;
pub type FloatReward = f64;

pub type Scenario = scenario::ScenarioSpec<Reward>;
pub type World = world::WorldState<Reward>;
pub type Vehicle = world::VehicleState<Reward>;
pub type Outcome = world::StepOutcome<Reward>;
pub type Observation = policy::Observation<Reward>;
pub type EpisodeConfig = orchestrator::EpisodeConfig<Reward>;
pub type EpisodeLog = orchestrator::EpisodeLog<Reward>;
pub type StepRecord = orchestrator::StepRecord<Reward>;
pub type EpisodeMetrics = metrics::EpisodeMetrics<Reward>;
pub type ExperimentConfig = experiment::ExperimentConfig<Reward>;

pub type ExactScenario = scenario::ScenarioSpec<ExactReward>;
pub type ExactEpisodeLog = orchestrator::EpisodeLog<ExactReward>;
pub type FloatScenario = scenario::ScenarioSpec<FloatReward>;
pub type FloatEpisodeLog = orchestrator::EpisodeLog<FloatReward>;
