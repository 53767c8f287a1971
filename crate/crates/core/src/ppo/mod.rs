//! Proximal policy optimization over measurement sequences.

pub mod agent;
pub mod checkpoint;
pub mod env;
pub mod mlp;

pub use agent::{
    collect_episodes, compute_advantages, generate_sequence, ppo_update, train, AdvantageStats,
    CurvePoint, GeneratedSequence, PolicyParams, PpoConfig, PpoLearner, Sampling, TrainOutcome,
    Trajectory, TrajectoryStep,
};
pub use env::{env_step, CoolingEnv, EnvConfig, EnvStep, StepEvent};
