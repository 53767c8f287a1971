//! Cooling environment: one action per round, reward `100 * C` of the
//! post-measurement state.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::measurement::Strategy;
use crate::physics::{avg_population, ground_fidelity, ModelParams, PopulationState};
use crate::sequence::{advance, cooperative_performance};

pub const REWARD_SCALE: f64 = 100.0;
/// Reward when a conditional round annihilates the state; ends the episode.
pub const ANNIHILATION_REWARD: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub params: ModelParams,
    pub initial: PopulationState,
    /// Rounds per episode.
    pub horizon: usize,
    /// Number of leading populations fed to the networks.
    pub observation_size: usize,
}

/// Leading populations `p_0..p_{n-1}`, zero padded past the cutoff.
pub fn observe(state: &PopulationState, size: usize) -> Vec<f64> {
    let p = state.populations();
    (0..size)
        .map(|n| p.get(n).copied().unwrap_or(0.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepEvent {
    Applied,
    /// The state was exactly the ground state; the action was a no-op.
    Degenerate,
    /// The conditional round had (numerically) zero survival.
    Annihilated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: PopulationState,
    pub observation: Vec<f64>,
    pub reward: f64,
    /// `C` of the returned state.
    pub performance: f64,
    /// Interval used, `None` for no-ops and annihilation.
    pub tau: Option<f64>,
    pub done: bool,
    pub event: StepEvent,
}

/// One environment transition from `state` at round `position` (0-based).
/// `previous_performance` is the `C` reported by the previous round.
/// Physics errors never escape: they become terminal penalties or no-ops.
pub fn env_step(
    state: &PopulationState,
    action: Strategy,
    config: &EnvConfig,
    nbar_th: f64,
    position: usize,
    previous_performance: f64,
) -> EnvStep {
    let done = position + 1 >= config.horizon;
    if avg_population(state) <= 0.0 {
        return EnvStep {
            state: state.clone(),
            observation: observe(state, config.observation_size),
            reward: REWARD_SCALE * previous_performance,
            performance: previous_performance,
            tau: None,
            done,
            event: StepEvent::Degenerate,
        };
    }
    match advance(state, action, &config.params) {
        Ok((next, tau)) => {
            let perf = cooperative_performance(
                nbar_th,
                avg_population(&next),
                ground_fidelity(&next),
                next.survival(),
            )
            .value;
            EnvStep {
                observation: observe(&next, config.observation_size),
                state: next,
                reward: REWARD_SCALE * perf,
                performance: perf,
                tau: Some(tau),
                done,
                event: StepEvent::Applied,
            }
        }
        Err(Error::MeasurementAnnihilation { .. }) => EnvStep {
            state: state.clone(),
            observation: observe(state, config.observation_size),
            reward: ANNIHILATION_REWARD,
            performance: previous_performance,
            tau: None,
            done: true,
            event: StepEvent::Annihilated,
        },
        // Only the degenerate interval error remains, which the guard above
        // already covers; treat anything else as a no-op as well.
        Err(_) => EnvStep {
            state: state.clone(),
            observation: observe(state, config.observation_size),
            reward: REWARD_SCALE * previous_performance,
            performance: previous_performance,
            tau: None,
            done,
            event: StepEvent::Degenerate,
        },
    }
}

/// Stateful wrapper over [`env_step`].
#[derive(Debug, Clone)]
pub struct CoolingEnv<'a> {
    config: &'a EnvConfig,
    nbar_th: f64,
    state: PopulationState,
    position: usize,
    last_performance: f64,
    done: bool,
}

impl<'a> CoolingEnv<'a> {
    pub fn new(config: &'a EnvConfig) -> Self {
        Self {
            config,
            nbar_th: avg_population(&config.initial),
            state: config.initial.clone(),
            position: 0,
            last_performance: 0.0,
            done: false,
        }
    }

    pub fn observation(&self) -> Vec<f64> {
        observe(&self.state, self.config.observation_size)
    }

    pub fn state(&self) -> &PopulationState {
        &self.state
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: Strategy) -> EnvStep {
        assert!(!self.done, "episode already finished");
        let out = env_step(
            &self.state,
            action,
            self.config,
            self.nbar_th,
            self.position,
            self.last_performance,
        );
        self.state = out.state.clone();
        self.position += 1;
        self.last_performance = out.performance;
        self.done = out.done;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{thermal_populations, ThermalSpec};
    use crate::sequence::run_sequence;

    fn config(initial: PopulationState) -> EnvConfig {
        EnvConfig {
            params: ModelParams::reference(),
            initial,
            horizon: 16,
            observation_size: 64,
        }
    }

    fn thermal() -> PopulationState {
        thermal_populations(&ThermalSpec::from_x(0.1069).unwrap(), 1e-12).unwrap()
    }

    #[test]
    fn reward_matches_sequence_engine() {
        let cfg = config(thermal());
        let mut env = CoolingEnv::new(&cfg);
        let out = env.step(Strategy::Cm);
        let trace = run_sequence(&cfg.initial, &"1".parse().unwrap(), &cfg.params).unwrap();
        assert_eq!(out.reward, 100.0 * trace.final_performance());
        assert_eq!(out.observation.len(), 64);
        assert!(!out.done);
    }

    #[test]
    fn um_keeps_survival() {
        let cfg = config(thermal());
        let mut env = CoolingEnv::new(&cfg);
        let out = env.step(Strategy::Um);
        assert!(out.reward.is_finite());
        assert_eq!(out.state.survival(), 1.0);
    }

    #[test]
    fn ground_state_is_a_no_op() {
        let cfg = config(PopulationState::fock(0, 10));
        let mut env = CoolingEnv::new(&cfg);
        for a in [Strategy::Cm, Strategy::Um] {
            let out = env.step(a);
            assert_eq!(out.event, StepEvent::Degenerate);
            assert_eq!(out.reward, 0.0);
            assert_eq!(out.state, cfg.initial);
        }
    }

    #[test]
    fn episode_ends_at_horizon() {
        let cfg = EnvConfig {
            horizon: 3,
            ..config(thermal())
        };
        let mut env = CoolingEnv::new(&cfg);
        assert!(!env.step(Strategy::Um).done);
        assert!(!env.step(Strategy::Cm).done);
        assert!(env.step(Strategy::Um).done);
        assert!(env.is_done());
    }

    #[test]
    fn observation_is_padded() {
        let obs = observe(&PopulationState::new(vec![0.25, 0.75]).unwrap(), 4);
        assert_eq!(obs, vec![0.25, 0.75, 0.0, 0.0]);
    }
}
