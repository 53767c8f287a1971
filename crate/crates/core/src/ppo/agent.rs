//! Actor-critic PPO on the cooling environment.
//!
//! The actor maps the leading populations to a softmax over {UM, CM}; the
//! critic is a state-value network whose raw output is multiplied by
//! `value_scale` so that it works on returns of order one. Episodes are
//! collected in parallel, each with its own seed derived from
//! `(seed, iteration, episode)`, which keeps training bit-reproducible for
//! any thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::Strategy;
use crate::physics::{ModelParams, PopulationState};
use crate::ppo::env::{observe, CoolingEnv, EnvConfig};
use crate::ppo::mlp::{clip_grad_norm, Adam, Mlp};
use crate::sequence::{advance, run_sequence, CoolingTrace, MeasurementSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub episodes_per_batch: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Critic output multiplier.
    pub value_scale: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub max_iterations: usize,
    pub min_iterations: usize,
    /// Length of the moving average and of the plateau look-back.
    pub plateau_window: usize,
    pub plateau_tol: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            discount: 1.0,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            epochs: 4,
            episodes_per_batch: 64,
            minibatch_size: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            value_scale: 100.0,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            max_iterations: 300,
            min_iterations: 60,
            plateau_window: 20,
            plateau_tol: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("PPO setting {what}")));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("discount and gae_lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.value_scale > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate, value_scale and max_grad_norm must be > 0");
        }
        if self.epochs == 0 || self.episodes_per_batch == 0 || self.minibatch_size == 0 {
            return bad("epochs, episodes_per_batch and minibatch_size must be >= 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        if self.plateau_window == 0 || self.max_iterations == 0 {
            return bad("plateau_window and max_iterations must be >= 1");
        }
        Ok(())
    }
}

/// Actor and critic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
    pub value_scale: f64,
}

impl PolicyParams {
    pub fn new<R: Rng>(
        observation_size: usize,
        hidden: &[usize],
        value_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut actor_sizes = vec![observation_size];
        actor_sizes.extend_from_slice(hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(2);
        critic_sizes.push(1);
        Self {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            critic: Mlp::new(&critic_sizes, 1.0, rng),
            value_scale,
        }
    }

    pub fn observation_size(&self) -> usize {
        self.actor.input_dim()
    }

    /// `[P(UM), P(CM)]`.
    pub fn action_probs(&self, observation: &[f64]) -> [f64; 2] {
        let logits = self.actor.forward(observation);
        let lp = log_softmax(logits.output());
        [lp[0].exp(), lp[1].exp()]
    }

    pub fn log_probs(&self, observation: &[f64]) -> [f64; 2] {
        log_softmax(self.actor.forward(observation).output())
    }

    pub fn value(&self, observation: &[f64]) -> f64 {
        self.value_scale * self.critic.forward(observation).output()[0]
    }

    /// Argmax action; ties go to UM.
    pub fn greedy_action(&self, observation: &[f64]) -> Strategy {
        let lp = self.log_probs(observation);
        if lp[1] > lp[0] {
            Strategy::Cm
        } else {
            Strategy::Um
        }
    }

    fn is_finite(&self) -> bool {
        self.actor
            .params()
            .iter()
            .chain(self.critic.params())
            .all(|p| p.is_finite())
    }
}

fn log_softmax(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Vec<f64>,
    pub action: Strategy,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub advantage: f64,
    pub return_to_go: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// `C` reported by the last round.
    pub final_performance: f64,
    pub annihilated: bool,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn sequence(&self) -> MeasurementSequence {
        MeasurementSequence::new(self.steps.iter().map(|s| s.action).collect())
            .expect("trajectories have at least one step")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Greedy,
}

/// Stateless mixing of seeds (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rollout(
    policy: &PolicyParams,
    env: &EnvConfig,
    sampling: Sampling,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cooling = CoolingEnv::new(env);
    let mut steps = Vec::with_capacity(env.horizon);
    let mut final_performance = 0.0;
    let mut annihilated = false;
    while !cooling.is_done() {
        let observation = cooling.observation();
        let lp = policy.log_probs(&observation);
        let action = match sampling {
            Sampling::Greedy => {
                if lp[1] > lp[0] {
                    Strategy::Cm
                } else {
                    Strategy::Um
                }
            }
            Sampling::Stochastic => {
                if rng.random::<f64>() < lp[1].exp() {
                    Strategy::Cm
                } else {
                    Strategy::Um
                }
            }
        };
        let value = policy.value(&observation);
        let out = cooling.step(action);
        final_performance = out.performance;
        annihilated |= out.event == crate::ppo::env::StepEvent::Annihilated;
        steps.push(TrajectoryStep {
            observation,
            action,
            log_prob: lp[action.code() as usize],
            reward: out.reward,
            value,
            advantage: 0.0,
            return_to_go: 0.0,
        });
    }
    Trajectory {
        steps,
        final_performance,
        annihilated,
    }
}

/// Samples `count` episodes; episode `k` uses `derive_seed(seed, k, 0)`.
pub fn collect_episodes(
    policy: &PolicyParams,
    env: &EnvConfig,
    count: usize,
    seed: u64,
    sampling: Sampling,
) -> Vec<Trajectory> {
    (0..count)
        .into_par_iter()
        .map(|k| rollout(policy, env, sampling, derive_seed(seed, k as u64, 0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageStats {
    pub mean: f64,
    pub std: f64,
    /// False when the batch had (numerically) zero advantage variance.
    pub normalized: bool,
}

/// Generalised advantage estimates with the episode end treated as terminal,
/// returns `A + V`, then batch normalisation of the advantages.
pub fn compute_advantages(
    batch: &mut [Trajectory],
    discount: f64,
    gae_lambda: f64,
) -> AdvantageStats {
    for traj in batch.iter_mut() {
        let mut gae = 0.0;
        let mut next_value = 0.0;
        for step in traj.steps.iter_mut().rev() {
            let delta = step.reward + discount * next_value - step.value;
            gae = delta + discount * gae_lambda * gae;
            step.advantage = gae;
            step.return_to_go = gae + step.value;
            next_value = step.value;
        }
    }
    let all: Vec<f64> = batch
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.advantage))
        .collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return AdvantageStats {
            mean,
            std,
            normalized: false,
        };
    }
    for step in batch.iter_mut().flat_map(|t| t.steps.iter_mut()) {
        step.advantage = (step.advantage - mean) / std;
    }
    AdvantageStats {
        mean,
        std,
        normalized: true,
    }
}

/// Mean loss over `samples` and its gradients with respect to the actor and
/// critic parameters:
///
/// `-min(r A, clip(r, 1-eps, 1+eps) A) + c_v (v - R/scale)^2 - c_e H`.
pub fn ppo_loss_and_grad(
    policy: &PolicyParams,
    samples: &[&TrajectoryStep],
    config: &PpoConfig,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut actor_grad = vec![0.0; policy.actor.num_params()];
    let mut critic_grad = vec![0.0; policy.critic.num_params()];
    let inv_n = 1.0 / samples.len().max(1) as f64;
    let mut loss = 0.0;
    for s in samples {
        let acts = policy.actor.forward(&s.observation);
        let lp = log_softmax(acts.output());
        let probs = [lp[0].exp(), lp[1].exp()];
        let a = s.action.code() as usize;
        let ratio = (lp[a] - s.log_prob).exp();
        let adv = s.advantage;
        let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
        let surrogate = (ratio * adv).min(clipped * adv);
        let entropy = -(probs[0] * lp[0] + probs[1] * lp[1]);
        loss += inv_n * (-surrogate - config.entropy_coef * entropy);

        let unclipped_active = if adv >= 0.0 {
            ratio <= 1.0 + config.clip
        } else {
            ratio >= 1.0 - config.clip
        };
        let d_logp = if unclipped_active { -adv * ratio } else { 0.0 };
        let mut d_logits = [0.0; 2];
        for (j, d) in d_logits.iter_mut().enumerate() {
            let indicator = if j == a { 1.0 } else { 0.0 };
            *d = d_logp * (indicator - probs[j])
                + config.entropy_coef * probs[j] * (lp[j] + entropy);
            *d *= inv_n;
        }
        policy.actor.backward(&acts, &d_logits, &mut actor_grad);

        let cacts = policy.critic.forward(&s.observation);
        let v = cacts.output()[0];
        let err = v - s.return_to_go / policy.value_scale;
        loss += inv_n * config.value_coef * err * err;
        policy.critic.backward(
            &cacts,
            &[inv_n * 2.0 * config.value_coef * err],
            &mut critic_grad,
        );
    }
    (loss, actor_grad, critic_grad)
}

/// Policy plus optimizer state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: PolicyParams,
    actor_opt: Adam,
    critic_opt: Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub mean_loss: f64,
    pub minibatches: usize,
}

impl PpoLearner {
    pub fn new(policy: PolicyParams, learning_rate: f64) -> Self {
        Self {
            actor_opt: Adam::new(policy.actor.num_params(), learning_rate),
            critic_opt: Adam::new(policy.critic.num_params(), learning_rate),
            policy,
        }
    }
}

/// Several epochs of minibatch descent on the clipped objective. The batch's
/// stored log-probabilities are the old policy; on return the learner's
/// policy is the new one. A non-finite loss restores the previous state.
pub fn ppo_update(
    learner: &mut PpoLearner,
    batch: &[Trajectory],
    config: &PpoConfig,
    seed: u64,
) -> Result<UpdateStats> {
    let samples: Vec<&TrajectoryStep> = batch.iter().flat_map(|t| t.steps.iter()).collect();
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty PPO batch".into()));
    }
    let backup = learner.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut total_loss = 0.0;
    let mut minibatches = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.minibatch_size) {
            let mb: Vec<&TrajectoryStep> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, mut ga, mut gc) = ppo_loss_and_grad(&learner.policy, &mb, config);
            if !loss.is_finite() {
                *learner = backup;
                return Err(Error::InvalidParameter(format!(
                    "non-finite PPO loss {loss}; update rolled back"
                )));
            }
            clip_grad_norm(&mut ga, config.max_grad_norm);
            clip_grad_norm(&mut gc, config.max_grad_norm);
            learner
                .actor_opt
                .step(learner.policy.actor.params_mut(), &ga);
            learner
                .critic_opt
                .step(learner.policy.critic.params_mut(), &gc);
            total_loss += loss;
            minibatches += 1;
        }
    }
    if !learner.policy.is_finite() {
        *learner = backup;
        return Err(Error::InvalidParameter(
            "non-finite parameters; update rolled back".into(),
        ));
    }
    Ok(UpdateStats {
        mean_loss: total_loss / minibatches as f64,
        minibatches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_total_reward: f64,
    /// Final `C` of the best greedy sequence found so far.
    #[serde(rename = "best_C")]
    pub best_performance: f64,
    pub best_total_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best greedy policy seen during training (by summed reward).
    pub policy: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub converged: bool,
    /// Set when the iteration budget ran out before the plateau test passed.
    pub warning: Option<String>,
    pub rolled_back_updates: usize,
}

impl TrainOutcome {
    /// Columns `iteration,mean_total_reward,best_C`.
    pub fn write_curve_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "mean_total_reward", "best_C"])?;
        for p in &self.curve {
            w.write_record([
                p.iteration.to_string(),
                p.mean_total_reward.to_string(),
                p.best_performance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Collect, estimate advantages, update; repeat until the moving average of
/// the batch mean total reward changes by less than `plateau_tol` (relative)
/// over `plateau_window` iterations, or the budget runs out.
pub fn train(env: &EnvConfig, config: &PpoConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if env.horizon == 0 || env.observation_size == 0 {
        return Err(Error::InvalidParameter(
            "horizon and observation size must be >= 1".into(),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX, 0));
    let policy = PolicyParams::new(
        env.observation_size,
        &config.hidden,
        config.value_scale,
        &mut init_rng,
    );
    let mut learner = PpoLearner::new(policy, config.learning_rate);

    let mut best = learner.policy.clone();
    let first = rollout(&best, env, Sampling::Greedy, 0);
    let mut best_total = first.total_reward();
    let mut best_perf = first.final_performance;

    let mut curve = Vec::new();
    let mut moving: Vec<f64> = Vec::new();
    let mut rolled_back = 0;
    let mut converged = false;
    let window = config.plateau_window;

    for iteration in 0..config.max_iterations {
        let it = iteration as u64;
        let mut batch = collect_episodes(
            &learner.policy,
            env,
            config.episodes_per_batch,
            derive_seed(seed, it, 1),
            Sampling::Stochastic,
        );
        let mean_total =
            batch.iter().map(Trajectory::total_reward).sum::<f64>() / batch.len() as f64;
        compute_advantages(&mut batch, config.discount, config.gae_lambda);
        if ppo_update(&mut learner, &batch, config, derive_seed(seed, it, 2)).is_err() {
            rolled_back += 1;
        }

        let greedy = rollout(&learner.policy, env, Sampling::Greedy, 0);
        if greedy.total_reward() > best_total {
            best_total = greedy.total_reward();
            best_perf = greedy.final_performance;
            best = learner.policy.clone();
        }
        curve.push(CurvePoint {
            iteration,
            mean_total_reward: mean_total,
            best_performance: best_perf,
            best_total_reward: best_total,
        });

        let recent = &curve[curve.len().saturating_sub(window)..];
        moving.push(recent.iter().map(|p| p.mean_total_reward).sum::<f64>() / recent.len() as f64);
        if iteration + 1 >= config.min_iterations.max(2 * window) {
            let now = moving[moving.len() - 1];
            let before = moving[moving.len() - 1 - window];
            if (now - before).abs() <= config.plateau_tol * before.abs().max(1e-12) {
                converged = true;
                break;
            }
        }
    }
    let warning = (!converged).then(|| {
        format!(
            "iteration budget of {} exhausted before the reward plateaued; returning the best policy so far",
            config.max_iterations
        )
    });
    Ok(TrainOutcome {
        policy: best,
        curve,
        converged,
        warning,
        rolled_back_updates: rolled_back,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub sequence: MeasurementSequence,
    pub taus: Vec<f64>,
    pub trace: CoolingTrace,
}

/// Greedy rollout of a trained policy: the chosen strategy and its interval
/// for every round, plus the trace obtained by replaying the sequence.
pub fn generate_sequence(
    policy: &PolicyParams,
    initial: &PopulationState,
    params: &ModelParams,
    len: usize,
) -> Result<GeneratedSequence> {
    if len == 0 {
        return Err(Error::InvalidParameter(
            "sequence length must be >= 1".into(),
        ));
    }
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(len);
    let mut taus = Vec::with_capacity(len);
    for i in 0..len {
        let action = policy.greedy_action(&observe(&state, policy.observation_size()));
        let (next, tau) = advance(&state, action, params).map_err(|e| e.at_step(i + 1))?;
        steps.push(action);
        taus.push(tau);
        state = next;
    }
    let sequence = MeasurementSequence::new(steps)?;
    let trace = run_sequence(initial, &sequence, params)?;
    Ok(GeneratedSequence {
        sequence,
        taus,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{thermal_populations, ThermalSpec};

    fn env(horizon: usize) -> EnvConfig {
        EnvConfig {
            params: ModelParams::reference(),
            initial: thermal_populations(&ThermalSpec::from_x(0.1069).unwrap(), 1e-12).unwrap(),
            horizon,
            observation_size: 16,
        }
    }

    fn small_policy(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::new(16, &[12, 10], 100.0, &mut rng)
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let p = small_policy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let obs: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let pr = p.action_probs(&obs);
            assert!(pr[0] > 0.0 && pr[1] > 0.0);
            assert!((pr[0] + pr[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collection_is_reproducible() {
        let p = small_policy(3);
        let e = env(6);
        let a = collect_episodes(&p, &e, 8, 42, Sampling::Stochastic);
        let b = collect_episodes(&p, &e, 8, 42, Sampling::Stochastic);
        assert_eq!(a, b);
        let g1 = collect_episodes(&p, &e, 3, 1, Sampling::Greedy);
        let g2 = collect_episodes(&p, &e, 3, 99, Sampling::Greedy);
        assert_eq!(g1[0].sequence(), g2[2].sequence());
        assert_eq!(g1[0].steps.len(), 6);
    }

    #[test]
    fn monte_carlo_limit_of_gae() {
        let p = small_policy(4);
        let e = env(5);
        let mut batch = collect_episodes(&p, &e, 1, 7, Sampling::Stochastic);
        let raw = batch.clone();
        let stats = compute_advantages(&mut batch, 1.0, 1.0);
        let steps = &raw[0].steps;
        for (t, s) in batch[0].steps.iter().enumerate() {
            let rtg: f64 = steps[t..].iter().map(|x| x.reward).sum();
            assert!((s.return_to_go - rtg).abs() < 1e-9 * rtg.abs().max(1.0));
            let raw_advantage = s.advantage * stats.std + stats.mean;
            assert!((raw_advantage - (rtg - s.value)).abs() < 1e-9 * rtg.abs().max(1.0));
        }
    }

    #[test]
    fn constant_rewards_with_perfect_critic_give_zero_advantage() {
        let mk = |reward: f64, value: f64| TrajectoryStep {
            observation: vec![0.0; 2],
            action: Strategy::Um,
            log_prob: 0.5f64.ln(),
            reward,
            value,
            advantage: 0.0,
            return_to_go: 0.0,
        };
        // rewards 1 each over 3 steps, gamma = 1: V = 3, 2, 1
        let traj = Trajectory {
            steps: vec![mk(1.0, 3.0), mk(1.0, 2.0), mk(1.0, 1.0)],
            final_performance: 0.0,
            annihilated: false,
        };
        let mut batch = vec![traj.clone(), traj];
        let stats = compute_advantages(&mut batch, 1.0, 0.95);
        assert!(!stats.normalized);
        assert!(batch
            .iter()
            .flat_map(|t| &t.steps)
            .all(|s| s.advantage == 0.0));
    }

    #[test]
    fn normalised_advantages() {
        let p = small_policy(5);
        let mut batch = collect_episodes(&p, &env(8), 16, 11, Sampling::Stochastic);
        let stats = compute_advantages(&mut batch, 1.0, 0.95);
        assert!(stats.normalized);
        let all: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.advantage))
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }

    fn fd_check(policy: &PolicyParams, samples: &[&TrajectoryStep], cfg: &PpoConfig) {
        let (_, ga, gc) = ppo_loss_and_grad(policy, samples, cfg);
        let h = 1e-6;
        let check = |analytic: &[f64], perturb: &dyn Fn(usize, f64) -> PolicyParams| {
            for (i, &g) in analytic.iter().enumerate() {
                let lp = ppo_loss_and_grad(&perturb(i, h), samples, cfg).0;
                let lm = ppo_loss_and_grad(&perturb(i, -h), samples, cfg).0;
                let fd = (lp - lm) / (2.0 * h);
                let scale = fd.abs().max(g.abs());
                if scale < 1e-8 {
                    continue;
                }
                assert!(
                    (fd - g).abs() / scale < 1e-4,
                    "param {i}: fd {fd} vs analytic {g}"
                );
            }
        };
        check(&ga, &|i, d| {
            let mut q = policy.clone();
            q.actor.params_mut()[i] += d;
            q
        });
        check(&gc, &|i, d| {
            let mut q = policy.clone();
            q.critic.params_mut()[i] += d;
            q
        });
    }

    fn random_samples(policy: &PolicyParams, seed: u64, perturb_logp: f64) -> Vec<TrajectoryStep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..12)
            .map(|_| {
                let observation: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
                let action = if rng.random::<bool>() {
                    Strategy::Cm
                } else {
                    Strategy::Um
                };
                let lp = policy.log_probs(&observation)[action.code() as usize];
                TrajectoryStep {
                    observation,
                    action,
                    log_prob: lp + perturb_logp * rng.random_range(-1.0..1.0),
                    reward: 0.0,
                    value: 0.0,
                    advantage: rng.random_range(-2.0..2.0),
                    return_to_go: rng.random_range(-150.0..150.0),
                }
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut policy = PolicyParams::new(16, &[12, 10], 100.0, &mut rng);
        // Spread the actor head so the policy is far from uniform.
        let mut big = ChaCha8Rng::seed_from_u64(10);
        policy.actor = Mlp::new(&[16, 12, 10, 2], 1.0, &mut big);
        let cfg = PpoConfig::default();
        // Inside the clip range and, separately, well outside it.
        for (seed, spread) in [(1, 0.05), (2, 0.6)] {
            let samples = random_samples(&policy, seed, spread);
            let refs: Vec<&TrajectoryStep> = samples.iter().collect();
            fd_check(&policy, &refs, &cfg);
        }
    }

    #[test]
    fn unclipped_gradient_equals_policy_gradient_term() {
        let policy = small_policy(12);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            ..PpoConfig::default()
        };
        let mut samples = random_samples(&policy, 3, 0.0);
        for s in &mut samples {
            s.advantage = s.advantage.abs() + 0.1;
        }
        let refs: Vec<&TrajectoryStep> = samples.iter().collect();
        let (_, ga, _) = ppo_loss_and_grad(&policy, &refs, &cfg);
        // ratio = 1, so the gradient is -mean(A grad log pi).
        let mut expected = vec![0.0; policy.actor.num_params()];
        for s in &samples {
            let acts = policy.actor.forward(&s.observation);
            let lp = log_softmax(acts.output());
            let a = s.action.code() as usize;
            let d: Vec<f64> = (0..2)
                .map(|j| {
                    let ind = if j == a { 1.0 } else { 0.0 };
                    -s.advantage * (ind - lp[j].exp()) / samples.len() as f64
                })
                .collect();
            policy.actor.backward(&acts, &d, &mut expected);
        }
        for (a, b) in ga.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_and_value() {
        let policy = small_policy(13);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let mut samples = random_samples(&policy, 4, 0.1);
        for s in &mut samples {
            s.advantage = 0.0;
        }
        let refs: Vec<&TrajectoryStep> = samples.iter().collect();
        let (_, ga, gc) = ppo_loss_and_grad(&policy, &refs, &cfg);
        assert!(ga.iter().all(|g| *g == 0.0));
        assert!(gc.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn update_changes_policy_and_is_reproducible() {
        let e = env(6);
        let cfg = PpoConfig {
            hidden: vec![12, 10],
            ..PpoConfig::default()
        };
        let mut batch = collect_episodes(&small_policy(14), &e, 8, 5, Sampling::Stochastic);
        compute_advantages(&mut batch, 1.0, 0.95);
        let mut a = PpoLearner::new(small_policy(14), 3e-4);
        let mut b = a.clone();
        ppo_update(&mut a, &batch, &cfg, 77).unwrap();
        ppo_update(&mut b, &batch, &cfg, 77).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_ne!(a.policy, small_policy(14));
    }

    #[test]
    fn non_finite_loss_rolls_back() {
        let e = env(4);
        let mut batch = collect_episodes(&small_policy(15), &e, 2, 5, Sampling::Stochastic);
        compute_advantages(&mut batch, 1.0, 0.95);
        batch[0].steps[0].return_to_go = f64::NAN;
        let mut learner = PpoLearner::new(small_policy(15), 3e-4);
        let before = learner.policy.clone();
        assert!(ppo_update(&mut learner, &batch, &PpoConfig::default(), 1).is_err());
        assert_eq!(learner.policy, before);
    }

    #[test]
    fn short_training_is_bit_reproducible() {
        let e = env(6);
        let cfg = PpoConfig {
            hidden: vec![16, 16],
            episodes_per_batch: 8,
            max_iterations: 5,
            min_iterations: 5,
            plateau_window: 2,
            ..PpoConfig::default()
        };
        let a = train(&e, &cfg, 2024).unwrap();
        let b = train(&e, &cfg, 2024).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve, b.curve);
        let best: Vec<f64> = a.curve.iter().map(|p| p.best_total_reward).collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn generated_sequence_replays_identically() {
        let e = env(8);
        let p = small_policy(16);
        let g = generate_sequence(&p, &e.initial, &e.params, 8).unwrap();
        let replay = run_sequence(&e.initial, &g.sequence, &e.params).unwrap();
        assert_eq!(replay, g.trace);
        assert_eq!(replay.taus(), g.taus);
        let greedy = rollout(&p, &e, Sampling::Greedy, 0);
        assert_eq!(greedy.sequence(), g.sequence);
    }

    #[test]
    fn generate_from_ground_state_is_degenerate() {
        let p = small_policy(17);
        let err = generate_sequence(
            &p,
            &PopulationState::fock(0, 20),
            &ModelParams::reference(),
            4,
        )
        .unwrap_err();
        assert!(matches!(err.root(), Error::DegenerateState(_)));
    }
}
