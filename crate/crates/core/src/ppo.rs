//! PPO-OPA training: parallel trajectory collection, advantages against the
//! reward network, clipped policy updates and reward regression; plus a
//! primal-dual variant that prices constraint consumption with Lagrange
//! multipliers instead of shaping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Observation, Report, ShapingWeights};
use crate::model::{ConstraintKind, Instance};
use crate::nets::{ActorParams, NetConfig, RewardNetParams};
use crate::neural::{adam_step, AdamState, NeuralError, ParamSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub trajectories: usize,
    pub minibatch: usize,
    pub clip_eps: f64,
    pub shaping: ShapingWeights,
    pub actor_lr: f64,
    pub reward_lr: f64,
    /// Kept for completeness; advantages use immediate rewards only.
    pub gamma: f64,
    /// Passes over each episode's buffer.
    pub epochs: usize,
    pub seed: u64,
    /// Set the reward network's output affine from the first batch's reward
    /// mean and spread.
    pub calibrate_reward_output: bool,
    /// Primal-dual variant only: multiplier step per unit of relative
    /// constraint excess.
    pub dual_step: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            trajectories: 50,
            minibatch: 2048,
            clip_eps: 0.2,
            shaping: ShapingWeights::default(),
            actor_lr: 1e-3,
            reward_lr: 1e-3,
            gamma: 1.0,
            epochs: 1,
            seed: 0,
            calibrate_reward_output: true,
            dual_step: 1.0,
            net: NetConfig::paper(),
        }
    }
}

impl TrainConfig {
    /// Narrow networks and few trajectories per episode for one-core runs.
    pub fn desk() -> Self {
        Self { trajectories: 2, net: NetConfig::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err("clip_eps must lie in (0, 1)");
        }
        if self.minibatch == 0 || self.trajectories == 0 || self.epochs == 0 {
            return err("minibatch, trajectories and epochs must be at least 1");
        }
        if !(self.actor_lr >= 0.0 && self.reward_lr >= 0.0 && self.dual_step >= 0.0) {
            return err("learning rates and dual step must be non-negative");
        }
        if !(self.shaping.capacity.is_finite() && self.shaping.proportion.is_finite()) {
            return err("shaping weights must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub action: usize,
    /// Log-probability of `action` under the behavior policy.
    pub log_prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub label: String,
    pub seed: u64,
    pub worker: usize,
    pub steps: Vec<Step>,
    pub report: Report,
    pub final_state: EnvState,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Draw an index from `probs` with one uniform variate.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64);
    rng
}

/// One sampled rollout of `policy` over `instance`.
pub fn rollout(policy: &ActorParams, instance: &Instance, weights: ShapingWeights, seed: u64, worker: usize) -> Result<Trajectory> {
    let mut rng = worker_rng(seed, worker);
    let (mut env, mut obs) = Env::reset(instance, weights);
    let mut steps = Vec::with_capacity(instance.m());
    loop {
        let probs = policy.probabilities(&obs)?;
        let action = sample_index(&probs, &mut rng);
        let out = env.step(action)?;
        let next = out.next;
        steps.push(Step { obs, action, log_prob: probs[action].ln(), reward: out.reward.reward });
        match next {
            Some(o) => obs = o,
            None => break,
        }
    }
    Ok(Trajectory {
        label: instance.label().to_string(),
        seed,
        worker,
        steps,
        report: env.finalize()?,
        final_state: env.state().clone(),
    })
}

/// `n` independent rollouts; trajectory `i` depends only on `(seed, i)`.
pub fn collect(policy: &ActorParams, instance: &Instance, n: usize, seed: u64, weights: ShapingWeights) -> Result<Vec<Trajectory>> {
    (0..n).into_par_iter().map(|i| rollout(policy, instance, weights, seed, i)).collect()
}

/// `A_t = r_t - R_φ(s_t, o_t)` per step, per trajectory.
pub fn advantages(trajectories: &[Trajectory], reward_net: &RewardNetParams) -> Result<Vec<Vec<f64>>> {
    let rewards: Vec<Vec<f64>> = trajectories.iter().map(|t| t.steps.iter().map(|s| s.reward).collect()).collect();
    advantages_for(trajectories, &rewards, reward_net)
}

fn advantages_for(trajectories: &[Trajectory], rewards: &[Vec<f64>], reward_net: &RewardNetParams) -> Result<Vec<Vec<f64>>> {
    trajectories
        .iter()
        .zip(rewards)
        .map(|(t, r)| {
            t.steps
                .par_iter()
                .zip(r.par_iter())
                .map(|(s, &r)| Ok(r - reward_net.value(&s.obs)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// `min(ρ, clip(ρ, 1-ε, 1+ε)) · A`: the ratio is capped at `1+ε` before
/// weighting by the advantage.
pub fn clip_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    ratio.min(ratio.clamp(1.0 - eps, 1.0 + eps)) * advantage
}

/// Whether the gradient of [`clip_term`] flows through `ρ`.
fn unclipped_active(ratio: f64, eps: f64) -> bool {
    ratio <= ratio.clamp(1.0 - eps, 1.0 + eps)
}

#[derive(Debug, Clone, Copy)]
pub struct BatchStep<'a> {
    pub obs: &'a Observation,
    pub action: usize,
    pub behavior_log_prob: f64,
    pub advantage: f64,
}

const CHUNK: usize = 128;

/// Sums per-item contributions over fixed-size chunks in parallel and adds
/// the chunk results in order, so the result does not depend on the thread
/// count.
fn chunked_sum<P, T, F>(params: &P, items: &[T], f: F) -> Result<(f64, P)>
where
    P: ParamSet + Send + Sync,
    T: Sync,
    F: Fn(&T, &mut P) -> Result<f64> + Sync,
{
    let parts: Vec<Result<(f64, P)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut s = 0.0;
            for it in chunk {
                s += f(it, &mut g)?;
            }
            Ok((s, g))
        })
        .collect();
    let mut total = params.zeros_like();
    let mut sum = 0.0;
    for part in parts {
        let (s, g) = part?;
        sum += s;
        total.add_assign(&g);
    }
    Ok((sum, total))
}

/// Batch-mean clipped objective and its gradient wrt the actor parameters.
pub fn clip_objective(actor: &ActorParams, batch: &[BatchStep<'_>], eps: f64) -> Result<(f64, ActorParams)> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (sum, mut grads) = chunked_sum(actor, batch, |s, g| {
        let cache = actor.forward(s.obs)?;
        let log_p = cache.probs[s.action].ln();
        let ratio = (log_p - s.behavior_log_prob).exp();
        if !ratio.is_finite() {
            return Err(TrainError::NonFinite("probability ratio"));
        }
        if unclipped_active(ratio, eps) {
            // d(ρA)/dlogits = ρA (e_a - p)
            let scale = ratio * s.advantage;
            let d_logits: Vec<f64> = cache
                .probs
                .iter()
                .enumerate()
                .map(|(i, &p)| scale * (if i == s.action { 1.0 } else { 0.0 } - p))
                .collect();
            actor.backward_logits(s.obs, &cache, &d_logits, g);
        }
        Ok(clip_term(ratio, s.advantage, eps))
    })?;
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((sum / n, grads))
}

/// One ascent pass of the clipped objective over `batch` in minibatches.
/// Returns the pre-update objective of each minibatch.
pub fn policy_update(actor: &mut ActorParams, adam: &mut AdamState, batch: &[BatchStep<'_>], minibatch: usize, eps: f64) -> Result<Vec<f64>> {
    let mut history = Vec::new();
    for mb in batch.chunks(minibatch.max(1)) {
        let (value, mut grads) = clip_objective(actor, mb, eps)?;
        grads.scale(-1.0);
        adam_step(actor, &grads, adam)?;
        history.push(value);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy)]
pub struct RewardSample<'a> {
    pub obs: &'a Observation,
    pub target: f64,
}

/// Mean squared error of the reward network over `batch`, with gradient.
pub fn reward_mse(net: &RewardNetParams, batch: &[RewardSample<'_>]) -> Result<(f64, RewardNetParams)> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (sum, mut grads) = chunked_sum(net, batch, |s, g| {
        let cache = net.forward(s.obs)?;
        let err = cache.value - s.target;
        net.backward_value(s.obs, &cache, 2.0 * err, g);
        Ok(err * err)
    })?;
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let loss = sum / n;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("reward loss"));
    }
    Ok((loss, grads))
}

/// Minibatch Adam descent on the squared error; returns the pre-update loss
/// of each minibatch.
pub fn fit_reward_net(net: &mut RewardNetParams, adam: &mut AdamState, batch: &[RewardSample<'_>], minibatch: usize) -> Result<Vec<f64>> {
    let mut history = Vec::new();
    for mb in batch.chunks(minibatch.max(1)) {
        let (loss, grads) = reward_mse(net, mb)?;
        adam_step(net, &grads, adam)?;
        history.push(loss);
    }
    Ok(history)
}

/// Set the reward network's fixed output affine to the targets' mean and
/// standard deviation, so that the trainable part sees unit-scale targets.
pub fn calibrate_output(net: &mut RewardNetParams, targets: impl Iterator<Item = f64>) {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for t in targets {
        n += 1.0;
        sum += t;
        sq += t * t;
    }
    if n == 0.0 {
        return;
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    net.output_shift = mean;
    net.output_scale = var.sqrt().max(1e-6);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Mean over trajectories of the summed environment reward.
    pub mean_return: f64,
    pub average_cost: f64,
    pub violation_rate: f64,
    /// Mean pre-update minibatch MSE of the reward network.
    pub reward_mse: f64,
    /// Mean pre-update clipped objective.
    pub objective: f64,
    /// Largest multiplier after the episode (primal-dual variant).
    pub max_dual: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "episode\tmean_return\taverage_cost\tviolation_rate\treward_mse\tobjective\tmax_dual";

impl EpisodeMetrics {
    pub fn to_line(&self) -> String {
        let dual = self.max_dual.map_or_else(|| "-".to_string(), |d| format!("{d:?}"));
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            self.episode, self.mean_return, self.average_cost, self.violation_rate, self.reward_mse, self.objective, dual
        )
    }
}

pub fn write_train_log(path: impl AsRef<Path>, metrics: &[EpisodeMetrics]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRAIN_LOG_HEADER}")?;
    for m in metrics {
        writeln!(f, "{}", m.to_line())?;
    }
    f.flush()
}

/// Lagrange multipliers of the primal-dual variant.
///
/// Capacity constraints have one multiplier; proportion constraints have an
/// upper-side and a lower-side multiplier. All stay non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub step: f64,
    /// Mean final hub count (capacity) or share (proportion) of the last
    /// batch, per constraint.
    pub consumption: Vec<f64>,
}

impl DualState {
    pub fn new(instance: &Instance, step: f64) -> Self {
        let k = instance.constraints().len();
        Self { upper: vec![0.0; k], lower: vec![0.0; k], step, consumption: vec![0.0; k] }
    }

    pub fn max_multiplier(&self) -> f64 {
        self.upper.iter().chain(&self.lower).copied().fold(0.0, f64::max)
    }

    /// `−Σ_k λ_k · (consumption increment of k)` for assigning `parcel` to
    /// its candidate `action`.
    pub fn penalty(&self, instance: &Instance, parcel_index: usize, action: usize) -> f64 {
        let parcel = &instance.parcels()[parcel_index];
        let route = instance.route(parcel.candidates[action].route);
        let mut total = 0.0;
        for &k in instance.constraints_of_route(route_id(parcel, action)) {
            if instance.constraints()[k].is_capacity() {
                total += self.upper[k];
            }
        }
        for &k in instance.proportions_of_od(parcel.od()) {
            if let ConstraintKind::Proportion { provider, p_lower, p_upper, .. } = instance.constraints()[k].kind {
                let hit = if route.provider == provider { 1.0 } else { 0.0 };
                total += self.upper[k] * (hit - p_upper) + self.lower[k] * (p_lower - hit);
            }
        }
        -total
    }

    /// Projected multiplier step against the batch's mean consumption.
    pub fn update(&mut self, instance: &Instance, finals: &[&EnvState]) {
        let n = finals.len().max(1) as f64;
        for (k, c) in instance.constraints().iter().enumerate() {
            match c.kind {
                ConstraintKind::Capacity { hub, upper } => {
                    let j = finals.iter().map(|s| s.hub_used[hub.index()] as f64).sum::<f64>() / n;
                    self.consumption[k] = j;
                    let u = upper as f64;
                    self.upper[k] = (self.upper[k] + self.step * (j - u) / u).max(0.0);
                }
                ConstraintKind::Proportion { p_lower, p_upper, .. } => {
                    let p = finals.iter().map(|s| s.prop_counters[k].share()).sum::<f64>() / n;
                    self.consumption[k] = p;
                    self.upper[k] = (self.upper[k] + self.step * (p - p_upper) / p_upper.max(1e-9)).max(0.0);
                    self.lower[k] = if p_lower > 0.0 { (self.lower[k] + self.step * (p_lower - p) / p_lower).max(0.0) } else { 0.0 };
                }
            }
        }
    }
}

fn route_id(parcel: &crate::model::Parcel, action: usize) -> crate::model::RouteId {
    parcel.candidates[action].route
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub actor: ActorParams,
    pub reward_net: RewardNetParams,
    pub metrics: Vec<EpisodeMetrics>,
    pub dual: Option<DualState>,
}

/// Seed of the collection phase of `episode`.
fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed ^ ((episode as u64 + 1) << 32)
}

/// Called after every episode with the metrics and current parameters.
pub type EpisodeHook<'h> = dyn FnMut(&EpisodeMetrics, &ActorParams, &RewardNetParams) -> Result<()> + 'h;

/// Train with shaped rewards.
pub fn train(instance: &Instance, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(instance, cfg, None, &mut |_, _, _| Ok(()))
}

/// Train with bare cost rewards priced by Lagrange multipliers, updating
/// the multipliers after every episode.
pub fn train_ppo_pd(instance: &Instance, cfg: &TrainConfig, dual: DualState) -> Result<TrainOutcome> {
    let cfg = TrainConfig { shaping: ShapingWeights::NONE, ..cfg.clone() };
    train_with(instance, &cfg, Some(dual), &mut |_, _, _| Ok(()))
}

pub fn train_with(instance: &Instance, cfg: &TrainConfig, mut dual: Option<DualState>, hook: &mut EpisodeHook<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net_cfg = cfg.net.clone().with_vocabulary(instance);
    net_cfg.validate().map_err(TrainError::Config)?;
    let mut init_rng = worker_rng(cfg.seed, 0);
    let mut actor = ActorParams::new(&net_cfg, &mut init_rng);
    let mut reward_net = RewardNetParams::new(&net_cfg, &mut init_rng);
    let mut actor_adam = AdamState::new(&actor, cfg.actor_lr);
    let mut reward_adam = AdamState::new(&reward_net, cfg.reward_lr);
    let mut shuffle_rng = worker_rng(cfg.seed, 1);
    let mut metrics = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let trajectories = collect(&actor, instance, cfg.trajectories, episode_seed(cfg.seed, episode), cfg.shaping)?;
        let targets: Vec<Vec<f64>> = trajectories
            .iter()
            .map(|t| {
                t.steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| match &dual {
                        Some(d) => s.reward + d.penalty(instance, i, s.action),
                        None => s.reward,
                    })
                    .collect()
            })
            .collect();
        if episode == 0 && cfg.calibrate_reward_output {
            calibrate_output(&mut reward_net, targets.iter().flatten().copied());
        }
        let adv = advantages_for(&trajectories, &targets, &reward_net)?;

        let mut order: Vec<(usize, usize)> =
            trajectories.iter().enumerate().flat_map(|(i, t)| (0..t.steps.len()).map(move |j| (i, j))).collect();
        let (mut objective, mut mse) = (Vec::new(), Vec::new());
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let batch: Vec<BatchStep<'_>> = order
                .iter()
                .map(|&(i, j)| {
                    let s = &trajectories[i].steps[j];
                    BatchStep { obs: &s.obs, action: s.action, behavior_log_prob: s.log_prob, advantage: adv[i][j] }
                })
                .collect();
            objective.extend(policy_update(&mut actor, &mut actor_adam, &batch, cfg.minibatch, cfg.clip_eps)?);
            let samples: Vec<RewardSample<'_>> =
                order.iter().map(|&(i, j)| RewardSample { obs: &trajectories[i].steps[j].obs, target: targets[i][j] }).collect();
            mse.extend(fit_reward_net(&mut reward_net, &mut reward_adam, &samples, cfg.minibatch)?);
        }

        if let Some(d) = dual.as_mut() {
            let finals: Vec<&EnvState> = trajectories.iter().map(|t| &t.final_state).collect();
            d.update(instance, &finals);
        }
        let n = trajectories.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let m = EpisodeMetrics {
            episode,
            mean_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n,
            average_cost: trajectories.iter().map(|t| t.report.average_cost).sum::<f64>() / n,
            violation_rate: trajectories.iter().map(|t| t.report.violation_rate).sum::<f64>() / n,
            reward_mse: mean(&mse),
            objective: mean(&objective),
            max_dual: dual.as_ref().map(DualState::max_multiplier),
        };
        log::info!(
            "episode {episode}: return {:.3} cost {:.4} violation {:.5} mse {:.4}",
            m.mean_return,
            m.average_cost,
            m.violation_rate,
            m.reward_mse
        );
        hook(&m, &actor, &reward_net)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { actor, reward_net, metrics, dual })
}
