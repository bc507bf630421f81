//! PPO with GAE, a Lyapunov critic and a descent-condition penalty.
//!
//! An iteration collects a fixed number of transitions from a pool of
//! environments, labels and shapes the finished episodes, then runs several
//! epochs of minibatch updates on the policy, the value baseline and (when
//! enabled) the Lyapunov critic.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EpisodeSummary, ReachingEnv, StepRecord, EE_ERROR, EE_VELOCITY};
use crate::error::{Error, Result};
use crate::neural::{
    clip_grad_norm, gaussian_log_prob, optimizer_update, sample_and_logprob, Checkpoint, GaussianPolicy, LyapunovNet,
    OptimState, Parameters, ValueNet, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::semantic::{
    apply_guidance_stage_with, shaped_reward, GuidanceConfig, GuidanceRecord, GuidanceStage, LabelIncidence,
    LabelSource, Labeler, SemanticLabels, ShapingWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub batch: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    /// Parallel environment instances; must divide `batch`.
    pub num_envs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            batch: 2048,
            minibatch: 256,
            epochs: 10,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            init_log_std: 0.0,
            num_envs: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("ppo.lr", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("ppo.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("ppo.gae_lambda", "must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("ppo.clip_eps", "must lie in (0, 1)"));
        }
        if self.batch == 0 || self.minibatch == 0 || self.batch % self.minibatch != 0 {
            return Err(Error::config("ppo.minibatch", "must be positive and divide ppo.batch"));
        }
        if self.epochs == 0 {
            return Err(Error::config("ppo.epochs", "must be positive"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("ppo.entropy_coef", "must be non-negative"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("ppo.max_grad_norm", "must be positive"));
        }
        if self.num_envs == 0 || self.batch % self.num_envs != 0 {
            return Err(Error::config("ppo.num_envs", "must be positive and divide ppo.batch"));
        }
        Ok(())
    }

    pub fn steps_per_env(&self) -> usize {
        self.batch / self.num_envs
    }
}

/// Observation entries whose squared norm measures distance to the goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalMetric {
    pub indices: Vec<usize>,
}

impl Default for GoalMetric {
    fn default() -> Self {
        Self {
            indices: EE_VELOCITY.chain(EE_ERROR).collect(),
        }
    }
}

impl GoalMetric {
    pub fn squared_norm(&self, obs: &[f64]) -> f64 {
        self.indices.iter().map(|&i| obs[i] * obs[i]).sum()
    }

    pub fn validate(&self, obs_dim: usize) -> Result<()> {
        if self.indices.iter().any(|&i| i >= obs_dim) {
            return Err(Error::config("descent.goal_metric", format!("indices must be below {obs_dim}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    pub c: f64,
    pub mu: f64,
    pub goal_metric: GoalMetric,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            c: 1e-3,
            mu: 1.0,
            goal_metric: GoalMetric::default(),
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) {
            return Err(Error::config("descent.c", "must be non-negative"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::config("descent.mu", "must be non-negative"));
        }
        Ok(())
    }
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub fault: bool,
}

/// Episodic environment driven by the trainer.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<Transition>;
    fn summarize(&self) -> Result<EpisodeSummary>;
    /// Per-step trace of the current episode, if the environment keeps one.
    fn trace(&self) -> &[StepRecord] {
        &[]
    }
}

impl Environment for ReachingEnv {
    fn obs_dim(&self) -> usize {
        crate::env::OBS_DIM
    }

    fn action_dim(&self) -> usize {
        crate::env::ACTION_DIM
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        Ok(ReachingEnv::reset(self, seed).0)
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        let out = ReachingEnv::step(self, action)?;
        Ok(Transition {
            obs: out.observation.0,
            reward: out.reward,
            done: out.done,
            fault: out.fault,
        })
    }

    fn summarize(&self) -> Result<EpisodeSummary> {
        ReachingEnv::summarize(self)
    }

    fn trace(&self) -> &[StepRecord] {
        ReachingEnv::trace(self)
    }
}

/// Transitions stored environment-major: each environment's steps are
/// contiguous and the last step of every segment is an episode end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Environment reward before shaping.
    pub base_rewards: Vec<f64>,
    /// Reward seen by the learner.
    pub rewards: Vec<f64>,
    /// Terminal: no bootstrap beyond this step.
    pub dones: Vec<bool>,
    /// Episode boundary, terminal or truncated.
    pub ends: Vec<bool>,
    pub faults: Vec<bool>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn next_obs_row(&self, i: usize) -> &[f64] {
        &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn obs_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.obs_dim), &self.obs).expect("buffer layout")
    }

    pub fn next_obs_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.obs_dim), &self.next_obs).expect("buffer layout")
    }

    pub fn actions_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.act_dim), &self.actions).expect("buffer layout")
    }

    fn append(&mut self, other: RolloutBuffer) {
        self.obs.extend(other.obs);
        self.next_obs.extend(other.next_obs);
        self.actions.extend(other.actions);
        self.log_probs.extend(other.log_probs);
        self.base_rewards.extend(other.base_rewards);
        self.rewards.extend(other.rewards);
        self.dones.extend(other.dones);
        self.ends.extend(other.ends);
        self.faults.extend(other.faults);
        self.values.extend(other.values);
        self.next_values.extend(other.next_values);
    }

    /// Fill `advantages` and `returns`.
    pub fn compute_gae(&mut self, gamma: f64, lam: f64) {
        let (adv, ret) = compute_gae(
            &self.rewards,
            &self.values,
            &self.next_values,
            &self.dones,
            &self.ends,
            gamma,
            lam,
        );
        self.advantages = adv;
        self.returns = ret;
    }

    /// Recompute behaviour log-probabilities with one batched pass so that
    /// later minibatch passes reproduce them exactly.
    pub fn refresh_log_probs(&mut self, policy: &GaussianPolicy) -> Result<()> {
        self.log_probs = batch_log_probs(policy, self.obs_matrix(), self.actions_matrix())?;
        Ok(())
    }
}

/// Generalized advantage estimation.
///
/// `δ_t = r_t + γ V(s_{t+1}) (1 - done_t) - V(s_t)`,
/// `A_t = δ_t + γ λ (1 - end_t) A_{t+1}`, `returns = A + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    ends: &[bool],
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let carry = if ends[t] || t + 1 == n { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_values[t] * not_done - values[t];
        adv[t] = delta + gamma * lam * carry * next_adv;
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// Log-probabilities of `actions` under `policy`, one row per observation.
pub fn batch_log_probs(policy: &GaussianPolicy, obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
    let mean = policy.mlp.forward(obs)?;
    let log_std = policy.clamped_log_std();
    Ok((0..obs.nrows())
        .map(|i| {
            gaussian_log_prob(
                actions.row(i).as_slice().expect("row-major"),
                mean.row(i).as_slice().expect("row-major"),
                &log_std,
            )
        })
        .collect())
}

/// Probability ratio `exp(log π_new - log π_old)`.
pub fn ratios(new_log_probs: &[f64], old_log_probs: &[f64]) -> Vec<f64> {
    new_log_probs.iter().zip(old_log_probs).map(|(n, o)| (n - o).exp()).collect()
}

/// Clipped surrogate `-mean(min(ρA, clip(ρ, 1-ε, 1+ε) A))`.
pub fn surrogate_from_ratios(ratio: &[f64], adv: &[f64], clip_eps: f64) -> f64 {
    let n = ratio.len() as f64;
    -ratio
        .iter()
        .zip(adv)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a))
        .sum::<f64>()
        / n
}

/// A gathered set of transitions for one gradient step.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Per-transition descent hinge, when the penalty is active.
    pub hinges: Option<Vec<f64>>,
    /// Lyapunov regression targets, when the critic is trained.
    pub lyapunov_targets: Option<Vec<f64>>,
}

impl Minibatch {
    pub fn gather(
        buf: &RolloutBuffer,
        idx: &[usize],
        hinges: Option<&[f64]>,
        lyapunov_targets: Option<&[f64]>,
    ) -> Self {
        let obs = Array2::from_shape_fn((idx.len(), buf.obs_dim), |(r, c)| buf.obs[idx[r] * buf.obs_dim + c]);
        let actions =
            Array2::from_shape_fn((idx.len(), buf.act_dim), |(r, c)| buf.actions[idx[r] * buf.act_dim + c]);
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            obs,
            actions,
            old_log_probs: pick(&buf.log_probs),
            advantages: pick(&buf.advantages),
            returns: pick(&buf.returns),
            hinges: hinges.map(pick),
            lyapunov_targets: lyapunov_targets.map(pick),
        }
    }

    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }
}

/// PPO surrogate loss of `policy` on a minibatch.
pub fn ppo_surrogate_loss(policy: &GaussianPolicy, mb: &Minibatch, clip_eps: f64) -> Result<f64> {
    let lp = batch_log_probs(policy, mb.obs.view(), mb.actions.view())?;
    Ok(surrogate_from_ratios(&ratios(&lp, &mb.old_log_probs), &mb.advantages, clip_eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyLoss {
    pub total: f64,
    pub surrogate: f64,
    pub descent: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Policy objective and its gradient:
/// `surrogate + mu·mean(max(ρh, clip(ρ)h)) - entropy_coef·H`. The hinge `h`
/// is a fixed per-transition cost, so at `ρ = 1` the middle term equals the
/// descent penalty and its gradient is the likelihood-ratio gradient of that
/// cost.
pub fn policy_loss_and_grad(
    policy: &GaussianPolicy,
    mb: &Minibatch,
    clip_eps: f64,
    mu: f64,
    entropy_coef: f64,
) -> Result<(PolicyLoss, Vec<f64>)> {
    let n = mb.len();
    let nf = n as f64;
    let cache = policy.mlp.forward_cached(mb.obs.view())?;
    let mean = &cache.output;
    let log_std = policy.clamped_log_std();
    let act_dim = log_std.len();
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();

    let mut loss = PolicyLoss::default();
    let mut d_mean = Array2::<f64>::zeros((n, act_dim));
    let mut d_log_std = vec![0.0; act_dim];
    for i in 0..n {
        let a = mb.actions.row(i);
        let m = mean.row(i);
        let lp = gaussian_log_prob(
            a.as_slice().expect("row-major"),
            m.as_slice().expect("row-major"),
            &log_std,
        );
        let log_ratio = lp - mb.old_log_probs[i];
        let r = log_ratio.exp();
        let adv = mb.advantages[i];
        let unclipped = r * adv;
        let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        loss.surrogate -= unclipped.min(clipped) / nf;
        loss.approx_kl += ((r - 1.0) - log_ratio) / nf;
        if (r - 1.0).abs() > clip_eps {
            loss.clip_fraction += 1.0 / nf;
        }
        // dloss/dlogp for this sample.
        let mut g = if unclipped <= clipped { -unclipped / nf } else { 0.0 };
        if let Some(h) = &mb.hinges {
            // Pessimistic clipping as for the surrogate: once the ratio has
            // moved far enough to lower the cost, the gradient stops.
            let cost = r * h[i];
            let clipped_cost = r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * h[i];
            loss.descent += cost.max(clipped_cost) / nf;
            if cost >= clipped_cost {
                g += mu * cost / nf;
            }
        }
        if g != 0.0 {
            for j in 0..act_dim {
                let diff = a[j] - m[j];
                d_mean[[i, j]] = g * diff * inv_var[j];
                d_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7;
    loss.entropy = log_std.iter().map(|l| l + HALF_LOG_2PI_E).sum();
    loss.total = loss.surrogate + mu * loss.descent - entropy_coef * loss.entropy;

    let mut grad = vec![0.0; policy.num_params()];
    let n_mlp = policy.mlp.params.len();
    policy.mlp.backward(&cache, d_mean.view(), &mut grad[..n_mlp]);
    for j in 0..act_dim {
        let raw = policy.log_std[j];
        let inside = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw);
        grad[n_mlp + j] = if inside { d_log_std[j] - entropy_coef } else { 0.0 };
    }
    Ok((loss, grad))
}

/// `mean((V - R)²)` and its gradient.
pub fn value_loss_and_grad(value: &ValueNet, obs: ArrayView2<f64>, returns: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cache = value.mlp.forward_cached(obs)?;
    let n = returns.len() as f64;
    let mut dy = Array2::<f64>::zeros((returns.len(), 1));
    let mut loss = 0.0;
    for (i, &r) in returns.iter().enumerate() {
        let e = cache.output[[i, 0]] - r;
        loss += e * e / n;
        dy[[i, 0]] = 2.0 * e / n;
    }
    let mut grad = vec![0.0; value.num_params()];
    value.mlp.backward(&cache, dy.view(), &mut grad);
    Ok((loss, grad))
}

/// `mean((L - y)²)` and its gradient.
pub fn lyapunov_loss_and_grad(lnet: &LyapunovNet, obs: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = lnet.forward_batch(obs)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut d = vec![0.0; targets.len()];
    for i in 0..targets.len() {
        let e = out[i] - targets[i];
        loss += e * e / n;
        d[i] = 2.0 * e / n;
    }
    let mut grad = vec![0.0; lnet.num_params()];
    lnet.backward(&cache, &d, &mut grad);
    Ok((loss, grad))
}

/// Per-transition hinge `max(0, L(o') - L(o) + c·g)` with `g = ‖goal(o)‖²`.
pub fn descent_hinges(l: &[f64], l_next: &[f64], goal_sq: &[f64], c: f64) -> Vec<f64> {
    l.iter()
        .zip(l_next)
        .zip(goal_sq)
        .map(|((a, b), g)| (b - a + c * g).max(0.0))
        .collect()
}

/// Mean hinge and violation rate over the pairs selected by `mask`.
pub fn descent_penalty_from_values(l: &[f64], l_next: &[f64], goal_sq: &[f64], mask: &[bool], c: f64) -> (f64, f64) {
    let h = descent_hinges(l, l_next, goal_sq, c);
    let mut sum = 0.0;
    let mut violations = 0usize;
    let mut n = 0usize;
    for (hv, &m) in h.iter().zip(mask) {
        if m {
            n += 1;
            sum += hv;
            violations += (*hv > 0.0) as usize;
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (sum / n as f64, violations as f64 / n as f64)
    }
}

/// Descent penalty of `lnet` over the consecutive pairs in `buf`; pairs
/// ending in a simulation fault are excluded. Returns (penalty, violation rate).
pub fn lyapunov_descent_penalty(lnet: &LyapunovNet, buf: &RolloutBuffer, cfg: &DescentConfig) -> Result<(f64, f64)> {
    let (l, _) = lnet.forward_batch(buf.obs_matrix())?;
    let (ln, _) = lnet.forward_batch(buf.next_obs_matrix())?;
    let g: Vec<f64> = (0..buf.len()).map(|i| cfg.goal_metric.squared_norm(buf.obs_row(i))).collect();
    let mask: Vec<bool> = buf.faults.iter().map(|f| !f).collect();
    Ok(descent_penalty_from_values(&l, &ln, &g, &mask, cfg.c))
}

/// Discounted goal-distance cost-to-go `y_t = g_t + γ y_{t+1}`, restarted at
/// every episode boundary. At a truncation that is not terminal the tail is
/// bootstrapped with `bootstrap[t]`.
pub fn lyapunov_targets(goal_sq: &[f64], dones: &[bool], ends: &[bool], bootstrap: &[f64], gamma: f64) -> Vec<f64> {
    let n = goal_sq.len();
    let mut y = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let tail = if ends[t] || t + 1 == n {
            if dones[t] {
                0.0
            } else {
                bootstrap[t]
            }
        } else {
            next
        };
        y[t] = goal_sq[t] + gamma * tail;
        next = y[t];
    }
    y
}

/// Fit the critic to the cost-to-go targets of `buf` for `epochs` passes of
/// shuffled minibatches. Returns the mean loss of the last pass.
pub fn train_lyapunov_critic(
    lnet: &mut LyapunovNet,
    opt: &mut OptimState,
    buf: &RolloutBuffer,
    goal: &GoalMetric,
    gamma: f64,
    minibatch: usize,
    epochs: usize,
    max_grad_norm: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let g: Vec<f64> = (0..buf.len()).map(|i| goal.squared_norm(buf.obs_row(i))).collect();
    let (boot, _) = lnet.forward_batch(buf.next_obs_matrix())?;
    let y = lyapunov_targets(&g, &buf.dones, &buf.ends, &boot, gamma);
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        idx.shuffle(rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in idx.chunks(minibatch) {
            let mb = Minibatch::gather(buf, chunk, None, Some(&y));
            let (loss, mut grad) = lyapunov_loss_and_grad(lnet, mb.obs.view(), mb.lyapunov_targets.as_ref().unwrap())?;
            clip_grad_norm(&mut grad, max_grad_norm);
            optimizer_update(&mut lnet.mlp.params, &grad, opt)?;
            sum += loss;
            count += 1;
        }
        last = sum / count as f64;
    }
    Ok(last)
}

/// One finished (or truncated) episode from a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub env: usize,
    /// Offset of the first step inside the rollout buffer.
    pub start: usize,
    pub len: usize,
    pub truncated: bool,
    pub summary: EpisodeSummary,
    pub base_return: f64,
    pub shaped_return: f64,
    pub labels: Option<SemanticLabels>,
    pub label_source: Option<LabelSource>,
    pub trace: Option<Vec<StepRecord>>,
}

/// Seeds and bookkeeping for one collection pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutContext {
    pub master_seed: u64,
    pub iteration: usize,
    pub keep_traces: bool,
}

/// Seed of the `episode`-th reset of environment `env` in `iteration`.
pub fn episode_seed(master: u64, iteration: usize, env: usize, episode: usize) -> u64 {
    derive_seed(
        master,
        Stream::EnvTargets,
        ((iteration as u64) << 32) | ((env as u64) << 16) | episode as u64,
    )
}

/// Run every environment for `steps_per_env` transitions under the current
/// stochastic policy. Each environment starts a fresh episode; an episode
/// cut off by the step quota is marked truncated and bootstrapped.
pub fn collect_rollouts<E: Environment>(
    envs: &mut [E],
    policy: &GaussianPolicy,
    value: &ValueNet,
    steps_per_env: usize,
    ctx: RolloutContext,
) -> Result<(RolloutBuffer, Vec<EpisodeRecord>)> {
    let n_env = envs.len();
    if n_env == 0 {
        return Err(Error::Empty("environment pool"));
    }
    let obs_dim = envs[0].obs_dim();
    let act_dim = envs[0].action_dim();
    let mut parts: Vec<RolloutBuffer> = (0..n_env).map(|_| RolloutBuffer::new(obs_dim, act_dim)).collect();
    let mut rngs: Vec<_> = (0..n_env)
        .map(|e| stream_rng(ctx.master_seed, Stream::ActionNoise, ((ctx.iteration as u64) << 32) | e as u64))
        .collect();
    let mut current: Vec<Vec<f64>> = Vec::with_capacity(n_env);
    let mut ep_counter = vec![0usize; n_env];
    let mut ep_start = vec![0usize; n_env];
    let mut records: Vec<Vec<EpisodeRecord>> = vec![Vec::new(); n_env];
    for (e, env) in envs.iter_mut().enumerate() {
        current.push(env.reset(episode_seed(ctx.master_seed, ctx.iteration, e, 0))?);
    }
    let log_std = policy.clamped_log_std();

    for t in 0..steps_per_env {
        let obs = Array2::from_shape_fn((n_env, obs_dim), |(r, c)| current[r][c]);
        let means = policy.mlp.forward(obs.view())?;
        let values = value.mlp.forward(obs.view())?;
        let mut next_obs_all = Vec::with_capacity(n_env);
        for e in 0..n_env {
            let (action, lp) = sample_and_logprob(means.row(e).as_slice().expect("row-major"), &log_std, &mut rngs[e]);
            let tr = envs[e].step(&action)?;
            let last = t + 1 == steps_per_env;
            let end = tr.done || last;
            let buf = &mut parts[e];
            buf.obs.extend_from_slice(&current[e]);
            buf.next_obs.extend_from_slice(&tr.obs);
            buf.actions.extend_from_slice(&action);
            buf.log_probs.push(lp);
            buf.base_rewards.push(tr.reward);
            buf.rewards.push(tr.reward);
            buf.dones.push(tr.done);
            buf.ends.push(end);
            buf.faults.push(tr.fault);
            buf.values.push(values[[e, 0]]);
            buf.next_values.push(0.0);
            if end {
                let start = ep_start[e];
                let len = buf.len() - start;
                let base_return = buf.base_rewards[start..].iter().sum();
                records[e].push(EpisodeRecord {
                    env: e,
                    start,
                    len,
                    truncated: !tr.done,
                    summary: envs[e].summarize()?,
                    base_return,
                    shaped_return: base_return,
                    labels: None,
                    label_source: None,
                    trace: ctx.keep_traces.then(|| envs[e].trace().to_vec()),
                });
                ep_start[e] = buf.len();
                if !last {
                    ep_counter[e] += 1;
                    next_obs_all.push(envs[e].reset(episode_seed(ctx.master_seed, ctx.iteration, e, ep_counter[e]))?);
                    continue;
                }
            }
            next_obs_all.push(tr.obs);
        }
        // GAE reads V(s') for every non-terminal step.
        let next_rows: Vec<(usize, usize)> = (0..n_env)
            .filter(|&e| !*parts[e].dones.last().expect("step recorded"))
            .map(|e| (e, parts[e].len() - 1))
            .collect();
        if !next_rows.is_empty() {
            let m = Array2::from_shape_fn((next_rows.len(), obs_dim), |(r, c)| {
                let (e, i) = next_rows[r];
                parts[e].next_obs[i * obs_dim + c]
            });
            let v = value.mlp.forward(m.view())?;
            for (r, &(e, i)) in next_rows.iter().enumerate() {
                parts[e].next_values[i] = v[[r, 0]];
            }
        }
        current = next_obs_all;
    }

    let mut buffer = RolloutBuffer::new(obs_dim, act_dim);
    let mut all_records = Vec::new();
    for (e, part) in parts.into_iter().enumerate() {
        let offset = buffer.len();
        buffer.append(part);
        for mut r in std::mem::take(&mut records[e]) {
            r.start += offset;
            all_records.push(r);
        }
    }
    Ok((buffer, all_records))
}

/// Deterministic (mean-action) rollout of one episode.
pub fn evaluate_episode<E: Environment>(
    env: &mut E,
    act: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    seed: u64,
) -> Result<(EpisodeSummary, f64)> {
    let mut obs = env.reset(seed)?;
    let mut ret = 0.0;
    loop {
        let a = act(&obs)?;
        let tr = env.step(&a)?;
        ret += tr.reward;
        if tr.done {
            break;
        }
        obs = tr.obs;
    }
    Ok((env.summarize()?, ret))
}

/// Reward-shaping setup; absent when the semantic layer is disabled.
#[derive(Debug, Clone)]
pub struct ShapingSetup {
    pub labeler: Labeler,
    pub initial_weights: ShapingWeights,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub ppo: PpoConfig,
    pub descent: DescentConfig,
    pub lyapunov: bool,
    pub shaping: Option<ShapingSetup>,
    pub seed: u64,
    pub iterations: usize,
    /// Keep per-step traces of every `trace_every`-th episode (0 = none).
    pub trace_every: usize,
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_base_return: f64,
    pub mean_final_error: f64,
    pub success_rate: f64,
    pub mean_reach_time: f64,
    pub mean_peak_f_rep: f64,
    pub mean_f_rep: f64,
    pub descent_violation_rate: f64,
    pub descent_penalty: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub lyapunov_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub lambda_rigid: f64,
    pub lambda_unsafe: f64,
    pub lambda_ineff: f64,
    pub rigid_rate: f64,
    pub unsafe_rate: f64,
    pub inefficient_rate: f64,
    pub label_fallbacks: usize,
    pub guidance_stage: usize,
    pub lr: f64,
    pub skipped_updates: usize,
}

/// Everything produced by one iteration.
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub metrics: IterationMetrics,
    pub episodes: Vec<EpisodeRecord>,
    pub guidance: Option<GuidanceRecord>,
    /// Per-step shaped and base rewards of the consumed buffer.
    pub rewards: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    iteration: usize,
    env_steps: usize,
    episodes_seen: usize,
    stage: usize,
    lr_halved: bool,
    skipped_updates: usize,
    extra: String,
}

pub struct Trainer<E: Environment> {
    pub cfg: TrainerConfig,
    pub envs: Vec<E>,
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub lyapunov: Option<LyapunovNet>,
    opt_policy: OptimState,
    opt_value: OptimState,
    opt_lyapunov: Option<OptimState>,
    weights: ShapingWeights,
    stage: GuidanceStage,
    window: Vec<[bool; 3]>,
    iteration: usize,
    env_steps: usize,
    episodes_seen: usize,
    lr_halved: bool,
    skipped_updates: usize,
}

impl<E: Environment> Trainer<E> {
    pub fn new(cfg: TrainerConfig, envs: Vec<E>) -> Result<Self> {
        cfg.ppo.validate()?;
        cfg.descent.validate()?;
        if envs.len() != cfg.ppo.num_envs {
            return Err(Error::config(
                "ppo.num_envs",
                format!("expected {} environments, got {}", cfg.ppo.num_envs, envs.len()),
            ));
        }
        let obs_dim = envs[0].obs_dim();
        let act_dim = envs[0].action_dim();
        cfg.descent.goal_metric.validate(obs_dim)?;
        if let Some(s) = &cfg.shaping {
            s.initial_weights.validate()?;
        }
        let policy = GaussianPolicy::new(
            obs_dim,
            act_dim,
            cfg.ppo.init_log_std,
            &mut stream_rng(cfg.seed, Stream::PolicyInit, 0),
        );
        let value = ValueNet::new(obs_dim, &mut stream_rng(cfg.seed, Stream::ValueInit, 0));
        let lyapunov = cfg
            .lyapunov
            .then(|| LyapunovNet::new(obs_dim, &mut stream_rng(cfg.seed, Stream::LyapunovInit, 0)));
        let opt_lyapunov = lyapunov.as_ref().map(|l| OptimState::new(l.num_params(), cfg.ppo.lr));
        let weights = cfg.shaping.as_ref().map(|s| s.initial_weights).unwrap_or_else(ShapingWeights::zero);
        Ok(Self {
            opt_policy: OptimState::new(policy.num_params(), cfg.ppo.lr),
            opt_value: OptimState::new(value.num_params(), cfg.ppo.lr),
            opt_lyapunov,
            policy,
            value,
            lyapunov,
            weights,
            stage: GuidanceStage::default(),
            window: Vec::new(),
            iteration: 0,
            env_steps: 0,
            episodes_seen: 0,
            lr_halved: false,
            skipped_updates: 0,
            envs,
            cfg,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn weights(&self) -> ShapingWeights {
        self.weights
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    fn halve_lr_once(&mut self) {
        if !self.lr_halved {
            self.lr_halved = true;
            self.opt_policy.lr *= 0.5;
            self.opt_value.lr *= 0.5;
            if let Some(o) = &mut self.opt_lyapunov {
                o.lr *= 0.5;
            }
            log::warn!("learning rate halved to {}", self.opt_policy.lr);
        }
    }

    fn label_episodes(&mut self, buf: &mut RolloutBuffer, episodes: &mut [EpisodeRecord]) -> usize {
        let Some(setup) = &self.cfg.shaping else {
            return 0;
        };
        let mut fallbacks = 0;
        // A truncated episode has no outcome to judge; it keeps its base reward.
        for ep in episodes.iter_mut().filter(|e| !e.truncated) {
            let (labels, source) = setup.labeler.label(&ep.summary);
            if matches!(source, LabelSource::Fallback(_)) {
                fallbacks += 1;
            }
            let mut shaped = 0.0;
            for t in ep.start..ep.start + ep.len {
                buf.rewards[t] = shaped_reward(buf.base_rewards[t], &labels, &self.weights);
                shaped += buf.rewards[t];
            }
            ep.shaped_return = shaped;
            self.window.push(labels.flags());
            ep.labels = Some(labels);
            ep.label_source = Some(source);
        }
        fallbacks
    }

    /// Collect, label, and update once.
    pub fn train_iteration(&mut self) -> Result<IterationReport> {
        let ppo = self.cfg.ppo.clone();
        let ctx = RolloutContext {
            master_seed: self.cfg.seed,
            iteration: self.iteration,
            keep_traces: self.cfg.trace_every > 0,
        };
        let (mut buf, mut episodes) =
            collect_rollouts(&mut self.envs, &self.policy, &self.value, ppo.steps_per_env(), ctx)?;
        let label_fallbacks = self.label_episodes(&mut buf, &mut episodes);
        buf.refresh_log_probs(&self.policy)?;
        buf.compute_gae(ppo.gamma, ppo.gae_lambda);
        normalize_advantages(&mut buf.advantages);

        let mut descent_penalty = 0.0;
        let mut violation_rate = 0.0;
        let mut hinges = None;
        let mut lyap_targets = None;
        if let Some(lnet) = &self.lyapunov {
            let (l, _) = lnet.forward_batch(buf.obs_matrix())?;
            let (ln, _) = lnet.forward_batch(buf.next_obs_matrix())?;
            let g: Vec<f64> = (0..buf.len())
                .map(|i| self.cfg.descent.goal_metric.squared_norm(buf.obs_row(i)))
                .collect();
            let mask: Vec<bool> = buf.faults.iter().map(|f| !f).collect();
            (descent_penalty, violation_rate) = descent_penalty_from_values(&l, &ln, &g, &mask, self.cfg.descent.c);
            let mut h = descent_hinges(&l, &ln, &g, self.cfg.descent.c);
            for (hv, m) in h.iter_mut().zip(&mask) {
                if !m {
                    *hv = 0.0;
                }
            }
            if self.cfg.descent.mu > 0.0 {
                // The critic's scale drifts while it trains; express the
                // hinges relative to the batch mean of L.
                let scale = l.iter().sum::<f64>() / l.len() as f64 + 1e-8;
                h.iter_mut().for_each(|hv| *hv /= scale);
                hinges = Some(h);
            }
            lyap_targets = Some(lyapunov_targets(&g, &buf.dones, &buf.ends, &ln, ppo.gamma));
        }

        let mut rng = stream_rng(self.cfg.seed, Stream::Minibatch, self.iteration as u64);
        let mut idx: Vec<usize> = (0..buf.len()).collect();
        let mut sums = PolicyLoss::default();
        let (mut v_sum, mut l_sum) = (0.0, 0.0);
        let mut steps = 0usize;
        let mu = self.cfg.descent.mu;
        for _ in 0..ppo.epochs {
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(ppo.minibatch) {
                let mb = Minibatch::gather(&buf, chunk, hinges.as_deref(), lyap_targets.as_deref());
                let (pl, mut pg) = policy_loss_and_grad(&self.policy, &mb, ppo.clip_eps, mu, ppo.entropy_coef)?;
                let (vl, mut vg) = value_loss_and_grad(&self.value, mb.obs.view(), &mb.returns)?;
                let lyap = match (&self.lyapunov, &mb.lyapunov_targets) {
                    (Some(lnet), Some(y)) => Some(lyapunov_loss_and_grad(lnet, mb.obs.view(), y)?),
                    _ => None,
                };
                let finite = pl.total.is_finite()
                    && vl.is_finite()
                    && pg.iter().chain(&vg).all(|g| g.is_finite())
                    && lyap.as_ref().is_none_or(|(l, g)| l.is_finite() && g.iter().all(|x| x.is_finite()));
                if !finite {
                    log::warn!("non-finite loss at iteration {}; update skipped", self.iteration);
                    self.skipped_updates += 1;
                    self.halve_lr_once();
                    continue;
                }
                clip_grad_norm(&mut pg, ppo.max_grad_norm);
                let mut flat = self.policy.flat();
                optimizer_update(&mut flat, &pg, &mut self.opt_policy)?;
                self.policy.load_flat(&flat)?;
                clip_grad_norm(&mut vg, ppo.max_grad_norm);
                optimizer_update(&mut self.value.mlp.params, &vg, &mut self.opt_value)?;
                if let (Some((ll, mut lg)), Some(lnet), Some(opt)) =
                    (lyap, self.lyapunov.as_mut(), self.opt_lyapunov.as_mut())
                {
                    clip_grad_norm(&mut lg, ppo.max_grad_norm);
                    optimizer_update(&mut lnet.mlp.params, &lg, opt)?;
                    l_sum += ll;
                }
                sums.total += pl.total;
                sums.entropy += pl.entropy;
                sums.approx_kl += pl.approx_kl;
                sums.clip_fraction += pl.clip_fraction;
                v_sum += vl;
                steps += 1;
            }
        }
        let k = steps.max(1) as f64;

        self.iteration += 1;
        self.env_steps += buf.len();
        self.episodes_seen += episodes.len();
        let guidance = self.maybe_guidance();

        // Trace retention by global episode number.
        if self.cfg.trace_every > 0 {
            let first = self.episodes_seen - episodes.len();
            for (j, ep) in episodes.iter_mut().enumerate() {
                if (first + j) % self.cfg.trace_every != 0 {
                    ep.trace = None;
                }
            }
        }

        // Summaries cover complete episodes; truncated ones count only when
        // nothing finished.
        let complete = episodes.iter().any(|e| !e.truncated);
        let counted: Vec<&EpisodeRecord> = episodes.iter().filter(|e| !complete || !e.truncated).collect();
        let n_ep = counted.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| counted.iter().map(|e| f(e)).sum::<f64>() / n_ep;
        let incidence = LabelIncidence::from_labels(episodes.iter().filter_map(|e| e.labels.as_ref()));
        let reported = self.weights_for_report();
        let metrics = IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes: counted.len(),
            mean_return: mean(&|e| e.shaped_return),
            mean_base_return: mean(&|e| e.base_return),
            mean_final_error: mean(&|e| e.summary.final_error),
            success_rate: mean(&|e| e.summary.success as u8 as f64),
            mean_reach_time: mean(&|e| e.summary.reach_time),
            mean_peak_f_rep: mean(&|e| e.summary.peak_f_rep),
            mean_f_rep: mean(&|e| e.summary.mean_f_rep),
            descent_violation_rate: violation_rate,
            descent_penalty,
            policy_loss: sums.total / k,
            value_loss: v_sum / k,
            lyapunov_loss: l_sum / k,
            entropy: sums.entropy / k,
            approx_kl: sums.approx_kl / k,
            clip_fraction: sums.clip_fraction / k,
            lambda_rigid: reported.lambda_rigid,
            lambda_unsafe: reported.lambda_unsafe,
            lambda_ineff: reported.lambda_ineff,
            rigid_rate: incidence.rigid,
            unsafe_rate: incidence.unsafe_,
            inefficient_rate: incidence.inefficient,
            label_fallbacks,
            guidance_stage: self.stage.index,
            lr: self.opt_policy.lr,
            skipped_updates: self.skipped_updates,
        };
        let rewards = buf.rewards.iter().copied().zip(buf.base_rewards.iter().copied()).collect();
        Ok(IterationReport {
            metrics,
            episodes,
            guidance,
            rewards,
        })
    }

    fn weights_for_report(&self) -> ShapingWeights {
        if self.cfg.shaping.is_some() {
            self.weights
        } else {
            ShapingWeights::zero()
        }
    }

    fn maybe_guidance(&mut self) -> Option<GuidanceRecord> {
        let setup = self.cfg.shaping.as_ref()?;
        if !setup.guidance.fires(self.iteration, self.cfg.iterations, self.stage.index) {
            return None;
        }
        let incidence = window_incidence(&self.window);
        let (new_weights, record) = apply_guidance_stage_with(
            &setup.labeler,
            &incidence,
            &mut self.stage,
            &self.weights,
            &setup.guidance,
            self.iteration,
        );
        log::info!(
            "guidance stage {} at iteration {}: weights {:?} -> {:?}",
            record.stage,
            self.iteration,
            self.weights.as_array(),
            new_weights.as_array()
        );
        self.weights = new_weights;
        self.window.clear();
        Some(record)
    }

    /// Serialize the full training state; `extra` is stored verbatim.
    pub fn checkpoint(&self, extra: &str) -> Result<Checkpoint> {
        let meta = TrainerMeta {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes_seen: self.episodes_seen,
            stage: self.stage.index,
            lr_halved: self.lr_halved,
            skipped_updates: self.skipped_updates,
            extra: extra.to_string(),
        };
        let mut ck = Checkpoint {
            meta: serde_json::to_string(&meta)?,
            sections: Vec::new(),
        };
        ck.push("policy", self.policy.flat());
        push_optim(&mut ck, "policy", &self.opt_policy);
        ck.push("value", self.value.flat());
        push_optim(&mut ck, "value", &self.opt_value);
        if let (Some(l), Some(o)) = (&self.lyapunov, &self.opt_lyapunov) {
            ck.push("lyapunov", l.flat());
            push_optim(&mut ck, "lyapunov", o);
        }
        ck.push("shaping.weights", self.weights.as_array().to_vec());
        ck.push(
            "guidance.window",
            self.window.iter().flatten().map(|&f| f as u8 as f64).collect(),
        );
        Ok(ck)
    }

    /// Restore a state produced by [`Trainer::checkpoint`]; returns `extra`.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<String> {
        let meta: TrainerMeta = serde_json::from_str(&ck.meta)?;
        self.policy.load_flat(ck.section("policy")?)?;
        load_optim(ck, "policy", &mut self.opt_policy)?;
        self.value.load_flat(ck.section("value")?)?;
        load_optim(ck, "value", &mut self.opt_value)?;
        match (&mut self.lyapunov, &mut self.opt_lyapunov) {
            (Some(l), Some(o)) => {
                l.load_flat(ck.section("lyapunov")?)?;
                load_optim(ck, "lyapunov", o)?;
            }
            _ => {
                if ck.section("lyapunov").is_ok() {
                    return Err(Error::Checkpoint(
                        "checkpoint has a Lyapunov critic but the run disables it".into(),
                    ));
                }
            }
        }
        let w = ck.section("shaping.weights")?;
        if w.len() != 3 {
            return Err(Error::Checkpoint("shaping.weights must have 3 entries".into()));
        }
        self.weights = ShapingWeights {
            lambda_rigid: w[0],
            lambda_unsafe: w[1],
            lambda_ineff: w[2],
        };
        let win = ck.section("guidance.window")?;
        if win.len() % 3 != 0 {
            return Err(Error::Checkpoint("guidance.window length must be a multiple of 3".into()));
        }
        self.window = win.chunks(3).map(|c| [c[0] != 0.0, c[1] != 0.0, c[2] != 0.0]).collect();
        self.iteration = meta.iteration;
        self.env_steps = meta.env_steps;
        self.episodes_seen = meta.episodes_seen;
        self.stage = GuidanceStage { index: meta.stage };
        self.lr_halved = meta.lr_halved;
        self.skipped_updates = meta.skipped_updates;
        Ok(meta.extra)
    }
}

/// The `extra` string stored in a trainer checkpoint.
pub fn checkpoint_extra(ck: &Checkpoint) -> Result<String> {
    let meta: TrainerMeta = serde_json::from_str(&ck.meta)?;
    Ok(meta.extra)
}

fn window_incidence(window: &[[bool; 3]]) -> LabelIncidence {
    let labels: Vec<SemanticLabels> = window
        .iter()
        .map(|f| SemanticLabels {
            rigid: f[0],
            unsafe_: f[1],
            inefficient: f[2],
            rationale: String::new(),
        })
        .collect();
    LabelIncidence::from_labels(&labels)
}

fn push_optim(ck: &mut Checkpoint, name: &str, o: &OptimState) {
    ck.push(&format!("{name}.adam.m"), o.m.clone());
    ck.push(&format!("{name}.adam.v"), o.v.clone());
    ck.push(&format!("{name}.adam.state"), vec![o.step as f64, o.lr]);
}

fn load_optim(ck: &Checkpoint, name: &str, o: &mut OptimState) -> Result<()> {
    let m = ck.section(&format!("{name}.adam.m"))?;
    let v = ck.section(&format!("{name}.adam.v"))?;
    let s = ck.section(&format!("{name}.adam.state"))?;
    if m.len() != o.m.len() || v.len() != o.v.len() || s.len() != 2 {
        return Err(Error::Checkpoint(format!("optimizer state `{name}` has the wrong shape")));
    }
    o.m.copy_from_slice(m);
    o.v.copy_from_slice(v);
    o.step = s[0] as u64;
    o.lr = s[1];
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_degenerate_discount() {
        let r = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.4];
        let nv = [0.1, -0.4, 0.0];
        let d = [false, false, true];
        let (a, ret) = compute_gae(&r, &v, &nv, &d, &d, 0.0, 0.7);
        for i in 0..3 {
            assert_eq!(a[i], r[i] - v[i]);
            assert_eq!(ret[i], r[i]);
        }
    }

    #[test]
    fn single_step_episode() {
        let (a, _) = compute_gae(&[2.0], &[0.5], &[9.0], &[true], &[true], 0.99, 0.95);
        assert_eq!(a[0], 1.5);
    }

    #[test]
    fn lyapunov_targets_geometric() {
        let n = 2000;
        let g = vec![0.04; n];
        let mut d = vec![false; n];
        d[n - 1] = true;
        let y = lyapunov_targets(&g, &d, &d, &vec![0.0; n], 0.99);
        assert!((y[0] - 0.04 / 0.01).abs() < 1e-6);
        let zero = lyapunov_targets(&[0.0; 5], &d[..5], &d[..5], &[0.0; 5], 0.99);
        assert!(zero.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn hinge_cases() {
        let (p, rate) = descent_penalty_from_values(&[1.0; 4], &[1.0; 4], &[0.3; 4], &[true; 4], 0.0);
        assert_eq!((p, rate), (0.0, 0.0));
        let l = [3.0, 2.0, 1.0];
        let ln = [2.0, 1.0, 0.0];
        let (p, _) = descent_penalty_from_values(&l, &ln, &[0.5; 3], &[true; 3], 1e-3);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig {
            minibatch: 300,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PpoConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
