//! Reaching task environment.
//!
//! Observation layout (length `9·3 + 3 = 30`): for each controlled link in
//! the order 4, 6, E the position `p_i`, velocity `pdot_i` and target error
//! `p_tar - p_i` (three values each), followed by the target `p_tar`.
//!
//! Action layout (length 8, each entry in `[-1, 1]`):
//! `[Kp_4, Kd_4, Kp_6, Kd_6, Kp_E, Kd_E, alpha, beta]`, mapped affinely onto
//! the configured gain bounds and onto `[0, 1]` for the weights.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, InertiaModel, Obstacle, SimulatorSpec};
use crate::error::{Error, Result};
use crate::kinematics::{ChainModel, ControlRole, JointState, JointVector};
use crate::vmc::{self, CoordinationWeights, GainBounds, GainSet, LinkGains, ROLES};

pub const ACTION_DIM: usize = 8;
pub const OBS_DIM: usize = 30;
/// End-effector velocity and error inside the observation vector.
pub const EE_VELOCITY: std::ops::Range<usize> = 21..24;
pub const EE_ERROR: std::ops::Range<usize> = 24..27;
pub const TARGET: std::ops::Range<usize> = 27..30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl TargetBox {
    pub fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            if self.max[i] > self.min[i] {
                rng.random_range(self.min[i]..self.max[i])
            } else {
                self.min[i]
            }
        })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub center: [f64; 3],
    pub radius: f64,
    /// Stiffness is drawn uniformly from this range at every reset.
    pub stiffness_range: [f64; 2],
    pub cutoff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_tau: f64,
    pub lambda_f: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_tau: 1e-4,
            lambda_f: 1e-4,
        }
    }
}

/// Which virtual components the policy may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VmcConfiguration {
    /// End-effector only: `alpha` forced to 0.
    #[serde(rename = "E")]
    E,
    /// Link 6 and end-effector: `beta` forced to 1, `alpha` free.
    #[serde(rename = "6-E")]
    SixE,
    /// All three components.
    #[serde(rename = "4-6-E")]
    FourSixE,
}

impl VmcConfiguration {
    pub const ALL: [VmcConfiguration; 3] = [VmcConfiguration::E, VmcConfiguration::SixE, VmcConfiguration::FourSixE];

    pub fn name(self) -> &'static str {
        match self {
            VmcConfiguration::E => "E",
            VmcConfiguration::SixE => "6-E",
            VmcConfiguration::FourSixE => "4-6-E",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "E" => Ok(VmcConfiguration::E),
            "6-E" => Ok(VmcConfiguration::SixE),
            "4-6-E" => Ok(VmcConfiguration::FourSixE),
            other => Err(Error::config("vmc_configuration", format!("unknown configuration `{other}`"))),
        }
    }

    pub fn restrict(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            VmcConfiguration::E => (0.0, beta),
            VmcConfiguration::SixE => (alpha, 1.0),
            VmcConfiguration::FourSixE => (alpha, beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub target_box: TargetBox,
    pub episode_steps: usize,
    pub dt: f64,
    pub success_threshold: f64,
    pub start_q: Vec<f64>,
    #[serde(default)]
    pub gains: GainBounds,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(default = "yes")]
    pub apply_contact_dynamics: bool,
    #[serde(default = "default_fault_reward")]
    pub fault_reward: f64,
    /// Re-decode the policy action every `action_hold_k` control steps.
    #[serde(default = "one")]
    pub action_hold_k: usize,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_fault_reward() -> f64 {
    -10.0
}

impl TaskConfig {
    pub fn validate(&self, chain: &ChainModel) -> Result<()> {
        if self.episode_steps == 0 {
            return Err(Error::config("task.episode_steps", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("task.dt", "must be positive"));
        }
        if !(self.success_threshold > 0.0) {
            return Err(Error::config("task.success_threshold", "must be positive"));
        }
        if self.start_q.len() != chain.dof() {
            return Err(Error::config(
                "task.start_q",
                format!("expected {} entries, got {}", chain.dof(), self.start_q.len()),
            ));
        }
        if (0..3).any(|i| !(self.target_box.min[i] <= self.target_box.max[i])) {
            return Err(Error::config("task.target_box", "min must not exceed max"));
        }
        if self.action_hold_k == 0 {
            return Err(Error::config("task.action_hold_k", "must be positive"));
        }
        if !(self.reward.lambda_tau >= 0.0 && self.reward.lambda_f >= 0.0) {
            return Err(Error::config("task.reward", "weights must be non-negative"));
        }
        self.gains.validate()?;
        for (k, o) in self.obstacles.iter().enumerate() {
            let [lo, hi] = o.stiffness_range;
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::config(format!("task.obstacles[{k}].stiffness_range"), "need 0 <= lo <= hi"));
            }
            to_obstacle(o, lo)
                .validate()
                .map_err(|e| Error::config(format!("task.obstacles[{k}]"), e.to_string()))?;
        }
        for role in ROLES {
            if chain.controlled_link(role).is_none() {
                return Err(Error::config("paths.chain", format!("chain lacks a controlled link with role {role}")));
            }
        }
        Ok(())
    }

    pub fn episode_duration(&self) -> f64 {
        self.episode_steps as f64 * self.dt
    }
}

fn to_obstacle(o: &ObstacleConfig, stiffness: f64) -> Obstacle {
    Obstacle {
        center: Vector3::from(o.center),
        radius: o.radius,
        stiffness,
        cutoff: o.cutoff,
    }
}

/// Decoded controller parameters for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedAction {
    pub gains: GainSet,
    pub weights: CoordinationWeights,
}

impl DecodedAction {
    /// `[Kp_4, Kd_4, Kp_6, Kd_6, Kp_E, Kd_E, alpha, beta]`.
    pub fn theta(&self) -> [f64; ACTION_DIM] {
        let g = &self.gains.0;
        [
            g[0].kp,
            g[0].kd,
            g[1].kp,
            g[1].kd,
            g[2].kp,
            g[2].kd,
            self.weights.alpha,
            self.weights.beta,
        ]
    }
}

fn affine(raw: f64, lo: f64, hi: f64) -> f64 {
    lo + 0.5 * (raw + 1.0) * (hi - lo)
}

fn inverse_affine(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (x - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

/// Map a raw action onto controller parameters. Entries are clamped into
/// `[-1, 1]`; NaN entries decode to the midpoint.
pub fn decode_action(raw: &[f64], bounds: &GainBounds) -> Result<DecodedAction> {
    if raw.len() != ACTION_DIM {
        return Err(Error::DimensionMismatch {
            what: "action",
            expected: ACTION_DIM,
            got: raw.len(),
        });
    }
    let mut r = [0.0; ACTION_DIM];
    for (dst, &v) in r.iter_mut().zip(raw) {
        *dst = if v.is_nan() {
            log::warn!("NaN action entry decoded as midpoint");
            0.0
        } else {
            if !(-1.0..=1.0).contains(&v) {
                log::debug!("action entry {v} clamped into [-1, 1]");
            }
            v.clamp(-1.0, 1.0)
        };
    }
    let link = |k: usize| LinkGains {
        kp: affine(r[2 * k], bounds.kp_min, bounds.kp_max),
        kd: affine(r[2 * k + 1], bounds.kd_min, bounds.kd_max),
    };
    Ok(DecodedAction {
        gains: GainSet([link(0), link(1), link(2)]),
        weights: CoordinationWeights::new(affine(r[6], 0.0, 1.0), affine(r[7], 0.0, 1.0)),
    })
}

/// Inverse of [`decode_action`] for in-range parameters.
pub fn encode_action(action: &DecodedAction, bounds: &GainBounds) -> [f64; ACTION_DIM] {
    let t = action.theta();
    let mut raw = [0.0; ACTION_DIM];
    for k in 0..3 {
        raw[2 * k] = inverse_affine(t[2 * k], bounds.kp_min, bounds.kp_max);
        raw[2 * k + 1] = inverse_affine(t[2 * k + 1], bounds.kd_min, bounds.kd_max);
    }
    raw[6] = inverse_affine(t[6], 0.0, 1.0);
    raw[7] = inverse_affine(t[7], 0.0, 1.0);
    raw
}

/// `-|p_E - p_tar|² - λ_τ |τ|² - λ_F |F_rep|²`.
pub fn base_reward(p_e: &Vector3<f64>, p_tar: &Vector3<f64>, tau: &JointVector, f_rep_norm: f64, cfg: &RewardConfig) -> f64 {
    -(p_e - p_tar).norm_squared() - cfg.lambda_tau * tau.norm_squared() - cfg.lambda_f * f_rep_norm * f_rep_norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn ee_error(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[EE_ERROR])
    }

    pub fn ee_velocity(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[EE_VELOCITY])
    }

    pub fn target(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.0[TARGET])
    }
}

/// One simulated control step, as persisted in episode traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Time at which the action was applied; positions are post-step.
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub theta: [f64; ACTION_DIM],
    pub tau: Vec<f64>,
    /// Controlled-point positions in the order 4, 6, E.
    pub p: Vec<[f64; 3]>,
    pub ee_velocity: [f64; 3],
    /// Repulsive force on each controlled point.
    pub f_rep: Vec<[f64; 3]>,
    pub f_rep_norm: f64,
    pub error: f64,
    pub reward: f64,
    #[serde(default)]
    pub fault: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub final_error: f64,
    pub reach_time: f64,
    pub peak_f_rep: f64,
    pub mean_f_rep: f64,
    pub torque_energy: f64,
    pub oscillation: f64,
    pub success: bool,
    pub fault: bool,
}

/// Metrics of an episode trace.
///
/// `reach_time` is the `t` of the first record whose error is below
/// `success_threshold`, or `duration` when no record crosses it.
/// `oscillation` is the per-step sign-change rate of each end-effector
/// velocity component, averaged over the three components.
pub fn summarize_episode(trace: &[StepRecord], success_threshold: f64, dt: f64, duration: f64) -> Result<EpisodeSummary> {
    let last = trace.last().ok_or(Error::Empty("episode trace"))?;
    let n = trace.len();
    let reach_time = trace
        .iter()
        .find(|r| r.error < success_threshold)
        .map_or(duration, |r| r.t.min(duration));
    let peak_f_rep = trace.iter().map(|r| r.f_rep_norm).fold(0.0, f64::max);
    let mean_f_rep = trace.iter().map(|r| r.f_rep_norm).sum::<f64>() / n as f64;
    let torque_energy = trace.iter().map(|r| r.tau.iter().map(|t| t * t).sum::<f64>() * dt).sum();
    let oscillation = if n < 2 {
        0.0
    } else {
        let mut changes = 0usize;
        for w in trace.windows(2) {
            for c in 0..3 {
                let (a, b) = (w[0].ee_velocity[c], w[1].ee_velocity[c]);
                if a.abs() > 1e-9 && b.abs() > 1e-9 && a.signum() != b.signum() {
                    changes += 1;
                }
            }
        }
        changes as f64 / (3.0 * (n - 1) as f64)
    };
    let fault = trace.iter().any(|r| r.fault);
    Ok(EpisodeSummary {
        steps: n,
        final_error: last.error,
        reach_time,
        peak_f_rep,
        mean_f_rep,
        torque_energy,
        oscillation,
        success: !fault && last.error < success_threshold,
        fault,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub fault: bool,
    pub error: f64,
    pub f_rep_norm: f64,
}

/// Coordination override applied after decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coordination {
    Policy(VmcConfiguration),
    Fixed { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone)]
pub struct ReachingEnv {
    sim: SimulatorSpec,
    config: TaskConfig,
    coordination: Coordination,
    state: JointState,
    target: Vector3<f64>,
    obstacles: Vec<Obstacle>,
    steps: usize,
    held: Option<DecodedAction>,
    trace: Vec<StepRecord>,
    done: bool,
}

impl ReachingEnv {
    pub fn new(chain: ChainModel, inertia: InertiaModel, config: TaskConfig, coordination: Coordination) -> Result<Self> {
        config.validate(&chain)?;
        inertia.validate(chain.dof())?;
        let start = JointState::at_rest(JointVector::from_vec(config.start_q.clone()));
        let monitored = dynamics::monitored_control_points(&chain);
        Ok(Self {
            sim: SimulatorSpec {
                chain,
                inertia,
                monitored,
                dt: config.dt,
                apply_contact_dynamics: config.apply_contact_dynamics,
            },
            coordination,
            state: start,
            target: Vector3::zeros(),
            obstacles: Vec::new(),
            steps: 0,
            held: None,
            trace: Vec::new(),
            done: true,
            config,
        })
    }

    pub fn chain(&self) -> &ChainModel {
        &self.sim.chain
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn simulator(&self) -> &SimulatorSpec {
        &self.sim
    }

    pub fn target(&self) -> Vector3<f64> {
        self.target
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn state(&self) -> &JointState {
        &self.state
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn set_coordination(&mut self, coordination: Coordination) {
        self.coordination = coordination;
    }

    /// Start a new episode. The target and obstacle stiffnesses are drawn
    /// from a generator seeded with `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.target = self.config.target_box.sample(&mut rng);
        self.obstacles = self
            .config
            .obstacles
            .iter()
            .map(|o| {
                let [lo, hi] = o.stiffness_range;
                let k = if hi > lo { rng.random_range(lo..hi) } else { lo };
                to_obstacle(o, k)
            })
            .collect();
        self.state = JointState::at_rest(JointVector::from_vec(self.config.start_q.clone()));
        self.steps = 0;
        self.held = None;
        self.trace.clear();
        self.done = false;
        self.observe()
    }

    /// Place the arm at an explicit state, keeping target and obstacles.
    pub fn set_state(&mut self, state: JointState) -> Result<Observation> {
        if state.q.len() != self.sim.chain.dof() || state.qdot.len() != self.sim.chain.dof() {
            return Err(Error::DimensionMismatch {
                what: "joint state",
                expected: self.sim.chain.dof(),
                got: state.q.len(),
            });
        }
        self.state = state;
        Ok(self.observe())
    }

    pub fn observe(&self) -> Observation {
        let chain = &self.sim.chain;
        let pose = chain.pose(&self.state.q).expect("state matches chain");
        let points = vmc::control_points(chain, &pose, &self.state.qdot);
        let mut obs = Vec::with_capacity(OBS_DIM);
        for role in ROLES {
            let pt = points.iter().find(|p| p.role == role).expect("validated roles");
            obs.extend(pt.position.iter());
            obs.extend(pt.velocity.iter());
            obs.extend((self.target - pt.position).iter());
        }
        obs.extend(self.target.iter());
        Observation(obs)
    }

    fn decode(&self, raw: &[f64]) -> Result<DecodedAction> {
        let mut a = decode_action(raw, &self.config.gains)?;
        let (alpha, beta) = match self.coordination {
            Coordination::Policy(cfg) => cfg.restrict(a.weights.alpha, a.weights.beta),
            Coordination::Fixed { alpha, beta } => (alpha, beta),
        };
        a.weights = CoordinationWeights::new(alpha, beta);
        Ok(a)
    }

    /// Advance one control step with the raw policy action.
    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::config("env", "step called on a finished episode; call reset first"));
        }
        let action = match self.held {
            Some(a) if self.steps % self.config.action_hold_k != 0 => a,
            _ => self.decode(raw)?,
        };
        self.held = Some(action);
        let decoded = action;

        let chain = &self.sim.chain;
        let pose = chain.pose(&self.state.q)?;
        let points = vmc::control_points(chain, &pose, &self.state.qdot);
        let (tau_task, _) = vmc::task_torque_at(chain, &pose, &points, &decoded.gains, &decoded.weights, &self.target);
        let tau_g = chain.gravity_torques_at(&pose);
        let cmd = vmc::command_torque(&tau_task, &tau_g, chain.tau_max());
        let t = self.steps as f64 * self.config.dt;
        self.steps += 1;

        let (next, contacts, fault) = match dynamics::step(&self.sim, &self.state, &cmd.tau, &self.obstacles) {
            Ok((next, contacts)) => (next, contacts, false),
            Err(Error::SimulationFault(msg)) => {
                log::warn!("episode aborted at step {}: {msg}", self.steps);
                (self.state.clone(), dynamics::ContactState::none(self.sim.monitored.len()), true)
            }
            Err(e) => return Err(e),
        };
        self.state = next;
        let observation = self.observe();
        let p_e = Vector3::from_column_slice(&observation.0[18..21]);
        let error = (p_e - self.target).norm();
        let reward = if fault {
            self.config.fault_reward
        } else {
            base_reward(&p_e, &self.target, &cmd.tau, contacts.total_norm, &self.config.reward)
        };
        let done = fault || self.steps >= self.config.episode_steps;
        self.done = done;

        let o = &observation.0;
        self.trace.push(StepRecord {
            t,
            q: self.state.q.iter().copied().collect(),
            qdot: self.state.qdot.iter().copied().collect(),
            theta: decoded.theta(),
            tau: cmd.tau.iter().copied().collect(),
            p: (0..3).map(|k| [o[9 * k], o[9 * k + 1], o[9 * k + 2]]).collect(),
            ee_velocity: [o[21], o[22], o[23]],
            f_rep: contacts.forces.iter().map(|f| [f.x, f.y, f.z]).collect(),
            f_rep_norm: contacts.total_norm,
            error,
            reward,
            fault,
        });
        Ok(StepOutcome {
            observation,
            reward,
            done,
            fault,
            error,
            f_rep_norm: contacts.total_norm,
        })
    }

    pub fn summarize(&self) -> Result<EpisodeSummary> {
        summarize_episode(
            &self.trace,
            self.config.success_threshold,
            self.config.dt,
            self.config.episode_duration(),
        )
    }
}

/// Position of the control point with `role` inside an observation.
pub fn observed_position(obs: &Observation, role: ControlRole) -> Vector3<f64> {
    let k = vmc::role_index(role);
    Vector3::from_column_slice(&obs.0[9 * k..9 * k + 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn planar_task() -> TaskConfig {
        TaskConfig {
            target_box: TargetBox {
                min: [0.3, 0.5, 0.0],
                max: [0.7, 0.9, 0.0],
            },
            episode_steps: 200,
            dt: 1.0 / 240.0,
            success_threshold: 0.12,
            start_q: vec![0.3, 1.2, 0.9],
            gains: GainBounds::default(),
            reward: RewardConfig::default(),
            obstacles: vec![],
            apply_contact_dynamics: true,
            fault_reward: -10.0,
            action_hold_k: 1,
        }
    }

    fn env() -> ReachingEnv {
        ReachingEnv::new(
            ChainModel::planar3(),
            InertiaModel::new(vec![2.0, 0.5, 0.1], vec![0.0; 3]).unwrap(),
            planar_task(),
            Coordination::Policy(VmcConfiguration::FourSixE),
        )
        .unwrap()
    }

    #[test]
    fn decode_midpoints_and_alpha_slot() {
        let b = GainBounds::default();
        let a = decode_action(&[0.0; 8], &b).unwrap();
        for g in a.gains.0 {
            assert_eq!(g.kp, 405.0);
            assert_eq!(g.kd, 40.5);
        }
        assert_eq!((a.weights.alpha, a.weights.beta), (0.5, 0.5));
        let mut raw = [0.0; 8];
        raw[6] = -1.0;
        assert_eq!(decode_action(&raw, &b).unwrap().weights.alpha, 0.0);
        raw[6] = 7.0;
        assert_eq!(decode_action(&raw, &b).unwrap().weights.alpha, 1.0);
        assert!(decode_action(&[0.0; 7], &b).is_err());
    }

    #[test]
    fn base_reward_examples() {
        let cfg = RewardConfig::default();
        let t = Vector3::zeros();
        let p = Vector3::new(0.1, 0.0, 0.0);
        let zero = JointVector::zeros(3);
        assert!((base_reward(&p, &t, &zero, 0.0, &cfg) + 0.01).abs() < 1e-15);
        assert_eq!(base_reward(&t, &t, &zero, 0.0, &cfg), 0.0);
        let tau = JointVector::from_vec(vec![6.0, 8.0, 0.0]);
        let r = base_reward(&p, &t, &tau, 20.0, &cfg);
        assert!((r + 0.06).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env();
        let mut b = env();
        assert_eq!(a.reset(42), b.reset(42));
        assert_eq!(a.target(), b.target());
        assert_ne!(a.reset(43).target(), b.target());
    }

    #[test]
    fn reset_observation_layout() {
        let mut e = env();
        let obs = e.reset(7);
        assert_eq!(obs.0.len(), OBS_DIM);
        let tar = e.target();
        for k in 0..3 {
            for c in 0..3 {
                assert_eq!(obs.0[9 * k + 6 + c], tar[c] - obs.0[9 * k + c]);
                assert_eq!(obs.0[9 * k + 3 + c], 0.0);
            }
        }
        assert_eq!(obs.target(), tar);
    }

    #[test]
    fn episode_ends_after_configured_steps() {
        let mut e = env();
        e.reset(1);
        let mut n = 0;
        loop {
            let out = e.step(&[0.0; 8]).unwrap();
            n += 1;
            assert_eq!(out.observation.0.len(), OBS_DIM);
            assert!(out.reward <= 0.0);
            if out.done {
                break;
            }
        }
        assert_eq!(n, 200);
        assert!(e.step(&[0.0; 8]).is_err());
        let s = e.summarize().unwrap();
        assert_eq!(s.steps, 200);
        assert!(s.reach_time <= e.config().episode_duration());
    }

    #[test]
    fn action_hold_reuses_parameters() {
        let mut cfg = planar_task();
        cfg.action_hold_k = 4;
        let mut e = ReachingEnv::new(
            ChainModel::planar3(),
            InertiaModel::new(vec![2.0, 0.5, 0.1], vec![0.0; 3]).unwrap(),
            cfg,
            Coordination::Policy(VmcConfiguration::FourSixE),
        )
        .unwrap();
        e.reset(3);
        e.step(&[0.0; 8]).unwrap();
        e.step(&[1.0; 8]).unwrap();
        e.step(&[-1.0; 8]).unwrap();
        e.step(&[1.0; 8]).unwrap();
        e.step(&[1.0; 8]).unwrap();
        let thetas: Vec<_> = e.trace().iter().map(|r| r.theta).collect();
        assert_eq!(thetas[0], thetas[3]);
        assert_ne!(thetas[3], thetas[4]);
    }

    #[test]
    fn configuration_restrictions() {
        assert_eq!(VmcConfiguration::E.restrict(0.7, 0.3), (0.0, 0.3));
        assert_eq!(VmcConfiguration::SixE.restrict(0.7, 0.3), (0.7, 1.0));
        assert_eq!(VmcConfiguration::parse("4-6-E").unwrap(), VmcConfiguration::FourSixE);
        assert!(VmcConfiguration::parse("4-E").is_err());
    }

    fn record(t: f64, error: f64, f: f64, v: f64) -> StepRecord {
        StepRecord {
            t,
            q: vec![0.0; 3],
            qdot: vec![0.0; 3],
            theta: [0.0; 8],
            tau: vec![1.0, 0.0, 0.0],
            p: vec![[0.0; 3]; 3],
            ee_velocity: [v, 0.0, 0.0],
            f_rep: vec![[0.0; 3]; 3],
            f_rep_norm: f,
            error,
            reward: 0.0,
            fault: false,
        }
    }

    #[test]
    fn summary_never_reaching() {
        let trace: Vec<_> = (0..10).map(|k| record(k as f64 * 0.1, 0.5, 0.0, 1.0)).collect();
        let s = summarize_episode(&trace, 0.12, 0.1, 1.0).unwrap();
        assert!(!s.success);
        assert_eq!(s.reach_time, 1.0);
        assert_eq!(s.oscillation, 0.0);
        assert!((s.torque_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn summary_at_target() {
        let trace: Vec<_> = (0..10)
            .map(|k| record(k as f64 * 0.1, 0.0, 0.0, if k % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let s = summarize_episode(&trace, 0.12, 0.1, 1.0).unwrap();
        assert!(s.success);
        assert_eq!(s.final_error, 0.0);
        assert_eq!(s.reach_time, 0.0);
        // Only the x component alternates.
        assert!((s.oscillation - 1.0 / 3.0).abs() < 1e-12);
        assert!(summarize_episode(&[], 0.12, 0.1, 1.0).is_err());
    }
}
