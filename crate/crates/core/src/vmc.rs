//! Virtual model controller.
//!
//! Each controlled link carries a virtual spring–damper pulling its control
//! point toward the task target. The resulting Cartesian forces are mapped to
//! joint torques through the link Jacobians, weighted by the coordination
//! weights, offset by gravity compensation and saturated.
//!
//! The spring term is attractive, `F = Kp (p_tar - p) - Kd pdot`, which is the
//! negative gradient of the spring energy `½ Kp |p_tar - p|²` plus the
//! negative velocity gradient of the damping energy `½ Kd |pdot|²`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kinematics::{ChainModel, ChainPose, ControlRole, JointVector};

/// Controlled-link order used by gain sets, forces and observations.
pub const ROLES: [ControlRole; 3] = [ControlRole::Link4, ControlRole::Link6, ControlRole::EndEffector];

pub fn role_index(role: ControlRole) -> usize {
    match role {
        ControlRole::Link4 => 0,
        ControlRole::Link6 => 1,
        ControlRole::EndEffector => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBounds {
    pub kp_min: f64,
    pub kp_max: f64,
    pub kd_min: f64,
    pub kd_max: f64,
}

impl Default for GainBounds {
    fn default() -> Self {
        Self {
            kp_min: 10.0,
            kp_max: 800.0,
            kd_min: 1.0,
            kd_max: 80.0,
        }
    }
}

impl GainBounds {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.kp_min >= 0.0 && self.kp_min <= self.kp_max) {
            return Err(Error::config("gains.kp_min", "need 0 <= kp_min <= kp_max"));
        }
        if !(self.kd_min >= 0.0 && self.kd_min <= self.kd_max) {
            return Err(Error::config("gains.kd_min", "need 0 <= kd_min <= kd_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkGains {
    pub kp: f64,
    pub kd: f64,
}

/// Spring and damper gains for links 4, 6 and E, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GainSet(pub [LinkGains; 3]);

impl GainSet {
    pub fn uniform(kp: f64, kd: f64) -> Self {
        GainSet([LinkGains { kp, kd }; 3])
    }

    pub fn get(&self, role: ControlRole) -> LinkGains {
        self.0[role_index(role)]
    }

    pub fn within(&self, bounds: &GainBounds) -> bool {
        self.0.iter().all(|g| {
            (bounds.kp_min..=bounds.kp_max).contains(&g.kp) && (bounds.kd_min..=bounds.kd_max).contains(&g.kd)
        })
    }
}

/// Distribution of control authority: `w4 = α(1-β)`, `w6 = αβ`, `wE = 1-α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinationWeights {
    pub alpha: f64,
    pub beta: f64,
    pub w4: f64,
    pub w6: f64,
    pub we: f64,
}

impl CoordinationWeights {
    /// Out-of-range or non-finite inputs are clamped into `[0, 1]`.
    pub fn new(alpha: f64, beta: f64) -> Self {
        let alpha = clamp_unit(alpha, "alpha");
        let beta = clamp_unit(beta, "beta");
        let w6 = alpha * beta;
        Self {
            alpha,
            beta,
            w4: alpha - w6,
            w6,
            we: 1.0 - alpha,
        }
    }

    pub fn get(&self, role: ControlRole) -> f64 {
        match role {
            ControlRole::Link4 => self.w4,
            ControlRole::Link6 => self.w6,
            ControlRole::EndEffector => self.we,
        }
    }
}

fn clamp_unit(v: f64, name: &str) -> f64 {
    if (0.0..=1.0).contains(&v) {
        return v;
    }
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    log::warn!("{name}={v} outside [0, 1], clamped to {c}");
    c
}

pub fn component_weights(alpha: f64, beta: f64) -> (f64, f64, f64) {
    let w = CoordinationWeights::new(alpha, beta);
    (w.w4, w.w6, w.we)
}

/// Spring potential `E` and damping energy `D` of one virtual component.
pub fn spring_damper_energies(
    kp: f64,
    kd: f64,
    p: &Vector3<f64>,
    pdot: &Vector3<f64>,
    p_tar: &Vector3<f64>,
) -> (f64, f64) {
    (0.5 * kp * (p_tar - p).norm_squared(), 0.5 * kd * pdot.norm_squared())
}

pub fn virtual_force(kp: f64, kd: f64, p: &Vector3<f64>, pdot: &Vector3<f64>, p_tar: &Vector3<f64>) -> Vector3<f64> {
    kp * (p_tar - p) - kd * pdot
}

/// Kinematic state of one controlled point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPointState {
    pub role: ControlRole,
    pub link: usize,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Positions and velocities (`J qdot`) of all controlled points of `chain`.
pub fn control_points(chain: &ChainModel, pose: &ChainPose, qdot: &JointVector) -> Vec<ControlPointState> {
    chain
        .controlled_links()
        .iter()
        .map(|c| {
            let position = pose.point(c.link, &chain.links()[c.link].control_point);
            ControlPointState {
                role: c.role,
                link: c.link,
                position,
                velocity: pose.point_velocity(c.link, &position, qdot),
            }
        })
        .collect()
}

/// Weighted virtual forces acting on each controlled point.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualForce {
    pub forces: Vec<(ControlRole, Vector3<f64>)>,
}

/// `Σ_i w_i J_iᵀ F_i` over the controlled links of the chain.
pub fn task_torque(
    chain: &ChainModel,
    q: &JointVector,
    qdot: &JointVector,
    gains: &GainSet,
    weights: &CoordinationWeights,
    p_tar: &Vector3<f64>,
) -> Result<JointVector> {
    let pose = chain.pose(q)?;
    if qdot.len() != chain.dof() {
        return Err(crate::error::Error::DimensionMismatch {
            what: "joint velocity",
            expected: chain.dof(),
            got: qdot.len(),
        });
    }
    let points = control_points(chain, &pose, qdot);
    Ok(task_torque_at(chain, &pose, &points, gains, weights, p_tar).0)
}

/// Task torque from a precomputed pose; also returns the unweighted forces.
pub fn task_torque_at(
    chain: &ChainModel,
    pose: &ChainPose,
    points: &[ControlPointState],
    gains: &GainSet,
    weights: &CoordinationWeights,
    p_tar: &Vector3<f64>,
) -> (JointVector, VirtualForce) {
    let mut tau = JointVector::zeros(chain.dof());
    let mut forces = Vec::with_capacity(points.len());
    for pt in points {
        let g = gains.get(pt.role);
        let force = virtual_force(g.kp, g.kd, &pt.position, &pt.velocity, p_tar);
        let w = weights.get(pt.role);
        if w != 0.0 {
            pose.accumulate_transpose_product(pt.link, &pt.position, &(w * force), &mut tau);
        }
        forces.push((pt.role, force));
    }
    (tau, VirtualForce { forces })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorqueCommand {
    pub tau: JointVector,
}

/// `clip(tau_task + tau_g, -tau_max, tau_max)` elementwise. Non-finite sums
/// are mapped to zero torque.
pub fn command_torque(tau_task: &JointVector, tau_g: &JointVector, tau_max: f64) -> TorqueCommand {
    let tau = tau_task.zip_map(tau_g, |a, b| {
        let s = a + b;
        if s.is_nan() {
            0.0
        } else {
            s.clamp(-tau_max, tau_max)
        }
    });
    TorqueCommand { tau }
}
