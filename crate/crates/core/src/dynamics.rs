//! Joint-space simulator with a diagonal inertia model, viscous friction and
//! spherical obstacles that push on the controlled points.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ChainModel, ChainPose, JointState, JointVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertiaModel {
    pub joint_inertia: Vec<f64>,
    pub viscous_friction: Vec<f64>,
}

impl InertiaModel {
    pub fn new(joint_inertia: Vec<f64>, viscous_friction: Vec<f64>) -> Result<Self> {
        let m = Self {
            joint_inertia,
            viscous_friction,
        };
        m.validate(m.joint_inertia.len())?;
        Ok(m)
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.joint_inertia.len() != dof {
            return Err(Error::config("inertia.joint_inertia", format!("expected {dof} entries")));
        }
        if self.viscous_friction.len() != dof {
            return Err(Error::config("inertia.viscous_friction", format!("expected {dof} entries")));
        }
        if !self.joint_inertia.iter().all(|&i| i > 0.0 && i.is_finite()) {
            return Err(Error::config("inertia.joint_inertia", "inertias must be positive"));
        }
        if !self.viscous_friction.iter().all(|&f| f >= 0.0 && f.is_finite()) {
            return Err(Error::config("inertia.viscous_friction", "friction must be non-negative"));
        }
        Ok(())
    }

    pub fn without_friction(&self) -> Self {
        Self {
            joint_inertia: self.joint_inertia.clone(),
            viscous_friction: vec![0.0; self.viscous_friction.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub stiffness: f64,
    /// Influence distance beyond the surface.
    pub cutoff: f64,
}

impl Obstacle {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::config("obstacle.radius", "must be positive"));
        }
        if !(self.stiffness >= 0.0) {
            return Err(Error::config("obstacle.stiffness", "must be non-negative"));
        }
        if !(self.cutoff >= 0.0) {
            return Err(Error::config("obstacle.cutoff", "must be non-negative"));
        }
        Ok(())
    }

    /// Signed distance from `point` to the sphere surface.
    pub fn surface_distance(&self, point: &Vector3<f64>) -> f64 {
        (point - self.center).norm() - self.radius
    }

    /// Linear repulsion along the outward normal:
    /// `stiffness * (cutoff - d)` inside the influence shell, zero outside.
    /// Under penetration (`d <= 0`) the same law continues as
    /// `stiffness * (cutoff + |d|)`.
    pub fn repulsive_force(&self, point: &Vector3<f64>) -> Vector3<f64> {
        let offset = point - self.center;
        let dist = offset.norm();
        if dist == 0.0 {
            log::warn!("contact point coincides with obstacle centre; pushing along +x");
            return Vector3::x() * self.stiffness * (self.cutoff + self.radius);
        }
        let d = dist - self.radius;
        if d >= self.cutoff {
            return Vector3::zeros();
        }
        offset / dist * (self.stiffness * (self.cutoff - d))
    }
}

/// Repulsive forces on the monitored points after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    pub forces: Vec<Vector3<f64>>,
    /// `sqrt(Σ_i |F_i|²)` over monitored points.
    pub total_norm: f64,
}

impl ContactState {
    pub fn none(points: usize) -> Self {
        Self {
            forces: vec![Vector3::zeros(); points],
            total_norm: 0.0,
        }
    }

    pub fn from_forces(forces: Vec<Vector3<f64>>) -> Self {
        let total_norm = forces.iter().map(|f| f.norm_squared()).sum::<f64>().sqrt();
        Self { forces, total_norm }
    }
}

/// A point rigidly attached to a link where contact forces may act.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitoredPoint {
    pub link: usize,
    pub local: Vector3<f64>,
}

pub fn monitored_control_points(chain: &ChainModel) -> Vec<MonitoredPoint> {
    chain
        .controlled_links()
        .iter()
        .map(|c| MonitoredPoint {
            link: c.link,
            local: chain.links()[c.link].control_point,
        })
        .collect()
}

/// Net repulsive force on each monitored point from all obstacles.
pub fn contact_state(pose: &ChainPose, points: &[MonitoredPoint], obstacles: &[Obstacle]) -> ContactState {
    let forces = points
        .iter()
        .map(|mp| {
            let p = pose.point(mp.link, &mp.local);
            obstacles.iter().map(|o| o.repulsive_force(&p)).sum()
        })
        .collect();
    ContactState::from_forces(forces)
}

/// `Σ_points J_pointᵀ F_point`.
pub fn external_joint_torque(
    chain: &ChainModel,
    pose: &ChainPose,
    contacts: &[(MonitoredPoint, Vector3<f64>)],
) -> JointVector {
    let mut tau = JointVector::zeros(chain.dof());
    for (mp, force) in contacts {
        if *force == Vector3::zeros() {
            continue;
        }
        let p = pose.point(mp.link, &mp.local);
        pose.accumulate_transpose_product(mp.link, &p, force, &mut tau);
    }
    tau
}

/// Simulator settings that stay fixed for a run.
#[derive(Debug, Clone)]
pub struct SimulatorSpec {
    pub chain: ChainModel,
    pub inertia: InertiaModel,
    pub monitored: Vec<MonitoredPoint>,
    pub dt: f64,
    /// When false, repulsive forces are reported but do not act on the arm.
    pub apply_contact_dynamics: bool,
}

/// One semi-implicit Euler step.
///
/// `qddot = I⁻¹ (tau_cmd - tau_g(q) - friction·qdot + tau_ext)`, then
/// `qdot += dt·qddot`, `q += dt·qdot`. Contact forces are evaluated at the
/// pre-step configuration and reported for it.
pub fn step(
    spec: &SimulatorSpec,
    state: &JointState,
    tau_cmd: &JointVector,
    obstacles: &[Obstacle],
) -> Result<(JointState, ContactState)> {
    if !(spec.dt > 0.0) {
        return Err(Error::config("task.dt", "time step must be positive"));
    }
    let chain = &spec.chain;
    let n = chain.dof();
    if tau_cmd.len() != n {
        return Err(Error::DimensionMismatch {
            what: "torque command",
            expected: n,
            got: tau_cmd.len(),
        });
    }
    let pose = chain.pose(&state.q)?;
    let contacts = contact_state(&pose, &spec.monitored, obstacles);
    let tau_g = chain.gravity_torques_at(&pose);
    let mut net = tau_cmd - tau_g;
    if spec.apply_contact_dynamics && contacts.total_norm > 0.0 {
        let pairs: Vec<_> = spec.monitored.iter().copied().zip(contacts.forces.iter().copied()).collect();
        net += external_joint_torque(chain, &pose, &pairs);
    }
    let mut next = state.clone();
    for j in 0..n {
        let qddot = (net[j] - spec.inertia.viscous_friction[j] * state.qdot[j]) / spec.inertia.joint_inertia[j];
        next.qdot[j] += spec.dt * qddot;
        next.q[j] += spec.dt * next.qdot[j];
    }
    if !next.is_finite() {
        log::warn!("non-finite joint state after step; aborting episode");
        return Err(Error::SimulationFault("non-finite joint state".into()));
    }
    Ok((next, contacts))
}
