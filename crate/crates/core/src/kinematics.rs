//! Serial-link chain model: forward kinematics, positional Jacobians and
//! gravity loads for all-revolute arms.
//!
//! Link `k` owns joint `k`. Its frame is obtained from the parent frame by the
//! fixed `parent_offset` followed by a rotation of `q[k]` about `joint_axis`
//! (expressed in the link frame). The joint origin is therefore the link frame
//! origin.

use std::fmt;
use std::path::Path;

use nalgebra::{DVector, Isometry3, Matrix3xX, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type JointVector = DVector<f64>;

/// Built-in chain descriptions shipped with the crate.
pub const PLANAR3_CHAIN: &str = include_str!("../assets/chains/planar3.toml");
pub const PANDA_APPROX_CHAIN: &str = include_str!("../assets/chains/panda_approx.toml");

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub joint_axis: Unit<Vector3<f64>>,
    pub parent_offset: Isometry3<f64>,
    pub mass: f64,
    pub com_offset: Vector3<f64>,
    pub control_point: Vector3<f64>,
}

/// Which virtual component a controlled link carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlRole {
    #[serde(rename = "4")]
    Link4,
    #[serde(rename = "6")]
    Link6,
    #[serde(rename = "E")]
    EndEffector,
}

impl fmt::Display for ControlRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlRole::Link4 => "4",
            ControlRole::Link6 => "6",
            ControlRole::EndEffector => "E",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlledLink {
    pub link: usize,
    pub role: ControlRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    name: String,
    links: Vec<LinkSpec>,
    gravity: Vector3<f64>,
    tau_max: f64,
    controlled: Vec<ControlledLink>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: JointVector,
    pub qdot: JointVector,
}

impl JointState {
    pub fn at_rest(q: JointVector) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: JointVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

impl ChainModel {
    pub fn new(
        name: impl Into<String>,
        links: Vec<LinkSpec>,
        gravity: Vector3<f64>,
        tau_max: f64,
        controlled: Vec<ControlledLink>,
    ) -> Result<Self> {
        if links.is_empty() {
            return Err(Error::InvalidChain("chain has no links".into()));
        }
        for (k, l) in links.iter().enumerate() {
            if (l.joint_axis.norm() - 1.0).abs() >= 1e-9 {
                return Err(Error::InvalidChain(format!("link {k}: joint axis is not unit")));
            }
            if !(l.mass >= 0.0) {
                return Err(Error::InvalidChain(format!("link {k}: negative mass")));
            }
        }
        if !(tau_max > 0.0) {
            return Err(Error::InvalidChain("tau_max must be positive".into()));
        }
        if controlled.is_empty() {
            return Err(Error::InvalidChain("controlled link set is empty".into()));
        }
        for w in controlled.windows(2) {
            if w[1].link <= w[0].link {
                return Err(Error::InvalidChain(
                    "controlled link indices must be strictly increasing".into(),
                ));
            }
        }
        let last = controlled.last().expect("non-empty");
        if last.link != links.len() - 1 || last.role != ControlRole::EndEffector {
            return Err(Error::InvalidChain(
                "the last controlled link must be the terminal link with role E".into(),
            ));
        }
        if controlled[..controlled.len() - 1]
            .iter()
            .any(|c| c.role == ControlRole::EndEffector)
        {
            return Err(Error::InvalidChain("role E may only tag the terminal link".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !controlled.iter().all(|c| seen.insert(c.role)) {
            return Err(Error::InvalidChain("duplicate control role".into()));
        }
        Ok(Self {
            name: name.into(),
            links,
            gravity,
            tau_max,
            controlled,
        })
    }

    /// Three-link planar arm moving in the horizontal plane.
    pub fn planar3() -> Self {
        ChainFile::parse(PLANAR3_CHAIN, "builtin:planar3")
            .and_then(ChainFile::into_model)
            .expect("builtin chain is valid")
    }

    /// Seven-link arm approximating the Franka Panda geometry and masses.
    pub fn panda_approx() -> Self {
        ChainFile::parse(PANDA_APPROX_CHAIN, "builtin:panda")
            .and_then(ChainFile::into_model)
            .expect("builtin chain is valid")
    }

    /// Load `builtin:planar3`, `builtin:panda`, or a chain description file.
    pub fn load(source: &str) -> Result<Self> {
        match source {
            "builtin:planar3" => Ok(Self::planar3()),
            "builtin:panda" => Ok(Self::panda_approx()),
            path => ChainFile::read(Path::new(path))?.into_model(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    pub fn controlled_links(&self) -> &[ControlledLink] {
        &self.controlled
    }

    pub fn controlled_link(&self, role: ControlRole) -> Option<usize> {
        self.controlled.iter().find(|c| c.role == role).map(|c| c.link)
    }

    pub fn with_gravity(mut self, gravity: Vector3<f64>) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn with_tau_max(mut self, tau_max: f64) -> Result<Self> {
        if !(tau_max > 0.0) {
            return Err(Error::InvalidChain("tau_max must be positive".into()));
        }
        self.tau_max = tau_max;
        Ok(self)
    }

    fn check_q(&self, q: &JointVector) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                what: "joint vector",
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn check_link(&self, link: usize) -> Result<()> {
        if link >= self.dof() {
            return Err(Error::LinkOutOfRange {
                index: link,
                links: self.dof(),
            });
        }
        Ok(())
    }

    /// World poses of every link frame and the world joint axes.
    pub fn pose(&self, q: &JointVector) -> Result<ChainPose> {
        self.check_q(q)?;
        let mut frames = Vec::with_capacity(self.dof());
        let mut axes = Vec::with_capacity(self.dof());
        let mut parent = Isometry3::identity();
        for (link, &angle) in self.links.iter().zip(q.iter()) {
            let joint = UnitQuaternion::from_axis_angle(&link.joint_axis, angle);
            let frame = parent * link.parent_offset * Isometry3::from_parts(Translation3::identity(), joint);
            axes.push(frame.rotation * link.joint_axis.into_inner());
            frames.push(frame);
            parent = frame;
        }
        Ok(ChainPose { frames, axes })
    }

    pub fn forward_kinematics(&self, q: &JointVector) -> Result<Vec<Isometry3<f64>>> {
        Ok(self.pose(q)?.frames)
    }

    pub fn link_point_position(&self, q: &JointVector, link: usize) -> Result<Vector3<f64>> {
        self.check_link(link)?;
        let pose = self.pose(q)?;
        Ok(pose.point(link, &self.links[link].control_point))
    }

    /// Positional Jacobian of link `link`'s control point.
    pub fn geometric_jacobian(&self, q: &JointVector, link: usize) -> Result<Matrix3xX<f64>> {
        self.check_link(link)?;
        let pose = self.pose(q)?;
        let p = pose.point(link, &self.links[link].control_point);
        Ok(pose.point_jacobian(link, &p))
    }

    pub fn potential_energy(&self, q: &JointVector) -> Result<f64> {
        let pose = self.pose(q)?;
        Ok(self
            .links
            .iter()
            .enumerate()
            .map(|(k, l)| -l.mass * self.gravity.dot(&pose.point(k, &l.com_offset)))
            .sum())
    }

    /// Joint torques that statically balance gravity (gradient of the
    /// potential energy).
    pub fn gravity_torques(&self, q: &JointVector) -> Result<JointVector> {
        let pose = self.pose(q)?;
        Ok(self.gravity_torques_at(&pose))
    }

    pub fn gravity_torques_at(&self, pose: &ChainPose) -> JointVector {
        let mut tau = JointVector::zeros(self.dof());
        if self.gravity == Vector3::zeros() {
            return tau;
        }
        for (k, l) in self.links.iter().enumerate() {
            if l.mass == 0.0 {
                continue;
            }
            let com = pose.point(k, &l.com_offset);
            let load = -l.mass * self.gravity;
            pose.accumulate_transpose_product(k, &com, &load, &mut tau);
        }
        tau
    }
}

/// Forward-kinematics snapshot of a chain at one configuration.
#[derive(Debug, Clone)]
pub struct ChainPose {
    frames: Vec<Isometry3<f64>>,
    axes: Vec<Vector3<f64>>,
}

impl ChainPose {
    pub fn frames(&self) -> &[Isometry3<f64>] {
        &self.frames
    }

    pub fn joint_origin(&self, joint: usize) -> Vector3<f64> {
        self.frames[joint].translation.vector
    }

    pub fn joint_axis(&self, joint: usize) -> Vector3<f64> {
        self.axes[joint]
    }

    /// World position of a point given in link `link`'s frame.
    pub fn point(&self, link: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.frames[link].transform_point(&(*local).into()).coords
    }

    /// Jacobian of a world point rigidly attached to link `link`.
    pub fn point_jacobian(&self, link: usize, world_point: &Vector3<f64>) -> Matrix3xX<f64> {
        let n = self.frames.len();
        let mut jac = Matrix3xX::zeros(n);
        for j in 0..=link {
            let col = self.axes[j].cross(&(world_point - self.joint_origin(j)));
            jac.set_column(j, &col);
        }
        jac
    }

    /// `out += J(link, point)^T * force` without materializing `J`.
    pub fn accumulate_transpose_product(
        &self,
        link: usize,
        world_point: &Vector3<f64>,
        force: &Vector3<f64>,
        out: &mut JointVector,
    ) {
        for j in 0..=link {
            let col = self.axes[j].cross(&(world_point - self.joint_origin(j)));
            out[j] += col.dot(force);
        }
    }

    /// `J(link, point) * qdot`.
    pub fn point_velocity(&self, link: usize, world_point: &Vector3<f64>, qdot: &JointVector) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for j in 0..=link {
            v += self.axes[j].cross(&(world_point - self.joint_origin(j))) * qdot[j];
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Chain description file (TOML). See `assets/chains/README.md` for the schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    pub name: String,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    #[serde(rename = "link")]
    pub links: Vec<LinkEntry>,
    pub controlled: Vec<ControlledEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub axis: [f64; 3],
    #[serde(default)]
    pub origin_xyz: [f64; 3],
    /// Roll, pitch, yaw in radians; rotation = Rz(yaw) Ry(pitch) Rx(roll).
    #[serde(default)]
    pub origin_rpy: [f64; 3],
    pub mass: f64,
    #[serde(default)]
    pub com: [f64; 3],
    #[serde(default)]
    pub control_point: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlledEntry {
    pub link: usize,
    pub role: ControlRole,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

fn default_tau_max() -> f64 {
    120.0
}

impl ChainFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn into_model(self) -> Result<ChainModel> {
        let links = self
            .links
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let axis = Vector3::from(l.axis);
                let norm = axis.norm();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidChain(format!("link {k}: axis must be a unit vector")));
                }
                let [roll, pitch, yaw] = l.origin_rpy;
                Ok(LinkSpec {
                    joint_axis: Unit::new_normalize(axis),
                    parent_offset: Isometry3::from_parts(
                        Translation3::from(Vector3::from(l.origin_xyz)),
                        UnitQuaternion::from_euler_angles(roll, pitch, yaw),
                    ),
                    mass: l.mass,
                    com_offset: Vector3::from(l.com),
                    control_point: Vector3::from(l.control_point),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let controlled = self
            .controlled
            .iter()
            .map(|c| ControlledLink {
                link: c.link,
                role: c.role,
            })
            .collect();
        ChainModel::new(self.name, links, Vector3::from(self.gravity), self.tau_max, controlled)
    }
}
