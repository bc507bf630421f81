//! Adaptive virtual model control for serial-link arms.
//!
//! A reinforcement-learning policy chooses per-link spring–damper gains and
//! two coordination weights for a virtual model controller. Training uses PPO
//! with a Lyapunov descent penalty and an episode-level semantic reward
//! shaping layer backed by a rule-based or remote labeler.
//!
//! Module map:
//! - [`kinematics`]: chain model, forward kinematics, Jacobians, gravity.
//! - [`vmc`]: virtual forces, weighted Jacobian-transpose torques, saturation.
//! - [`dynamics`]: semi-implicit Euler simulator and obstacle repulsion.
//! - [`env`]: reaching task environment, rewards and episode summaries.
//! - [`neural`]: MLPs with hand-derived gradients and Adam.
//! - [`ppo`]: rollouts, GAE, clipped surrogate, Lyapunov critic and trainer.
//! - [`semantic`]: episode labels, shaped reward and staged guidance.
//! - [`harness`]: experiment configuration and the train/eval/sweep/compare commands.

pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod neural;
pub mod ppo;
pub mod rng;
pub mod semantic;
pub mod vmc;

pub use error::{Error, Result};
pub use kinematics::{ChainModel, ControlRole, JointState, JointVector};
