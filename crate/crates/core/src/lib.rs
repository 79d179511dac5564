//! Learning where to start an a priori skill on a planar arm.
//!
//! The pipeline: an affordance classifier over a heterogeneous graph of
//! target, obstacle and robot key-point nodes is trained from skill
//! rollouts; at deployment its logit is maximized over joint angles under
//! limit and clearance constraints, the resulting start is reached with
//! RRT-Connect, and the skill is executed from there.

pub mod afford;
pub mod arm;
pub mod baselines;
pub mod bc;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod hgraph;
pub mod plot;
pub mod rrtc;
pub mod scene;
pub mod seed;
pub mod skill;
pub mod startopt;
pub mod tensor;

pub use arm::{ArmModel, Fk, JointConfig, KeyPointSet, KeyPointSpec, CAMERA_HALF_ANGLE};
pub use error::{Error, Result};
pub use geom::{Aabb, Scene, Shape, Vec2};
pub use scene::{EnvFamily, LabeledPointCloud, ObsConfig, SceneConfig};
pub use skill::{FailureReason, RolloutOutcome, SkillKind};
