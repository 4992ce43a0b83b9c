//! Contact-allowed goal reaching for a redundant 7-joint arm.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod baseline;
pub mod control;
pub mod dynamics;
pub mod environments;
pub mod error;
pub mod experiment;
pub mod planner;
pub mod report;
pub mod sim;
pub mod solver;
pub mod spatial;

pub use dynamics::{JointState, JointVector, RobotModel, DOF};
pub use error::{Error, Result};
pub use nalgebra;
pub use spatial::{integrate_pose, pose_error, translational_distance, Pose, PoseError};
