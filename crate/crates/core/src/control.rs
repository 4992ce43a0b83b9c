//! Operational-space impedance control with null-space joint compliance.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsTerms, JointState, JointVector, RobotModel};
use crate::planner::Action;
use crate::spatial::{integrate_pose, pose_error, Pose, PoseError};

/// Diagonal PD gains. All entries must be non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGains {
    pub kp: [f64; 6],
    pub kd: [f64; 6],
    pub kqp: [f64; 7],
    pub kqd: [f64; 7],
}

impl Default for ControlGains {
    fn default() -> Self {
        Self { kp: [880.0; 6], kd: [100.0; 6], kqp: [30.0; 7], kqd: [1.0; 7] }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), String> {
        let all = self.kp.iter().chain(&self.kd).chain(&self.kqp).chain(&self.kqd);
        if all.clone().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return Err("gains must be finite and non-negative".into());
        }
        Ok(())
    }

    fn kp(&self) -> Vector6<f64> {
        Vector6::from(self.kp)
    }

    fn kd(&self) -> Vector6<f64> {
        Vector6::from(self.kd)
    }

    fn kqp(&self) -> JointVector {
        JointVector::from(self.kqp)
    }

    fn kqd(&self) -> JointVector {
        JointVector::from(self.kqd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Planned operational step plus planned null-space posture.
    OperationalPlusNull,
    /// Planned operational step; null space pulled to `q = 0`.
    ReferencePosture,
    /// Planned joint torque on top of gravity compensation.
    DirectTorque,
}

impl ControlMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::OperationalPlusNull => "operational_plus_null",
            ControlMode::ReferencePosture => "reference_posture",
            ControlMode::DirectTorque => "direct_torque",
        }
    }
}

/// References held constant over one control interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct References {
    pub x_d: Pose,
    pub q_d: JointVector,
    pub torque: JointVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlLaw {
    pub mode: ControlMode,
    pub gains: ControlGains,
}

/// `Jᵀ Λ (−Kp Δx − Kd ẋ) + C + g` with `ẋ = J q̇`.
pub fn operational_torque(terms: &DynamicsTerms, joints: &JointState, x_d: &Pose, gains: &ControlGains) -> JointVector {
    let tsq = terms.task_space();
    operational_torque_with(terms, &tsq.lambda, joints, x_d, gains)
}

fn operational_torque_with(
    terms: &DynamicsTerms,
    lambda: &crate::dynamics::Matrix6,
    joints: &JointState,
    x_d: &Pose,
    gains: &ControlGains,
) -> JointVector {
    let x = terms.kin.ee_pose();
    let dx = pose_error(&x, x_d).in_world(x_d).to_vector();
    let xdot = terms.jacobian * joints.qdot;
    let accel = -gains.kp().component_mul(&dx) - gains.kd().component_mul(&xdot);
    terms.jacobian.transpose() * (lambda * accel) + terms.bias
}

/// `Nᵀ (−Kqp (q − q_d) − Kqd q̇)`.
pub fn null_torque(terms: &DynamicsTerms, joints: &JointState, q_d: &JointVector, gains: &ControlGains) -> JointVector {
    let tsq = terms.task_space();
    null_torque_with(&tsq.null_projector, joints, q_d, gains)
}

fn null_torque_with(
    null_projector: &crate::dynamics::JointMatrix,
    joints: &JointState,
    q_d: &JointVector,
    gains: &ControlGains,
) -> JointVector {
    let dq = joints.q - q_d;
    let joint_pd = -gains.kqp().component_mul(&dq) - gains.kqd().component_mul(&joints.qdot);
    null_projector.transpose() * joint_pd
}

impl ControlLaw {
    pub fn new(mode: ControlMode, gains: ControlGains) -> Self {
        Self { mode, gains }
    }

    /// Turns a planned action into references anchored at the current state.
    pub fn references(&self, model: &RobotModel, joints: &JointState, action: &Action) -> References {
        let x = model.kinematics(&joints.q).ee_pose();
        let x_d = integrate_pose(&x, &PoseError::from_vector(&action.dx));
        let q_d = match self.mode {
            ControlMode::OperationalPlusNull => joints.q + action.dq,
            ControlMode::ReferencePosture | ControlMode::DirectTorque => JointVector::zeros(),
        };
        References { x_d, q_d, torque: action.torque }
    }

    /// Joint torque commanded at the state summarized by `terms`.
    pub fn torque(
        &self,
        model: &RobotModel,
        terms: &DynamicsTerms,
        joints: &JointState,
        refs: &References,
    ) -> JointVector {
        match self.mode {
            ControlMode::OperationalPlusNull | ControlMode::ReferencePosture => {
                let tsq = terms.task_space();
                operational_torque_with(terms, &tsq.lambda, joints, &refs.x_d, &self.gains)
                    + null_torque_with(&tsq.null_projector, joints, &refs.q_d, &self.gains)
            }
            ControlMode::DirectTorque => refs.torque + terms.gravity(model),
        }
    }
}

/// `τ_op + τ_null` for the given mode. `reference_posture` ignores `q_d` and uses zero.
pub fn control_torque(
    terms: &DynamicsTerms,
    joints: &JointState,
    x_d: &Pose,
    q_d: &JointVector,
    raw_torque: &JointVector,
    gains: &ControlGains,
    mode: ControlMode,
    model: &RobotModel,
) -> JointVector {
    let refs = References {
        x_d: *x_d,
        q_d: match mode {
            ControlMode::OperationalPlusNull => *q_d,
            _ => JointVector::zeros(),
        },
        torque: *raw_torque,
    };
    ControlLaw::new(mode, gains.clone()).torque(model, terms, joints, &refs)
}
