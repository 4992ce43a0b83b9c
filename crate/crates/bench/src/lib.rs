//! Shared fixtures for the benchmarks.

use safereach::environments::{make_environment, EnvConfig, EnvKind, Environment};
use safereach::JointVector;

/// A bent, non-singular posture away from joint limits.
pub fn bent_posture() -> JointVector {
    JointVector::from([0.3, 0.6, -0.2, -1.2, 0.4, 0.9, -0.3])
}

pub fn environment(kind: EnvKind) -> Environment {
    make_environment(kind, &EnvConfig::default(), 0).expect("default environment builds")
}
