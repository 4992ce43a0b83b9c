//! Rigid transforms, pose errors and distances.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// End-effector or body pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(translation, UnitQuaternion::identity())
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    /// Re-normalizes the quaternion. Cheap, and keeps long integrations from drifting.
    pub fn renormalized(mut self) -> Self {
        self.rotation.renormalize();
        self
    }
}

/// Difference between two poses: translation difference and the axis-angle
/// vector of the relative rotation, expressed in the desired frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl PoseError {
    pub fn zero() -> Self {
        Self { linear: Vector3::zeros(), angular: Vector3::zeros() }
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    /// Stacked `[linear; angular]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.linear.x, self.linear.y, self.linear.z, self.angular.x, self.angular.y, self.angular.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    /// Same error with the angular part rotated from the desired frame into
    /// the world frame, which is where `J q̇` lives.
    pub fn in_world(&self, desired: &Pose) -> Self {
        Self::new(self.linear, desired.rotation * self.angular)
    }
}

/// `x ⊖ x_d`.
pub fn pose_error(x: &Pose, x_d: &Pose) -> PoseError {
    let relative = x_d.rotation.inverse() * x.rotation;
    PoseError::new(x.translation - x_d.translation, relative.scaled_axis())
}

/// Applies `d` to `x` so that `pose_error(integrate_pose(x, d), x) == d`.
pub fn integrate_pose(x: &Pose, d: &PoseError) -> Pose {
    let rotation = x.rotation * UnitQuaternion::from_scaled_axis(d.angular);
    Pose::new(x.translation + d.linear, rotation)
}

pub fn translational_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Rotation3};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Rotation-matrix logarithm via trace / antisymmetric part; independent of
    /// the quaternion path used by `pose_error`.
    fn log_matrix(r: &Matrix3<f64>) -> Vector3<f64> {
        let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let angle = cos.acos();
        if angle < 1e-12 {
            return Vector3::zeros();
        }
        let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        w * (angle / (2.0 * angle.sin()))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-1.5f64..1.5))
            .prop_map(|(t, r)| Pose::new(Vector3::from(t), UnitQuaternion::from_scaled_axis(Vector3::from(r))))
    }

    #[test]
    fn identity_error_is_zero() {
        let x = Pose::new(Vector3::new(0.3, -0.2, 0.5), UnitQuaternion::from_euler_angles(0.2, -0.4, 1.0));
        let e = pose_error(&x, &x);
        assert_eq!(e.linear, Vector3::zeros());
        assert!(e.angular.norm() < 1e-12);
    }

    #[test]
    fn pure_translation_error() {
        let x = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let e = pose_error(&x, &Pose::identity());
        assert_eq!(e.linear, Vector3::new(1.0, 0.0, 0.0));
        assert!(e.angular.norm() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_matches_matrix_log() {
        let base = UnitQuaternion::from_euler_angles(0.3, 0.1, -0.7);
        let x_d = Pose::new(Vector3::zeros(), base);
        let x = Pose::new(Vector3::zeros(), base * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2));
        let e = pose_error(&x, &x_d);
        let rel: Rotation3<f64> = (x_d.rotation.inverse() * x.rotation).to_rotation_matrix();
        let oracle = log_matrix(rel.matrix());
        assert!((e.angular - oracle).norm() < 1e-12);
        assert!((e.angular - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-12);
    }

    #[test]
    fn integrate_zero_is_identity() {
        let x = Pose::new(Vector3::new(0.1, 0.2, 0.3), UnitQuaternion::from_euler_angles(1.0, 0.5, -0.2));
        let y = integrate_pose(&x, &PoseError::zero());
        assert_eq!(y.translation, x.translation);
        assert!(y.rotation.angle_to(&x.rotation) < 1e-15);
    }

    #[test]
    fn integrate_translation_only() {
        let x = Pose::identity();
        let d = PoseError::new(Vector3::new(0.01, -0.02, 0.005), Vector3::zeros());
        let y = integrate_pose(&x, &d);
        assert_eq!(y.translation, d.linear);
    }

    #[test]
    fn random_round_trip_small_steps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = Pose::new(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)),
                UnitQuaternion::from_euler_angles(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                ),
            );
            let d = PoseError::new(
                Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ),
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            );
            let back = pose_error(&integrate_pose(&x, &d), &x);
            worst = worst.max((back.to_vector() - d.to_vector()).amax());
        }
        assert!(worst < 1e-8, "max deviation {worst}");
    }

    #[test]
    fn three_four_five() {
        let a = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0));
        let b = Pose::from_translation(Vector3::new(0.0, 0.4, 0.0));
        assert!((translational_distance(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(translational_distance(&a, &a), 0.0);
    }

    #[test]
    fn success_radius_check() {
        let goal = Pose::from_translation(Vector3::new(0.5, 0.0, 0.3));
        let ee = Pose::from_translation(Vector3::new(0.509, 0.0, 0.3));
        assert!(translational_distance(&ee, &goal) <= 0.01);
    }

    #[test]
    fn world_frame_error_matches_left_log() {
        let x_d = Pose::new(Vector3::zeros(), UnitQuaternion::from_euler_angles(3.0, 0.1, 0.4));
        let x = Pose::new(Vector3::zeros(), UnitQuaternion::from_euler_angles(0.05, 0.02, -0.03) * x_d.rotation);
        let world = pose_error(&x, &x_d).in_world(&x_d).angular;
        let oracle = (x.rotation * x_d.rotation.inverse()).scaled_axis();
        assert!((world - oracle).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn self_error_vanishes(x in arb_pose()) {
            prop_assert!(pose_error(&x, &x).to_vector().norm() < 1e-12);
        }

        #[test]
        fn angular_error_within_pi(a in arb_pose(), b in arb_pose()) {
            prop_assert!(pose_error(&a, &b).angular.norm() <= std::f64::consts::PI + 1e-12);
        }

        #[test]
        fn distance_metric_axioms(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let ab = translational_distance(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - translational_distance(&b, &a)).abs() < 1e-15);
            prop_assert!(translational_distance(&a, &c) <= ab + translational_distance(&b, &c) + 1e-12);
        }
    }
}
