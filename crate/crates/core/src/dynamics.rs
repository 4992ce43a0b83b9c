//! Kinematics and rigid-body dynamics of a 7-joint revolute serial chain with
//! capsule links.
//!
//! Everything is evaluated in the world frame. Spatial vectors are stacked as
//! `[angular; linear]` with the linear part taken at the world origin, so chain
//! composition is plain addition.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Rotation3, SMatrix, SVector, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::spatial::{skew, Pose};

pub const DOF: usize = 7;

pub type JointVector = SVector<f64, DOF>;
pub type JointMatrix = SMatrix<f64, DOF, DOF>;
pub type Jacobian = SMatrix<f64, 6, DOF>;
pub type Matrix6 = SMatrix<f64, 6, 6>;

/// Smallest singular value of `J` below which the damped inverse is used.
pub const SINGULAR_THRESHOLD: f64 = 1e-4;
/// Damping added to `J M⁻¹ Jᵀ` before inversion near singularities.
pub const SINGULAR_DAMPING: f64 = 1e-4;

/// One joint plus the link it drives, as written in a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Joint origin in the parent link frame.
    pub origin_xyz: [f64; 3],
    /// Fixed roll-pitch-yaw of the joint frame relative to the parent link.
    pub origin_rpy: [f64; 3],
    pub lower: f64,
    pub upper: f64,
    /// Link mass in kg; inertia comes from a solid cylinder along the capsule.
    pub mass: f64,
    /// Capsule radius; falls back to the model-wide default.
    #[serde(default)]
    pub radius: Option<f64>,
}

/// On-disk model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub name: String,
    pub gravity: [f64; 3],
    pub capsule_radius: f64,
    /// End of the last capsule, in the last link frame.
    pub flange: [f64; 3],
    /// End-effector point relative to the flange, in the last link frame.
    pub tool: [f64; 3],
    pub joints: Vec<JointSpec>,
}

#[derive(Clone, Debug)]
struct Link {
    origin_rotation: Matrix3<f64>,
    origin_translation: Vector3<f64>,
    mass: f64,
    radius: f64,
    capsule_end: Vector3<f64>,
    com: Vector3<f64>,
    inertia: Matrix3<f64>,
}

/// Immutable kinematic and inertial description of the manipulator.
#[derive(Clone, Debug)]
pub struct RobotModel {
    spec: ModelFile,
    links: Vec<Link>,
    ee_offset: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub lower: JointVector,
    pub upper: JointVector,
}

/// Inertia of a uniform solid cylinder about its centroid; the axis runs along `axis`.
fn cylinder_inertia(mass: f64, radius: f64, axis: &Vector3<f64>) -> Matrix3<f64> {
    let length = axis.norm();
    let u = if length > 1e-12 { axis / length } else { Vector3::z() };
    let transverse = mass * (3.0 * radius * radius + length * length) / 12.0;
    let axial = 0.5 * mass * radius * radius;
    let uu = u * u.transpose();
    (Matrix3::identity() - uu) * transverse + uu * axial
}

impl RobotModel {
    pub fn from_spec(spec: ModelFile) -> Result<Self, ModelError> {
        if spec.joints.len() != DOF {
            return Err(ModelError::JointCount(spec.joints.len()));
        }
        let mut links = Vec::with_capacity(DOF);
        let mut lower = JointVector::zeros();
        let mut upper = JointVector::zeros();
        for (i, joint) in spec.joints.iter().enumerate() {
            let radius = joint.radius.unwrap_or(spec.capsule_radius);
            if !(joint.mass > 0.0) {
                return Err(ModelError::Invalid(format!("joints[{i}].mass must be > 0")));
            }
            if !(radius > 0.0) {
                return Err(ModelError::Invalid(format!("joints[{i}].radius must be > 0")));
            }
            if !(joint.lower < joint.upper) {
                return Err(ModelError::Invalid(format!("joints[{i}] limits are empty")));
            }
            let capsule_end =
                if i + 1 < DOF { Vector3::from(spec.joints[i + 1].origin_xyz) } else { Vector3::from(spec.flange) };
            let [r, p, y] = joint.origin_rpy;
            links.push(Link {
                origin_rotation: *Rotation3::from_euler_angles(r, p, y).matrix(),
                origin_translation: Vector3::from(joint.origin_xyz),
                mass: joint.mass,
                radius,
                capsule_end,
                com: capsule_end * 0.5,
                inertia: cylinder_inertia(joint.mass, radius, &capsule_end),
            });
            lower[i] = joint.lower;
            upper[i] = joint.upper;
        }
        Ok(Self {
            ee_offset: Vector3::from(spec.flange) + Vector3::from(spec.tool),
            gravity: Vector3::from(spec.gravity),
            links,
            lower,
            upper,
            spec,
        })
    }

    /// Kuka iiwa 14 joint offsets and limits with uniform-cylinder links of
    /// radius 0.06 m. The 0.06 m tool puts the end-effector on the tip of the
    /// last capsule.
    pub fn iiwa14() -> Self {
        use std::f64::consts::PI;
        let deg = PI / 180.0;
        let joint = |name: &str, xyz: [f64; 3], rpy: [f64; 3], limit: f64, mass: f64| JointSpec {
            name: name.to_string(),
            origin_xyz: xyz,
            origin_rpy: rpy,
            lower: -limit * deg,
            upper: limit * deg,
            mass,
            radius: None,
        };
        let spec = ModelFile {
            name: "iiwa14-capsules".into(),
            gravity: [0.0, 0.0, -9.81],
            capsule_radius: 0.06,
            flange: [0.0, 0.0, 0.045],
            tool: [0.0, 0.0, 0.06],
            joints: vec![
                joint("a1", [0.0, 0.0, 0.1575], [0.0, 0.0, 0.0], 170.0, 4.0),
                joint("a2", [0.0, 0.0, 0.2025], [PI / 2.0, 0.0, PI], 120.0, 4.0),
                joint("a3", [0.0, 0.2045, 0.0], [PI / 2.0, 0.0, PI], 170.0, 3.0),
                joint("a4", [0.0, 0.0, 0.2155], [PI / 2.0, 0.0, 0.0], 120.0, 2.7),
                joint("a5", [0.0, 0.1845, 0.0], [-PI / 2.0, PI, 0.0], 170.0, 1.7),
                joint("a6", [0.0, 0.0, 0.2155], [PI / 2.0, 0.0, 0.0], 120.0, 1.8),
                joint("a7", [0.0, 0.081, 0.0], [-PI / 2.0, PI, 0.0], 175.0, 0.3),
            ],
        };
        Self::from_spec(spec).expect("built-in model is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let spec: ModelFile = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.spec).expect("model spec serializes")
    }

    pub fn spec(&self) -> &ModelFile {
        &self.spec
    }

    /// Same model with gravity replaced.
    pub fn with_gravity(&self, gravity: Vector3<f64>) -> Self {
        let mut spec = self.spec.clone();
        spec.gravity = gravity.into();
        Self::from_spec(spec).expect("gravity change keeps model valid")
    }

    pub fn capsule_radius(&self, link: usize) -> f64 {
        self.links[link].radius
    }

    pub fn link_mass(&self, link: usize) -> f64 {
        self.links[link].mass
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        q.zip_zip_map(&self.lower, &self.upper, |v, lo, hi| v.clamp(lo, hi))
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        (0..DOF).all(|i| q[i] >= self.lower[i] && q[i] <= self.upper[i])
    }

    pub fn kinematics(&self, q: &JointVector) -> Kinematics {
        let mut k = Kinematics::default();
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        for (i, link) in self.links.iter().enumerate() {
            pos += rot * link.origin_translation;
            let base = rot * link.origin_rotation;
            let (s, c) = q[i].sin_cos();
            let c0 = base.column(0).into_owned();
            let c1 = base.column(1).into_owned();
            let axis = base.column(2).into_owned();
            rot = Matrix3::from_columns(&[c0 * c + c1 * s, c1 * c - c0 * s, axis]);
            k.joint_pos[i] = pos;
            k.joint_axis[i] = axis;
            k.link_rot[i] = rot;
            k.seg_a[i] = pos;
            k.seg_b[i] = pos + rot * link.capsule_end;
            k.com[i] = pos + rot * link.com;
            k.inertia[i] = rot * link.inertia * rot.transpose();
            k.mass[i] = link.mass;
            k.radius[i] = link.radius;
        }
        k.ee_pos = pos + rot * self.ee_offset;
        k.ee_rot = rot;
        k
    }
}

/// World-frame placement of every link at one configuration.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub joint_pos: [Vector3<f64>; DOF],
    pub joint_axis: [Vector3<f64>; DOF],
    pub link_rot: [Matrix3<f64>; DOF],
    pub seg_a: [Vector3<f64>; DOF],
    pub seg_b: [Vector3<f64>; DOF],
    pub com: [Vector3<f64>; DOF],
    pub inertia: [Matrix3<f64>; DOF],
    pub mass: [f64; DOF],
    pub radius: [f64; DOF],
    pub ee_pos: Vector3<f64>,
    pub ee_rot: Matrix3<f64>,
}

impl Default for Kinematics {
    fn default() -> Self {
        Self {
            joint_pos: [Vector3::zeros(); DOF],
            joint_axis: [Vector3::zeros(); DOF],
            link_rot: [Matrix3::identity(); DOF],
            seg_a: [Vector3::zeros(); DOF],
            seg_b: [Vector3::zeros(); DOF],
            com: [Vector3::zeros(); DOF],
            inertia: [Matrix3::zeros(); DOF],
            mass: [0.0; DOF],
            radius: [0.0; DOF],
            ee_pos: Vector3::zeros(),
            ee_rot: Matrix3::identity(),
        }
    }
}

impl Kinematics {
    pub fn ee_pose(&self) -> Pose {
        let rot = Rotation3::from_matrix_unchecked(self.ee_rot);
        Pose::new(self.ee_pos, UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// Geometric Jacobian of the end-effector point, rows `[linear; angular]`.
    pub fn jacobian(&self) -> Jacobian {
        let mut j = Jacobian::zeros();
        for i in 0..DOF {
            let z = self.joint_axis[i];
            let lin = z.cross(&(self.ee_pos - self.joint_pos[i]));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }

    /// Velocity of a point rigidly attached to `link`.
    pub fn point_velocity(&self, link: usize, point: &Vector3<f64>, qdot: &JointVector) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for j in 0..=link {
            v += self.joint_axis[j].cross(&(point - self.joint_pos[j])) * qdot[j];
        }
        v
    }

    /// Accumulates `J_pointᵀ force` into `tau` for a force applied at `point` on `link`.
    pub fn add_point_force(&self, link: usize, point: &Vector3<f64>, force: &Vector3<f64>, tau: &mut JointVector) {
        for j in 0..=link {
            tau[j] += self.joint_axis[j].dot(&(point - self.joint_pos[j]).cross(force));
        }
    }

    /// Gravitational potential energy, zero at `z = 0` in the world.
    pub fn potential_energy(&self, gravity: &Vector3<f64>) -> f64 {
        (0..DOF).map(|i| -self.mass[i] * gravity.dot(&self.com[i])).sum()
    }

    /// `M(q)` by the composite-rigid-body algorithm.
    pub fn mass_matrix(&self) -> JointMatrix {
        let mut composite = Matrix6::zeros();
        let subspace: [Vector6<f64>; DOF] =
            std::array::from_fn(|i| motion_subspace(&self.joint_pos[i], &self.joint_axis[i]));
        let mut m = JointMatrix::zeros();
        for j in (0..DOF).rev() {
            composite += spatial_inertia(self.mass[j], &self.com[j], &self.inertia[j]);
            let force = composite * subspace[j];
            for i in 0..=j {
                let v = subspace[i].dot(&force);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Recursive Newton-Euler inverse dynamics in world coordinates.
    /// `base_accel` is the linear acceleration imposed on the base; passing
    /// `-gravity` folds the gravity torques into the result.
    pub fn inverse_dynamics(&self, qdot: &JointVector, qddot: &JointVector, base_accel: &Vector3<f64>) -> JointVector {
        let mut forces = [(Vector3::zeros(), Vector3::zeros()); DOF];
        let mut w = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut dw = Vector3::zeros();
        let mut dv = *base_accel;
        for i in 0..DOF {
            let z = self.joint_axis[i];
            let zo = self.joint_pos[i].cross(&z);
            w += z * qdot[i];
            v += zo * qdot[i];
            // (V_i ×m S_i) q̇_i + S_i q̈_i
            dw += w.cross(&z) * qdot[i] + z * qddot[i];
            dv += (w.cross(&zo) + v.cross(&z)) * qdot[i] + zo * qddot[i];
            let (n_a, f_a) = apply_inertia(self.mass[i], &self.com[i], &self.inertia[i], &dw, &dv);
            let (n_v, f_v) = apply_inertia(self.mass[i], &self.com[i], &self.inertia[i], &w, &v);
            // V ×f (I V)
            let n = n_a + w.cross(&n_v) + v.cross(&f_v);
            let f = f_a + w.cross(&f_v);
            forces[i] = (n, f);
        }
        let mut tau = JointVector::zeros();
        let mut acc_n = Vector3::zeros();
        let mut acc_f = Vector3::zeros();
        for i in (0..DOF).rev() {
            acc_n += forces[i].0;
            acc_f += forces[i].1;
            let z = self.joint_axis[i];
            tau[i] = z.dot(&acc_n) + self.joint_pos[i].cross(&z).dot(&acc_f);
        }
        tau
    }

    /// Generalized gravity torques as the gradient of potential energy.
    pub fn gravity_torques(&self, gravity: &Vector3<f64>) -> JointVector {
        let mut tau = JointVector::zeros();
        let mut mass = 0.0;
        let mut moment = Vector3::zeros();
        for i in (0..DOF).rev() {
            mass += self.mass[i];
            moment += self.com[i] * self.mass[i];
            if mass > 0.0 {
                let arm = moment / mass - self.joint_pos[i];
                tau[i] = -mass * gravity.dot(&self.joint_axis[i].cross(&arm));
            }
        }
        tau
    }
}

fn motion_subspace(pos: &Vector3<f64>, axis: &Vector3<f64>) -> Vector6<f64> {
    let lin = pos.cross(axis);
    Vector6::new(axis.x, axis.y, axis.z, lin.x, lin.y, lin.z)
}

/// 6×6 spatial inertia about the world origin.
fn spatial_inertia(mass: f64, com: &Vector3<f64>, inertia: &Matrix3<f64>) -> Matrix6 {
    let c = skew(com);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(inertia - c * c * mass));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(c * mass));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-c * mass));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * mass));
    out
}

/// Spatial inertia times `[w; v]` without forming the 6×6 matrix.
fn apply_inertia(
    mass: f64,
    com: &Vector3<f64>,
    inertia: &Matrix3<f64>,
    w: &Vector3<f64>,
    v: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let p = (v + w.cross(com)) * mass;
    (inertia * w + com.cross(&p), p)
}

/// Settings for [`inverse_kinematics`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkOptions {
    pub max_iters: usize,
    pub damping: f64,
    /// Largest joint step per iteration (rad, max norm).
    pub max_step: f64,
    pub position_tol: f64,
    pub orientation_tol: f64,
    /// Whether the target orientation is enforced.
    pub orientation: bool,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            damping: 0.05,
            max_step: 0.2,
            position_tol: 1e-4,
            orientation_tol: 1e-3,
            orientation: true,
        }
    }
}

/// Damped least-squares IK from `seed`, clamped to joint limits every iteration.
pub fn inverse_kinematics(
    model: &RobotModel,
    target: &Pose,
    seed: &JointVector,
    opts: &IkOptions,
) -> Option<JointVector> {
    let mut q = model.clamp(seed);
    let lambda_sq = opts.damping * opts.damping;
    for _ in 0..opts.max_iters {
        let kin = model.kinematics(&q);
        let err = crate::spatial::pose_error(&kin.ee_pose(), target).in_world(target);
        let converged =
            err.linear.norm() < opts.position_tol && (!opts.orientation || err.angular.norm() < opts.orientation_tol);
        if converged {
            return Some(q);
        }
        let jac = kin.jacobian();
        let mut step = if opts.orientation {
            let e = err.to_vector();
            let gram = jac * jac.transpose() + Matrix6::identity() * lambda_sq;
            -(jac.transpose() * gram.cholesky()?.solve(&e))
        } else {
            let jl = jac.fixed_rows::<3>(0).into_owned();
            let gram = jl * jl.transpose() + Matrix3::identity() * lambda_sq;
            -(jl.transpose() * gram.cholesky()?.solve(&err.linear))
        };
        let largest = step.amax();
        if largest > opts.max_step {
            step *= opts.max_step / largest;
        }
        q = model.clamp(&(q + step));
    }
    None
}

/// Joint-space state of the robot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: JointVector,
    pub qdot: JointVector,
}

impl JointState {
    pub fn at_rest(q: JointVector) -> Self {
        Self { q, qdot: JointVector::zeros() }
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &JointVector) -> Pose {
    model.kinematics(q).ee_pose()
}

pub fn jacobian(model: &RobotModel, q: &JointVector) -> Jacobian {
    model.kinematics(q).jacobian()
}

pub fn mass_matrix(model: &RobotModel, q: &JointVector) -> JointMatrix {
    model.kinematics(q).mass_matrix()
}

/// Coriolis and centrifugal torques, gravity excluded.
pub fn bias_forces(model: &RobotModel, q: &JointVector, qdot: &JointVector) -> JointVector {
    model.kinematics(q).inverse_dynamics(qdot, &JointVector::zeros(), &Vector3::zeros())
}

pub fn gravity_vector(model: &RobotModel, q: &JointVector) -> JointVector {
    model.kinematics(q).gravity_torques(&model.gravity)
}

/// Operational-space matrices `J`, `Λ`, `J†` and `N`.
#[derive(Clone, Debug)]
pub struct TaskSpaceQuantities {
    pub jacobian: Jacobian,
    pub lambda: Matrix6,
    pub j_dagger: SMatrix<f64, DOF, 6>,
    pub null_projector: JointMatrix,
    /// Set when `σ_min(J) < SINGULAR_THRESHOLD`; the quantities then come from the damped inverse.
    pub near_singular: bool,
}

impl TaskSpaceQuantities {
    pub fn compute(jacobian: &Jacobian, mass_chol: &Cholesky<f64, nalgebra::Const<DOF>>) -> Self {
        let minv_jt = mass_chol.solve(&jacobian.transpose());
        let task_inv = jacobian * minv_jt;
        let near_singular = min_singular_value_below(jacobian, SINGULAR_THRESHOLD);
        let lambda = invert_spd(&task_inv, if near_singular { SINGULAR_DAMPING } else { 0.0 });
        let j_dagger = minv_jt * lambda;
        let null_projector = JointMatrix::identity() - j_dagger * jacobian;
        Self { jacobian: *jacobian, lambda, j_dagger, null_projector, near_singular }
    }
}

/// Whether `σ_min(J) < threshold`. `1 / tr((J Jᵀ)⁻¹)` is a lower bound on
/// `σ_min²`, so the eigensolver only runs close to a singularity.
pub fn min_singular_value_below(jacobian: &Jacobian, threshold: f64) -> bool {
    let gram = jacobian * jacobian.transpose();
    let limit = threshold * threshold;
    if let Some(chol) = gram.cholesky() {
        let l_inv = chol.l().solve_lower_triangular(&Matrix6::identity());
        if let Some(l_inv) = l_inv {
            let trace_inv = l_inv.norm_squared();
            if trace_inv.is_finite() && 1.0 / trace_inv >= limit {
                return false;
            }
        }
    }
    gram.symmetric_eigenvalues().min() < limit
}

fn invert_spd(a: &Matrix6, damping: f64) -> Matrix6 {
    let mut damped = a + Matrix6::identity() * damping;
    damped = (damped + damped.transpose()) * 0.5;
    match damped.cholesky() {
        Some(c) => c.inverse(),
        // Only reachable for exactly rank-deficient J; fall back to the damped form.
        None => {
            (a + Matrix6::identity() * SINGULAR_DAMPING.max(damping)).try_inverse().unwrap_or_else(Matrix6::identity)
        }
    }
}

pub fn task_space_quantities(model: &RobotModel, q: &JointVector) -> TaskSpaceQuantities {
    let kin = model.kinematics(q);
    let m = kin.mass_matrix();
    let chol = m.cholesky().expect("mass matrix is positive definite");
    TaskSpaceQuantities::compute(&kin.jacobian(), &chol)
}

/// Everything the controller and the integrator need at one robot state,
/// computed once per physics step.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub kin: Kinematics,
    pub jacobian: Jacobian,
    pub mass: JointMatrix,
    pub mass_chol: Cholesky<f64, nalgebra::Const<DOF>>,
    /// `C(q, q̇) + g(q)`.
    pub bias: JointVector,
}

impl DynamicsTerms {
    pub fn compute(model: &RobotModel, state: &JointState) -> Self {
        let kin = model.kinematics(&state.q);
        let mass = kin.mass_matrix();
        let mass_chol = mass.cholesky().expect("mass matrix is positive definite");
        let bias = kin.inverse_dynamics(&state.qdot, &JointVector::zeros(), &(-model.gravity));
        Self { jacobian: kin.jacobian(), kin, mass, mass_chol, bias }
    }

    pub fn task_space(&self) -> TaskSpaceQuantities {
        TaskSpaceQuantities::compute(&self.jacobian, &self.mass_chol)
    }

    pub fn gravity(&self, model: &RobotModel) -> JointVector {
        self.kin.gravity_torques(&model.gravity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(model: &RobotModel, rng: &mut ChaCha8Rng) -> JointVector {
        JointVector::from_fn(|i, _| rng.random_range(model.lower[i] * 0.9..model.upper[i] * 0.9))
    }

    fn random_qdot(rng: &mut ChaCha8Rng) -> JointVector {
        JointVector::from_fn(|_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_configuration_is_vertical() {
        let model = RobotModel::iiwa14();
        let spec = model.spec();
        let height: f64 =
            spec.joints.iter().map(|j| j.origin_xyz.iter().sum::<f64>()).sum::<f64>() + spec.flange[2] + spec.tool[2];
        let ee = forward_kinematics(&model, &JointVector::zeros());
        assert!((height - 1.366).abs() < 1e-12);
        assert!((ee.translation - Vector3::new(0.0, 0.0, height)).norm() < 1e-12);
    }

    #[test]
    fn base_rotation_keeps_height() {
        let model = RobotModel::iiwa14();
        let mut q = JointVector::from_column_slice(&[0.0, 0.6, 0.2, -1.1, 0.3, 0.8, 0.1]);
        let h0 = forward_kinematics(&model, &q).translation.z;
        for theta in [0.3, -1.2, 2.5] {
            q[0] = theta;
            let h = forward_kinematics(&model, &q).translation.z;
            assert!((h - h0).abs() < 1e-12);
        }
    }

    #[test]
    fn last_joint_axis_through_ee_has_no_moment_arm() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let j = jacobian(&model, &random_q(&model, &mut rng));
            assert!(j.fixed_view::<3, 1>(0, 6).norm() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let q = random_q(&model, &mut rng);
            let j = jacobian(&model, &q);
            for i in 0..DOF {
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let xp = forward_kinematics(&model, &qp);
                let xm = forward_kinematics(&model, &qm);
                let lin = (xp.translation - xm.translation) / (2.0 * h);
                // world-frame angular velocity from the left-difference
                let ang = (xp.rotation * xm.rotation.inverse()).scaled_axis() / (2.0 * h);
                worst =
                    worst.max((lin - j.fixed_view::<3, 1>(0, i)).amax()).max((ang - j.fixed_view::<3, 1>(3, i)).amax());
            }
        }
        assert!(worst < 1e-5, "max abs error {worst}");
    }

    #[test]
    fn stretched_posture_is_singular() {
        let model = RobotModel::iiwa14();
        let j = jacobian(&model, &JointVector::zeros());
        let sigma = j.singular_values().min();
        assert!(sigma < 1e-3, "sigma_min {sigma}");
        let tsq = task_space_quantities(&model, &JointVector::zeros());
        assert!(tsq.near_singular);
        assert!(tsq.null_projector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn singularity_screen_agrees_with_svd() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for i in 0..200 {
            let mut q = random_q(&model, &mut rng);
            if i % 4 == 0 {
                // approach the stretched singularity
                q *= 10f64.powi(-(i % 9));
            }
            let j = jacobian(&model, &q);
            let sigma = j.singular_values().min();
            for threshold in [1e-4, 1e-3, 1e-2] {
                if (sigma - threshold).abs() > 1e-9 {
                    assert_eq!(min_singular_value_below(&j, threshold), sigma < threshold);
                }
            }
        }
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = mass_matrix(&model, &random_q(&model, &mut rng));
            assert!((m - m.transpose()).norm() < 1e-10);
            let min_eig = m.symmetric_eigenvalues().min();
            assert!(min_eig > 0.0, "min eigenvalue {min_eig}");
        }
    }

    /// Independent route: sum of m Jvᵀ Jv + Jωᵀ I Jω over links.
    #[test]
    fn mass_matrix_matches_link_jacobian_sum() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let kin = model.kinematics(&random_q(&model, &mut rng));
            let mut oracle = JointMatrix::zeros();
            for k in 0..DOF {
                let mut jv = SMatrix::<f64, 3, DOF>::zeros();
                let mut jw = SMatrix::<f64, 3, DOF>::zeros();
                for j in 0..=k {
                    let z = kin.joint_axis[j];
                    jv.set_column(j, &z.cross(&(kin.com[k] - kin.joint_pos[j])));
                    jw.set_column(j, &z);
                }
                oracle += jv.transpose() * jv * kin.mass[k] + jw.transpose() * kin.inertia[k] * jw;
            }
            assert!((kin.mass_matrix() - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn distal_rod_reproduces_ml2_over_3() {
        let mut spec = RobotModel::iiwa14().spec().clone();
        let length = 0.4;
        let mass = 1.3;
        spec.flange = [length, 0.0, 0.0];
        spec.joints[6].mass = mass;
        spec.joints[6].radius = Some(1e-6);
        let model = RobotModel::from_spec(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = mass_matrix(&model, &random_q(&model, &mut rng));
        let analytic = mass * length * length / 3.0;
        assert!((m[(6, 6)] - analytic).abs() < 1e-9, "{} vs {analytic}", m[(6, 6)]);
    }

    #[test]
    fn bias_forces_vanish_at_rest_and_scale_quadratically() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_q(&model, &mut rng);
        assert_eq!(bias_forces(&model, &q, &JointVector::zeros()), JointVector::zeros());
        let qd = random_qdot(&mut rng);
        let c1 = bias_forces(&model, &q, &qd);
        let c2 = bias_forces(&model, &q, &(qd * 2.0));
        assert!((c2 - c1 * 4.0).amax() < 1e-10);
    }

    #[test]
    fn coriolis_power_balance() {
        // q̇ᵀ Ṁ q̇ = 2 q̇ᵀ C(q, q̇), the skew-symmetry of Ṁ − 2C.
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..50 {
            let q = random_q(&model, &mut rng);
            let qd = random_qdot(&mut rng);
            let mdot = (mass_matrix(&model, &(q + qd * h)) - mass_matrix(&model, &(q - qd * h))) / (2.0 * h);
            let lhs = qd.dot(&(mdot * qd));
            let rhs = 2.0 * qd.dot(&bias_forces(&model, &q, &qd));
            assert!((lhs - rhs).abs() < 1e-5 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn inverse_dynamics_mass_columns() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kin = model.kinematics(&random_q(&model, &mut rng));
        let m = kin.mass_matrix();
        for i in 0..DOF {
            let e = JointVector::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
            let col = kin.inverse_dynamics(&JointVector::zeros(), &e, &Vector3::zeros());
            assert!((col - m.column(i)).amax() < 1e-10);
        }
    }

    #[test]
    fn gravity_matches_potential_gradient_and_rnea() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let q = random_q(&model, &mut rng);
            let g = gravity_vector(&model, &q);
            for i in 0..DOF {
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let up = model.kinematics(&qp).potential_energy(&model.gravity);
                let um = model.kinematics(&qm).potential_energy(&model.gravity);
                worst = worst.max(((up - um) / (2.0 * h) - g[i]).abs());
            }
            let rnea =
                model.kinematics(&q).inverse_dynamics(&JointVector::zeros(), &JointVector::zeros(), &(-model.gravity));
            assert!((rnea - g).amax() < 1e-9);
        }
        assert!(worst < 1e-5, "max abs error {worst}");
    }

    #[test]
    fn zero_gravity_and_hanging_posture() {
        let model = RobotModel::iiwa14();
        let q = JointVector::from_column_slice(&[0.3, 0.5, -0.2, 1.0, 0.4, -0.6, 0.2]);
        let free = model.with_gravity(Vector3::zeros());
        assert_eq!(gravity_vector(&free, &q), JointVector::zeros());
        // The chain is straight along the base axis at q = 0; flipping gravity
        // makes it hang straight down, an equilibrium.
        let hanging = model.with_gravity(Vector3::new(0.0, 0.0, 9.81));
        assert!(gravity_vector(&hanging, &JointVector::zeros()).amax() < 1e-12);
    }

    #[test]
    fn projector_identities() {
        let model = RobotModel::iiwa14();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0;
        while checked < 100 {
            let q = random_q(&model, &mut rng);
            let kin = model.kinematics(&q);
            let m = kin.mass_matrix();
            let tsq = task_space_quantities(&model, &q);
            if tsq.near_singular || tsq.jacobian.singular_values().min() < 0.05 {
                continue;
            }
            checked += 1;
            let j = tsq.jacobian;
            let n = tsq.null_projector;
            let minv = m.try_inverse().unwrap();
            assert!((j * tsq.j_dagger - Matrix6::identity()).amax() < 1e-8);
            assert!((n * n - n).amax() < 1e-8);
            assert!((j * minv * n.transpose()).amax() < 1e-8);
            for _ in 0..1 {
                let tau = JointVector::from_fn(|_, _| rng.random_range(-50.0..50.0));
                assert!((j * minv * n.transpose() * tau).norm() < 1e-8 * tau.norm().max(1.0));
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let model = RobotModel::iiwa14();
        let text = model.to_toml();
        let back = RobotModel::from_toml(&text).unwrap();
        assert_eq!(back.spec(), model.spec());
    }

    #[test]
    fn rejects_bad_model() {
        let mut spec = RobotModel::iiwa14().spec().clone();
        spec.joints.pop();
        assert!(matches!(RobotModel::from_spec(spec), Err(ModelError::JointCount(6))));
        let mut spec = RobotModel::iiwa14().spec().clone();
        spec.joints[2].mass = 0.0;
        assert!(RobotModel::from_spec(spec).is_err());
    }
}
