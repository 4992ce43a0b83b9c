//! Penalty-contact forward simulation: the robot, free-floating rigid balls,
//! mass-spring walls and the ground plane, advanced by semi-implicit Euler.

use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlLaw, References};
use crate::dynamics::{DynamicsTerms, JointState, JointVector, RobotModel, DOF};
use crate::error::SimError;
use crate::planner::Action;
use crate::spatial::Pose;

/// Physical constants of the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Physics timestep in seconds.
    pub dt: f64,
    /// Physics steps per planned action (one control interval).
    pub substeps: usize,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    /// Linear drag on rigid obstacles, 1/s.
    pub ball_drag: f64,
    /// Whether gravity acts on deformable nodes. Walls are held by fixtures, so off by default.
    pub node_gravity: bool,
    pub ground: bool,
    pub blowup_limit: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.005,
            substeps: 40,
            contact_stiffness: 5000.0,
            contact_damping: 10.0,
            ball_drag: 2.0,
            node_gravity: false,
            ground: true,
            blowup_limit: 1e6,
        }
    }
}

impl SimParams {
    pub fn control_interval(&self) -> f64 {
        self.dt * self.substeps as f64
    }
}

/// Static description of a rigid sphere obstacle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub radius: f64,
    pub mass: f64,
}

/// Pose and `[angular; linear]` velocity of a rigid obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub pose: Pose,
    pub velocity: nalgebra::Vector6<f64>,
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { pose: Pose::from_translation(position), velocity: nalgebra::Vector6::zeros() }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }

    pub fn linear_velocity(&self) -> Vector3<f64> {
        self.velocity.fixed_rows::<3>(3).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub damping: f64,
}

/// Mass-spring volumetric wall. Node indices are local to the wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformableWall {
    pub rest_positions: Vec<Vector3<f64>>,
    pub node_mass: f64,
    pub node_radius: f64,
    pub springs: Vec<Spring>,
    pub anchored: Vec<bool>,
}

/// Parameters for [`build_deformable_wall`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallParams {
    pub dims: [f64; 3],
    pub node_spacing: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub node_mass: f64,
    pub node_radius: f64,
}

impl Default for WallParams {
    fn default() -> Self {
        Self {
            dims: [0.1, 1.0, 0.2],
            node_spacing: 0.1,
            stiffness: 50.0,
            damping: 1.0,
            node_mass: 0.2,
            node_radius: 0.03,
        }
    }
}

/// Which nodes are fixed to the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSpec {
    /// Every node on the lowest layer.
    BottomLayer,
    None,
}

/// Tessellates an axis-aligned box with its minimum corner at `origin` into a
/// node grid with springs along edges, face diagonals and cell diagonals.
pub fn build_deformable_wall(
    origin: Vector3<f64>,
    params: &WallParams,
    anchors: AnchorSpec,
) -> Result<DeformableWall, SimError> {
    let h = params.node_spacing;
    let mut cells = [0usize; 3];
    for (axis, &dim) in params.dims.iter().enumerate() {
        let ratio = dim / h;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() * h > 1e-9 {
            return Err(SimError::InvalidTessellation { spacing: h, dim });
        }
        cells[axis] = n as usize;
    }
    let counts = [cells[0] + 1, cells[1] + 1, cells[2] + 1];
    let index = |i: usize, j: usize, k: usize| (k * counts[1] + j) * counts[0] + i;
    let mut rest_positions = Vec::with_capacity(counts.iter().product());
    let mut anchored = Vec::with_capacity(rest_positions.capacity());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                rest_positions.push(origin + Vector3::new(i as f64 * h, j as f64 * h, k as f64 * h));
                anchored.push(matches!(anchors, AnchorSpec::BottomLayer) && k == 0);
            }
        }
    }
    let mut springs = Vec::new();
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let a = index(i, j, k);
                // each unordered neighbour pair in the 26-neighbourhood once
                for dk in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for di in -1i64..=1 {
                            let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if ni < 0 || nj < 0 || nk < 0 {
                                continue;
                            }
                            let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                            if ni >= counts[0] || nj >= counts[1] || nk >= counts[2] {
                                continue;
                            }
                            let b = index(ni, nj, nk);
                            if b <= a || (anchored[a] && anchored[b]) {
                                continue;
                            }
                            springs.push(Spring {
                                i: a,
                                j: b,
                                rest_length: (rest_positions[b] - rest_positions[a]).norm(),
                                stiffness: params.stiffness,
                                damping: params.damping,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(DeformableWall {
        rest_positions,
        node_mass: params.node_mass,
        node_radius: params.node_radius,
        springs,
        anchored,
    })
}

impl DeformableWall {
    pub fn node_count(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn rest_nodes(&self) -> impl Iterator<Item = NodeState> + '_ {
        self.rest_positions.iter().map(|&p| NodeState { position: p, velocity: Vector3::zeros() })
    }

    pub fn is_at_rest(&self, nodes: &[NodeState]) -> bool {
        nodes.iter().zip(&self.rest_positions).all(|(n, r)| n.position == *r && n.velocity == Vector3::zeros())
    }

    /// Within settling tolerance of the rest shape.
    fn is_settled(&self, nodes: &[NodeState]) -> bool {
        const POSITION_TOL: f64 = 1e-6;
        const VELOCITY_TOL: f64 = 1e-5;
        nodes
            .iter()
            .zip(&self.rest_positions)
            .all(|(n, r)| (n.position - r).amax() < POSITION_TOL && n.velocity.amax() < VELOCITY_TOL)
    }

    fn reset_to_rest(&self, nodes: &mut [NodeState]) {
        for (n, r) in nodes.iter_mut().zip(&self.rest_positions) {
            n.position = *r;
            n.velocity = Vector3::zeros();
        }
    }

    /// Spring forces on each node for the given node states.
    pub fn spring_forces(&self, nodes: &[NodeState]) -> Vec<Vector3<f64>> {
        let mut forces = vec![Vector3::zeros(); nodes.len()];
        self.accumulate_spring_forces(nodes, &mut forces);
        forces
    }

    fn accumulate_spring_forces(&self, nodes: &[NodeState], forces: &mut [Vector3<f64>]) {
        for s in &self.springs {
            let d = nodes[s.j].position - nodes[s.i].position;
            let length = d.norm();
            if length < 1e-12 {
                continue;
            }
            let u = d / length;
            let rate = (nodes[s.j].velocity - nodes[s.i].velocity).dot(&u);
            let f = u * (s.stiffness * (length - s.rest_length) + s.damping * rate);
            forces[s.i] += f;
            forces[s.j] -= f;
        }
    }
}

/// Everything about a world that does not change during simulation.
#[derive(Clone, Debug)]
pub struct Scene {
    pub model: RobotModel,
    pub params: SimParams,
    pub balls: Vec<BallSpec>,
    pub walls: Vec<DeformableWall>,
}

/// Full dynamic state `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub joints: JointState,
    pub rigid_obstacles: Vec<RigidBodyState>,
    /// Nodes of all walls, concatenated in wall order.
    pub deformable_nodes: Vec<NodeState>,
    pub time: f64,
    /// Set once any joint has been clamped to its limit.
    #[serde(default)]
    pub joint_limit_hit: bool,
}

/// What the robot touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Ball(usize),
    /// Global node index into [`WorldState::deformable_nodes`].
    Node(usize),
    Ground,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub link: usize,
    pub other: Body,
    /// Unit normal pointing from the robot towards the other body.
    pub normal: Vector3<f64>,
    pub force: f64,
    pub penetration: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub contacts: Vec<Contact>,
    pub max_force: f64,
}

impl ContactReport {
    fn clear(&mut self) {
        self.contacts.clear();
        self.max_force = 0.0;
    }

    fn push(&mut self, contact: Contact) {
        self.max_force = self.max_force.max(contact.force);
        self.contacts.push(contact);
    }
}

/// Largest robot-body contact force in the report.
pub fn contact_force(report: &ContactReport) -> f64 {
    report.contacts.iter().map(|c| c.force).fold(0.0, f64::max)
}

fn closest_on_segment(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len_sq = ab.norm_squared();
    if len_sq < 1e-18 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}

/// Penalty force magnitude for penetration `depth` growing at `rate`.
#[inline]
pub fn penalty_force(stiffness: f64, damping: f64, depth: f64, rate: f64) -> f64 {
    (stiffness * depth + damping * rate).max(0.0)
}

#[derive(Default)]
struct Scratch {
    node_forces: Vec<Vector3<f64>>,
    ball_forces: Vec<Vector3<f64>>,
}

impl Scene {
    pub fn new(model: RobotModel, params: SimParams) -> Self {
        Self { model, params, balls: Vec::new(), walls: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.walls.iter().map(|w| w.node_count()).sum()
    }

    /// Initial world: robot at rest at `q`, balls at rest, every wall at its rest shape.
    pub fn initial_state(&self, q: JointVector, ball_positions: &[Vector3<f64>]) -> WorldState {
        WorldState {
            joints: JointState::at_rest(q),
            rigid_obstacles: ball_positions.iter().map(|&p| RigidBodyState::at_rest(p)).collect(),
            deformable_nodes: self.walls.iter().flat_map(|w| w.rest_nodes()).collect(),
            time: 0.0,
            joint_limit_hit: false,
        }
    }

    fn wall_of_node(&self, global: usize) -> (usize, usize) {
        let mut offset = 0;
        for (w, wall) in self.walls.iter().enumerate() {
            if global < offset + wall.node_count() {
                return (w, global - offset);
            }
            offset += wall.node_count();
        }
        unreachable!("node index out of range")
    }

    pub fn node_radius(&self, global: usize) -> f64 {
        let (w, _) = self.wall_of_node(global);
        self.walls[w].node_radius
    }

    pub fn node_anchored(&self, global: usize) -> bool {
        let (w, local) = self.wall_of_node(global);
        self.walls[w].anchored[local]
    }

    /// Advances one physics step of length `params.dt` under joint torque `tau`.
    pub fn step(&self, world: &WorldState, tau: &JointVector) -> Result<(WorldState, ContactReport), SimError> {
        let mut next = world.clone();
        let mut report = ContactReport::default();
        let terms = DynamicsTerms::compute(&self.model, &world.joints);
        let mut scratch = Scratch::default();
        self.step_in_place(&mut next, tau, &terms, &mut report, &mut scratch)?;
        Ok((next, report))
    }

    /// Steps `world` in place. `terms` must be computed from `world.joints`.
    fn step_in_place(
        &self,
        world: &mut WorldState,
        tau: &JointVector,
        terms: &DynamicsTerms,
        report: &mut ContactReport,
        scratch: &mut Scratch,
    ) -> Result<(), SimError> {
        let p = &self.params;
        let kin = &terms.kin;
        let qdot = world.joints.qdot;
        let (k_c, c_c) = (p.contact_stiffness, p.contact_damping);
        report.clear();
        scratch.node_forces.clear();
        scratch.node_forces.resize(world.deformable_nodes.len(), Vector3::zeros());
        scratch.ball_forces.clear();
        scratch.ball_forces.resize(world.rigid_obstacles.len(), Vector3::zeros());
        let mut tau_contact = JointVector::zeros();
        let mut wall_boxes = Vec::with_capacity(self.walls.len());
        let mut offset = 0;
        for wall in &self.walls {
            let nodes = &world.deformable_nodes[offset..offset + wall.node_count()];
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            for n in nodes {
                lo = lo.inf(&n.position);
                hi = hi.sup(&n.position);
            }
            wall_boxes.push((lo.add_scalar(-wall.node_radius), hi.add_scalar(wall.node_radius)));
            offset += wall.node_count();
        }

        // robot against spheres (balls and wall nodes)
        let sphere_contact = |link: usize,
                              center: &Vector3<f64>,
                              radius: f64,
                              velocity: &Vector3<f64>,
                              other: Body,
                              tau_contact: &mut JointVector,
                              report: &mut ContactReport|
         -> Option<Vector3<f64>> {
            let a = kin.seg_a[link];
            let b = kin.seg_b[link];
            let r = kin.radius[link];
            let s = closest_on_segment(&a, &b, center);
            let d = center - s;
            let dist = d.norm();
            let depth = r + radius - dist;
            if depth <= 0.0 || dist < 1e-12 {
                return None;
            }
            let n = d / dist;
            let point = s + n * r;
            let v_robot = kin.point_velocity(link, &point, &qdot);
            let rate = (v_robot - velocity).dot(&n);
            let f = penalty_force(k_c, c_c, depth, rate);
            if f > 0.0 {
                kin.add_point_force(link, &point, &(-n * f), tau_contact);
            }
            report.push(Contact { link, other, normal: n, force: f, penetration: depth });
            Some(n * f)
        };

        for link in 0..DOF {
            let a = kin.seg_a[link];
            let b = kin.seg_b[link];
            let r = kin.radius[link];
            let lo = a.inf(&b).add_scalar(-r);
            let hi = a.sup(&b).add_scalar(r);

            for (i, ball) in world.rigid_obstacles.iter().enumerate() {
                let spec = &self.balls[i];
                let c = ball.position();
                if (0..3).any(|ax| c[ax] + spec.radius < lo[ax] || c[ax] - spec.radius > hi[ax]) {
                    continue;
                }
                if let Some(f) = sphere_contact(
                    link,
                    &c,
                    spec.radius,
                    &ball.linear_velocity(),
                    Body::Ball(i),
                    &mut tau_contact,
                    report,
                ) {
                    scratch.ball_forces[i] += f;
                }
            }

            let mut offset = 0;
            for (w, wall) in self.walls.iter().enumerate() {
                let nodes = &world.deformable_nodes[offset..offset + wall.node_count()];
                let rad = wall.node_radius;
                let (wlo, whi) = wall_boxes[w];
                if (0..3).any(|ax| whi[ax] < lo[ax] || wlo[ax] > hi[ax]) {
                    offset += wall.node_count();
                    continue;
                }
                for (local, node) in nodes.iter().enumerate() {
                    let c = node.position;
                    if (0..3).any(|ax| c[ax] + rad < lo[ax] || c[ax] - rad > hi[ax]) {
                        continue;
                    }
                    if let Some(f) = sphere_contact(
                        link,
                        &c,
                        rad,
                        &node.velocity,
                        Body::Node(offset + local),
                        &mut tau_contact,
                        report,
                    ) {
                        scratch.node_forces[offset + local] += f;
                    }
                }
                offset += wall.node_count();
            }

            if p.ground {
                for end in [a, b] {
                    let depth = r - end.z;
                    if depth <= 0.0 {
                        continue;
                    }
                    let point = Vector3::new(end.x, end.y, end.z - r);
                    let v = kin.point_velocity(link, &point, &qdot);
                    let f = penalty_force(k_c, c_c, depth, -v.z);
                    if f > 0.0 {
                        kin.add_point_force(link, &point, &Vector3::new(0.0, 0.0, f), &mut tau_contact);
                    }
                    report.push(Contact {
                        link,
                        other: Body::Ground,
                        normal: -Vector3::z(),
                        force: f,
                        penetration: depth,
                    });
                }
            }
        }

        // robot
        let rhs = tau + tau_contact - terms.bias;
        let qddot = terms.mass_chol.solve(&rhs);
        let joints = &mut world.joints;
        joints.qdot += qddot * p.dt;
        joints.q += joints.qdot * p.dt;
        for i in 0..DOF {
            let (lo, hi) = (self.model.lower[i], self.model.upper[i]);
            if joints.q[i] < lo || joints.q[i] > hi {
                joints.q[i] = joints.q[i].clamp(lo, hi);
                joints.qdot[i] = 0.0;
                world.joint_limit_hit = true;
            }
        }

        // rigid balls: frictionless contact exerts no torque, so only the linear part moves
        for (i, ball) in world.rigid_obstacles.iter_mut().enumerate() {
            let spec = &self.balls[i];
            let mut force = scratch.ball_forces[i];
            let mut v = ball.linear_velocity();
            if p.ground {
                let depth = spec.radius - ball.pose.translation.z;
                if depth > 0.0 {
                    force.z += penalty_force(k_c, c_c, depth, -v.z);
                }
            }
            v += (force / spec.mass - v * p.ball_drag) * p.dt;
            ball.pose.translation += v * p.dt;
            ball.velocity.fixed_rows_mut::<3>(3).copy_from(&v);
        }

        // walls
        let mut offset = 0;
        for wall in &self.walls {
            let count = wall.node_count();
            let nodes = &mut world.deformable_nodes[offset..offset + count];
            let forces = &mut scratch.node_forces[offset..offset + count];
            let touched = forces.iter().any(|f| *f != Vector3::zeros());
            // At the exact rest shape every spring force is exactly zero.
            if !touched && !p.node_gravity && wall.is_at_rest(nodes) {
                offset += count;
                continue;
            }
            wall.accumulate_spring_forces(nodes, forces);
            let inv_mass = 1.0 / wall.node_mass;
            for (local, node) in nodes.iter_mut().enumerate() {
                if wall.anchored[local] {
                    continue;
                }
                let mut f = forces[local];
                if p.node_gravity {
                    f += self.model.gravity * wall.node_mass;
                }
                if p.ground {
                    let depth = wall.node_radius - node.position.z;
                    if depth > 0.0 {
                        f.z += penalty_force(k_c, c_c, depth, -node.velocity.z);
                    }
                }
                node.velocity += f * (inv_mass * p.dt);
                node.position += node.velocity * p.dt;
            }
            if !touched && !p.node_gravity && wall.is_settled(nodes) {
                wall.reset_to_rest(nodes);
            }
            offset += count;
        }

        world.time += p.dt;
        self.check_finite(world)
    }

    fn check_finite(&self, world: &WorldState) -> Result<(), SimError> {
        let limit = self.params.blowup_limit;
        let bad = |v: f64| !(v.abs() <= limit);
        let time = world.time;
        if world.joints.q.iter().chain(world.joints.qdot.iter()).any(|&v| bad(v)) {
            return Err(SimError::NumericalBlowup { time, what: "joint state" });
        }
        if world.rigid_obstacles.iter().any(|b| b.pose.translation.iter().chain(b.velocity.iter()).any(|&v| bad(v))) {
            return Err(SimError::NumericalBlowup { time, what: "rigid obstacle" });
        }
        if world.deformable_nodes.iter().any(|n| n.position.iter().chain(n.velocity.iter()).any(|&v| bad(v))) {
            return Err(SimError::NumericalBlowup { time, what: "deformable node" });
        }
        Ok(())
    }

    /// Holds `refs` for one control interval, recomputing the control torque every substep.
    /// Returns the largest robot contact force seen during the interval.
    pub fn hold(&self, world: &mut WorldState, law: &ControlLaw, refs: &References) -> Result<f64, SimError> {
        let mut report = ContactReport::default();
        let mut scratch = Scratch::default();
        let mut peak = 0.0f64;
        for _ in 0..self.params.substeps {
            let terms = DynamicsTerms::compute(&self.model, &world.joints);
            let tau = law.torque(&self.model, &terms, &world.joints, refs);
            self.step_in_place(world, &tau, &terms, &mut report, &mut scratch)?;
            peak = peak.max(report.max_force);
        }
        Ok(peak)
    }

    /// Like [`Scene::hold`] but calls `observe` after every substep.
    pub fn hold_observed(
        &self,
        world: &mut WorldState,
        law: &ControlLaw,
        refs: &References,
        mut observe: impl FnMut(&WorldState, &ContactReport),
    ) -> Result<f64, SimError> {
        let mut report = ContactReport::default();
        let mut scratch = Scratch::default();
        let mut peak = 0.0f64;
        for _ in 0..self.params.substeps {
            let terms = DynamicsTerms::compute(&self.model, &world.joints);
            let tau = law.torque(&self.model, &terms, &world.joints, refs);
            self.step_in_place(world, &tau, &terms, &mut report, &mut scratch)?;
            peak = peak.max(report.max_force);
            observe(world, &report);
        }
        Ok(peak)
    }

    /// Executes `actions` one control interval each.
    pub fn rollout(&self, world: &WorldState, law: &ControlLaw, actions: &[Action]) -> Result<RolloutResult, SimError> {
        let mut state = world.clone();
        let mut result = RolloutResult {
            states: Vec::with_capacity(actions.len()),
            max_forces: Vec::with_capacity(actions.len()),
            ee_poses: Vec::with_capacity(actions.len()),
        };
        for action in actions {
            let refs = law.references(&self.model, &state.joints, action);
            let peak = self.hold(&mut state, law, &refs)?;
            result.ee_poses.push(self.model.kinematics(&state.joints.q).ee_pose());
            result.max_forces.push(peak);
            result.states.push(state.clone());
        }
        Ok(result)
    }

    /// Smallest gap between any robot capsule at `q` and any obstacle in `world`
    /// (balls, wall nodes, ground). Negative means penetration.
    pub fn min_clearance(&self, world: &WorldState, q: &JointVector) -> f64 {
        let kin = self.model.kinematics(q);
        let mut best = f64::INFINITY;
        let spheres = world.rigid_obstacles.iter().zip(&self.balls).map(|(b, spec)| (b.position(), spec.radius)).chain(
            self.walls.iter().enumerate().flat_map(|(w, wall)| {
                let offset: usize = self.walls[..w].iter().map(|x| x.node_count()).sum();
                world.deformable_nodes[offset..offset + wall.node_count()]
                    .iter()
                    .map(move |n| (n.position, wall.node_radius))
            }),
        );
        for (center, radius) in spheres {
            for link in 0..DOF {
                let s = closest_on_segment(&kin.seg_a[link], &kin.seg_b[link], &center);
                best = best.min((center - s).norm() - radius - kin.radius[link]);
            }
        }
        if self.params.ground {
            for link in 0..DOF {
                best = best.min(kin.seg_a[link].z.min(kin.seg_b[link].z) - kin.radius[link]);
            }
        }
        best
    }

    pub fn ee_pose(&self, world: &WorldState) -> Pose {
        self.model.kinematics(&world.joints.q).ee_pose()
    }

    /// Kinetic plus potential energy of every body; potential is zero at `z = 0`.
    pub fn total_energy(&self, world: &WorldState) -> f64 {
        let kin = self.model.kinematics(&world.joints.q);
        let qd = world.joints.qdot;
        let mut e = 0.5 * qd.dot(&(kin.mass_matrix() * qd)) + kin.potential_energy(&self.model.gravity);
        for (ball, spec) in world.rigid_obstacles.iter().zip(&self.balls) {
            e += 0.5 * spec.mass * ball.linear_velocity().norm_squared();
        }
        let mut offset = 0;
        for wall in &self.walls {
            let nodes = &world.deformable_nodes[offset..offset + wall.node_count()];
            for n in nodes {
                e += 0.5 * wall.node_mass * n.velocity.norm_squared();
                if self.params.node_gravity {
                    e -= wall.node_mass * self.model.gravity.dot(&n.position);
                }
            }
            for s in &wall.springs {
                let stretch = (nodes[s.j].position - nodes[s.i].position).norm() - s.rest_length;
                e += 0.5 * s.stiffness * stretch * stretch;
            }
            offset += wall.node_count();
        }
        e
    }
}

/// States reached at the end of each planned action.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub states: Vec<WorldState>,
    /// Peak robot contact force within each control interval.
    pub max_forces: Vec<f64>,
    pub ee_poses: Vec<Pose>,
}

/// Central finite-difference gradient of `cost` at `x`, with per-coordinate steps.
/// Coordinates are evaluated in parallel; the result does not depend on scheduling.
pub fn finite_difference_gradient<E, F>(cost: F, x: &[f64], steps: &[f64]) -> Result<Vec<f64>, E>
where
    F: Fn(&[f64]) -> Result<f64, E> + Sync,
    E: Send,
{
    assert_eq!(x.len(), steps.len());
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + steps[i];
            let plus = cost(&probe)?;
            probe[i] = x[i] - steps[i];
            let minus = cost(&probe)?;
            Ok((plus - minus) / (2.0 * steps[i]))
        })
        .collect()
}

/// Row of a trajectory log: one per control interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: f64,
    pub q: [f64; DOF],
    pub ee: [f64; 3],
    pub max_contact_force: f64,
}

pub const TRAJECTORY_HEADER: [&str; 12] =
    ["time", "q0", "q1", "q2", "q3", "q4", "q5", "q6", "ee_x", "ee_y", "ee_z", "max_contact_force"];

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for row in rows {
        let mut rec = Vec::with_capacity(TRAJECTORY_HEADER.len());
        rec.push(crate::report::fmt_num(row.time));
        rec.extend(row.q.iter().map(|&v| crate::report::fmt_num(v)));
        rec.extend(row.ee.iter().map(|&v| crate::report::fmt_num(v)));
        rec.push(crate::report::fmt_num(row.max_contact_force));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> Result<Vec<TrajectoryRow>, csv::Error> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let val = |i: usize| -> Result<f64, csv::Error> {
            rec.get(i).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| {
                csv::Error::from(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("bad trajectory field {i} in {:?}", rec.position()),
                ))
            })
        };
        let mut q = [0.0; DOF];
        for (i, v) in q.iter_mut().enumerate() {
            *v = val(1 + i)?;
        }
        rows.push(TrajectoryRow { time: val(0)?, q, ee: [val(8)?, val(9)?, val(10)?], max_contact_force: val(11)? });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlGains, ControlLaw, ControlMode};
    use crate::spatial::translational_distance;
    use nalgebra::Vector6;

    fn home() -> JointVector {
        JointVector::from_column_slice(&[0.0, 0.5, 0.0, -1.3, 0.0, 1.0, 0.0])
    }

    fn law() -> ControlLaw {
        ControlLaw::new(ControlMode::OperationalPlusNull, ControlGains::default())
    }

    fn free_scene() -> Scene {
        Scene::new(RobotModel::iiwa14(), SimParams::default())
    }

    #[test]
    fn zero_gravity_rest_is_an_equilibrium() {
        let model = RobotModel::iiwa14().with_gravity(Vector3::zeros());
        let scene = Scene::new(model, SimParams::default());
        let mut world = scene.initial_state(home(), &[]);
        for _ in 0..200 {
            world = scene.step(&world, &JointVector::zeros()).unwrap().0;
        }
        assert!((world.joints.q - home()).amax() < 1e-12);
        assert!(world.joints.qdot.amax() < 1e-12);
    }

    #[test]
    fn free_ball_coasts_and_drag_decays_exponentially() {
        let mut params = SimParams { ground: false, ball_drag: 0.0, ..SimParams::default() };
        let mut scene = Scene::new(RobotModel::iiwa14(), params.clone());
        scene.balls.push(BallSpec { radius: 0.1, mass: 0.2 });
        let start = Vector3::new(-2.0, 2.0, 1.0);
        let v0 = Vector3::new(0.3, -0.1, 0.2);
        let mut world = scene.initial_state(home(), &[start]);
        world.rigid_obstacles[0].velocity.fixed_rows_mut::<3>(3).copy_from(&v0);
        let tau = scene.model.kinematics(&home()).gravity_torques(&scene.model.gravity);
        let steps = (1.0 / params.dt).round() as usize;
        let mut w = world.clone();
        for _ in 0..steps {
            w = scene.step(&w, &tau).unwrap().0;
        }
        assert!((w.rigid_obstacles[0].position() - (start + v0)).norm() < 1e-3);

        params.ball_drag = 2.0;
        scene.params = params;
        let mut w = world;
        for _ in 0..steps {
            w = scene.step(&w, &tau).unwrap().0;
        }
        let expected = v0 * (-2.0f64).exp();
        assert!((w.rigid_obstacles[0].linear_velocity() - expected).norm() < 1e-3);
    }

    #[test]
    fn static_penetration_gives_stiffness_times_depth() {
        let mut scene = free_scene();
        scene.balls.push(BallSpec { radius: 0.1, mass: 0.2 });
        let kin = scene.model.kinematics(&home());
        let link = 3;
        let mid = (kin.seg_a[link] + kin.seg_b[link]) * 0.5;
        let axis = (kin.seg_b[link] - kin.seg_a[link]).normalize();
        let normal = axis.cross(&Vector3::y()).normalize();
        let depth = 0.004;
        let center = mid + normal * (kin.radius[link] + 0.1 - depth);
        let world = scene.initial_state(home(), &[center]);
        let (_, report) = scene.step(&world, &JointVector::zeros()).unwrap();
        let k_c = scene.params.contact_stiffness;
        let ball_contacts: Vec<_> = report.contacts.iter().filter(|c| c.other == Body::Ball(0)).collect();
        assert_eq!(ball_contacts.len(), 1);
        assert!((ball_contacts[0].force - k_c * depth).abs() < 1e-9);
        assert!((ball_contacts[0].penetration - depth).abs() < 1e-12);
    }

    #[test]
    fn contact_force_examples() {
        assert_eq!(contact_force(&ContactReport::default()), 0.0);
        let mut report = ContactReport::default();
        for f in [3.2, 7.9] {
            report.push(Contact {
                link: 2,
                other: Body::Ground,
                normal: -Vector3::z(),
                force: f,
                penetration: f / 5000.0,
            });
        }
        assert_eq!(contact_force(&report), 7.9);
        assert_eq!(penalty_force(5000.0, 50.0, 0.001, -1.0), 0.0);
    }

    #[test]
    fn wall_tessellation() {
        let params = WallParams { dims: [1.0, 0.1, 0.2], ..WallParams::default() };
        let wall = build_deformable_wall(Vector3::zeros(), &params, AnchorSpec::BottomLayer).unwrap();
        assert_eq!(wall.node_count(), 11 * 2 * 3);
        assert_eq!(wall.anchored.iter().filter(|&&a| a).count(), 22);
        for s in &wall.springs {
            let d = (wall.rest_positions[s.j] - wall.rest_positions[s.i]).norm();
            assert_eq!(d, s.rest_length);
            assert!(d <= 0.1 * 3f64.sqrt() + 1e-12);
        }
        let rest: Vec<_> = wall.rest_nodes().collect();
        for f in wall.spring_forces(&rest) {
            assert!(f.norm() < 1e-12);
        }
        let bad = WallParams { node_spacing: 0.07, ..params };
        assert!(matches!(
            build_deformable_wall(Vector3::zeros(), &bad, AnchorSpec::BottomLayer),
            Err(SimError::InvalidTessellation { .. })
        ));
    }

    #[test]
    fn single_spring_obeys_hooke() {
        let params = WallParams { dims: [0.1, 0.1, 0.1], ..WallParams::default() };
        let mut wall = build_deformable_wall(Vector3::zeros(), &params, AnchorSpec::None).unwrap();
        // keep the spring between node 0 and its +x neighbour only
        wall.springs.retain(|s| s.i == 0 && s.j == 1);
        assert_eq!(wall.springs.len(), 1);
        let mut nodes: Vec<_> = wall.rest_nodes().collect();
        let x = 0.013;
        nodes[1].position.x += x;
        let f = wall.spring_forces(&nodes);
        assert!((f[0] - Vector3::new(params.stiffness * x, 0.0, 0.0)).norm() < 1e-9);
        assert!((f[1] + f[0]).norm() < 1e-12);
    }

    fn wall_scene() -> Scene {
        let mut scene = free_scene();
        for x in [0.45, 0.6] {
            scene.walls.push(
                build_deformable_wall(Vector3::new(x, -0.5, 0.0), &WallParams::default(), AnchorSpec::BottomLayer)
                    .unwrap(),
            );
        }
        scene
    }

    #[test]
    fn untouched_wall_does_not_drift() {
        let scene = wall_scene();
        let mut world = scene.initial_state(home(), &[]);
        let refs = law().references(&scene.model, &world.joints, &Action::zero());
        for _ in 0..5 {
            scene.hold(&mut world, &law(), &refs).unwrap();
        }
        let rest: Vec<_> = scene.walls.iter().flat_map(|w| w.rest_nodes()).collect();
        assert_eq!(world.deformable_nodes, rest);
    }

    #[test]
    fn anchored_nodes_stay_put_under_load() {
        let mut scene = wall_scene();
        scene.params.ground = false;
        let mut world = scene.initial_state(home(), &[]);
        // shove every upper-layer node sideways
        for (i, n) in world.deformable_nodes.iter_mut().enumerate() {
            if !scene.node_anchored(i) {
                n.velocity = Vector3::new(0.5, 0.2, -0.3);
            }
        }
        let before = world.clone();
        let tau = scene.model.kinematics(&home()).gravity_torques(&scene.model.gravity);
        for _ in 0..200 {
            world = scene.step(&world, &tau).unwrap().0;
        }
        for (i, (a, b)) in before.deformable_nodes.iter().zip(&world.deformable_nodes).enumerate() {
            if scene.node_anchored(i) {
                assert_eq!(a, b);
            } else {
                assert_ne!(a.position, b.position);
            }
        }
    }

    #[test]
    fn free_dynamics_conserve_energy() {
        let params = SimParams { dt: 0.001, ground: false, ..SimParams::default() };
        let scene = Scene::new(RobotModel::iiwa14().with_gravity(Vector3::zeros()), params);
        let mut world = scene.initial_state(home(), &[]);
        world.joints.qdot = JointVector::from_column_slice(&[0.3, -0.2, 0.4, 0.1, -0.3, 0.2, 0.5]);
        let e0 = scene.total_energy(&world);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            world = scene.step(&world, &JointVector::zeros()).unwrap().0;
            worst = worst.max((scene.total_energy(&world) - e0).abs());
        }
        assert!(!world.joint_limit_hit);
        assert!(worst / e0 < 0.01, "drift {worst} of {e0}");
    }

    #[test]
    fn rollout_is_deterministic() {
        let mut scene = wall_scene();
        scene.balls.push(BallSpec { radius: 0.1, mass: 0.2 });
        let world = scene.initial_state(home(), &[Vector3::new(0.4, 0.2, 0.3)]);
        let mut a = Action::zero();
        a.dx = Vector6::new(0.004, -0.003, -0.008, 0.02, 0.0, -0.05);
        a.dq[2] = 0.1;
        let actions = vec![a; 3];
        let r1 = scene.rollout(&world, &law(), &actions).unwrap();
        let r2 = scene.rollout(&world, &law(), &actions).unwrap();
        assert_eq!(r1.states, r2.states);
        assert_eq!(r1.max_forces, r2.max_forces);
    }

    #[test]
    fn zero_action_holds_position() {
        let scene = free_scene();
        let world = scene.initial_state(home(), &[]);
        let start = scene.ee_pose(&world);
        let intervals = (1.0 / scene.params.control_interval()).round() as usize;
        let r = scene.rollout(&world, &law(), &vec![Action::zero(); intervals]).unwrap();
        for pose in &r.ee_poses {
            assert!(translational_distance(pose, &start) < 1e-3);
        }
        assert!(r.max_forces.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn pure_null_reference_keeps_end_effector() {
        let scene = free_scene();
        let world = scene.initial_state(home(), &[]);
        let start = scene.ee_pose(&world);
        // hold the start pose while pulling on joint 3, which is redundant here
        let refs = References {
            x_d: start,
            q_d: home() + JointVector::from_column_slice(&[0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0]),
            torque: JointVector::zeros(),
        };
        let mut w = world.clone();
        let intervals = (1.0 / scene.params.control_interval()).round() as usize;
        for _ in 0..intervals {
            scene.hold(&mut w, &law(), &refs).unwrap();
        }
        assert!((w.joints.q[2] - world.joints.q[2]).abs() > 1e-3, "null space did not move");
        assert!(translational_distance(&scene.ee_pose(&w), &start) < 2e-3);
    }

    #[test]
    fn single_step_reference_is_tracked() {
        let scene = free_scene();
        let world = scene.initial_state(home(), &[]);
        let start = scene.ee_pose(&world);
        let mut a = Action::zero();
        a.dx[0] = 0.01;
        let r = scene.rollout(&world, &law(), &[a]).unwrap();
        let moved = r.ee_poses[0].translation - start.translation;
        assert!((moved.x - 0.01).abs() < 0.002, "moved {moved:?}");
        assert!(moved.yz().norm() < 0.002);
    }

    #[test]
    fn converges_from_offset() {
        let scene = free_scene();
        let world = scene.initial_state(home(), &[]);
        let start = scene.ee_pose(&world);
        let target = Pose::new(start.translation + Vector3::new(0.03, -0.03, 0.025), start.rotation);
        let refs = References { x_d: target, q_d: home(), torque: JointVector::zeros() };
        let mut w = world;
        let intervals = (2.0 / scene.params.control_interval()).round() as usize;
        for _ in 0..intervals {
            scene.hold(&mut w, &law(), &refs).unwrap();
        }
        assert!(translational_distance(&scene.ee_pose(&w), &target) < 0.01);
    }

    #[test]
    fn blowup_is_reported() {
        let mut scene = free_scene();
        scene.balls.push(BallSpec { radius: 0.1, mass: 0.2 });
        let mut world = scene.initial_state(home(), &[Vector3::new(-1.0, -1.0, 1.0)]);
        world.rigid_obstacles[0].velocity[3] = 1e7;
        let err = scene.step(&world, &JointVector::zeros()).unwrap_err();
        assert!(matches!(err, SimError::NumericalBlowup { .. }));
    }

    #[test]
    fn finite_difference_gradient_of_quadratic() {
        let g =
            finite_difference_gradient::<(), _>(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, -1.0], &[1e-4, 1e-4]).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let rows = vec![
            TrajectoryRow { time: 0.0, q: [0.1; DOF], ee: [0.5, 0.0, 0.6], max_contact_force: 0.0 },
            TrajectoryRow { time: 0.2, q: [-0.25; DOF], ee: [0.5, 0.01, 0.59], max_contact_force: 1.25 },
        ];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,q0,q1"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), rows);
    }
}
