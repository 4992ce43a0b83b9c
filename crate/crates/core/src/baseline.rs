//! Collision-free baseline: RRT* in joint space, then tracking without replanning.

use std::io::{Read, Write};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{ControlLaw, ControlMode, References};
use crate::dynamics::{inverse_kinematics, IkOptions, JointVector, RobotModel, DOF};
use crate::environments::Environment;
use crate::error::PlanError;
use crate::planner::{EpisodeLog, EpisodeMetrics, PlannerConfig};
use crate::spatial::{translational_distance, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrtConfig {
    pub max_iters: usize,
    /// Iterations spent improving the path after the first connection.
    pub refine_iters: usize,
    /// Largest extension toward a sample (rad).
    pub steer: f64,
    /// Edge checking resolution (rad).
    pub resolution: f64,
    pub goal_bias: f64,
    /// Scale of the shrinking neighbour radius.
    pub gamma: f64,
    /// Upper bound on the neighbour radius (rad).
    pub max_radius: f64,
    /// Configurations closer than this to an obstacle count as colliding while planning (m).
    pub clearance_margin: f64,
    pub ik_restarts: usize,
    /// Number of distinct goal configurations to collect.
    pub goal_set_size: usize,
    /// Random shortcut attempts on the returned path; zero keeps the raw tree path.
    pub shortcut_iters: usize,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            refine_iters: 2_000,
            steer: 0.2,
            resolution: 0.05,
            goal_bias: 0.1,
            gamma: 4.0,
            max_radius: 1.0,
            clearance_margin: 0.01,
            ik_restarts: 50,
            goal_set_size: 8,
            shortcut_iters: 200,
        }
    }
}

impl RrtConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        if !(self.steer > 0.0 && self.resolution > 0.0 && self.gamma > 0.0 && self.max_radius > 0.0) {
            return Err("steer, resolution, gamma and max_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return Err("goal_bias must lie in [0, 1]".into());
        }
        if self.clearance_margin < 0.0 {
            return Err("clearance_margin must be non-negative".into());
        }
        if self.goal_set_size == 0 {
            return Err("goal_set_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointPath {
    pub waypoints: Vec<JointVector>,
    /// Sum of segment norms (rad).
    pub total_length: f64,
}

impl JointPath {
    pub fn new(waypoints: Vec<JointVector>) -> Self {
        let total_length = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        Self { waypoints, total_length }
    }

    /// Splits every segment so no step exceeds `max_step` (rad).
    pub fn subdivided(&self, max_step: f64) -> Self {
        let mut out = Vec::with_capacity(self.waypoints.len());
        if let Some(first) = self.waypoints.first() {
            out.push(*first);
        }
        for w in self.waypoints.windows(2) {
            let n = ((w[1] - w[0]).norm() / max_step).ceil().max(1.0) as usize;
            for i in 1..=n {
                out.push(w[0].lerp(&w[1], i as f64 / n as f64));
            }
        }
        Self::new(out)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((0..DOF).map(|i| format!("q{i}")))?;
        for q in &self.waypoints {
            w.write_record(q.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(input);
        let mut waypoints = Vec::new();
        for record in r.deserialize() {
            let row: [f64; DOF] = record?;
            waypoints.push(JointVector::from_row_slice(&row));
        }
        Ok(Self::new(waypoints))
    }
}

/// True iff some robot capsule overlaps a ball, a wall node or the ground at `q`
/// with every obstacle in its initial state.
pub fn collision_check(env: &Environment, q: &JointVector) -> bool {
    env.scene.min_clearance(&env.world0, q) < 0.0
}

fn clear(env: &Environment, q: &JointVector, margin: f64) -> bool {
    env.scene.min_clearance(&env.world0, q) >= margin
}

fn edge_clear(env: &Environment, a: &JointVector, b: &JointVector, cfg: &RrtConfig) -> bool {
    let n = ((b - a).norm() / cfg.resolution).ceil() as usize;
    (1..=n).all(|i| clear(env, &a.lerp(b, i as f64 / n as f64), cfg.clearance_margin))
}

/// Distinct collision-free joint configurations placing the tool within `delta` of the goal position.
pub fn goal_set(
    env: &Environment,
    q_start: &JointVector,
    goal: &Pose,
    delta: f64,
    cfg: &RrtConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<JointVector>, PlanError> {
    let model = &env.scene.model;
    let opts = IkOptions { orientation: false, ..IkOptions::default() };
    let mut found_any = false;
    let mut set: Vec<JointVector> = Vec::new();
    for attempt in 0..=cfg.ik_restarts {
        let seed = if attempt == 0 {
            *q_start
        } else {
            JointVector::from_fn(|i, _| rng.random_range(model.lower[i]..=model.upper[i]))
        };
        let Some(q) = inverse_kinematics(model, goal, &seed, &opts) else { continue };
        if translational_distance(&model.kinematics(&q).ee_pose(), goal) > delta {
            continue;
        }
        found_any = true;
        if clear(env, &q, cfg.clearance_margin) && set.iter().all(|g| (g - q).norm() > cfg.resolution) {
            set.push(q);
            if set.len() == cfg.goal_set_size {
                break;
            }
        }
    }
    if !found_any {
        return Err(PlanError::IkFailure);
    }
    Ok(set)
}

struct Tree {
    nodes: Vec<JointVector>,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    cost: Vec<f64>,
    /// Index into the goal set when the node is a goal configuration.
    goal: Vec<Option<usize>>,
}

impl Tree {
    fn nearest(&self, q: &JointVector) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn near(&self, q: &JointVector, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        (0..self.nodes.len()).filter(|&i| (self.nodes[i] - q).norm_squared() <= r2).collect()
    }

    fn best_goal(&self) -> Option<usize> {
        (0..self.nodes.len()).filter(|&i| self.goal[i].is_some()).min_by(|&a, &b| self.cost[a].total_cmp(&self.cost[b]))
    }

    /// Pushes a cost change at `root` down to every descendant.
    fn propagate(&mut self, root: usize) {
        let mut stack = vec![root];
        while let Some(p) = stack.pop() {
            for k in 0..self.children[p].len() {
                let c = self.children[p][k];
                self.cost[c] = self.cost[p] + (self.nodes[c] - self.nodes[p]).norm();
                stack.push(c);
            }
        }
    }

    fn reparent(&mut self, node: usize, parent: usize) {
        let old = self.parent[node];
        self.children[old].retain(|&c| c != node);
        self.children[parent].push(node);
        self.parent[node] = parent;
    }

    fn path_to(&self, mut i: usize) -> Vec<JointVector> {
        let mut out = vec![self.nodes[i]];
        while self.parent[i] != i {
            i = self.parent[i];
            out.push(self.nodes[i]);
        }
        out.reverse();
        out
    }
}

/// RRT* from `q_start` to the IK goal set of `goal`. Runs until `max_iters`
/// or `refine_iters` past the first connection, whichever comes first.
pub fn rrt_star_plan(
    env: &Environment,
    q_start: &JointVector,
    goal: &Pose,
    delta: f64,
    cfg: &RrtConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointPath, PlanError> {
    let model: &RobotModel = &env.scene.model;
    if !clear(env, q_start, cfg.clearance_margin) {
        return Err(PlanError::StartInCollision);
    }
    let goals = goal_set(env, q_start, goal, delta, cfg, rng)?;
    if goals.is_empty() {
        return Err(PlanError::Failure("every goal configuration is in collision".into()));
    }
    let mut tree =
        Tree { nodes: vec![*q_start], parent: vec![0], children: vec![Vec::new()], cost: vec![0.0], goal: vec![None] };
    let mut connected_at = None;
    let dim = DOF as f64;
    for iter in 0..cfg.max_iters {
        if connected_at.is_some_and(|c: usize| iter >= c + cfg.refine_iters) {
            break;
        }
        let (sample, goal_idx) = if rng.random::<f64>() < cfg.goal_bias {
            let g = rng.random_range(0..goals.len());
            (goals[g], Some(g))
        } else {
            (JointVector::from_fn(|i, _| rng.random_range(model.lower[i]..=model.upper[i])), None)
        };
        let nearest = tree.nearest(&sample);
        let offset = sample - tree.nodes[nearest];
        let dist = offset.norm();
        if dist < 1e-12 {
            continue;
        }
        let (new, goal_idx) = if dist <= cfg.steer {
            (sample, goal_idx)
        } else {
            (tree.nodes[nearest] + offset * (cfg.steer / dist), None)
        };
        if !edge_clear(env, &tree.nodes[nearest], &new, cfg) {
            continue;
        }
        if goal_idx.is_some_and(|g| tree.goal.contains(&Some(g))) {
            continue;
        }
        let n = tree.nodes.len() as f64 + 1.0;
        let radius = (cfg.gamma * (n.ln() / n).powf(1.0 / dim)).min(cfg.max_radius).max(cfg.steer);
        let mut near = tree.near(&new, radius);
        // cheapest collision-free parent, checking candidates in cost order
        near.sort_by(|&a, &b| {
            let ca = tree.cost[a] + (tree.nodes[a] - new).norm();
            let cb = tree.cost[b] + (tree.nodes[b] - new).norm();
            ca.total_cmp(&cb).then(a.cmp(&b))
        });
        let mut parent = nearest;
        for &c in &near {
            let via = tree.cost[c] + (tree.nodes[c] - new).norm();
            if via >= tree.cost[nearest] + (tree.nodes[nearest] - new).norm() {
                break;
            }
            if edge_clear(env, &tree.nodes[c], &new, cfg) {
                parent = c;
                break;
            }
        }
        let id = tree.nodes.len();
        tree.nodes.push(new);
        tree.cost.push(tree.cost[parent] + (tree.nodes[parent] - new).norm());
        tree.parent.push(parent);
        tree.children.push(Vec::new());
        tree.children[parent].push(id);
        tree.goal.push(goal_idx);
        for &c in &near {
            if c == parent {
                continue;
            }
            let via = tree.cost[id] + (tree.nodes[c] - new).norm();
            if via + 1e-12 < tree.cost[c] && edge_clear(env, &new, &tree.nodes[c], cfg) {
                tree.reparent(c, id);
                tree.cost[c] = via;
                tree.propagate(c);
            }
        }
        if goal_idx.is_some() && connected_at.is_none() {
            connected_at = Some(iter);
        }
    }
    match tree.best_goal() {
        Some(g) => Ok(shortcut(env, tree.path_to(g), cfg, rng).subdivided(cfg.steer)),
        None => Err(PlanError::Failure(format!("no connection after {} iterations", cfg.max_iters))),
    }
}

/// Replaces stretches of the path with straight segments wherever those are collision-free.
pub fn shortcut(
    env: &Environment,
    mut waypoints: Vec<JointVector>,
    cfg: &RrtConfig,
    rng: &mut ChaCha8Rng,
) -> JointPath {
    for _ in 0..cfg.shortcut_iters {
        if waypoints.len() < 3 {
            break;
        }
        let i = rng.random_range(0..waypoints.len() - 2);
        let j = rng.random_range(i + 2..waypoints.len());
        if edge_clear(env, &waypoints[i], &waypoints[j], cfg) {
            waypoints.drain(i + 1..j);
        }
    }
    JointPath::new(waypoints)
}

/// Settings for following a joint path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Largest joint step between consecutive tracked waypoints (rad).
    pub max_joint_step: f64,
    /// Largest tool displacement between consecutive tracked waypoints (m).
    pub max_ee_step: f64,
    /// Joint error below which the next waypoint becomes the reference (rad).
    pub advance_tol: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { max_joint_step: 0.05, max_ee_step: 0.01, advance_tol: 0.05 }
    }
}

/// Subdivides `path` until both the joint step and the tool step are within bounds.
pub fn densify(model: &RobotModel, path: &JointPath, cfg: &TrackingConfig) -> JointPath {
    let mut out = Vec::new();
    if let Some(first) = path.waypoints.first() {
        out.push(*first);
    }
    for w in path.waypoints.windows(2) {
        let ee = |q: &JointVector| model.kinematics(q).ee_pos;
        let mut n = ((w[1] - w[0]).norm() / cfg.max_joint_step).ceil().max(1.0) as usize;
        loop {
            let pts: Vec<JointVector> = (0..=n).map(|i| w[0].lerp(&w[1], i as f64 / n as f64)).collect();
            let ok = pts.windows(2).all(|p| (ee(&p[1]) - ee(&p[0])).norm() <= cfg.max_ee_step);
            if ok {
                out.extend_from_slice(&pts[1..]);
                break;
            }
            n *= 2;
        }
    }
    JointPath::new(out)
}

/// Tracks `path` with the impedance controller. The operational target is the
/// tool pose at the current waypoint and the posture target is the waypoint.
pub fn track_path(
    env: &Environment,
    path: &JointPath,
    planner: &PlannerConfig,
    tracking: &TrackingConfig,
) -> EpisodeMetrics {
    let started = Instant::now();
    let scene = &env.scene;
    let law = ControlLaw::new(ControlMode::OperationalPlusNull, planner.gains.clone());
    let path = densify(&scene.model, path, tracking);
    let mut world = env.world0.clone();
    let mut log = EpisodeLog::new(scene, &world);
    let mut index = 0;
    loop {
        let distance = translational_distance(&scene.ee_pose(&world), &env.goal);
        if distance <= planner.delta {
            return log.finish(true, world.time, distance, Vec::new(), None, started);
        }
        if world.time >= planner.max_episode_time - 1e-9 || path.waypoints.is_empty() {
            return log.finish(false, planner.max_episode_time, distance, Vec::new(), Some("timeout".into()), started);
        }
        if index + 1 < path.waypoints.len() && (world.joints.q - path.waypoints[index]).norm() < tracking.advance_tol {
            index += 1;
        }
        let wp = path.waypoints[index];
        let refs = References { x_d: scene.model.kinematics(&wp).ee_pose(), q_d: wp, torque: JointVector::zeros() };
        if let Err(e) = log.execute(scene, &mut world, &law, &refs) {
            return log.finish(false, planner.max_episode_time, distance, Vec::new(), Some(e.to_string()), started);
        }
    }
}

/// Plans with RRT* and tracks the result. Planning failure is an unsuccessful episode.
pub fn run_baseline(
    env: &Environment,
    planner: &PlannerConfig,
    rrt: &RrtConfig,
    tracking: &TrackingConfig,
    rng: &mut ChaCha8Rng,
) -> (Result<JointPath, PlanError>, EpisodeMetrics) {
    let started = Instant::now();
    match rrt_star_plan(env, &env.world0.joints.q, &env.goal, planner.delta, rrt, rng) {
        Ok(path) => {
            let mut m = track_path(env, &path, planner, tracking);
            m.wall_time = started.elapsed().as_secs_f64();
            (Ok(path), m)
        }
        Err(e) => {
            let log = EpisodeLog::new(&env.scene, &env.world0);
            let distance = translational_distance(&env.scene.ee_pose(&env.world0), &env.goal);
            let m = log.finish(false, planner.max_episode_time, distance, Vec::new(), Some(e.to_string()), started);
            (Err(e), m)
        }
    }
}
