//! Receding-horizon planning over operational and null-space references.

use std::time::Instant;

use nalgebra::{Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlGains, ControlLaw, ControlMode};
use crate::dynamics::{JointVector, DOF};
use crate::environments::Environment;
use crate::error::SolverError;
use crate::sim::{Scene, TrajectoryRow, WorldState};
use crate::solver::{optimize, BoundBlock, Bounds, Solution, SolverConfig};
use crate::spatial::{translational_distance, Pose};

/// One planned decision held for a control interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Operational step `[linear (m); angular (rad)]`.
    pub dx: Vector6<f64>,
    /// Null-space posture offset (rad).
    pub dq: JointVector,
    /// Joint torque on top of gravity compensation, used only by direct torque planning.
    pub torque: JointVector,
}

impl Action {
    pub fn zero() -> Self {
        Self { dx: Vector6::zeros(), dq: JointVector::zeros(), torque: JointVector::zeros() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// Weight on distance to the goal.
    pub lambda1: f64,
    /// Weight on distance travelled from the horizon's start state.
    pub lambda2: f64,
    /// Weight on contact force above `epsilon`.
    pub lambda3: f64,
    /// Contact force bound (N).
    pub epsilon: f64,
    /// Success radius (m).
    pub delta: f64,
    pub max_episode_time: f64,
    /// Norm bound on the translational part of `dx` (m).
    pub gamma_lin: f64,
    /// Norm bound on the rotational part of `dx` (rad).
    pub gamma_rot: f64,
    /// Per-joint bound on `dq` (rad).
    pub gamma_q: f64,
    /// Per-joint bound on planned torques in direct torque mode (N·m).
    pub torque_bound: f64,
    /// Finite-difference step as a fraction of each coordinate's bound.
    pub fd_scale: f64,
    pub warm_start: bool,
    pub gains: ControlGains,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 5.0,
            epsilon: 10.0,
            delta: 0.01,
            max_episode_time: 60.0,
            gamma_lin: 0.01,
            gamma_rot: 0.2,
            gamma_q: 0.2,
            torque_bound: 10.0,
            fd_scale: 1e-4,
            warm_start: true,
            gains: ControlGains::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|&l| !(l > 0.0)) {
            return Err("cost weights must be positive".into());
        }
        let positive = [
            self.epsilon,
            self.delta,
            self.max_episode_time,
            self.gamma_lin,
            self.gamma_rot,
            self.gamma_q,
            self.torque_bound,
            self.fd_scale,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) {
            return Err("force bound, radius, time limit, action bounds and fd_scale must be positive".into());
        }
        self.gains.validate()
    }

    /// Decision variables per action in `mode`.
    pub fn action_dim(&self, mode: ControlMode) -> usize {
        match mode {
            ControlMode::OperationalPlusNull => 6 + DOF,
            ControlMode::ReferencePosture => 6,
            ControlMode::DirectTorque => DOF,
        }
    }

    pub fn bounds(&self, mode: ControlMode) -> Bounds {
        let mut blocks = Vec::new();
        for _ in 0..self.horizon {
            match mode {
                ControlMode::OperationalPlusNull | ControlMode::ReferencePosture => {
                    blocks.push(BoundBlock::Ball { len: 3, radius: self.gamma_lin });
                    blocks.push(BoundBlock::Ball { len: 3, radius: self.gamma_rot });
                    if mode == ControlMode::OperationalPlusNull {
                        blocks.push(BoundBlock::Box { len: DOF, half_width: self.gamma_q });
                    }
                }
                ControlMode::DirectTorque => blocks.push(BoundBlock::Box { len: DOF, half_width: self.torque_bound }),
            }
        }
        Bounds::new(blocks)
    }

    /// Per-coordinate finite-difference steps.
    pub fn fd_steps(&self, mode: ControlMode) -> Vec<f64> {
        let per_action: Vec<f64> = match mode {
            ControlMode::OperationalPlusNull | ControlMode::ReferencePosture => {
                let mut v = vec![self.gamma_lin; 3];
                v.extend([self.gamma_rot; 3]);
                if mode == ControlMode::OperationalPlusNull {
                    v.extend([self.gamma_q; DOF]);
                }
                v
            }
            ControlMode::DirectTorque => vec![self.torque_bound; DOF],
        };
        (0..self.horizon).flat_map(|_| per_action.iter().map(|g| g * self.fd_scale)).collect()
    }

    pub fn decode(&self, x: &[f64], mode: ControlMode) -> Vec<Action> {
        x.chunks(self.action_dim(mode))
            .map(|c| {
                let mut a = Action::zero();
                match mode {
                    ControlMode::OperationalPlusNull => {
                        a.dx = Vector6::from_column_slice(&c[..6]);
                        a.dq = JointVector::from_column_slice(&c[6..]);
                    }
                    ControlMode::ReferencePosture => a.dx = Vector6::from_column_slice(c),
                    ControlMode::DirectTorque => a.torque = JointVector::from_column_slice(c),
                }
                a
            })
            .collect()
    }

    pub fn encode(&self, actions: &[Action], mode: ControlMode) -> Vec<f64> {
        let mut x = Vec::with_capacity(actions.len() * self.action_dim(mode));
        for a in actions {
            match mode {
                ControlMode::OperationalPlusNull => {
                    x.extend(a.dx.iter());
                    x.extend(a.dq.iter());
                }
                ControlMode::ReferencePosture => x.extend(a.dx.iter()),
                ControlMode::DirectTorque => x.extend(a.torque.iter()),
            }
        }
        x
    }
}

/// `λ₁ d(ee', goal) − λ₂ d(ee', ee_k) + λ₃ max(0, f − ε)`.
pub fn stage_cost_from_poses(ee_next: &Pose, ee_start: &Pose, goal: &Pose, max_force: f64, cfg: &PlannerConfig) -> f64 {
    cfg.lambda1 * translational_distance(ee_next, goal) - cfg.lambda2 * translational_distance(ee_next, ee_start)
        + cfg.lambda3 * (max_force - cfg.epsilon).max(0.0)
}

pub fn stage_cost(
    scene: &Scene,
    s_next: &WorldState,
    s_k: &WorldState,
    goal: &Pose,
    max_force: f64,
    cfg: &PlannerConfig,
) -> f64 {
    stage_cost_from_poses(&scene.ee_pose(s_next), &scene.ee_pose(s_k), goal, max_force, cfg)
}

/// The rollout objective seen by the solver at one planning step.
pub struct RolloutObjective<'a> {
    pub scene: &'a Scene,
    pub law: ControlLaw,
    pub start: &'a WorldState,
    pub start_ee: Pose,
    pub goal: Pose,
    pub cfg: &'a PlannerConfig,
}

impl<'a> RolloutObjective<'a> {
    pub fn new(scene: &'a Scene, mode: ControlMode, start: &'a WorldState, goal: Pose, cfg: &'a PlannerConfig) -> Self {
        Self { scene, law: ControlLaw::new(mode, cfg.gains.clone()), start, start_ee: scene.ee_pose(start), goal, cfg }
    }

    fn mode(&self) -> ControlMode {
        self.law.mode
    }

    /// Cost of the actions from index `first` on, starting at `state`.
    fn tail_cost(&self, state: &WorldState, actions: &[Action]) -> Result<f64, SolverError> {
        let mut s = state.clone();
        let mut total = 0.0;
        for action in actions {
            let refs = self.law.references(&self.scene.model, &s.joints, action);
            let force = self.scene.hold(&mut s, &self.law, &refs)?;
            total += stage_cost_from_poses(&self.scene.ee_pose(&s), &self.start_ee, &self.goal, force, self.cfg);
        }
        Ok(total)
    }

    pub fn cost(&self, x: &[f64]) -> Result<f64, SolverError> {
        let actions = self.cfg.decode(x, self.mode());
        self.tail_cost(self.start, &actions)
    }

    /// Central differences with steps `fd_scale · γ`. Stages before the
    /// perturbed action are shared, so each probe only re-simulates the tail.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SolverError> {
        let mode = self.mode();
        let dim = self.cfg.action_dim(mode);
        let actions = self.cfg.decode(x, mode);
        let mut prefixes = Vec::with_capacity(actions.len());
        let mut s = self.start.clone();
        for action in &actions {
            prefixes.push(s.clone());
            let refs = self.law.references(&self.scene.model, &s.joints, action);
            self.scene.hold(&mut s, &self.law, &refs)?;
        }
        let steps = self.cfg.fd_steps(mode);
        (0..x.len())
            .into_par_iter()
            .map(|i| {
                let k = i / dim;
                let mut probe = x.to_vec();
                probe[i] = x[i] + steps[i];
                let plus = self.tail_cost(&prefixes[k], &self.cfg.decode(&probe, mode)[k..])?;
                probe[i] = x[i] - steps[i];
                let minus = self.tail_cost(&prefixes[k], &self.cfg.decode(&probe, mode)[k..])?;
                Ok((plus - minus) / (2.0 * steps[i]))
            })
            .collect()
    }
}

/// Previous solution moved one action earlier, zero-padded at the end.
pub fn shift_warm_start(previous: &[f64], action_dim: usize) -> Vec<f64> {
    let mut next = previous.get(action_dim..).unwrap_or(&[]).to_vec();
    next.resize(previous.len(), 0.0);
    next
}

/// Outcome of one receding-horizon step.
#[derive(Clone, Debug)]
pub struct PlanStep {
    pub actions: Vec<Action>,
    pub decision: Vec<f64>,
    pub initial_mean: Vec<f64>,
    pub solution: Solution,
}

/// Optimizes `H` actions from `world` toward `goal`, starting the search at `warm`.
pub fn plan_step(
    scene: &Scene,
    world: &WorldState,
    goal: &Pose,
    mode: ControlMode,
    cfg: &PlannerConfig,
    solver_cfg: &SolverConfig,
    warm: &[f64],
    seed: u64,
) -> Result<PlanStep, SolverError> {
    let objective = RolloutObjective::new(scene, mode, world, *goal, cfg);
    let bounds = cfg.bounds(mode);
    let cost = |x: &[f64]| objective.cost(x);
    let grad = |x: &[f64]| objective.gradient(x);
    let solution = optimize(&cost, &grad, &bounds, warm, solver_cfg, seed)?;
    Ok(PlanStep {
        actions: cfg.decode(&solution.best, mode),
        decision: solution.best.clone(),
        initial_mean: warm.to_vec(),
        solution,
    })
}

/// Per-episode record in the units of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    /// Seconds of simulated time until success, or the time limit on failure.
    pub completion_time: f64,
    pub max_contact_force: f64,
    pub final_distance: f64,
    /// One row per control interval, starting at `t = 0`.
    pub trajectory: Vec<TrajectoryRow>,
    /// `(time, largest robot contact force)` for every physics step.
    pub force_profile: Vec<(f64, f64)>,
    /// Solver cost history of every plan step.
    pub cost_histories: Vec<Vec<f64>>,
    /// Set when the episode ended early; not an error of the runner.
    pub failure: Option<String>,
    /// Wall-clock seconds spent; not part of any reproducible output.
    #[serde(skip)]
    pub wall_time: f64,
}

impl EpisodeMetrics {
    pub fn ee_path(&self) -> Vec<Vector3<f64>> {
        self.trajectory.iter().map(|r| Vector3::from(r.ee)).collect()
    }
}

/// Records the executed trajectory and forces while an episode runs.
pub(crate) struct EpisodeLog {
    rows: Vec<TrajectoryRow>,
    profile: Vec<(f64, f64)>,
    max_force: f64,
}

impl EpisodeLog {
    pub(crate) fn new(scene: &Scene, world: &WorldState) -> Self {
        let mut log = Self { rows: Vec::new(), profile: Vec::new(), max_force: 0.0 };
        log.row(scene, world, 0.0);
        log
    }

    pub(crate) fn row(&mut self, scene: &Scene, world: &WorldState, interval_force: f64) {
        let ee = scene.ee_pose(world).translation;
        let mut q = [0.0; DOF];
        q.copy_from_slice(world.joints.q.as_slice());
        self.rows.push(TrajectoryRow { time: world.time, q, ee: ee.into(), max_contact_force: interval_force });
    }

    /// Holds `refs` for one interval, logging every substep.
    pub(crate) fn execute(
        &mut self,
        scene: &Scene,
        world: &mut WorldState,
        law: &ControlLaw,
        refs: &crate::control::References,
    ) -> Result<f64, crate::error::SimError> {
        let profile = &mut self.profile;
        let peak = scene.hold_observed(world, law, refs, |w, report| profile.push((w.time, report.max_force)))?;
        self.max_force = self.max_force.max(peak);
        self.row(scene, world, peak);
        Ok(peak)
    }

    pub(crate) fn finish(
        self,
        success: bool,
        completion_time: f64,
        final_distance: f64,
        cost_histories: Vec<Vec<f64>>,
        failure: Option<String>,
        started: Instant,
    ) -> EpisodeMetrics {
        EpisodeMetrics {
            success,
            completion_time,
            max_contact_force: self.max_force,
            final_distance,
            trajectory: self.rows,
            force_profile: self.profile,
            cost_histories,
            failure,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

/// Seed of the solver at plan step `step` of an episode seeded with `seed`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Plan, execute the first action for one control interval, repeat until the
/// end-effector is within `delta` of the goal or time runs out.
pub fn run_episode(
    env: &Environment,
    cfg: &PlannerConfig,
    solver_cfg: &SolverConfig,
    mode: ControlMode,
    seed: u64,
) -> EpisodeMetrics {
    let started = Instant::now();
    let scene = &env.scene;
    let law = ControlLaw::new(mode, cfg.gains.clone());
    let mut world = env.world0.clone();
    let mut log = EpisodeLog::new(scene, &world);
    let mut histories = Vec::new();
    let dim = cfg.action_dim(mode);
    let mut warm = vec![0.0; dim * cfg.horizon];
    let mut step = 0;
    loop {
        let distance = translational_distance(&scene.ee_pose(&world), &env.goal);
        if distance <= cfg.delta {
            return log.finish(true, world.time, distance, histories, None, started);
        }
        if world.time >= cfg.max_episode_time - 1e-9 {
            return log.finish(false, cfg.max_episode_time, distance, histories, Some("timeout".into()), started);
        }
        let plan = match plan_step(scene, &world, &env.goal, mode, cfg, solver_cfg, &warm, step_seed(seed, step)) {
            Ok(p) => p,
            Err(e) => {
                return log.finish(false, cfg.max_episode_time, distance, histories, Some(e.to_string()), started)
            }
        };
        histories.push(plan.solution.cost_history.clone());
        let refs = law.references(&scene.model, &world.joints, &plan.actions[0]);
        if let Err(e) = log.execute(scene, &mut world, &law, &refs) {
            return log.finish(false, cfg.max_episode_time, distance, histories, Some(e.to_string()), started);
        }
        warm = if cfg.warm_start { shift_warm_start(&plan.decision, dim) } else { vec![0.0; dim * cfg.horizon] };
        step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{make_free_space, EnvConfig};
    use crate::sim::SimParams;

    #[test]
    fn stage_cost_examples() {
        let cfg = PlannerConfig::default();
        let goal = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let here = Pose::identity();
        assert_eq!(stage_cost_from_poses(&goal, &goal, &goal, 0.0, &cfg), 0.0);
        let next = Pose::from_translation(Vector3::new(0.0, 0.0, 0.0));
        let start = Pose::from_translation(Vector3::new(0.0, 0.1, 0.0));
        assert!((stage_cost_from_poses(&next, &start, &goal, 0.0, &cfg) - 0.48).abs() < 1e-12);
        let base = stage_cost_from_poses(&here, &here, &goal, 0.0, &cfg);
        assert!((stage_cost_from_poses(&here, &here, &goal, 12.0, &cfg) - base - 10.0).abs() < 1e-12);
        // below the bound, contact is neither rewarded nor penalized
        assert_eq!(stage_cost_from_poses(&here, &here, &goal, 9.0, &cfg), base);
    }

    #[test]
    fn stage_cost_is_monotone() {
        let cfg = PlannerConfig::default();
        let goal = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let start = Pose::identity();
        let near = Pose::from_translation(Vector3::new(0.0, 0.3, 0.0));
        let at = |p: &Pose, f| stage_cost_from_poses(p, &start, &goal, f, &cfg);
        // same distance from start, farther from goal
        let a = Pose::from_translation(Vector3::new(0.3, 0.0, 0.0));
        let b = Pose::from_translation(Vector3::new(-0.3, 0.0, 0.0));
        assert!(at(&b, 0.0) > at(&a, 0.0));
        assert!(at(&near, 15.0) > at(&near, 11.0));
    }

    #[test]
    fn encoding_round_trips_and_bounds_have_the_right_shape() {
        let cfg = PlannerConfig::default();
        for mode in [ControlMode::OperationalPlusNull, ControlMode::ReferencePosture, ControlMode::DirectTorque] {
            let dim = cfg.action_dim(mode) * cfg.horizon;
            let x: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin() * 0.005).collect();
            let back = cfg.encode(&cfg.decode(&x, mode), mode);
            assert_eq!(back, x);
            assert_eq!(cfg.bounds(mode).dim(), dim);
            assert_eq!(cfg.fd_steps(mode).len(), dim);
        }
    }

    #[test]
    fn warm_start_shifts_left_with_zero_padding() {
        let prev: Vec<f64> = (1..=6).map(f64::from).collect();
        assert_eq!(shift_warm_start(&prev, 2), vec![3.0, 4.0, 5.0, 6.0, 0.0, 0.0]);
    }

    fn free_env() -> Environment {
        make_free_space(&EnvConfig::default(), 0).unwrap()
    }

    #[test]
    fn prefix_cached_gradient_matches_plain_differences() {
        let env = free_env();
        let cfg = PlannerConfig::default();
        let obj = RolloutObjective::new(&env.scene, ControlMode::OperationalPlusNull, &env.world0, env.goal, &cfg);
        let x: Vec<f64> = (0..39).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.0012).collect();
        let g = obj.gradient(&x).unwrap();
        let steps = cfg.fd_steps(ControlMode::OperationalPlusNull);
        let plain = crate::sim::finite_difference_gradient(|p| obj.cost(p), &x, &steps).unwrap();
        for (a, b) in g.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn first_action_heads_toward_the_goal() {
        let mut env = free_env();
        let start = env.scene.ee_pose(&env.world0);
        env.goal = Pose::new(start.translation + Vector3::new(0.3, 0.0, 0.0), start.rotation);
        let cfg = PlannerConfig::default();
        let solver = SolverConfig::desk();
        let warm = vec![0.0; 39];
        for seed in 0..3 {
            let plan = plan_step(
                &env.scene,
                &env.world0,
                &env.goal,
                ControlMode::OperationalPlusNull,
                &cfg,
                &solver,
                &warm,
                seed,
            )
            .unwrap();
            let lin = plan.actions[0].dx.fixed_rows::<3>(0).into_owned();
            assert!(lin.x > 0.5 * lin.norm(), "seed {seed}: {lin:?}");
            assert!(cfg.bounds(ControlMode::OperationalPlusNull).contains(&plan.decision));
        }
    }

    #[test]
    fn goal_at_start_is_immediate_success() {
        let mut env = free_env();
        env.goal = env.scene.ee_pose(&env.world0);
        let m =
            run_episode(&env, &PlannerConfig::default(), &SolverConfig::desk(), ControlMode::OperationalPlusNull, 0);
        assert!(m.success);
        assert_eq!(m.completion_time, 0.0);
        assert_eq!(m.trajectory.len(), 1);
    }

    #[test]
    fn timeout_is_a_failure_at_the_time_limit() {
        let mut env = free_env();
        let start = env.scene.ee_pose(&env.world0);
        env.goal = Pose::new(start.translation + Vector3::new(0.0, 0.2, 0.0), start.rotation);
        let cfg = PlannerConfig { max_episode_time: 0.4, ..PlannerConfig::default() };
        let solver = SolverConfig { max_step: 2, ..SolverConfig::desk() };
        let m = run_episode(&env, &cfg, &solver, ControlMode::OperationalPlusNull, 1);
        assert!(!m.success);
        assert_eq!(m.completion_time, 0.4);
        assert_eq!(m.trajectory.len(), 3);
        assert_eq!(m.cost_histories.len(), 2);
        let SimParams { substeps, .. } = env.scene.params;
        assert_eq!(m.force_profile.len(), 2 * substeps);
    }
}
