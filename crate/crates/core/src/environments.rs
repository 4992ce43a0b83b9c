//! Benchmark worlds: free space, a ball blocking the direct sweep, and two
//! deformable walls in front of the target region.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{inverse_kinematics, IkOptions, JointVector, ModelFile, RobotModel, DOF};
use crate::error::{EnvError, ModelError};
use crate::sim::{build_deformable_wall, AnchorSpec, BallSpec, Scene, SimParams, WallParams, WorldState};
use crate::spatial::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    FreeSpace,
    Ball,
    Wall,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::FreeSpace => "free_space",
            EnvKind::Ball => "ball",
            EnvKind::Wall => "wall",
        }
    }
}

/// Axis-aligned box of admissible target positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self { lo: [0.2, -0.3, 0.0], hi: [0.6, 0.3, 0.5] }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<(), String> {
        if (0..3).all(|i| self.lo[i] < self.hi[i]) {
            Ok(())
        } else {
            Err("workspace lo must be below hi on every axis".into())
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| rng.random_range(self.lo[i]..=self.hi[i]))
    }
}

/// Tool pointing straight down.
pub fn canonical_orientation() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI)
}

/// Elbow-up posture with the end-effector near (0.5, 0, 0.6), pointing down.
pub const HOME: [f64; DOF] = [0.0, 0.24, 0.0, -1.28, 0.0, 1.62, 0.0];

/// Tunable construction parameters shared by every environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub sim: SimParams,
    pub home: [f64; DOF],
    pub workspace: Workspace,
    /// Minimum gap between the robot at a goal configuration and any obstacle.
    pub goal_clearance: f64,
    /// Minimum start-to-goal distance for sampled targets.
    pub min_reach: f64,
    pub ik_restarts: usize,
    pub sample_tries: usize,
    pub ball_radius: f64,
    pub ball_mass: f64,
    /// How deep the ball cuts into the link it is placed against.
    pub ball_overlap: f64,
    /// Total ball placements tried before giving up.
    pub placement_tries: usize,
    pub placements_per_target: usize,
    /// Minimum start-to-goal distance in the ball scenario; short sweeps
    /// barely move the middle links.
    pub ball_min_reach: f64,
    pub wall: WallParams,
    /// Near faces of the two walls along x.
    pub wall_faces: [f64; 2],
    /// Lower y edge of both walls.
    pub wall_y_min: f64,
    /// Target region used by the wall scenario.
    pub wall_goal: Workspace,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimParams::default(),
            home: HOME,
            workspace: Workspace::default(),
            goal_clearance: 0.02,
            min_reach: 0.15,
            ik_restarts: 20,
            sample_tries: 100,
            ball_radius: 0.1,
            ball_mass: 0.2,
            ball_overlap: 0.03,
            placement_tries: 100,
            placements_per_target: 20,
            ball_min_reach: 0.4,
            wall: WallParams::default(),
            wall_faces: [0.45, 0.60],
            wall_y_min: -0.5,
            wall_goal: Workspace { lo: [0.565, -0.15, 0.14], hi: [0.585, 0.15, 0.18] },
        }
    }
}

impl EnvConfig {
    pub fn home(&self) -> JointVector {
        JointVector::from(self.home)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.workspace.validate()?;
        self.wall_goal.validate()?;
        let sim = &self.sim;
        if !(sim.dt > 0.0
            && sim.substeps > 0
            && sim.contact_stiffness > 0.0
            && sim.contact_damping >= 0.0
            && sim.ball_drag >= 0.0)
        {
            return Err(
                "sim: dt, substeps and contact stiffness must be positive, damping and drag non-negative".into()
            );
        }
        if !(self.ball_radius > 0.0 && self.ball_mass > 0.0) {
            return Err("ball radius and mass must be positive".into());
        }
        if self.sample_tries == 0 || self.placement_tries == 0 || self.placements_per_target == 0 {
            return Err("sampling budgets must be at least 1".into());
        }
        let w = &self.wall;
        if !(w.node_spacing > 0.0 && w.stiffness > 0.0 && w.node_mass > 0.0 && w.node_radius > 0.0 && w.damping >= 0.0)
        {
            return Err("wall parameters must be positive".into());
        }
        Ok(())
    }
}

/// A fully built benchmark world.
#[derive(Clone, Debug)]
pub struct Environment {
    pub kind: EnvKind,
    pub seed: u64,
    pub scene: Scene,
    pub world0: WorldState,
    pub goal: Pose,
}

/// Serializable description from which an [`Environment`] is rebuilt exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub seed: u64,
    pub model: ModelFile,
    pub sim: SimParams,
    pub q0: [f64; DOF],
    pub goal_position: [f64; 3],
    /// `[w, x, y, z]`.
    pub goal_orientation: [f64; 4],
    #[serde(default)]
    pub balls: Vec<BallPlacement>,
    #[serde(default)]
    pub walls: Vec<WallPlacement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallPlacement {
    pub position: [f64; 3],
    pub radius: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallPlacement {
    /// Minimum corner.
    pub origin: [f64; 3],
    pub params: WallParams,
    pub anchors: AnchorSpec,
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<Environment, crate::Error> {
        let model = RobotModel::from_spec(self.model.clone())?;
        let mut scene = Scene::new(model, self.sim.clone());
        for b in &self.balls {
            scene.balls.push(BallSpec { radius: b.radius, mass: b.mass });
        }
        for w in &self.walls {
            scene.walls.push(build_deformable_wall(Vector3::from(w.origin), &w.params, w.anchors)?);
        }
        let positions: Vec<_> = self.balls.iter().map(|b| Vector3::from(b.position)).collect();
        let world0 = scene.initial_state(JointVector::from(self.q0), &positions);
        let [w, x, y, z] = self.goal_orientation;
        let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Ok(Environment {
            kind: self.kind,
            seed: self.seed,
            scene,
            world0,
            goal: Pose::new(Vector3::from(self.goal_position), rotation),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("environment spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path).map_err(ModelError::Io)?;
        Ok(Self::from_json(&text)?)
    }
}

fn describe(kind: EnvKind, seed: u64, cfg: &EnvConfig, model: &RobotModel, goal: &Pose) -> EnvironmentSpec {
    let q = goal.rotation.quaternion();
    EnvironmentSpec {
        kind,
        seed,
        model: model.spec().clone(),
        sim: cfg.sim.clone(),
        q0: cfg.home,
        goal_position: goal.translation.into(),
        goal_orientation: [q.w, q.i, q.j, q.k],
        balls: Vec::new(),
        walls: Vec::new(),
    }
}

fn env_rng(kind: EnvKind, seed: u64) -> ChaCha8Rng {
    let salt = match kind {
        EnvKind::FreeSpace => 0x0f5e_ed00,
        EnvKind::Ball => 0xba11_0000,
        EnvKind::Wall => 0x3a11_0000,
    };
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

/// IK with the given seed first, then random restarts within joint limits.
pub fn solve_ik_with_restarts(
    model: &RobotModel,
    target: &Pose,
    seed_q: &JointVector,
    restarts: usize,
    opts: &IkOptions,
    rng: &mut ChaCha8Rng,
    mut accept: impl FnMut(&JointVector) -> bool,
) -> Option<JointVector> {
    if let Some(q) = inverse_kinematics(model, target, seed_q, opts) {
        if accept(&q) {
            return Some(q);
        }
    }
    for _ in 0..restarts {
        let start = JointVector::from_fn(|i, _| rng.random_range(model.lower[i]..=model.upper[i]));
        if let Some(q) = inverse_kinematics(model, target, &start, opts) {
            if accept(&q) {
                return Some(q);
            }
        }
    }
    None
}

/// Uniform target in `ws` with the canonical orientation, kept only if an IK
/// solution within joint limits exists and passes `accept`.
pub fn sample_target(
    model: &RobotModel,
    ws: &Workspace,
    seed_q: &JointVector,
    restarts: usize,
    tries: usize,
    rng: &mut ChaCha8Rng,
    mut accept: impl FnMut(&Pose, &JointVector) -> bool,
) -> Result<(Pose, JointVector), EnvError> {
    let opts = IkOptions::default();
    for _ in 0..tries {
        let target = Pose::new(ws.sample(rng), canonical_orientation());
        let found = solve_ik_with_restarts(model, &target, seed_q, restarts, &opts, rng, |q| accept(&target, q));
        if let Some(q) = found {
            return Ok((target, q));
        }
    }
    Err(EnvError::UnreachableTarget(tries))
}

pub fn make_free_space(cfg: &EnvConfig, seed: u64) -> Result<Environment, crate::Error> {
    free_space_spec(cfg, seed)?.build()
}

pub fn free_space_spec(cfg: &EnvConfig, seed: u64) -> Result<EnvironmentSpec, crate::Error> {
    let model = RobotModel::iiwa14();
    let scene = Scene::new(model.clone(), cfg.sim.clone());
    let world = scene.initial_state(cfg.home(), &[]);
    let start = scene.ee_pose(&world);
    let mut rng = env_rng(EnvKind::FreeSpace, seed);
    let (goal, _) =
        sample_target(&model, &cfg.workspace, &cfg.home(), cfg.ik_restarts, cfg.sample_tries, &mut rng, |g, q| {
            (g.translation - start.translation).norm() >= cfg.min_reach
                && scene.min_clearance(&world, q) >= cfg.goal_clearance
        })?;
    Ok(describe(EnvKind::FreeSpace, seed, cfg, &model, &goal))
}

/// Joint configurations along the straight end-effector line from `q0` to
/// `goal`, one per `step` metres, orientation held at the start.
pub fn straight_line_sweep(model: &RobotModel, q0: &JointVector, goal: &Vector3<f64>, step: f64) -> Vec<JointVector> {
    let start = model.kinematics(q0).ee_pose();
    let length = (goal - start.translation).norm();
    let n = (length / step).ceil().max(1.0) as usize;
    let opts = IkOptions { max_iters: 100, ..IkOptions::default() };
    let mut q = *q0;
    let mut sweep = vec![q];
    for i in 1..=n {
        let p = start.translation + (goal - start.translation) * (i as f64 / n as f64);
        let target = Pose::new(p, start.rotation);
        if let Some(next) = inverse_kinematics(model, &target, &q, &opts) {
            q = next;
        }
        sweep.push(q);
    }
    sweep
}

pub fn make_ball_obstacle(cfg: &EnvConfig, seed: u64) -> Result<Environment, crate::Error> {
    ball_spec(cfg, seed)?.build()
}

pub fn ball_spec(cfg: &EnvConfig, seed: u64) -> Result<EnvironmentSpec, crate::Error> {
    let model = RobotModel::iiwa14();
    let free = Scene::new(model.clone(), cfg.sim.clone());
    let world = free.initial_state(cfg.home(), &[]);
    let start = free.ee_pose(&world);
    let mut rng = env_rng(EnvKind::Ball, seed);
    let r = cfg.ball_radius;
    let mut with_ball = Scene::new(model.clone(), cfg.sim.clone());
    with_ball.balls.push(BallSpec { radius: r, mass: cfg.ball_mass });

    let mut tries = 0;
    while tries < cfg.placement_tries {
        let (goal, goal_q) =
            sample_target(&model, &cfg.workspace, &cfg.home(), cfg.ik_restarts, cfg.sample_tries, &mut rng, |g, q| {
                (g.translation - start.translation).norm() >= cfg.ball_min_reach
                    && free.min_clearance(&world, q) >= cfg.goal_clearance
            })?;
        let sweep = straight_line_sweep(&model, &cfg.home(), &goal.translation, 0.01);
        let end_q = *sweep.last().expect("sweep has the start configuration");
        for _ in 0..cfg.placements_per_target {
            tries += 1;
            // somewhere in the middle third of the sweep, against the forearm or wrist
            let index = rng.random_range(sweep.len() / 3..=(2 * sweep.len()) / 3);
            let kin = model.kinematics(&sweep[index]);
            let ahead = model.kinematics(&sweep[(index + 5).min(sweep.len() - 1)]);
            let link = rng.random_range(3..=5);
            let (a, b) = (kin.seg_a[link], kin.seg_b[link]);
            let t = rng.random_range(0.3..1.0);
            let on_axis = a + (b - a) * t;
            let axis = (b - a).normalize();
            // in front of the moving link, so the sweep runs into it
            let motion = ahead.seg_a[link] + (ahead.seg_b[link] - ahead.seg_a[link]) * t - on_axis;
            let heading = motion.normalize() + Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let normal = heading - axis * heading.dot(&axis);
            if !(normal.norm() > 1e-3) {
                continue;
            }
            let center = on_axis + normal.normalize() * (kin.radius[link] + r - cfg.ball_overlap);
            if center.z < r + 0.02 {
                continue;
            }
            let ball_world = with_ball.initial_state(cfg.home(), &[center]);
            let clear = |q: &JointVector| with_ball.min_clearance(&ball_world, q);
            let goal_clear =
                (goal.translation - center).norm() > r + model.capsule_radius(DOF - 1) + cfg.goal_clearance;
            if !goal_clear || [cfg.home(), goal_q, end_q].iter().any(|q| clear(q) < cfg.goal_clearance) {
                continue;
            }
            if sweep.iter().any(|q| clear(q) < 0.0) {
                let mut spec = describe(EnvKind::Ball, seed, cfg, &model, &goal);
                spec.balls.push(BallPlacement { position: center.into(), radius: r, mass: cfg.ball_mass });
                return Ok(spec);
            }
        }
    }
    Err(EnvError::PlacementFailure(cfg.placement_tries).into())
}

pub fn make_wall_obstacle(cfg: &EnvConfig, seed: u64) -> Result<Environment, crate::Error> {
    wall_spec(cfg, seed)?.build()
}

pub fn wall_spec(cfg: &EnvConfig, seed: u64) -> Result<EnvironmentSpec, crate::Error> {
    let model = RobotModel::iiwa14();
    let mut rng = env_rng(EnvKind::Wall, seed);
    // collisions are expected at the goal here, only reachability matters
    let (goal, _) =
        sample_target(&model, &cfg.wall_goal, &cfg.home(), cfg.ik_restarts, cfg.sample_tries, &mut rng, |_, _| true)?;
    let mut spec = describe(EnvKind::Wall, seed, cfg, &model, &goal);
    for face in cfg.wall_faces {
        spec.walls.push(WallPlacement {
            origin: [face, cfg.wall_y_min, 0.0],
            params: cfg.wall.clone(),
            anchors: AnchorSpec::BottomLayer,
        });
    }
    Ok(spec)
}

pub fn make_environment(kind: EnvKind, cfg: &EnvConfig, seed: u64) -> Result<Environment, crate::Error> {
    environment_spec(kind, cfg, seed)?.build()
}

pub fn environment_spec(kind: EnvKind, cfg: &EnvConfig, seed: u64) -> Result<EnvironmentSpec, crate::Error> {
    match kind {
        EnvKind::FreeSpace => free_space_spec(cfg, seed),
        EnvKind::Ball => ball_spec(cfg, seed),
        EnvKind::Wall => wall_spec(cfg, seed),
    }
}
