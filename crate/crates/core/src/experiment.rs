//! Experiment configuration, suite execution and the solver comparison.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{run_baseline, RrtConfig, TrackingConfig};
use crate::control::ControlMode;
use crate::dynamics::JointVector;
use crate::environments::{make_environment, straight_line_sweep, EnvConfig, EnvKind, Environment};
use crate::error::ConfigError;
use crate::planner::{plan_step, run_episode, step_seed, EpisodeMetrics, PlannerConfig};
use crate::sim::WorldState;
use crate::solver::{SolverConfig, SolverVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    /// Receding-horizon planner that allows contact.
    ContactAllowed,
    /// RRT* with tracking, no replanning.
    CollisionFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSelection {
    pub kind: EnvKind,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub planner: PlannerKind,
    #[serde(default = "default_mode")]
    pub controller_mode: ControlMode,
    #[serde(default = "default_variant")]
    pub solver_variant: SolverVariant,
}

fn default_mode() -> ControlMode {
    ControlMode::OperationalPlusNull
}

fn default_variant() -> SolverVariant {
    SolverVariant::Hybrid
}

impl MethodSpec {
    pub fn ours() -> Self {
        Self::contact("ours", ControlMode::OperationalPlusNull)
    }

    pub fn reference_posture() -> Self {
        Self::contact("reference_posture", ControlMode::ReferencePosture)
    }

    pub fn direct_torque() -> Self {
        Self::contact("direct_torque", ControlMode::DirectTorque)
    }

    pub fn collision_free() -> Self {
        Self {
            name: "collision_free".into(),
            planner: PlannerKind::CollisionFree,
            controller_mode: ControlMode::OperationalPlusNull,
            solver_variant: SolverVariant::Hybrid,
        }
    }

    fn contact(name: &str, mode: ControlMode) -> Self {
        Self {
            name: name.into(),
            planner: PlannerKind::ContactAllowed,
            controller_mode: mode,
            solver_variant: SolverVariant::Hybrid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub env: EnvKind,
    /// One paired trial per seed.
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub variants: Vec<SolverVariant>,
    /// Start each trial at the last collision-free configuration of the
    /// straight approach to the goal instead of the initial posture.
    pub near_contact: bool,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Wall,
            seeds: (0..10).collect(),
            steps: 10,
            variants: vec![SolverVariant::VanillaCmaes, SolverVariant::Hybrid, SolverVariant::MultiGradient],
            near_contact: true,
        }
    }
}

/// Which episode's per-step force trace goes into `force_profile.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSelection {
    pub env: EnvKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: String,
    pub environments: Vec<EnvSelection>,
    pub methods: Vec<MethodSpec>,
    pub planner: PlannerConfig,
    pub solver: SolverConfig,
    pub env: EnvConfig,
    pub rrt: RrtConfig,
    pub tracking: TrackingConfig,
    pub solver_comparison: ComparisonConfig,
    /// Defaults to the wall environment if present, else the first one, at its first seed.
    pub force_profile: Option<ProfileSelection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: "results".into(),
            environments: [EnvKind::FreeSpace, EnvKind::Ball, EnvKind::Wall]
                .into_iter()
                .map(|kind| EnvSelection { kind, seeds: (0..5).collect() })
                .collect(),
            methods: vec![MethodSpec::ours(), MethodSpec::reference_posture(), MethodSpec::collision_free()],
            planner: PlannerConfig::default(),
            solver: SolverConfig::desk(),
            env: EnvConfig::default(),
            rrt: RrtConfig::default(),
            tracking: TrackingConfig::default(),
            solver_comparison: ComparisonConfig::default(),
            force_profile: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.environments.is_empty() {
            return Err(ConfigError::at("environments", "at least one environment is required"));
        }
        for (i, e) in self.environments.iter().enumerate() {
            if e.seeds.is_empty() {
                return Err(ConfigError::at(format!("environments[{i}].seeds"), "seeds must be listed explicitly"));
            }
            let mut sorted = e.seeds.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(ConfigError::at(format!("environments[{i}].seeds"), "duplicate seed"));
            }
        }
        if self.methods.is_empty() {
            return Err(ConfigError::at("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if m.name.is_empty() || m.name.contains([',', '/', '\\', '"']) {
                return Err(ConfigError::at(
                    format!("methods[{i}].name"),
                    "names must be non-empty without , / \\ or quotes",
                ));
            }
            if self.methods[..i].iter().any(|o| o.name == m.name) {
                return Err(ConfigError::at(
                    format!("methods[{i}].name"),
                    format!("duplicate method name `{}`", m.name),
                ));
            }
        }
        self.planner.validate().map_err(|m| ConfigError::at("planner", m))?;
        self.solver.validate().map_err(|e| ConfigError::at("solver", e))?;
        self.env.validate().map_err(|m| ConfigError::at("env", m))?;
        self.rrt.validate().map_err(|m| ConfigError::at("rrt", m))?;
        let t = &self.tracking;
        if !(t.max_joint_step > 0.0 && t.max_ee_step > 0.0 && t.advance_tol > 0.0) {
            return Err(ConfigError::at("tracking", "steps and tolerance must be positive"));
        }
        let c = &self.solver_comparison;
        if c.seeds.is_empty() || c.steps == 0 || c.variants.is_empty() {
            return Err(ConfigError::at("solver_comparison", "needs seeds, at least one step and one variant"));
        }
        Ok(())
    }

    /// Adds `offset` to every seed.
    pub fn offset_seeds(&mut self, offset: u64) {
        for e in &mut self.environments {
            for s in &mut e.seeds {
                *s += offset;
            }
        }
        for s in &mut self.solver_comparison.seeds {
            *s += offset;
        }
        if let Some(p) = &mut self.force_profile {
            p.seed += offset;
        }
    }

    pub fn profile_selection(&self) -> ProfileSelection {
        self.force_profile.clone().unwrap_or_else(|| {
            let e = self.environments.iter().find(|e| e.kind == EnvKind::Wall).unwrap_or(&self.environments[0]);
            ProfileSelection { env: e.kind, seed: e.seeds[0] }
        })
    }
}

/// One executed (environment, method, seed) triple.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub env: EnvKind,
    pub method: String,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
}

/// Aggregate of the episodes of one (environment, method) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub env: EnvKind,
    pub method: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean and sample standard deviation over successful episodes; absent when none succeeded.
    pub completion_time: Option<MeanStd>,
    pub max_contact_force: Option<MeanStd>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var =
            if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug)]
pub struct ResultsTable {
    /// Ordered by environment, then method, then seed, as configured.
    pub records: Vec<EpisodeRecord>,
    pub cells: Vec<CellSummary>,
    pub profile: ProfileSelection,
}

impl ResultsTable {
    pub fn cell(&self, env: EnvKind, method: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.env == env && c.method == method)
    }

    pub fn episodes(&self, env: EnvKind, method: &str) -> impl Iterator<Item = &EpisodeRecord> + '_ {
        let method = method.to_string();
        self.records.iter().filter(move |r| r.env == env && r.method == method)
    }
}

pub fn summarize(env: EnvKind, method: &str, episodes: &[&EpisodeMetrics]) -> CellSummary {
    let ok: Vec<&&EpisodeMetrics> = episodes.iter().filter(|m| m.success).collect();
    CellSummary {
        env,
        method: method.into(),
        episodes: episodes.len(),
        successes: ok.len(),
        success_rate: if episodes.is_empty() { 0.0 } else { ok.len() as f64 / episodes.len() as f64 },
        completion_time: MeanStd::of(&ok.iter().map(|m| m.completion_time).collect::<Vec<_>>()),
        max_contact_force: MeanStd::of(&ok.iter().map(|m| m.max_contact_force).collect::<Vec<_>>()),
    }
}

/// Runs one method on one environment instance.
pub fn run_method(cfg: &ExperimentConfig, method: &MethodSpec, env: &Environment, seed: u64) -> EpisodeMetrics {
    match method.planner {
        PlannerKind::ContactAllowed => {
            let solver = cfg.solver.clone().with_variant(method.solver_variant);
            run_episode(env, &cfg.planner, &solver, method.controller_mode, seed)
        }
        PlannerKind::CollisionFree => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_baseline(env, &cfg.planner, &cfg.rrt, &cfg.tracking, &mut rng).1
        }
    }
}

/// Executes every configured (environment, method, seed) triple. Episodes run
/// concurrently; the table order depends only on the configuration.
pub fn run_suite(cfg: &ExperimentConfig) -> crate::Result<ResultsTable> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for e in &cfg.environments {
        for m in &cfg.methods {
            for &seed in &e.seeds {
                jobs.push((e.kind, m, seed));
            }
        }
    }
    let envs: Vec<_> = cfg
        .environments
        .iter()
        .flat_map(|e| e.seeds.iter().map(move |&s| (e.kind, s)))
        .map(|(kind, seed)| make_environment(kind, &cfg.env, seed).map(|env| ((kind, seed), env)))
        .collect::<Result<_, _>>()?;
    let records: Vec<EpisodeRecord> = jobs
        .par_iter()
        .map(|&(kind, method, seed)| {
            let env = &envs.iter().find(|(k, _)| *k == (kind, seed)).expect("environment built").1;
            EpisodeRecord { env: kind, method: method.name.clone(), seed, metrics: run_method(cfg, method, env, seed) }
        })
        .collect();
    let mut cells = Vec::new();
    for e in &cfg.environments {
        for m in &cfg.methods {
            let eps: Vec<&EpisodeMetrics> =
                records.iter().filter(|r| r.env == e.kind && r.method == m.name).map(|r| &r.metrics).collect();
            cells.push(summarize(e.kind, &m.name, &eps));
        }
    }
    Ok(ResultsTable { records, cells, profile: cfg.profile_selection() })
}

/// Cost reduction reached by one solver variant on one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub variant: SolverVariant,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub decrease: f64,
    /// Wall-clock seconds per solver step; not reproducible.
    #[serde(skip)]
    pub seconds_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: SolverVariant,
    pub mean_decrease: f64,
    pub std_decrease: f64,
    #[serde(skip)]
    pub mean_seconds_per_step: f64,
}

#[derive(Clone, Debug)]
pub struct SolverComparison {
    pub trials: Vec<TrialOutcome>,
    pub summary: Vec<VariantSummary>,
}

impl SolverComparison {
    pub fn variant(&self, v: SolverVariant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Initial world with the robot moved, at rest, to the last collision-free
/// configuration of the straight-line approach to the goal.
pub fn approach_state(env: &Environment) -> WorldState {
    let sweep = straight_line_sweep(&env.scene.model, &env.world0.joints.q, &env.goal.translation, 0.01);
    let q = sweep
        .iter()
        .take_while(|q| env.scene.min_clearance(&env.world0, q) >= 0.0)
        .last()
        .copied()
        .unwrap_or(env.world0.joints.q);
    let mut world = env.world0.clone();
    world.joints.q = q;
    world.joints.qdot = JointVector::zeros();
    world
}

/// Runs one plan step of exactly `steps` solver iterations for each variant
/// from the same start state and seed, and compares `cost[0] − cost[steps]`.
pub fn solver_comparison(cfg: &ExperimentConfig) -> crate::Result<SolverComparison> {
    cfg.validate()?;
    let c = &cfg.solver_comparison;
    let mode = ControlMode::OperationalPlusNull;
    let warm = vec![0.0; cfg.planner.action_dim(mode) * cfg.planner.horizon];
    let mut trials = Vec::new();
    for &seed in &c.seeds {
        let env = make_environment(c.env, &cfg.env, seed)?;
        let start = if c.near_contact { approach_state(&env) } else { env.world0.clone() };
        for &variant in &c.variants {
            let solver =
                SolverConfig { max_step: c.steps, stagnation_patience: 0, ..cfg.solver.clone().with_variant(variant) };
            let started = Instant::now();
            let plan =
                plan_step(&env.scene, &start, &env.goal, mode, &cfg.planner, &solver, &warm, step_seed(seed, 0))?;
            let elapsed = started.elapsed().as_secs_f64();
            let h = &plan.solution.cost_history;
            let (first, last) = (h[0], *h.last().expect("history is never empty"));
            trials.push(TrialOutcome {
                seed,
                variant,
                initial_cost: first,
                final_cost: last,
                decrease: first - last,
                seconds_per_step: elapsed / plan.solution.steps.max(1) as f64,
            });
        }
    }
    let summary = c
        .variants
        .iter()
        .map(|&variant| {
            let t: Vec<&TrialOutcome> = trials.iter().filter(|t| t.variant == variant).collect();
            let d = MeanStd::of(&t.iter().map(|t| t.decrease).collect::<Vec<_>>()).expect("at least one trial");
            VariantSummary {
                variant,
                mean_decrease: d.mean,
                std_decrease: d.std,
                mean_seconds_per_step: t.iter().map(|t| t.seconds_per_step).sum::<f64>() / t.len() as f64,
            }
        })
        .collect();
    Ok(SolverComparison { trials, summary })
}
