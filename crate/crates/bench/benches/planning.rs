use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use safereach::control::ControlMode;
use safereach::environments::EnvKind;
use safereach::experiment::approach_state;
use safereach::planner::{plan_step, PlannerConfig, RolloutObjective};
use safereach::solver::{optimize, Bounds, SolverConfig, SolverVariant};
use safereach_bench::environment;

fn solver_sphere(c: &mut Criterion) {
    let bounds = Bounds::uniform_box(13, 1.0);
    let f = |x: &[f64]| Ok(x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum());
    let grad = |x: &[f64]| Ok(x.iter().map(|v| 2.0 * (v - 0.3)).collect());
    let mut g = c.benchmark_group("solver_sphere13");
    for variant in [SolverVariant::VanillaCmaes, SolverVariant::Hybrid, SolverVariant::MultiGradient] {
        let cfg = SolverConfig { variant, ..SolverConfig::desk() };
        g.bench_function(variant.name(), |b| {
            b.iter(|| optimize(&f, &grad, &bounds, black_box(&[0.9; 13]), &cfg, 7).unwrap())
        });
    }
    g.finish();
}

fn rollout_objective(c: &mut Criterion) {
    let env = environment(EnvKind::Wall);
    let start = approach_state(&env);
    let cfg = PlannerConfig::default();
    let mode = ControlMode::OperationalPlusNull;
    let objective = RolloutObjective::new(&env.scene, mode, &start, env.goal, &cfg);
    let x = vec![0.0; cfg.action_dim(mode) * cfg.horizon];
    let mut g = c.benchmark_group("objective/wall");
    g.sample_size(20);
    g.bench_function("cost", |b| b.iter(|| objective.cost(black_box(&x)).unwrap()));
    g.bench_function("gradient", |b| b.iter(|| objective.gradient(black_box(&x)).unwrap()));
    g.finish();
}

fn planner_step(c: &mut Criterion) {
    let env = environment(EnvKind::Ball);
    let cfg = PlannerConfig::default();
    let mode = ControlMode::OperationalPlusNull;
    let warm = vec![0.0; cfg.action_dim(mode) * cfg.horizon];
    let mut g = c.benchmark_group("plan_step/ball");
    g.sample_size(10);
    for variant in [SolverVariant::VanillaCmaes, SolverVariant::Hybrid] {
        let solver = SolverConfig { variant, ..SolverConfig::desk() };
        g.bench_function(variant.name(), |b| {
            b.iter(|| plan_step(&env.scene, &env.world0, &env.goal, mode, &cfg, &solver, &warm, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, solver_sphere, rollout_objective, planner_step);
criterion_main!(benches);
