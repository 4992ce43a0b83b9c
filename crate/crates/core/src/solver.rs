//! Bounded CMA-ES with candidate repair, adaptive penalty, elite-mean refit
//! and a sampled line-search gradient step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SolverError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverVariant {
    /// One gradient refinement per step.
    Hybrid,
    /// Plain clipping, no penalty, no refinement.
    VanillaCmaes,
    /// Repeated refinement until the line search stops improving.
    MultiGradient,
}

impl SolverVariant {
    pub fn name(&self) -> &'static str {
        match self {
            SolverVariant::Hybrid => "hybrid",
            SolverVariant::VanillaCmaes => "vanilla_cmaes",
            SolverVariant::MultiGradient => "multi_gradient",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Candidates per step, `k`.
    pub population: usize,
    /// Elites averaged into the new mean, `k_top`.
    pub elites: usize,
    pub sigma0: f64,
    pub beta_max: f64,
    /// Step sizes sampled by the line search. `None` uses `population`.
    pub line_samples: Option<usize>,
    pub max_step: usize,
    /// Steps without relative improvement before stopping; 0 disables the check.
    pub stagnation_patience: usize,
    pub stagnation_tol: f64,
    /// Line-search improvement below which `multi_gradient` stops refining.
    pub refine_tol: f64,
    /// Safety cap on refinements per step for `multi_gradient`.
    pub max_refinements: usize,
    pub variant: SolverVariant,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            population: 200,
            elites: 50,
            sigma0: 0.01,
            beta_max: 1.0,
            line_samples: None,
            max_step: 100,
            stagnation_patience: 3,
            stagnation_tol: 1e-4,
            refine_tol: 1e-6,
            max_refinements: 20,
            variant: SolverVariant::Hybrid,
        }
    }
}

impl SolverConfig {
    /// Reduced budget for single-core runs. Same algorithm, smaller populations.
    pub fn desk() -> Self {
        Self { population: 48, elites: 12, line_samples: Some(16), max_step: 20, max_refinements: 8, ..Self::default() }
    }

    pub fn with_variant(mut self, variant: SolverVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.population < 2 {
            return Err("population must be at least 2".into());
        }
        if self.elites == 0 || self.elites > self.population {
            return Err("elites must be in 1..=population".into());
        }
        if !(self.sigma0 > 0.0) {
            return Err("sigma0 must be positive".into());
        }
        if !(self.beta_max >= 0.0) {
            return Err("beta_max must be non-negative".into());
        }
        if self.max_step == 0 {
            return Err("max_step must be at least 1".into());
        }
        if self.line_samples == Some(0) {
            return Err("line_samples must be at least 1".into());
        }
        Ok(())
    }

    fn line_samples(&self) -> usize {
        self.line_samples.unwrap_or(self.population)
    }
}

/// Feasible set as a product of blocks over consecutive coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundBlock {
    /// `|x_i| ≤ half_width` for each of `len` coordinates.
    Box { len: usize, half_width: f64 },
    /// `‖x‖ ≤ radius` over `len` coordinates.
    Ball { len: usize, radius: f64 },
}

impl BoundBlock {
    fn len(&self) -> usize {
        match *self {
            BoundBlock::Box { len, .. } | BoundBlock::Ball { len, .. } => len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub blocks: Vec<BoundBlock>,
}

impl Bounds {
    pub fn new(blocks: Vec<BoundBlock>) -> Self {
        Self { blocks }
    }

    /// Same box on every coordinate.
    pub fn uniform_box(dim: usize, half_width: f64) -> Self {
        Self::new(vec![BoundBlock::Box { len: dim, half_width }])
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(BoundBlock::len).sum()
    }

    /// Euclidean projection onto the feasible set (a clip for box blocks).
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        let mut start = 0;
        for block in &self.blocks {
            let part = &mut out[start..start + block.len()];
            match *block {
                BoundBlock::Box { half_width, .. } => {
                    for v in part.iter_mut() {
                        *v = v.clamp(-half_width, half_width);
                    }
                }
                BoundBlock::Ball { radius, .. } => {
                    let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > radius {
                        let scale = radius / norm;
                        for v in part.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
            start += block.len();
        }
        out
    }

    /// Feasibility check; ball blocks allow one part in 1e12 of rounding.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let mut start = 0;
        for block in &self.blocks {
            let part = &x[start..start + block.len()];
            let ok = match *block {
                BoundBlock::Box { half_width, .. } => part.iter().all(|v| v.abs() <= half_width),
                BoundBlock::Ball { radius, .. } => {
                    part.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius * (1.0 + 1e-12)
                }
            };
            if !ok {
                return false;
            }
            start += block.len();
        }
        true
    }
}

/// Repaired candidate and its penalized cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Repaired {
    pub point: Vec<f64>,
    pub cost: f64,
    /// `L` at the repaired point, without penalty.
    pub raw_cost: f64,
    pub distance_sq: f64,
    pub alpha: f64,
}

/// Adaptive trade-off weight. Matches `L / d` for positive `L`; for non-positive
/// costs the magnitude is used, and 1 when the cost is exactly zero.
pub fn penalty_weight(cost_at_candidate: f64, distance_sq: f64) -> f64 {
    if distance_sq <= 0.0 {
        0.0
    } else if cost_at_candidate > 0.0 {
        (cost_at_candidate.ln() - distance_sq.ln()).exp()
    } else if cost_at_candidate < 0.0 {
        cost_at_candidate.abs() / distance_sq
    } else {
        1.0
    }
}

/// Projects `candidate` into `bounds` and adds `α‖a − a_r‖²` to the cost at the
/// repaired point.
pub fn repair_and_penalize<F>(candidate: &[f64], bounds: &Bounds, objective: &F) -> Result<Repaired, SolverError>
where
    F: Fn(&[f64]) -> Result<f64, SolverError>,
{
    let point = bounds.project(candidate);
    let distance_sq: f64 = candidate.iter().zip(&point).map(|(a, b)| (a - b) * (a - b)).sum();
    let raw_cost = objective(&point)?;
    let alpha = if distance_sq > 0.0 { penalty_weight(objective(candidate)?, distance_sq) } else { 0.0 };
    Ok(Repaired { point, cost: raw_cost + alpha * distance_sq, raw_cost, distance_sq, alpha })
}

/// Outcome of one line search along the descent direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub point: Vec<f64>,
    pub cost: f64,
    pub beta: f64,
}

/// Samples step sizes in `[0, beta_max]` (0 always included) along `-gradient`,
/// keeps the best point and projects it into the bounds. `base_cost` is `L(m)`.
pub fn gradient_refine<F>(
    mean: &[f64],
    base_cost: f64,
    gradient: &[f64],
    objective: &F,
    bounds: &Bounds,
    beta_max: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Refinement, SolverError>
where
    F: Fn(&[f64]) -> Result<f64, SolverError> + Sync,
{
    let mut betas = Vec::with_capacity(samples);
    for _ in 0..samples.saturating_sub(1) {
        betas.push(rng.random_range(0.0..=beta_max));
    }
    // Points are projected before evaluation so the kept point is the one scored.
    let results: Vec<(f64, Vec<f64>, f64)> = betas
        .par_iter()
        .map(|&beta| {
            let stepped: Vec<f64> = mean.iter().zip(gradient).map(|(m, g)| m - beta * g).collect();
            let point = bounds.project(&stepped);
            let cost = objective(&point).unwrap_or(f64::INFINITY);
            (beta, point, cost)
        })
        .collect();
    let mut best = Refinement { point: bounds.project(mean), cost: base_cost, beta: 0.0 };
    for (beta, point, cost) in results {
        if cost < best.cost {
            best = Refinement { point, cost, beta };
        }
    }
    Ok(best)
}

/// CMA-ES state: mean, step size, covariance and evolution paths.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: usize,
    eigvecs: DMatrix<f64>,
    eigvals_sqrt: DVector<f64>,
}

/// Smallest eigenvalue kept in the covariance.
pub const EIGEN_FLOOR: f64 = 1e-12;

impl SolverState {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Self {
        let n = mean.len();
        Self {
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            eigvecs: DMatrix::identity(n, n),
            eigvals_sqrt: DVector::repeat(n, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &self.eigvecs * z.component_mul(&self.eigvals_sqrt);
        (&self.mean + y * self.sigma).as_slice().to_vec()
    }

    /// Re-symmetrizes `C`, floors its eigenvalues and caches the factorization.
    fn refactor(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        self.eigvals_sqrt = vals.map(f64::sqrt);
        self.eigvecs = eig.eigenvectors;
    }

    fn inv_sqrt_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let rotated = self.eigvecs.transpose() * v;
        &self.eigvecs * rotated.component_div(&self.eigvals_sqrt)
    }

    /// Standard CMA-ES update with equal recombination weights.
    /// `steps` are the selected `(a_i − m_old) / σ`; `shift` is `(m_new − m_old) / σ`.
    fn adapt(&mut self, steps: &[DVector<f64>], shift: &DVector<f64>) {
        let n = self.dim() as f64;
        let mu = steps.len() as f64;
        let mu_eff = mu;
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).max(0.0);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        self.p_sigma =
            &self.p_sigma * (1.0 - c_sigma) + self.inv_sqrt_times(shift) * (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt();
        let generation = (self.generation + 1) as f64;
        let norm_ps = self.p_sigma.norm();
        let h_sigma = norm_ps / (1.0 - (1.0 - c_sigma).powf(2.0 * generation)).sqrt() < (1.4 + 2.0 / (n + 1.0)) * chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - c_c) + shift * (h * (c_c * (2.0 - c_c) * mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(self.dim(), self.dim());
        for y in steps {
            rank_mu.ger(1.0 / mu, y, y, 1.0);
        }
        let decay = 1.0 - c_1 - c_mu + (1.0 - h) * c_1 * c_c * (2.0 - c_c);
        self.cov = &self.cov * decay + (&self.p_c * self.p_c.transpose()) * c_1 + rank_mu * c_mu;
        self.sigma *= ((c_sigma / d_sigma) * (norm_ps / chi_n - 1.0)).exp();
        self.generation += 1;
        self.refactor();
    }
}

/// Result of [`optimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Best feasible point evaluated.
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// `L(m)` before the first step and after every step.
    pub cost_history: Vec<f64>,
    pub steps: usize,
    /// Objective evaluations made directly by the solver; work inside the gradient is not counted.
    pub evaluations: usize,
}

/// Minimizes `objective` over `bounds` starting from `initial_mean`.
pub fn optimize<F, G>(
    objective: &F,
    gradient: &G,
    bounds: &Bounds,
    initial_mean: &[f64],
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Solution, SolverError>
where
    F: Fn(&[f64]) -> Result<f64, SolverError> + Sync,
    G: Fn(&[f64]) -> Result<Vec<f64>, SolverError>,
{
    let dim = bounds.dim();
    if initial_mean.len() != dim {
        return Err(SolverError::DimensionMismatch { expected: dim, got: initial_mean.len() });
    }
    cfg.validate().map_err(SolverError::Failure)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SolverState::new(bounds.project(initial_mean), cfg.sigma0);
    let mut mean_cost = objective(state.mean.as_slice())?;
    let mut best = state.mean.as_slice().to_vec();
    let mut best_cost = mean_cost;
    let mut cost_history = vec![mean_cost];
    let mut evaluations = 1;
    let mut stagnant = 0;
    let mut steps = 0;

    for _ in 0..cfg.max_step {
        steps += 1;
        let candidates: Vec<Vec<f64>> = (0..cfg.population).map(|_| state.sample(&mut rng)).collect();
        let scored: Vec<(Vec<f64>, f64, f64, usize)> = candidates
            .par_iter()
            .map(|a| {
                let result = match cfg.variant {
                    SolverVariant::VanillaCmaes => {
                        let point = bounds.project(a);
                        objective(&point).map(|c| (point, c, c, 1))
                    }
                    _ => repair_and_penalize(a, bounds, objective)
                        .map(|r| (r.point, r.cost, r.raw_cost, if r.distance_sq > 0.0 { 2 } else { 1 })),
                };
                result.unwrap_or_else(|_| (bounds.project(a), f64::INFINITY, f64::INFINITY, 1))
            })
            .collect();
        evaluations += scored.iter().map(|s| s.3).sum::<usize>();
        if scored.iter().all(|s| !s.1.is_finite()) {
            return Err(SolverError::Failure(format!("all {} candidates failed", cfg.population)));
        }
        for (point, _, raw, _) in &scored {
            if *raw < best_cost {
                best_cost = *raw;
                best = point.clone();
            }
        }
        let order = elite_order(&scored.iter().map(|s| s.1).collect::<Vec<_>>(), cfg.elites);

        let old_mean = state.mean.clone();
        let mut mean = vec![0.0; dim];
        for &i in &order {
            for (m, v) in mean.iter_mut().zip(&scored[i].0) {
                *m += v / order.len() as f64;
            }
        }
        let mut mean = bounds.project(&mean);
        mean_cost = objective(&mean).unwrap_or(f64::INFINITY);
        evaluations += 1;

        let refinements = match cfg.variant {
            SolverVariant::VanillaCmaes => 0,
            SolverVariant::Hybrid => 1,
            SolverVariant::MultiGradient => cfg.max_refinements.max(1),
        };
        for _ in 0..refinements {
            if !mean_cost.is_finite() {
                break;
            }
            let grad = match gradient(&mean) {
                Ok(g) if g.iter().all(|v| v.is_finite()) => g,
                _ => break,
            };
            let refined = gradient_refine(
                &mean,
                mean_cost,
                &grad,
                objective,
                bounds,
                cfg.beta_max,
                cfg.line_samples(),
                &mut rng,
            )?;
            evaluations += cfg.line_samples().saturating_sub(1);
            let improvement = mean_cost - refined.cost;
            mean = refined.point;
            mean_cost = refined.cost;
            if cfg.variant != SolverVariant::MultiGradient || improvement < cfg.refine_tol {
                break;
            }
        }
        if mean_cost < best_cost {
            best_cost = mean_cost;
            best = mean.clone();
        }

        state.mean = DVector::from_vec(mean);
        let inv_sigma = 1.0 / state.sigma;
        let selected: Vec<DVector<f64>> =
            order.iter().map(|&i| (DVector::from_column_slice(&scored[i].0) - &old_mean) * inv_sigma).collect();
        let shift = (&state.mean - &old_mean) * inv_sigma;
        state.adapt(&selected, &shift);
        cost_history.push(mean_cost);

        let previous = cost_history[cost_history.len() - 2];
        let change = (previous - mean_cost).abs() / previous.abs().max(1e-12);
        if change < cfg.stagnation_tol {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        if cfg.stagnation_patience > 0 && stagnant >= cfg.stagnation_patience {
            break;
        }
    }

    Ok(Solution { best, best_cost, cost_history, steps, evaluations })
}

/// Indices of the `k` smallest costs, ties broken by index.
pub fn elite_order(costs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
