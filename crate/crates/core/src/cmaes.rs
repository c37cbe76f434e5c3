//! (μ/μ_w, λ)-CMA-ES on the unit box `[0, 1]^n`.
//!
//! Candidates are repaired by coordinate clamping before evaluation and the
//! repaired points drive every update, so the mean never leaves the box.
//! A run stops as soon as the best cost reaches the requested tolerance or
//! the evaluation budget is spent.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA0: f64 = 0.15;
pub const DEFAULT_MAX_EVALUATIONS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaesConfig {
    /// Offspring per generation; `None` selects `4 + ⌊3 ln n⌋`.
    pub population: Option<usize>,
    pub sigma0: f64,
    pub max_evaluations: usize,
    pub seed: u64,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self {
            population: None,
            sigma0: DEFAULT_SIGMA0,
            max_evaluations: DEFAULT_MAX_EVALUATIONS,
            seed: 0,
        }
    }
}

impl CmaesConfig {
    pub fn population_for(&self, dim: usize) -> usize {
        self.population
            .unwrap_or_else(|| 4 + (3.0 * (dim as f64).ln()).floor() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population.is_some_and(|p| p < 4) {
            return Err(Error::contract("CMA-ES population must be at least 4"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::contract("CMA-ES initial step size must be positive"));
        }
        if self.max_evaluations == 0 {
            return Err(Error::contract("CMA-ES evaluation budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesOutcome {
    pub best: Vec<f64>,
    pub cost: f64,
    pub evaluations: usize,
    /// Best cost reached the tolerance.
    pub converged: bool,
}

/// Minimizes `cost` over `[0, 1]^n` starting from `x0`.
pub fn cma_es_minimize(
    mut cost: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    config: &CmaesConfig,
    tolerance: f64,
) -> Result<CmaesOutcome> {
    config.validate()?;
    if !(tolerance > 0.0) {
        return Err(Error::contract(format!("tolerance must be positive, got {tolerance}")));
    }
    let n = x0.len();
    if n == 0 {
        return Err(Error::contract("cannot optimize over zero dimensions"));
    }
    let mut mean: Vec<f64> = x0.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut best = mean.clone();
    let mut best_cost = cost(&best);
    let mut evaluations = 1;
    if best_cost <= tolerance || evaluations >= config.max_evaluations {
        return Ok(CmaesOutcome {
            converged: best_cost <= tolerance,
            best,
            cost: best_cost,
            evaluations,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let p = Parameters::new(n, config.population_for(n));
    let mut sigma = config.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut scales = vec![1.0; n];
    let mut path_sigma = vec![0.0; n];
    let mut path_cov = vec![0.0; n];
    let mut evals_at_decomposition = evaluations;
    let mut generation = 0usize;

    let mut z = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut candidates: Vec<(f64, Vec<f64>)> = (0..p.lambda).map(|_| (0.0, vec![0.0; n])).collect();

    while evaluations < config.max_evaluations {
        generation += 1;
        for (fitness, x) in candidates.iter_mut() {
            for (zi, s) in z.iter_mut().zip(&scales) {
                let sample: f64 = StandardNormal.sample(&mut rng);
                *zi = s * sample;
            }
            step.iter_mut().for_each(|v| *v = 0.0);
            for (column, zj) in basis.as_slice().chunks_exact(n).zip(&z) {
                for (s, b) in step.iter_mut().zip(column) {
                    *s += b * zj;
                }
            }
            for ((xi, m), s) in x.iter_mut().zip(&mean).zip(&step) {
                *xi = (m + sigma * s).clamp(0.0, 1.0);
            }
            *fitness = cost(x);
            evaluations += 1;
            if *fitness < best_cost {
                best_cost = *fitness;
                best.copy_from_slice(x);
            }
            if best_cost <= tolerance || evaluations >= config.max_evaluations {
                break;
            }
        }
        if best_cost <= tolerance || evaluations >= config.max_evaluations {
            break;
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

        let old_mean = mean.clone();
        for (i, m) in mean.iter_mut().enumerate() {
            *m = p.weights.iter().zip(&candidates).map(|(w, c)| w * c.1[i]).sum();
        }
        let mean_shift: Vec<f64> = mean.iter().zip(&old_mean).map(|(a, b)| (a - b) / sigma).collect();

        // C^{-1/2} · shift = B D^{-1} Bᵀ · shift
        let mut whitened = vec![0.0; n];
        for k in 0..n {
            let proj: f64 = (0..n).map(|i| basis[(i, k)] * mean_shift[i]).sum::<f64>() / scales[k];
            for i in 0..n {
                whitened[i] += basis[(i, k)] * proj;
            }
        }
        let cs_norm = (p.cs * (2.0 - p.cs) * p.mu_eff).sqrt();
        for (ps, w) in path_sigma.iter_mut().zip(&whitened) {
            *ps = (1.0 - p.cs) * *ps + cs_norm * w;
        }
        let ps_norm = path_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let hsig = ps_norm / (1.0 - (1.0 - p.cs).powi(2 * generation as i32)).sqrt() / p.chi_n
            < 1.4 + 2.0 / (n as f64 + 1.0);
        let cc_norm = (p.cc * (2.0 - p.cc) * p.mu_eff).sqrt();
        for (pc, d) in path_cov.iter_mut().zip(&mean_shift) {
            *pc = (1.0 - p.cc) * *pc + if hsig { cc_norm * d } else { 0.0 };
        }

        let decay = 1.0 - p.c1 - p.cmu
            + if hsig { 0.0 } else { p.c1 * p.cc * (2.0 - p.cc) };
        let steps: Vec<Vec<f64>> = candidates[..p.mu]
            .iter()
            .map(|c| c.1.iter().zip(&old_mean).map(|(x, m)| (x - m) / sigma).collect())
            .collect();
        for i in 0..n {
            for j in 0..=i {
                let rank_mu: f64 = p
                    .weights
                    .iter()
                    .zip(&steps)
                    .map(|(w, y)| w * y[i] * y[j])
                    .sum();
                let v = decay * cov[(i, j)] + p.c1 * path_cov[i] * path_cov[j] + p.cmu * rank_mu;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        sigma *= ((p.cs / p.damps) * (ps_norm / p.chi_n - 1.0)).min(1.0).exp();

        if (evaluations - evals_at_decomposition) as f64 > p.decomposition_gap {
            evals_at_decomposition = evaluations;
            let eig = SymmetricEigen::new(cov.clone());
            let floor = eig.eigenvalues.max().abs().max(f64::MIN_POSITIVE) * 1e-14;
            for (s, e) in scales.iter_mut().zip(eig.eigenvalues.iter()) {
                *s = e.max(floor).sqrt();
            }
            basis = eig.eigenvectors;
        }

        let spread = sigma * scales.iter().cloned().fold(0.0, f64::max);
        if !spread.is_finite() || spread < 1e-13 {
            break;
        }
    }

    Ok(CmaesOutcome {
        converged: best_cost <= tolerance,
        best,
        cost: best_cost,
        evaluations,
    })
}

/// Strategy constants of the standard default setting.
struct Parameters {
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    cs: f64,
    cc: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
    decomposition_gap: f64,
}

impl Parameters {
    fn new(n: usize, lambda: usize) -> Self {
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let cc = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let cs = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let cmu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let damps = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        let decomposition_gap = 0.5 * lambda as f64 / (c1 + cmu) / nf;
        Self {
            lambda,
            mu,
            weights,
            mu_eff,
            cs,
            cc,
            c1,
            cmu,
            damps,
            chi_n,
            decomposition_gap,
        }
    }
}
