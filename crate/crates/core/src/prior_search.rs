//! Search for least favorable priors: exponentiated-gradient ascent of a
//! prior functional over the simplex, with finite-difference gradients and
//! multiple starts. The result is a lower bound on the supremum.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_grid, DecayCertificate};
use crate::error::Result;
use crate::functionals::restart_start;
use crate::mc::{derive_seed, sample_rng};
use crate::process::{metric_of, EmbeddedProcess, FiniteMetric, Prior};
use crate::rate_distortion::sqrt_rate_integral;
use crate::special::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `int_0^inf mmse_pi(s) ds`.
    IntegratedMmse,
    /// `int_0^diam sqrt(R_pi(r)) dr`.
    SqrtRateIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub restarts: usize,
    pub iterations: usize,
    /// Noise draws (each used with its antithetic partner) for the MMSE
    /// objective.
    pub samples: usize,
    pub grid_points: usize,
    pub fd_step: f64,
    pub step: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            restarts: 8,
            iterations: 20,
            samples: 256,
            grid_points: 32,
            fd_step: 1e-3,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub prior: Prior,
    pub value: f64,
    pub restart: usize,
    /// Objective after each accepted step of the winning restart, starting
    /// with its initial value.
    pub history: Vec<f64>,
}

/// Integrated MMSE estimated with fixed noise draws shared by every prior, so
/// that the estimate is a smooth deterministic function of the prior.
///
/// For each signal index `x` the conditional error is averaged over the draws
/// and their negatives, then combined as `sum_x pi(x) m_x(pi)`.
pub struct MmseFunctional {
    points: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    gram: Vec<Vec<f64>>,
    /// `<z, h_u>` per draw.
    zh: Vec<Vec<f64>>,
    grid: Vec<f64>,
    weights: Vec<f64>,
}

impl MmseFunctional {
    pub fn new(emb: &EmbeddedProcess, samples: usize, grid_points: usize, seed: u64) -> Self {
        let n = emb.len();
        let metric = metric_of(emb);
        let grid = snr_grid(&DecayCertificate::from_metric(&metric), grid_points);
        let mut weights = vec![0.0; grid.len()];
        for i in 0..grid.len().saturating_sub(1) {
            let h = 0.5 * (grid[i + 1] - grid[i]);
            weights[i] += h;
            weights[i + 1] += h;
        }
        let mut zh = Vec::with_capacity(2 * samples);
        for i in 0..samples {
            let mut rng = sample_rng(seed, i as u64);
            let z: Vec<f64> = (0..emb.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p = emb.project(&z);
            zh.push(p.iter().map(|v| -v).collect());
            zh.push(p);
        }
        let g = emb.gram();
        MmseFunctional {
            points: (0..n).map(|t| emb.point(t)).collect(),
            sq: (0..n).map(|s| (0..n).map(|t| metric.d(s, t).powi(2)).collect()).collect(),
            gram: (0..n).map(|s| (0..n).map(|t| g[(s, t)]).collect()).collect(),
            zh,
            grid,
            weights,
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn value(&self, prior: &Prior) -> f64 {
        let n = self.points.len();
        if n <= 1 {
            return 0.0;
        }
        let dim = self.points[0].len();
        let log_prior: Vec<f64> = prior
            .weights()
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        let mut logw = vec![0.0; n];
        let mut mean = vec![0.0; dim];
        let mut total = 0.0;
        for (x, &px) in prior.weights().iter().enumerate() {
            if px <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for zh in &self.zh {
                for (j, &s) in self.grid.iter().enumerate() {
                    if self.weights[j] == 0.0 {
                        continue;
                    }
                    for u in 0..n {
                        logw[u] = log_prior[u] + s * (s * self.gram[x][u] + zh[u]) - 0.5 * s * s * self.gram[u][u];
                    }
                    let z = log_sum_exp(&logw);
                    mean.iter_mut().for_each(|m| *m = 0.0);
                    for u in 0..n {
                        let w = (logw[u] - z).exp();
                        if w > 0.0 {
                            for (m, h) in mean.iter_mut().zip(&self.points[u]) {
                                *m += w * h;
                            }
                        }
                    }
                    let err: f64 = mean.iter().zip(&self.points[x]).map(|(m, h)| (h - m) * (h - m)).sum();
                    acc += self.weights[j] * err;
                }
            }
            total += px * acc / self.zh.len() as f64;
        }
        // the error never exceeds the largest squared distance
        debug_assert!(total <= self.sq.iter().flatten().fold(0.0f64, |a, b| a.max(*b)) * self.grid.last().unwrap_or(&0.0) + 1e-9);
        total
    }
}

fn mix_toward(w: &[f64], i: usize, eps: f64) -> Vec<f64> {
    let mut v: Vec<f64> = w.iter().map(|x| (1.0 - eps) * x).collect();
    v[i] += eps;
    v
}

fn ascend(f: &(dyn Fn(&[f64]) -> f64 + Sync), n: usize, budget: &SearchBudget, seed: u64, restart: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut w = restart_start(n, seed, restart);
    let mut cur = f(&w);
    let mut history = vec![cur];
    for _ in 0..budget.iterations {
        let grad: Vec<f64> = (0..n)
            .map(|i| (f(&mix_toward(&w, i, budget.fd_step)) - cur) / budget.fd_step)
            .collect();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !(scale > 0.0) {
            break;
        }
        let mut eta = budget.step / scale;
        let mut accepted = false;
        for _ in 0..12 {
            let logs: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x.ln() + eta * g).collect();
            let z = log_sum_exp(&logs);
            let trial: Vec<f64> = logs.iter().map(|l| (l - z).exp()).collect();
            let v = f(&trial);
            if v >= cur {
                w = trial;
                cur = v;
                history.push(cur);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (cur, w, history)
}

/// Multi-start ascent of the chosen objective over priors on `T`.
pub fn least_favorable_search(emb: &EmbeddedProcess, objective: Objective, budget: &SearchBudget, seed: u64) -> Result<SearchResult> {
    let n = emb.len();
    if n <= 1 {
        return Ok(SearchResult {
            prior: Prior::point_mass(1, 0),
            value: 0.0,
            restart: 0,
            history: vec![0.0],
        });
    }
    let metric = metric_of(emb);
    let eval = objective_fn(emb, &metric, objective, budget, seed);
    let start_seed = derive_seed(seed, "least_favorable_starts");
    let runs: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..budget.restarts.max(1))
        .into_par_iter()
        .map(|r| ascend(&*eval, n, budget, start_seed, r))
        .collect();
    let (restart, (value, w, history)) = runs
        .into_iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)))
        .expect("at least one restart");
    Ok(SearchResult {
        prior: Prior::normalized(w)?,
        value,
        restart,
        history,
    })
}

type PriorFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>;

fn objective_fn<'a>(emb: &EmbeddedProcess, metric: &'a FiniteMetric, objective: Objective, budget: &SearchBudget, seed: u64) -> PriorFn<'a> {
    match objective {
        Objective::IntegratedMmse => {
            let f = MmseFunctional::new(emb, budget.samples, budget.grid_points, derive_seed(seed, "least_favorable_noise"));
            Box::new(move |w: &[f64]| match Prior::normalized(w.to_vec()) {
                Ok(p) => f.value(&p),
                Err(_) => f64::NEG_INFINITY,
            })
        }
        Objective::SqrtRateIntegral => Box::new(move |w: &[f64]| {
            Prior::normalized(w.to_vec())
                .and_then(|p| sqrt_rate_integral(metric, &p))
                .unwrap_or(f64::NEG_INFINITY)
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::binary_integrated_mmse;
    use nalgebra::DMatrix;

    fn two_point() -> EmbeddedProcess {
        EmbeddedProcess::from_points(DMatrix::from_row_slice(2, 1, &[0.5, -0.5]), None).unwrap()
    }

    fn small_budget() -> SearchBudget {
        SearchBudget {
            restarts: 3,
            iterations: 15,
            samples: 64,
            grid_points: 24,
            ..SearchBudget::default()
        }
    }

    #[test]
    fn singleton_is_degenerate() {
        let e = EmbeddedProcess::from_points(DMatrix::from_row_slice(1, 1, &[0.2]), None).unwrap();
        let r = least_favorable_search(&e, Objective::IntegratedMmse, &small_budget(), 1).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.prior.weights(), &[1.0]);
    }

    #[test]
    fn mmse_functional_is_symmetric_on_two_points() {
        let f = MmseFunctional::new(&two_point(), 64, 24, 5);
        for p in [0.1, 0.3, 0.45] {
            let a = f.value(&Prior::new(vec![p, 1.0 - p]).unwrap());
            let b = f.value(&Prior::new(vec![1.0 - p, p]).unwrap());
            assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn mmse_functional_near_binary_oracle() {
        let f = MmseFunctional::new(&two_point(), 2000, 64, 5);
        let v = f.value(&Prior::uniform(2));
        let exact = binary_integrated_mmse(1.0);
        assert!((v - exact).abs() < 0.02 * exact, "{v} vs {exact}");
    }

    #[test]
    fn two_points_prefer_uniform() {
        for obj in [Objective::IntegratedMmse, Objective::SqrtRateIntegral] {
            let r = least_favorable_search(&two_point(), obj, &small_budget(), 2).unwrap();
            let tv = 0.5 * r.prior.weights().iter().map(|w| (w - 0.5).abs()).sum::<f64>();
            assert!(tv < 1e-2, "{obj:?}: {:?}", r.prior.weights());
            assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
