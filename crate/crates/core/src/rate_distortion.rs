//! Self-coupled rate distortion: both marginals are pinned to the prior.
//!
//! For a multiplier `lambda >= 0` the coupling minimizing
//! `I(V; V') + lambda E d(V, V')^2` with `V, V' ~ prior` is the matrix scaling
//! of the Gibbs kernel `prior(u) prior(v) exp(-lambda d(u,v)^2)`. Scanning
//! `lambda` traces the lower convex envelope of the (distortion, rate)
//! region, which is the rate-distortion curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{entropy, FiniteMetric, Prior};
use crate::quad::integrate;
use crate::special::{binary_entropy, neg_xlogx};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100_000;
/// Absolute tolerance of the adaptive quadrature behind the two integrals.
pub const INTEGRAL_TOL: f64 = 1e-5;

/// Joint law on `T x T` with both marginals (approximately) equal to the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub joint: Vec<Vec<f64>>,
    /// Larger of the row and column l1 distances to the prior.
    pub marginal_residual: f64,
}

impl Coupling {
    pub fn identity(prior: &Prior) -> Self {
        let n = prior.len();
        let mut joint = vec![vec![0.0; n]; n];
        for (i, &w) in prior.weights().iter().enumerate() {
            joint[i][i] = w;
        }
        Coupling {
            joint,
            marginal_residual: 0.0,
        }
    }

    pub fn product(prior: &Prior) -> Self {
        let w = prior.weights();
        Coupling {
            joint: w.iter().map(|a| w.iter().map(|b| a * b).collect()).collect(),
            marginal_residual: 0.0,
        }
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.joint.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let n = self.joint.len();
        (0..n).map(|j| self.joint.iter().map(|r| r[j]).sum()).collect()
    }
}

/// Support-restricted problem data with reusable scaling potentials.
struct GibbsProblem {
    support: Vec<usize>,
    n: usize,
    log_prior: Vec<f64>,
    sq: Vec<Vec<f64>>,
    tol: f64,
}

/// Symmetric scaling potentials: `P(u, v) = exp(f_u + f_v - lambda d(u,v)^2)`.
#[derive(Clone)]
struct Potentials {
    f: Vec<f64>,
}

struct Solved {
    pot: Potentials,
    /// `ln P(u, v)` on the support.
    log_joint: Vec<Vec<f64>>,
    residual: f64,
}

fn lse_iter(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Proportional-fitting sweeps run before switching to Newton steps.
const FITTING_SWEEPS: usize = 50;

impl GibbsProblem {
    fn new(metric: &FiniteMetric, prior: &Prior, tol: f64) -> Result<Self> {
        if prior.len() != metric.len() {
            return Err(Error::DimensionMismatch {
                expected: metric.len(),
                got: prior.len(),
            });
        }
        let support = prior.support();
        let log_prior = support.iter().map(|&i| prior.weights()[i].ln()).collect();
        let sq = support
            .iter()
            .map(|&i| support.iter().map(|&j| metric.d(i, j).powi(2)).collect())
            .collect();
        Ok(GibbsProblem {
            n: metric.len(),
            support,
            log_prior,
            sq,
            tol,
        })
    }

    fn m(&self) -> usize {
        self.support.len()
    }

    fn cold(&self) -> Potentials {
        Potentials {
            f: self.log_prior.clone(),
        }
    }

    fn joint(&self, f: &[f64], lambda: f64) -> Vec<Vec<f64>> {
        let m = self.m();
        (0..m)
            .map(|u| (0..m).map(|v| (f[u] + f[v] - lambda * self.sq[u][v]).exp()).collect())
            .collect()
    }

    /// Row-sum residual `sum_u |sum_v P(u,v) - prior(u)|` and the dual
    /// objective `1/2 sum P - sum prior f`.
    fn residual_and_dual(&self, f: &[f64], lambda: f64) -> (f64, f64, Vec<Vec<f64>>) {
        let p = self.joint(f, lambda);
        let mut res = 0.0;
        let mut dual = 0.0;
        for (u, row) in p.iter().enumerate() {
            let r: f64 = row.iter().sum();
            let pu = self.log_prior[u].exp();
            res += (r - pu).abs();
            dual += 0.5 * r - pu * f[u];
        }
        (res, dual, p)
    }

    /// Scale the kernel to the prior marginals: a few symmetric proportional
    /// fitting sweeps, then damped Newton steps on the convex dual
    /// `1/2 sum_{uv} exp(f_u + f_v - lambda d^2) - sum_u prior(u) f_u`, whose
    /// stationary point is exactly the marginal condition.
    fn solve(&self, lambda: f64, start: Option<&Potentials>) -> Result<Solved> {
        let m = self.m();
        let mut f = start.cloned().unwrap_or_else(|| self.cold()).f;
        for _ in 0..FITTING_SWEEPS {
            let next: Vec<f64> = (0..m)
                .map(|u| self.log_prior[u] - lse_iter((0..m).map(|v| f[v] - lambda * self.sq[u][v])))
                .collect();
            // geometric mean of the two half-steps keeps the iterate symmetric
            f.iter_mut().zip(&next).for_each(|(a, b)| *a = 0.5 * (*a + b));
        }
        let (mut residual, mut dual, mut p) = self.residual_and_dual(&f, lambda);
        let mut iterations = 0;
        while residual > self.tol && iterations < MAX_ITERATIONS {
            iterations += 1;
            let rows: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
            let grad = nalgebra::DVector::from_fn(m, |u, _| rows[u] - self.log_prior[u].exp());
            let hess = nalgebra::DMatrix::from_fn(m, m, |u, v| p[u][v] + if u == v { rows[u] } else { 0.0 });
            let step = match hess.cholesky() {
                Some(c) => -c.solve(&grad),
                None => -grad.clone(),
            };
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = f.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
                let (r2, d2, p2) = self.residual_and_dual(&trial, lambda);
                if d2 <= dual + 1e-4 * t * slope || r2 < residual {
                    f = trial;
                    residual = r2;
                    dual = d2;
                    p = p2;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let log_joint: Vec<Vec<f64>> = (0..m)
            .map(|u| (0..m).map(|v| f[u] + f[v] - lambda * self.sq[u][v]).collect())
            .collect();
        let col_residual: f64 = (0..m)
            .map(|v| ((0..m).map(|u| log_joint[u][v].exp()).sum::<f64>() - self.log_prior[v].exp()).abs())
            .sum();
        let residual = residual.max(col_residual);
        if !(residual <= self.tol) {
            return Err(Error::NoConvergence { iterations, residual });
        }
        Ok(Solved {
            pot: Potentials { f },
            log_joint,
            residual,
        })
    }

    /// `(rate, distortion_sq)` of a solved coupling.
    fn stats(&self, s: &Solved) -> (f64, f64) {
        let m = self.m();
        let p: Vec<Vec<f64>> = s.log_joint.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        let row: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..m).map(|v| p.iter().map(|r| r[v]).sum()).collect();
        let mut rate = 0.0;
        let mut dist = 0.0;
        for u in 0..m {
            for v in 0..m {
                let puv = p[u][v];
                if puv > 0.0 {
                    rate += puv * (s.log_joint[u][v] - row[u].ln() - col[v].ln());
                    dist += puv * self.sq[u][v];
                }
            }
        }
        (rate.max(0.0), dist)
    }

    fn coupling(&self, s: &Solved) -> Coupling {
        let mut joint = vec![vec![0.0; self.n]; self.n];
        for (a, &u) in self.support.iter().enumerate() {
            for (b, &v) in self.support.iter().enumerate() {
                joint[u][v] = s.log_joint[a][b].exp();
            }
        }
        Coupling {
            joint,
            marginal_residual: s.residual,
        }
    }
}

/// Scale the Gibbs kernel `prior (x) prior * exp(-lambda d^2)` to have both
/// marginals equal to the prior. Zero-mass atoms get zero rows and columns.
pub fn gibbs_coupling(metric: &FiniteMetric, prior: &Prior, lambda: f64, tol: f64) -> Result<Coupling> {
    if !(lambda >= 0.0) {
        return Err(Error::BadParams(format!("lambda must be >= 0, got {lambda}")));
    }
    let problem = GibbsProblem::new(metric, prior, tol)?;
    let solved = problem.solve(lambda, None)?;
    Ok(problem.coupling(&solved))
}

/// Mutual information (against the coupling's own marginals) and mean squared
/// distortion.
pub fn coupling_stats(c: &Coupling, metric: &FiniteMetric) -> (f64, f64) {
    let row = c.row_marginal();
    let col = c.col_marginal();
    let mut rate = 0.0;
    let mut dist = 0.0;
    for (u, r) in c.joint.iter().enumerate() {
        for (v, &p) in r.iter().enumerate() {
            if p > 0.0 {
                rate += p * (p / (row[u] * col[v])).ln();
                dist += p * metric.d(u, v).powi(2);
            }
        }
    }
    (rate.max(0.0), dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub rate: f64,
    pub distortion_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub points: Vec<RdPoint>,
    pub entropy_cap: f64,
    /// Largest marginal residual over the traced couplings.
    pub max_residual: f64,
}

/// Solve at each `lambda` (sorted, starting at 0) and append the
/// `lambda = inf` identity endpoint.
pub fn pareto_trace(metric: &FiniteMetric, prior: &Prior, lambdas: &[f64]) -> Result<RdCurve> {
    pareto_trace_with_tol(metric, prior, lambdas, DEFAULT_TOL)
}

pub fn pareto_trace_with_tol(metric: &FiniteMetric, prior: &Prior, lambdas: &[f64], tol: f64) -> Result<RdCurve> {
    if lambdas.first().copied() != Some(0.0) || lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::BadParams("lambdas must be sorted and start at 0".into()));
    }
    let problem = GibbsProblem::new(metric, prior, tol)?;
    let entropy_cap = entropy(prior);
    let mut points = Vec::with_capacity(lambdas.len() + 1);
    let mut max_residual = 0.0f64;
    for &lambda in lambdas {
        let s = problem.solve(lambda, None)?;
        max_residual = max_residual.max(s.residual);
        let (rate, distortion_sq) = problem.stats(&s);
        points.push(RdPoint {
            lambda,
            rate: rate.min(entropy_cap),
            distortion_sq,
        });
    }
    points.push(RdPoint {
        lambda: f64::INFINITY,
        rate: entropy_cap,
        distortion_sq: 0.0,
    });
    let slack = 1e-12;
    for w in points.windows(2) {
        if w[1].rate < w[0].rate - slack || w[1].distortion_sq > w[0].distortion_sq + slack {
            return Err(Error::BadParams(format!(
                "trace not monotone between lambda {} and {}",
                w[0].lambda, w[1].lambda
            )));
        }
    }
    Ok(RdCurve {
        points,
        entropy_cap,
        max_residual,
    })
}

/// Find `lambda` with `target(lambda) = goal` for a function increasing in
/// `lambda`, by bracketing in `ln lambda` and Illinois regula falsi. Returns
/// the stats at the root.
fn solve_for_lambda<F>(problem: &GibbsProblem, goal: f64, rel_tol: f64, pick: F) -> Result<(f64, f64)>
where
    F: Fn((f64, f64)) -> f64,
{
    let eval = |lambda: f64, start: Option<&Potentials>| -> Result<((f64, f64), Potentials)> {
        let s = problem.solve(lambda, start)?;
        Ok((problem.stats(&s), s.pot))
    };
    let tol = rel_tol * goal.abs().max(1e-300);
    let mut lo_t = 0.0f64; // ln lambda
    let (mut lo_stats, mut pot) = eval(1.0, None)?;
    let mut lo_f = pick(lo_stats) - goal;
    if lo_f.abs() <= tol {
        return Ok(lo_stats);
    }
    // bracket
    let mut hi_t = lo_t;
    let mut hi_f = lo_f;
    let mut hi_stats = lo_stats;
    let step = if lo_f < 0.0 { 1.0 } else { -1.0 };
    for _ in 0..400 {
        hi_t += step * std::f64::consts::LN_2;
        let (st, p) = eval(hi_t.exp(), Some(&pot))?;
        pot = p;
        hi_stats = st;
        hi_f = pick(st) - goal;
        if hi_f.abs() <= tol {
            return Ok(st);
        }
        if hi_f.signum() != lo_f.signum() {
            break;
        }
        lo_t = hi_t;
        lo_f = hi_f;
        lo_stats = st;
    }
    if hi_f.signum() == lo_f.signum() {
        // goal not reachable at any finite multiplier; return the closer end
        return Ok(if hi_f.abs() < lo_f.abs() { hi_stats } else { lo_stats });
    }
    let (mut a_t, mut a_f, mut b_t, mut b_f) = (lo_t, lo_f, hi_t, hi_f);
    let mut best = if a_f.abs() < b_f.abs() { lo_stats } else { hi_stats };
    let mut side = 0i8;
    for _ in 0..200 {
        let t = (a_t * b_f - b_t * a_f) / (b_f - a_f);
        let t = if t.is_finite() && t > a_t.min(b_t) && t < a_t.max(b_t) {
            t
        } else {
            0.5 * (a_t + b_t)
        };
        let (st, p) = eval(t.exp(), Some(&pot))?;
        pot = p;
        let f = pick(st) - goal;
        best = st;
        if f.abs() <= tol || (b_t - a_t).abs() <= 1e-15 * t.abs().max(1.0) {
            break;
        }
        if f.signum() == a_f.signum() {
            a_t = t;
            a_f = f;
            if side == -1 {
                b_f *= 0.5;
            }
            side = -1;
        } else {
            b_t = t;
            b_f = f;
            if side == 1 {
                a_f *= 0.5;
            }
            side = 1;
        }
    }
    Ok(best)
}

/// `R(r) = inf { I(V; V') : V, V' ~ prior, E d(V, V')^2 <= r^2 }` in nats.
pub fn rate_at_distortion(metric: &FiniteMetric, prior: &Prior, r: f64) -> Result<f64> {
    rate_at_distortion_with_tol(metric, prior, r, DEFAULT_TOL)
}

pub fn rate_at_distortion_with_tol(metric: &FiniteMetric, prior: &Prior, r: f64, tol: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::BadParams(format!("distortion radius must be >= 0, got {r}")));
    }
    let problem = GibbsProblem::new(metric, prior, tol)?;
    let target = r * r;
    if target >= metric.mean_sq_dist(prior) || problem.m() <= 1 {
        return Ok(0.0);
    }
    let cap = entropy(prior);
    if r == 0.0 {
        return Ok(cap);
    }
    // distortion decreases in lambda, so track its negation
    let (rate, _) = solve_for_lambda(&problem, -target, 1e-10, |(_, d)| -d)?;
    Ok(rate.min(cap))
}

/// Root-mean-square distortion `D(A)` at rate budget `A` nats.
pub fn distortion_at_rate(metric: &FiniteMetric, prior: &Prior, a: f64) -> Result<f64> {
    distortion_at_rate_with_tol(metric, prior, a, DEFAULT_TOL)
}

pub fn distortion_at_rate_with_tol(metric: &FiniteMetric, prior: &Prior, a: f64, tol: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::BadParams(format!("rate must be >= 0, got {a}")));
    }
    let problem = GibbsProblem::new(metric, prior, tol)?;
    let cap = entropy(prior);
    if a >= cap || problem.m() <= 1 {
        return Ok(0.0);
    }
    if a == 0.0 {
        return Ok(metric.mean_sq_dist(prior).sqrt());
    }
    let (_, d) = solve_for_lambda(&problem, a, 1e-12, |(rate, _)| rate)?;
    Ok(d.max(0.0).sqrt())
}

fn check_quad<T>(value: T, error: f64, tol: f64) -> Result<T> {
    if error > 10.0 * tol {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: error,
        });
    }
    Ok(value)
}

/// `int_0^diam sqrt(R(r)) dr`; the integrand vanishes past
/// `r0 = sqrt(E_{prior x prior} d^2)`.
pub fn sqrt_rate_integral(metric: &FiniteMetric, prior: &Prior) -> Result<f64> {
    sqrt_rate_integral_with_tol(metric, prior, DEFAULT_TOL)
}

pub fn sqrt_rate_integral_with_tol(metric: &FiniteMetric, prior: &Prior, tol: f64) -> Result<f64> {
    if prior.support().len() <= 1 {
        return Ok(0.0);
    }
    let r0 = metric.mean_sq_dist(prior).sqrt();
    let mut failure = None;
    let q = integrate(
        |r| match rate_at_distortion_with_tol(metric, prior, r, tol) {
            Ok(v) => v.sqrt(),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        0.0,
        r0,
        INTEGRAL_TOL,
        0.0,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    check_quad(q.value, q.error, INTEGRAL_TOL)
}

/// `int_0^H D(A) / sqrt(A) dA`, computed as `2 int_0^sqrt(H) D(u^2) du`.
pub fn layer_cake_integral(metric: &FiniteMetric, prior: &Prior) -> Result<f64> {
    layer_cake_integral_with_tol(metric, prior, DEFAULT_TOL)
}

pub fn layer_cake_integral_with_tol(metric: &FiniteMetric, prior: &Prior, tol: f64) -> Result<f64> {
    let h = entropy(prior);
    if prior.support().len() <= 1 || h <= 0.0 {
        return Ok(0.0);
    }
    let mut failure = None;
    let q = integrate(
        |u| match distortion_at_rate_with_tol(metric, prior, u * u, tol) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        0.0,
        h.sqrt(),
        0.5 * INTEGRAL_TOL,
        0.0,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    check_quad(2.0 * q.value, 2.0 * q.error, INTEGRAL_TOL)
}

/// Self-coupled rate distortion of a two-point space at distance `d`.
///
/// Uniform prior (`p = 1/2`): `(ln 2 - H_b(min(r^2/d^2, 1/2)))_+`. Any other
/// `p` is minimized by brute force over the one free coordinate of the 2x2
/// coupling (step 1e-5).
pub fn two_point_rd_exact(d: f64, p: f64, r: f64) -> f64 {
    if d <= 0.0 || p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    if p == 0.5 {
        let q = (r * r / (d * d)).min(0.5);
        return (std::f64::consts::LN_2 - binary_entropy(q)).max(0.0);
    }
    // P = [[p - q, q], [q, 1 - p - q]], distortion 2 q d^2
    let q_max = p.min(1.0 - p);
    let marg = neg_xlogx(p) + neg_xlogx(1.0 - p);
    let steps = (q_max / 1e-5).ceil() as usize;
    let mut best = f64::INFINITY;
    for k in 0..=steps {
        let q = (k as f64 * 1e-5).min(q_max);
        if 2.0 * q * d * d > r * r {
            break;
        }
        let joint = neg_xlogx(p - q) + 2.0 * neg_xlogx(q) + neg_xlogx(1.0 - p - q);
        best = best.min(2.0 * marg - joint);
    }
    best.max(0.0)
}

/// Largest index set accepted by [`rate_at_distortion_brute_force`].
pub const BRUTE_FORCE_MAX_POINTS: usize = 3;

/// `R(r)` by direct search over couplings with both marginals equal to the
/// prior, parametrized by the upper-left `(n-1) x (n-1)` block.
///
/// The search runs on nested grids: a coarse sweep of the whole polytope,
/// then repeated sweeps of a shrinking box around the incumbent until the
/// grid step is at most `step`. Mutual information is convex on the polytope
/// and the constraint is linear, so the incumbent tracks the minimizer.
pub fn rate_at_distortion_brute_force(metric: &FiniteMetric, prior: &Prior, r: f64, step: f64) -> Result<f64> {
    let n = metric.len();
    if n > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::TooLarge {
            size: n,
            limit: BRUTE_FORCE_MAX_POINTS,
        });
    }
    if prior.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prior.len(),
        });
    }
    let target = r * r;
    if n <= 1 || target >= metric.mean_sq_dist(prior) {
        return Ok(0.0);
    }
    let w = prior.weights();
    let m = n - 1;
    let free = m * m;
    let hi: Vec<f64> = (0..free).map(|k| w[k / m].min(w[k % m])).collect();
    let objective = |x: &[f64]| -> Option<f64> {
        let mut p = vec![vec![0.0; n]; n];
        for i in 0..m {
            for j in 0..m {
                p[i][j] = x[i * m + j];
            }
        }
        for i in 0..m {
            p[i][m] = w[i] - (0..m).map(|j| p[i][j]).sum::<f64>();
            p[m][i] = w[i] - (0..m).map(|k| p[k][i]).sum::<f64>();
        }
        p[m][m] = w[m] - (0..m).map(|i| p[i][m]).sum::<f64>();
        let mut rate = 0.0;
        let mut dist = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = p[i][j];
                if v < -1e-15 {
                    return None;
                }
                if v > 0.0 {
                    rate += v * (v / (w[i] * w[j])).ln();
                    dist += v * metric.d(i, j).powi(2);
                }
            }
        }
        (dist <= target * (1.0 + 1e-12)).then_some(rate)
    };
    let mut lo_box = vec![0.0; free];
    let mut hi_box = hi.clone();
    let mut divisions = 20usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        let axes: Vec<Vec<f64>> = (0..free)
            .map(|k| {
                (0..=divisions)
                    .map(|t| {
                        if t == divisions {
                            hi_box[k]
                        } else {
                            lo_box[k] + (hi_box[k] - lo_box[k]) * t as f64 / divisions as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; free];
        let mut x = vec![0.0; free];
        loop {
            for k in 0..free {
                x[k] = axes[k][idx[k]];
            }
            if let Some(v) = objective(&x) {
                if best.as_ref().is_none_or(|b| v < b.0) {
                    best = Some((v, x.clone()));
                }
            }
            let mut k = 0;
            while k < free {
                idx[k] += 1;
                if idx[k] <= divisions {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == free {
                break;
            }
        }
        let h = (0..free)
            .map(|k| (hi_box[k] - lo_box[k]) / divisions as f64)
            .fold(0.0f64, f64::max);
        if h <= step {
            break;
        }
        let centre = best.as_ref().map(|b| b.1.clone()).ok_or_else(|| Error::BadParams("no feasible coupling".into()))?;
        for k in 0..free {
            lo_box[k] = (centre[k] - 2.0 * h).max(0.0);
            hi_box[k] = (centre[k] + 2.0 * h).min(hi[k]);
        }
        divisions = 16;
    }
    best.map(|b| b.0.max(0.0)).ok_or_else(|| Error::BadParams("no feasible coupling".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(d: f64) -> FiniteMetric {
        FiniteMetric::from_distances(vec![vec![0.0, d], vec![d, 0.0]]).unwrap()
    }

    fn triangle(a: f64, b: f64, c: f64) -> FiniteMetric {
        FiniteMetric::from_distances(vec![vec![0.0, a, b], vec![a, 0.0, c], vec![b, c, 0.0]]).unwrap()
    }

    #[test]
    fn zero_lambda_gives_product() {
        let p = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let c = gibbs_coupling(&triangle(1.0, 0.7, 0.4), &p, 0.0, DEFAULT_TOL).unwrap();
        let prod = Coupling::product(&p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.joint[i][j] - prod.joint[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_point_lambda_one() {
        let c = gibbs_coupling(&two_point(1.0), &Prior::uniform(2), 1.0, DEFAULT_TOL).unwrap();
        let off = c.joint[0][1] + c.joint[1][0];
        assert!((off - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
        assert!(c.marginal_residual <= 1e-10);
        let (rate, dist) = coupling_stats(&c, &two_point(1.0));
        assert!((dist - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((rate - (std::f64::consts::LN_2 - binary_entropy(0.268_941_421_369_995_1))).abs() < 1e-12);
        assert!((rate - 0.110_944_071_671_727_37).abs() < 1e-10);
    }

    #[test]
    fn huge_lambda_is_identity() {
        let p = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let c = gibbs_coupling(&triangle(1.0, 0.7, 0.4), &p, 1e6, DEFAULT_TOL).unwrap();
        let id = Coupling::identity(&p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.joint[i][j] - id.joint[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stats_of_extreme_couplings() {
        let m = triangle(1.0, 0.7, 0.4);
        let p = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let (r, d) = coupling_stats(&Coupling::product(&p), &m);
        assert!(r.abs() < 1e-15);
        assert!((d - m.mean_sq_dist(&p)).abs() < 1e-15);
        let (r, d) = coupling_stats(&Coupling::identity(&p), &m);
        assert!((r - entropy(&p)).abs() < 1e-15);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn zero_mass_atoms_are_dropped() {
        let p = Prior::new(vec![0.5, 0.0, 0.5]).unwrap();
        let c = gibbs_coupling(&triangle(1.0, 1.0, 1.0), &p, 1.0, DEFAULT_TOL).unwrap();
        assert!(c.joint[1].iter().all(|&v| v == 0.0));
        assert!((c.joint[0][2] - 0.5 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn trace_end_points() {
        let m = two_point(1.0);
        let p = Prior::uniform(2);
        let t = pareto_trace(&m, &p, &[0.0, 0.5, 1.0, 4.0, 16.0]).unwrap();
        assert!(t.points[0].rate.abs() < 1e-15);
        assert!((t.points[0].distortion_sq - 0.5).abs() < 1e-15);
        let last = t.points.last().unwrap();
        assert_eq!(last.lambda, f64::INFINITY);
        assert_eq!((last.rate, last.distortion_sq), (std::f64::consts::LN_2, 0.0));
        for pt in &t.points[..t.points.len() - 1] {
            let exact = two_point_rd_exact(1.0, 0.5, pt.distortion_sq.sqrt());
            assert!((pt.rate - exact).abs() < 1e-8);
        }
        assert!(pareto_trace(&m, &p, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn rate_examples() {
        let m = two_point(1.0);
        let p = Prior::uniform(2);
        assert_eq!(rate_at_distortion(&m, &p, 0.8).unwrap(), 0.0);
        assert!((rate_at_distortion(&m, &p, 0.5).unwrap() - 0.130_812_035_941_137).abs() < 1e-9);
        assert!((rate_at_distortion(&m, &p, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn distortion_examples() {
        let m = two_point(1.0);
        let p = Prior::uniform(2);
        assert_eq!(distortion_at_rate(&m, &p, 1.0).unwrap(), 0.0);
        assert!((distortion_at_rate(&m, &p, 0.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let d = distortion_at_rate(&m, &p, 0.130_812_035_941_137).unwrap();
        assert!((d - 0.5).abs() < 1e-7);
        let tri = triangle(1.0, 0.7, 0.4);
        let q = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(distortion_at_rate(&tri, &q, 0.1).unwrap() >= distortion_at_rate(&tri, &q, 0.3).unwrap());
    }

    #[test]
    fn monotone_on_grids() {
        let m = triangle(1.0, 0.7, 0.4);
        let p = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        let r0 = m.mean_sq_dist(&p).sqrt();
        let rates: Vec<f64> = (0..20).map(|i| rate_at_distortion(&m, &p, r0 * i as f64 / 19.0).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let h = entropy(&p);
        let dists: Vec<f64> = (0..20).map(|i| distortion_at_rate(&m, &p, h * i as f64 / 19.0).unwrap()).collect();
        assert!(dists.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn integrals_two_point() {
        let m = two_point(1.0);
        let p = Prior::uniform(2);
        // scipy quad of sqrt(ln 2 - H_b(r^2)) on [0, 1/sqrt 2]
        let s = sqrt_rate_integral(&m, &p).unwrap();
        assert!((s - 0.365_235_755_798_390_6).abs() < 1e-4);
        let l = layer_cake_integral(&m, &p).unwrap();
        assert!((l - 2.0 * s).abs() < 2e-3);
        assert_eq!(sqrt_rate_integral(&m, &Prior::point_mass(2, 0)).unwrap(), 0.0);
        assert_eq!(layer_cake_integral(&m, &Prior::point_mass(2, 1)).unwrap(), 0.0);
    }

    #[test]
    fn two_point_closed_form() {
        assert!((two_point_rd_exact(1.0, 0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((two_point_rd_exact(1.0, 0.5, 0.5) - 0.130_812_035_941_137).abs() < 1e-12);
        assert_eq!(two_point_rd_exact(1.0, 0.5, 1.0), 0.0);
    }

    #[test]
    fn solver_matches_brute_force_for_skewed_two_point() {
        let m = two_point(1.3);
        let p = Prior::new(vec![0.3, 0.7]).unwrap();
        for &r in &[0.1, 0.3, 0.5, 0.7] {
            let a = rate_at_distortion(&m, &p, r).unwrap();
            let b = two_point_rd_exact(1.3, 0.3, r);
            assert!((a - b).abs() < 1e-3, "r={r}: {a} vs {b}");
        }
    }

    #[test]
    fn solver_matches_brute_force_on_triangle() {
        let m = triangle(1.0, 0.7, 0.4);
        let p = Prior::new(vec![0.2, 0.3, 0.5]).unwrap();
        for &r in &[0.0, 0.15, 0.3, 0.45] {
            let a = rate_at_distortion(&m, &p, r).unwrap();
            let b = rate_at_distortion_brute_force(&m, &p, r, 1e-4).unwrap();
            assert!(b >= a - 1e-9, "brute force below the solver at r={r}: {b} < {a}");
            assert!((a - b).abs() < 1e-3, "r={r}: {a} vs {b}");
        }
    }

    #[test]
    fn brute_force_limits() {
        assert!(matches!(
            rate_at_distortion_brute_force(&FiniteMetric::from_distances(vec![vec![0.0; 4]; 4]).unwrap(), &Prior::uniform(4), 0.1, 1e-4),
            Err(Error::TooLarge { .. })
        ));
        let b = rate_at_distortion_brute_force(&two_point(1.0), &Prior::uniform(2), 0.5, 1e-5).unwrap();
        assert!((b - 0.130_812_035_941_137).abs() < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn metric_and_prior() -> impl Strategy<Value = (FiniteMetric, Prior)> {
            (2usize..5).prop_flat_map(|n| {
                (
                    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), n),
                    prop::collection::vec(0.05f64..1.0, n),
                )
                    .prop_map(|(pts, w)| {
                        let n = pts.len();
                        let dist = (0..n)
                            .map(|i| (0..n).map(|j| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt()).collect())
                            .collect();
                        (FiniteMetric::from_distances(dist).unwrap(), Prior::normalized(w).unwrap())
                    })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn couplings_meet_marginal_contract((m, p) in metric_and_prior(), lambda in 0.0f64..200.0) {
                let c = gibbs_coupling(&m, &p, lambda, DEFAULT_TOL).unwrap();
                prop_assert!(c.marginal_residual <= DEFAULT_TOL);
                let total: f64 = c.joint.iter().flatten().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn rate_is_nonincreasing_in_r((m, p) in metric_and_prior()) {
                let mut last = f64::INFINITY;
                for k in 0..=8 {
                    let r = m.diam() * k as f64 / 8.0;
                    let v = rate_at_distortion(&m, &p, r).unwrap();
                    prop_assert!(v <= last + 1e-9);
                    prop_assert!(v <= entropy(&p) + 1e-9);
                    last = v;
                }
            }
        }
    }
}
