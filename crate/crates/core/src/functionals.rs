//! Majorizing-measure functional `M(T, d)`, exact partition `gamma_2` for
//! tiny spaces, the Gibbs potential `psi` and the penalized step functional.

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{derive_seed, sample_rng};
use crate::process::{FiniteMetric, Prior};
use crate::special::log_sum_exp;

pub const DEFAULT_FLOOR: f64 = 1e-8;
/// Largest index set accepted by [`gamma2_part_exact`].
pub const GAMMA2_MAX_POINTS: usize = 8;

/// Probability measure on `T` with a lower bound on atoms used while
/// optimizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureOnT {
    pub weights: Vec<f64>,
    pub floor: f64,
}

impl MeasureOnT {
    pub fn new(weights: Vec<f64>, floor: f64) -> Result<Self> {
        let p = Prior::new(weights)?;
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::BadParams(format!("floor {floor} outside [0, 1)")));
        }
        Ok(MeasureOnT {
            weights: p.weights().to_vec(),
            floor,
        })
    }

    pub fn uniform(n: usize) -> Self {
        MeasureOnT {
            weights: vec![1.0 / n as f64; n],
            floor: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl From<&Prior> for MeasureOnT {
    fn from(p: &Prior) -> Self {
        MeasureOnT {
            weights: p.weights().to_vec(),
            floor: 0.0,
        }
    }
}

/// Ball profile around `t`: segments `[r_j, r_{j+1})` of `[0, diam)` with the
/// mass of the closed ball `B(t, r_j)`.
fn ball_segments(metric: &FiniteMetric, weights: &[f64], t: usize) -> Vec<(f64, f64, f64)> {
    let n = metric.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| metric.d(t, a).total_cmp(&metric.d(t, b)).then(a.cmp(&b)));
    let diam = metric.diam();
    let mut segs = Vec::new();
    let mut mass = 0.0;
    let mut k = 0;
    while k < n {
        let r = metric.d(t, order[k]);
        while k < n && metric.d(t, order[k]) <= r {
            mass += weights[order[k]];
            k += 1;
        }
        let next = if k < n { metric.d(t, order[k]) } else { diam };
        let end = next.min(diam);
        if end > r {
            segs.push((r, end, mass));
        }
    }
    segs
}

fn profile_integral(segs: &[(f64, f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for &(a, b, m) in segs {
        if m <= 0.0 {
            return f64::INFINITY;
        }
        if m < 1.0 {
            acc += (b - a) * (-m.ln()).sqrt();
        }
    }
    acc
}

/// `sup_t int_0^diam sqrt(ln 1/mu(B(t, r))) dr`, summed exactly over the
/// steps of each ball profile. `+inf` when some ball of positive radius range
/// carries no mass.
pub fn ft_value(metric: &FiniteMetric, mu: &MeasureOnT) -> f64 {
    (0..metric.len())
        .map(|t| profile_integral(&ball_segments(metric, &mu.weights, t)))
        .fold(0.0, f64::max)
}

/// Per-point integrals and the gradient of the integral at the first
/// maximizing point.
fn ft_value_and_subgradient(metric: &FiniteMetric, w: &[f64]) -> (f64, Vec<f64>) {
    let n = metric.len();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 0..n {
        let v = profile_integral(&ball_segments(metric, w, t));
        if v > best.0 {
            best = (v, t);
        }
    }
    let t = best.1;
    let mut grad = vec![0.0; n];
    for (a, b, m) in ball_segments(metric, w, t) {
        if m <= 0.0 || m >= 1.0 {
            continue;
        }
        let slope = -(b - a) / (2.0 * m * (-m.ln()).sqrt());
        for (u, g) in grad.iter_mut().enumerate() {
            if metric.d(t, u) <= a {
                *g += slope;
            }
        }
    }
    (best.0, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FtBudget {
    pub restarts: usize,
    pub iterations: usize,
    pub step: f64,
    pub floor: f64,
}

impl Default for FtBudget {
    fn default() -> Self {
        FtBudget {
            restarts: 8,
            iterations: 2000,
            step: 0.5,
            floor: DEFAULT_FLOOR,
        }
    }
}

fn apply_floor(w: &mut [f64], floor: f64) {
    for x in w.iter_mut() {
        *x = x.max(floor);
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
}

/// Starting point of a restart: uniform for restart 0, otherwise a flat
/// Dirichlet draw.
pub(crate) fn restart_start(n: usize, seed: u64, restart: usize) -> Vec<f64> {
    if restart == 0 {
        return vec![1.0 / n as f64; n];
    }
    let mut rng = sample_rng(seed, restart as u64);
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn ft_restart(metric: &FiniteMetric, budget: &FtBudget, seed: u64, restart: usize) -> (f64, Vec<f64>) {
    let n = metric.len();
    let mut w = restart_start(n, seed, restart);
    apply_floor(&mut w, budget.floor);
    let mut avg = w.clone();
    let mut best = (f64::INFINITY, w.clone());
    for k in 0..budget.iterations {
        let (v, g) = ft_value_and_subgradient(metric, &w);
        if v < best.0 {
            best = (v, w.clone());
        }
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            break;
        }
        let eta = budget.step / ((k + 1) as f64).sqrt() / scale;
        let logs: Vec<f64> = w.iter().zip(&g).map(|(x, gi)| x.ln() - eta * gi).collect();
        let z = log_sum_exp(&logs);
        w = logs.iter().map(|l| (l - z).exp()).collect();
        apply_floor(&mut w, budget.floor);
        let k1 = (k + 2) as f64;
        avg.iter_mut().zip(&w).for_each(|(a, x)| *a += (x - *a) / k1);
        let va = ft_value(metric, &MeasureOnT { weights: avg.clone(), floor: 0.0 });
        if va < best.0 {
            best = (va, avg.clone());
        }
    }
    best
}

/// Multi-start exponentiated subgradient descent on `ft_value`. The returned
/// value is `ft_value` of the returned measure, an upper bound on `M(T, d)`.
pub fn ft_optimize(metric: &FiniteMetric, budget: &FtBudget, seed: u64) -> (MeasureOnT, f64) {
    let n = metric.len();
    if n <= 1 {
        let m = MeasureOnT::uniform(n.max(1));
        return (m, 0.0);
    }
    let seed = derive_seed(seed, "ft_optimize");
    let runs: Vec<(f64, Vec<f64>)> = (0..budget.restarts.max(1))
        .into_par_iter()
        .map(|r| ft_restart(metric, budget, seed, r))
        .collect();
    let (_, w) = runs
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one restart");
    let mu = MeasureOnT {
        weights: w,
        floor: budget.floor,
    };
    let v = ft_value(metric, &mu);
    (mu, v)
}

/// Set partitions of `0..n` into at most `k` cells, as restricted growth
/// strings.
fn partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, k: usize, used: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        let limit = (used + 1).min(k);
        for c in 0..limit {
            cur.push(c);
            rec(i + 1, n, k, used.max(c + 1), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(0, n, k, 0, &mut Vec::new(), &mut out);
    }
    out
}

fn cell_cap(level: usize, level0_cap: usize) -> usize {
    if level == 0 {
        level0_cap
    } else if level >= 6 {
        usize::MAX
    } else {
        1usize << (1usize << level)
    }
}

/// Exact `min sup_t sum_n 2^{n/2} diam(A_n(t))` over sequences of partitions
/// with `|A_n| <= N_n`, `N_n = 2^{2^n}` for `n >= 1` and `N_0 = level0_cap`.
pub fn gamma2_part_exact(metric: &FiniteMetric, level0_cap: usize) -> Result<f64> {
    let n = metric.len();
    if n > GAMMA2_MAX_POINTS {
        return Err(Error::TooLarge {
            size: n,
            limit: GAMMA2_MAX_POINTS,
        });
    }
    if level0_cap == 0 {
        return Err(Error::BadParams("level-0 cap must be at least 1".into()));
    }
    // per level, the per-point contribution vector of each admissible partition
    let mut levels: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut level = 0;
    while cell_cap(level, level0_cap) < n {
        let weight = 2f64.powf(level as f64 / 2.0);
        let options = partitions(n, cell_cap(level, level0_cap))
            .into_iter()
            .map(|labels| {
                let cells = labels.iter().max().map_or(0, |m| m + 1);
                let mut diam = vec![0.0f64; cells];
                for s in 0..n {
                    for t in 0..s {
                        if labels[s] == labels[t] {
                            diam[labels[s]] = diam[labels[s]].max(metric.d(s, t));
                        }
                    }
                }
                labels.iter().map(|&c| weight * diam[c]).collect()
            })
            .collect();
        levels.push(options);
        level += 1;
    }
    if levels.is_empty() {
        return Ok(0.0);
    }
    fn search(levels: &[Vec<Vec<f64>>], acc: &[f64], best: &mut f64) {
        let cur = acc.iter().fold(0.0f64, |m, x| m.max(*x));
        if cur >= *best {
            return;
        }
        match levels.split_first() {
            None => *best = cur,
            Some((first, rest)) => {
                for opt in first {
                    let next: Vec<f64> = acc.iter().zip(opt).map(|(a, b)| a + b).collect();
                    search(rest, &next, best);
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    search(&levels, &vec![0.0; n], &mut best);
    Ok(best)
}

/// `-ln sum_y mu(y) exp(-d(x, y)^2 / alpha^2)`.
pub fn psi_gibbs(metric: &FiniteMetric, mu: &MeasureOnT, x: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::BadParams(format!("alpha must be positive, got {alpha}")));
    }
    let terms: Vec<f64> = mu
        .weights
        .iter()
        .enumerate()
        .map(|(y, &w)| w.ln() - (metric.d(x, y) / alpha).powi(2))
        .collect();
    Ok(-log_sum_exp(&terms))
}

/// Right-continuous nonincreasing step function on `[0, end]`, equal to
/// `values[j]` on `[breaks[j], breaks[j+1])` and to 0 from the last break
/// (or `end`) on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    breaks: Vec<f64>,
    values: Vec<f64>,
    end: f64,
}

impl StepFunction {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>, end: f64) -> Result<Self> {
        if breaks.len() != values.len() {
            return Err(Error::MalformedStep(format!(
                "{} breakpoints but {} values",
                breaks.len(),
                values.len()
            )));
        }
        if !(end.is_finite() && end >= 0.0) {
            return Err(Error::MalformedStep(format!("bad end point {end}")));
        }
        if let Some(&b0) = breaks.first() {
            if b0 != 0.0 {
                return Err(Error::MalformedStep("first breakpoint must be 0".into()));
            }
        }
        for w in breaks.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::MalformedStep("breakpoints not strictly increasing".into()));
            }
        }
        if breaks.last().is_some_and(|&b| b >= end) {
            return Err(Error::MalformedStep("breakpoint at or beyond the end".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::MalformedStep("values must be finite and nonnegative".into()));
        }
        for w in values.windows(2) {
            if w[1] > w[0] {
                return Err(Error::MalformedStep("values not nonincreasing".into()));
            }
        }
        Ok(StepFunction { breaks, values, end })
    }

    pub fn zero(end: f64) -> Self {
        StepFunction {
            breaks: Vec::new(),
            values: Vec::new(),
            end,
        }
    }

    /// `r -> sqrt(ln 1/mu(B(t, r)))` on `[0, diam]`.
    pub fn ball_profile(metric: &FiniteMetric, mu: &MeasureOnT, t: usize) -> Result<Self> {
        let segs = ball_segments(metric, &mu.weights, t);
        let mut breaks = Vec::new();
        let mut values = Vec::new();
        for (a, _, m) in segs {
            if m <= 0.0 {
                return Err(Error::MalformedStep(format!("empty ball at radius {a}")));
            }
            breaks.push(a);
            values.push(if m < 1.0 { (-m.ln()).sqrt() } else { 0.0 });
        }
        StepFunction::new(breaks, values, metric.diam())
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    /// `int_0^end y(r) dr`.
    pub fn integral(&self) -> f64 {
        (0..self.breaks.len())
            .map(|j| {
                let b = self.breaks.get(j + 1).copied().unwrap_or(self.end);
                (b - self.breaks[j]) * self.values[j]
            })
            .sum()
    }
}

/// `int_0^inf min_r (r^2 / alpha^2 + y(r)^2) d alpha`.
///
/// The inner minimum is attained at a breakpoint or at `end`, so as a
/// function of `x = 1/alpha^2` it is the lower envelope of lines
/// `b_j + a_j x`. Each envelope piece integrates in closed form.
pub fn penalized_functional(y: &StepFunction) -> Result<f64> {
    let mut lines: Vec<(f64, f64)> = y
        .breaks
        .iter()
        .zip(&y.values)
        .map(|(r, v)| (r * r, v * v))
        .collect();
    lines.push((y.end * y.end, 0.0));
    if y.breaks.is_empty() {
        lines.push((0.0, 0.0));
    }
    if lines.iter().any(|&(a, b)| a == 0.0 && b == 0.0) {
        return Ok(0.0);
    }
    let mut xs: Vec<f64> = Vec::new();
    for i in 0..lines.len() {
        for j in 0..i {
            let (ai, bi) = lines[i];
            let (aj, bj) = lines[j];
            if ai != aj {
                let x = (bi - bj) / (aj - ai);
                if x > 0.0 && x.is_finite() {
                    xs.push(x);
                }
            }
        }
    }
    // alpha breakpoints in increasing order
    let mut alphas: Vec<f64> = xs.iter().map(|x| 1.0 / x.sqrt()).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let envelope_at = |x: f64| {
        lines
            .iter()
            .copied()
            .min_by(|p, q| (p.1 + p.0 * x).total_cmp(&(q.1 + q.0 * x)))
            .expect("nonempty")
    };
    let lex_min = |key: fn(&(f64, f64)) -> (f64, f64)| {
        lines
            .iter()
            .copied()
            .min_by(|p, q| {
                let (k1, k2) = (key(p), key(q));
                k1.0.total_cmp(&k2.0).then(k1.1.total_cmp(&k2.1))
            })
            .expect("nonempty")
    };
    let piece = |(a, b): (f64, f64), lo: f64, hi: f64| -> f64 {
        let inv = |t: f64| if t == 0.0 { f64::INFINITY } else { 1.0 / t };
        let lin = if b == 0.0 { 0.0 } else { b * (hi - lo) };
        let quad = if a == 0.0 { 0.0 } else { a * (inv(lo) - inv(hi)) };
        lin + quad
    };
    if alphas.is_empty() {
        // one line dominates everywhere; finite only if it is zero
        let (a, b) = envelope_at(1.0);
        return Ok(if a == 0.0 && b == 0.0 { 0.0 } else { f64::INFINITY });
    }
    let mut total = piece(lex_min(|p| (p.0, p.1)), 0.0, alphas[0]);
    for w in alphas.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        total += piece(envelope_at(1.0 / (mid * mid)), w[0], w[1]);
    }
    total += piece(lex_min(|p| (p.1, p.0)), *alphas.last().expect("nonempty"), f64::INFINITY);
    Ok(total)
}
