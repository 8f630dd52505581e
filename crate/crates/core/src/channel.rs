//! Gaussian additive model `Y_s = s h_X + Z` with `X ~ prior`.
//!
//! All curve producers share one sampling kernel: sample `i` draws `X`, the
//! noise `Z` and one resampling uniform per grid point from stream `(seed, i)`
//! and reuses them at every SNR. Curves produced with the same seed therefore
//! use common random numbers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{sample_moments, sample_rng, Moments};
use crate::process::{metric_of, EmbeddedProcess, FiniteMetric, Prior};
use crate::quad::{integrate, integrate_with_breaks, trapezoid};
use crate::special::{ln_cosh, normal_pdf, normal_pdf_inverse_tail, sech_sq};

/// Tail mass allowed beyond the truncation point, relative to the diameter.
pub const TAIL_LEVEL: f64 = 1e-6;
pub const DEFAULT_GRID_POINTS: usize = 64;

/// Data for the union-bound decay of the MLE error:
/// `MSE_s <= (n-1) diam^2 Q(s d_min / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCertificate {
    pub n: usize,
    pub diam: f64,
    pub d_min: f64,
}

impl DecayCertificate {
    pub fn from_metric(m: &FiniteMetric) -> Self {
        DecayCertificate {
            n: m.len(),
            diam: m.diam(),
            d_min: m.d_min(),
        }
    }

    fn trivial(&self) -> bool {
        self.n <= 1 || self.diam <= 0.0
    }

    /// Bound on `int_s^inf MSE_u du`, using `int_a^inf Q <= phi(a)`.
    pub fn tail_bound(&self, s: f64) -> f64 {
        if self.trivial() {
            return 0.0;
        }
        (self.n - 1) as f64 * self.diam * self.diam * (2.0 / self.d_min) * normal_pdf(s * self.d_min / 2.0)
    }

    /// Smallest SNR whose tail bound is at most `1e-6 * diam`.
    pub fn s_max(&self) -> f64 {
        if self.trivial() {
            return 0.0;
        }
        let level = TAIL_LEVEL * self.d_min / (2.0 * (self.n - 1) as f64 * self.diam);
        2.0 * normal_pdf_inverse_tail(level) / self.d_min
    }
}

/// SNR grid: `0`, then `points` values ending at the certified truncation
/// point. The first half is linear up to the knee `4 / diam`, the rest is
/// geometric out to `s_max`.
pub fn snr_grid(cert: &DecayCertificate, points: usize) -> Vec<f64> {
    let points = points.max(2);
    let s_max = cert.s_max();
    if s_max <= 0.0 {
        return (0..=points).map(|k| k as f64).collect();
    }
    let knee = (4.0 / cert.diam).min(s_max);
    let linear = if knee < s_max { points / 2 } else { points };
    let mut grid = Vec::with_capacity(points + 1);
    grid.push(0.0);
    for k in 1..=linear {
        grid.push(knee * k as f64 / linear as f64);
    }
    let geometric = points - linear;
    let ratio = (s_max / knee).powf(1.0 / geometric.max(1) as f64);
    for k in 1..=geometric {
        grid.push(knee * ratio.powi(k as i32));
    }
    if let Some(last) = grid.last_mut() {
        *last = last.max(s_max);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub x_index: usize,
    pub y: Vec<f64>,
    pub noise: Vec<f64>,
    pub s: f64,
}

fn draw_signal_and_noise<R: Rng>(rng: &mut R, prior: &Prior, dim: usize) -> (usize, Vec<f64>) {
    let u: f64 = rng.random();
    let x = prior.sample_index(u);
    let z = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    (x, z)
}

pub fn sample_observation(emb: &EmbeddedProcess, prior: &Prior, s: f64, seed: u64) -> Result<ChannelSample> {
    check_prior(emb, prior)?;
    let mut rng = sample_rng(seed, 0);
    let (x, z) = draw_signal_and_noise(&mut rng, prior, emb.dim());
    let h = emb.point(x);
    let y = z.iter().zip(&h).map(|(zi, hi)| s * hi + zi).collect();
    Ok(ChannelSample {
        x_index: x,
        y,
        noise: z,
        s,
    })
}

fn check_prior(emb: &EmbeddedProcess, prior: &Prior) -> Result<()> {
    if prior.len() != emb.len() {
        return Err(Error::DimensionMismatch {
            expected: emb.len(),
            got: prior.len(),
        });
    }
    Ok(())
}

fn argmax_lowest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (u, v) in scores.enumerate() {
        if v > best {
            best = v;
            arg = u;
        }
    }
    arg
}

/// `argmax_u <y, h_u> - (s/2) ||h_u||^2`, ties to the lowest index.
pub fn mle_point(emb: &EmbeddedProcess, y: &[f64], s: f64) -> usize {
    let proj = emb.project(y);
    let g = emb.gram();
    argmax_lowest((0..emb.len()).map(|u| proj[u] - 0.5 * s * g[(u, u)]))
}

fn normalize_log_weights(logw: &mut [f64]) {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logw.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logw.iter_mut().for_each(|v| *v /= sum);
}

/// Posterior law of `X` given `Y_s = y`.
pub fn posterior_weights(emb: &EmbeddedProcess, prior: &Prior, y: &[f64], s: f64) -> Result<Vec<f64>> {
    check_prior(emb, prior)?;
    let proj = emb.project(y);
    let g = emb.gram();
    let mut logw: Vec<f64> = (0..emb.len())
        .map(|u| {
            let p = prior.weights()[u];
            if p > 0.0 {
                p.ln() + s * proj[u] - 0.5 * s * s * g[(u, u)]
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    normalize_log_weights(&mut logw);
    Ok(logw)
}

/// Sampled function of the SNR with per-point standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Certified bound on the integral beyond the last grid point.
    pub tail_bound: f64,
    /// Standard error of the trapezoid area, when the producer tracked it
    /// per sample.
    pub area_stderr: Option<f64>,
}

impl SnrCurve {
    fn from_moments(grid: &[f64], m: &[Moments], tail_bound: f64, area: Option<&Moments>) -> Self {
        SnrCurve {
            grid: grid.to_vec(),
            values: m.iter().map(|x| x.mean).collect(),
            stderrs: m.iter().map(|x| x.stderr()).collect(),
            tail_bound,
            area_stderr: area.map(|a| a.stderr()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid.len() != self.values.len() || self.grid.len() != self.stderrs.len() {
            return Err(Error::BadParams("curve columns differ in length".into()));
        }
        if self.grid.first().copied() != Some(0.0) {
            return Err(Error::BadParams("SNR grid must start at 0".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BadParams("SNR grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// The family of curves produced from one set of common random numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCurves {
    pub mse_mle: SnrCurve,
    pub mmse: SnrCurve,
    pub mutual_info: SnrCurve,
    /// Squared error of a posterior resample.
    pub resample_mse: SnrCurve,
    /// Per-sample `MSE_MLE - MMSE`.
    pub mle_excess: SnrCurve,
    /// Per-sample central difference `(I(s_{k+1}) - I(s_{k-1})) / (s_{k+1} - s_{k-1})`
    /// (zero at the two end points).
    pub mi_slope: SnrCurve,
    pub samples: usize,
    pub seed: u64,
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.first().copied() != Some(0.0) {
        return Err(Error::BadParams("SNR grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::BadParams("SNR grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Trapezoid weights `w` with `sum_k w_k f_k` equal to the trapezoid rule.
fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let k = grid.len();
    let mut w = vec![0.0; k];
    for i in 0..k.saturating_sub(1) {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Run the shared kernel and return every curve.
pub fn channel_curves(
    emb: &EmbeddedProcess,
    prior: &Prior,
    grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ChannelCurves> {
    check_prior(emb, prior)?;
    validate_grid(grid)?;
    let samples = samples.max(2);
    let n = emb.len();
    let dim = emb.dim();
    let k = grid.len();
    let g = emb.gram();
    let metric = metric_of(emb);
    let sq: Vec<Vec<f64>> = metric.rows().iter().map(|r| r.iter().map(|d| d * d).collect()).collect();
    let log_prior: Vec<f64> = prior
        .weights()
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let tw = trapezoid_weights(grid);

    // output layout: 6 curves of width k, then the two areas
    let width = 6 * k + 2;
    let m = sample_moments(samples, width, |i, out| {
        let mut rng = sample_rng(seed, i);
        let (x, z) = draw_signal_and_noise(&mut rng, prior, dim);
        let resample_u: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let zh = emb.project(&z);
        let mut logw = vec![0.0; n];
        let mut mi_row = vec![0.0; k];
        let (mut area_mle, mut area_mmse) = (0.0, 0.0);
        for (j, &s) in grid.iter().enumerate() {
            // MLE in terms of noise projections: <y,h_u> = s G(x,u) + <z,h_u>
            let u_hat = argmax_lowest((0..n).map(|u| s * g[(x, u)] + zh[u] - 0.5 * s * g[(u, u)]));
            let mse = sq[x][u_hat];

            for u in 0..n {
                logw[u] = log_prior[u] + s * (s * g[(x, u)] + zh[u]) - 0.5 * s * s * g[(u, u)];
            }
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in logw.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            // ln p(y|x) - ln p(y) = -ln sum_u prior(u) exp(-s<z, h_x - h_u> - s^2 d(x,u)^2 / 2)
            let mi = if s == 0.0 {
                0.0
            } else {
                let terms = (0..n).map(|u| log_prior[u] - s * (zh[x] - zh[u]) - 0.5 * s * s * sq[x][u]);
                let tmax = terms.clone().fold(f64::NEG_INFINITY, f64::max);
                -(tmax + terms.map(|t| (t - tmax).exp()).sum::<f64>().ln())
            };
            logw.iter_mut().for_each(|v| *v /= total);

            // ||h_x - sum_u w_u h_u||^2 via the Gram matrix
            let mut cross = 0.0;
            let mut quad = 0.0;
            for u in 0..n {
                if logw[u] == 0.0 {
                    continue;
                }
                cross += logw[u] * g[(x, u)];
                let mut row = 0.0;
                for v in 0..n {
                    row += logw[v] * g[(u, v)];
                }
                quad += logw[u] * row;
            }
            let mmse = (g[(x, x)] - 2.0 * cross + quad).max(0.0);

            let mut cum = 0.0;
            let mut v_hat = n - 1;
            for (u, &w) in logw.iter().enumerate() {
                cum += w;
                if resample_u[j] < cum && w > 0.0 {
                    v_hat = u;
                    break;
                }
            }
            if logw[v_hat] == 0.0 {
                v_hat = (0..n).rev().find(|&u| logw[u] > 0.0).unwrap_or(x);
            }

            out[j] = mse;
            out[k + j] = mmse;
            out[2 * k + j] = mi;
            out[3 * k + j] = sq[x][v_hat];
            out[4 * k + j] = mse - mmse;
            mi_row[j] = mi;
            area_mle += tw[j] * mse;
            area_mmse += tw[j] * mmse;
        }
        for j in 1..k.saturating_sub(1) {
            out[5 * k + j] = (mi_row[j + 1] - mi_row[j - 1]) / (grid[j + 1] - grid[j - 1]);
        }
        out[6 * k] = area_mle;
        out[6 * k + 1] = area_mmse;
    });

    let cert = DecayCertificate::from_metric(&metric);
    let tail = cert.tail_bound(*grid.last().unwrap_or(&0.0));
    let slice = |c: usize| &m[c * k..(c + 1) * k];
    Ok(ChannelCurves {
        mse_mle: SnrCurve::from_moments(grid, slice(0), tail, Some(&m[6 * k])),
        mmse: SnrCurve::from_moments(grid, slice(1), tail, Some(&m[6 * k + 1])),
        mutual_info: SnrCurve::from_moments(grid, slice(2), 0.0, None),
        resample_mse: SnrCurve::from_moments(grid, slice(3), 2.0 * tail, None),
        mle_excess: SnrCurve::from_moments(grid, slice(4), tail, None),
        mi_slope: SnrCurve::from_moments(grid, slice(5), 0.0, None),
        samples,
        seed,
    })
}

/// Monte Carlo `E ||h_X - h_MLE(Y_s)||^2` on `grid`.
pub fn mse_mle_curve(emb: &EmbeddedProcess, prior: &Prior, grid: &[f64], samples: usize, seed: u64) -> Result<SnrCurve> {
    Ok(channel_curves(emb, prior, grid, samples, seed)?.mse_mle)
}

/// Monte Carlo `E ||h_X - E[h_X | Y_s]||^2` on `grid`.
pub fn mmse_curve(emb: &EmbeddedProcess, prior: &Prior, grid: &[f64], samples: usize, seed: u64) -> Result<SnrCurve> {
    Ok(channel_curves(emb, prior, grid, samples, seed)?.mmse)
}

/// Monte Carlo `I(h_X; Y_s)` in nats, estimated directly from the likelihood
/// ratio.
pub fn mutual_info_curve(emb: &EmbeddedProcess, prior: &Prior, grid: &[f64], samples: usize, seed: u64) -> Result<SnrCurve> {
    Ok(channel_curves(emb, prior, grid, samples, seed)?.mutual_info)
}

/// Area under an SNR curve together with its error budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub value: f64,
    /// Statistical standard error of `value`.
    pub stderr: f64,
    /// Trapezoid discretization estimate (Richardson, grid vs. every other
    /// point).
    pub quadrature_error: f64,
    /// Certified bound on the truncated tail.
    pub tail_bound: f64,
}

impl AreaEstimate {
    /// `k_sigma * stderr + quadrature_error + tail_bound`.
    pub fn error_bound(&self, k_sigma: f64) -> f64 {
        k_sigma * self.stderr + self.quadrature_error + self.tail_bound
    }
}

/// Integrate a curve over `[0, inf)`: trapezoid rule on the grid plus the
/// certified tail. Fails if the grid stops before the certificate's
/// truncation point.
pub fn integrate_snr_curve(curve: &SnrCurve, cert: &DecayCertificate) -> Result<AreaEstimate> {
    curve.validate()?;
    let grid_end = *curve.grid.last().unwrap_or(&0.0);
    let s_max = cert.s_max();
    if grid_end < s_max * (1.0 - 1e-12) {
        return Err(Error::TailNotCertified { s_max, grid_end });
    }
    let value = trapezoid(&curve.grid, &curve.values);
    let quadrature_error = if curve.grid.len() >= 3 {
        let coarse_idx: Vec<usize> = (0..curve.grid.len())
            .filter(|&i| i % 2 == 0 || i == curve.grid.len() - 1)
            .collect();
        let cg: Vec<f64> = coarse_idx.iter().map(|&i| curve.grid[i]).collect();
        let cv: Vec<f64> = coarse_idx.iter().map(|&i| curve.values[i]).collect();
        (value - trapezoid(&cg, &cv)).abs() / 3.0
    } else {
        0.0
    };
    let stderr = match curve.area_stderr {
        Some(se) => se,
        // perfectly correlated points give the largest possible spread
        None => trapezoid_weights(&curve.grid)
            .iter()
            .zip(&curve.stderrs)
            .map(|(w, s)| w * s)
            .sum(),
    };
    Ok(AreaEstimate {
        value,
        stderr,
        quadrature_error,
        tail_bound: cert.tail_bound(grid_end),
    })
}

/// Closed-form point of the symmetric binary channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryChannelPoint {
    pub delta: f64,
    pub s: f64,
    pub mmse: f64,
    /// Mutual information in nats.
    pub mi: f64,
}

/// MMSE of the uniform prior on two points at distance `delta`:
/// `(delta^2 / 4) E[sech^2(a Y)]`, `Y = a + N`, `a = s delta / 2`.
pub fn binary_mmse(delta: f64, s: f64) -> f64 {
    let a = 0.5 * s * delta;
    let scale = 0.25 * delta * delta;
    if a == 0.0 {
        return scale;
    }
    // the integrand peaks at n = -a with width ~1/a
    let mut breaks = vec![-40.0];
    if a < 40.0 {
        let w = (1.0 / a).min(1.0);
        for p in [-a - 8.0 * w, -a, -a + 8.0 * w] {
            if p > -40.0 && p < 40.0 {
                breaks.push(p);
            }
        }
    }
    breaks.push(40.0);
    let m = integrate_with_breaks(|n| sech_sq(a * (a + n)) * normal_pdf(n), &breaks, 1e-14, 1e-13);
    scale * m.value
}

/// Binary channel MMSE and mutual information, the latter from the I-MMSE
/// integral `int_0^s u mmse(u) du`.
pub fn binary_channel_exact(delta: f64, s: f64) -> BinaryChannelPoint {
    let mmse = binary_mmse(delta, s);
    let mi = if s > 0.0 {
        // beyond u ~ 24/delta the integrand is below 1e-60
        let cut = s.min(24.0 / delta);
        let knee = (4.0 / delta).min(cut);
        integrate_with_breaks(|u| u * binary_mmse(delta, u), &[0.0, knee, cut], 1e-12, 1e-12).value
    } else {
        0.0
    };
    BinaryChannelPoint { delta, s, mmse, mi }
}

/// Binary channel mutual information computed directly from the likelihood
/// ratio, `a^2 - E ln cosh(a (a + N))` with `a = s delta / 2`.
pub fn binary_mi_direct(delta: f64, s: f64) -> f64 {
    let a = 0.5 * s * delta;
    if a == 0.0 {
        return 0.0;
    }
    let mut breaks = vec![-40.0];
    for p in [-a - 8.0, -a, -a + 8.0] {
        if p > -40.0 && p < 40.0 {
            breaks.push(p);
        }
    }
    breaks.push(40.0);
    let e = integrate_with_breaks(|n| ln_cosh(a * (a + n)) * normal_pdf(n), &breaks, 1e-14, 1e-14);
    (a * a - e.value).max(0.0)
}

/// `int_0^inf MMSE(s) ds` for the binary channel.
pub fn binary_integrated_mmse(delta: f64) -> f64 {
    let cut = 24.0 / delta;
    integrate(|s| binary_mmse(delta, s), 0.0, cut, 1e-11, 1e-11).value
}
