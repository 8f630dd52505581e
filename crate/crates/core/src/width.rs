//! Gaussian width `W(T) = E max_t <Z, h_t>`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mc::{sample_moments, sample_rng};
use crate::process::EmbeddedProcess;
use crate::quad::integrate_with_breaks;
use crate::special::{normal_cdf, normal_pdf, FRAC_1_SQRT_2PI};

pub const DEFAULT_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Standard Gaussian vector of length `dim` for sample `index`.
pub(crate) fn gaussian_vector(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = sample_rng(seed, index);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Monte Carlo mean of `max_t <Z, h_t - h_0>`, which has the same
/// expectation as `max_t <Z, h_t>` and is exactly zero for a singleton.
pub fn width_mc(emb: &EmbeddedProcess, samples: usize, seed: u64) -> WidthEstimate {
    let samples = samples.max(2);
    let m = sample_moments(samples, 1, |i, out| {
        let z = gaussian_vector(seed, i, emb.dim());
        let proj = emb.project(&z);
        out[0] = proj.iter().map(|p| p - proj[0]).fold(f64::NEG_INFINITY, f64::max);
    });
    WidthEstimate {
        value: m[0].mean,
        stderr: m[0].stderr(),
        samples,
        seed,
    }
}

/// `E max(G_a, G_b) = D / sqrt(2 pi)` for two points at distance `D`.
pub fn width_two_point_exact(diameter: f64) -> f64 {
    diameter * FRAC_1_SQRT_2PI
}

/// Expected maximum of `n` i.i.d. standard normals.
pub fn width_iid_max_exact(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    let density = |x: f64| x * nf * normal_pdf(x) * normal_cdf(x).powi(n as i32 - 1);
    integrate_with_breaks(density, &[-40.0, 0.0, 40.0], 1e-12, 0.0).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn pts(rows: &[&[f64]]) -> EmbeddedProcess {
        let n = rows.len();
        EmbeddedProcess::from_points(DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]), None).unwrap()
    }

    #[test]
    fn singleton_is_zero() {
        let w = width_mc(&pts(&[&[0.3, -0.2]]), 1000, 1);
        assert_eq!(w.value, 0.0);
        assert_eq!(w.stderr, 0.0);
    }

    #[test]
    fn two_point_distance_one() {
        let w = width_mc(&pts(&[&[0.5], &[-0.5]]), 100_000, 3);
        assert!((w.value - 0.398_942_280_401_432_7).abs() <= 3.0 * w.stderr);
    }

    #[test]
    fn orthonormal_pair() {
        let w = width_mc(&pts(&[&[1.0, 0.0], &[0.0, 1.0]]), 100_000, 4);
        assert!((w.value - 0.564_189_583_547_756_3).abs() <= 3.0 * w.stderr);
    }

    #[test]
    fn two_point_exact() {
        assert_eq!(width_two_point_exact(0.0), 0.0);
        assert!((width_two_point_exact(1.0) - 0.398_942).abs() < 1e-6);
        assert!((width_two_point_exact(2.5) - 0.997_356).abs() < 1e-6);
    }

    #[test]
    fn iid_max_exact() {
        assert_eq!(width_iid_max_exact(1), 0.0);
        assert!((width_iid_max_exact(2) - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-8);
        assert!((width_iid_max_exact(3) - 1.5 / std::f64::consts::PI.sqrt()).abs() < 1e-8);
        // scipy quad of x n phi Phi^{n-1}
        assert!((width_iid_max_exact(8) - 1.423_600_306_045_277_8).abs() < 1e-8);
    }

    #[test]
    fn scale_equivariance_is_exact_under_same_seed() {
        let e = pts(&[&[0.3, 0.1], &[-0.2, 0.4], &[0.0, -0.5]]);
        let a = width_mc(&e, 5000, 9);
        let b = width_mc(&e.scaled(2.0).unwrap(), 5000, 9);
        assert!((b.value - 2.0 * a.value).abs() <= 1e-12 * a.value.abs().max(1.0));
    }

    #[test]
    fn adding_a_point_never_decreases() {
        let small = pts(&[&[0.3, 0.1], &[-0.2, 0.4]]);
        let big = pts(&[&[0.3, 0.1], &[-0.2, 0.4], &[0.1, -0.6]]);
        let a = width_mc(&small, 20_000, 5);
        let b = width_mc(&big, 20_000, 5);
        // common random numbers: the per-sample maximum is monotone
        assert!(b.value >= a.value - 4.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
        assert!(b.value >= a.value);
    }
}
