//! Globally adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    /// Estimated absolute error (Kronrod minus Gauss, summed over panels).
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = half * XGK[j];
        let s = f(center - x) + f(center + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    Panel {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Integrate `f` over `[a, b]` until the summed error estimate falls below
/// `max(abs_tol, rel_tol * |value|)` or 2000 panels are in use.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> QuadResult {
    integrate_with_breaks(f, &[a, b], abs_tol, rel_tol)
}

/// Same as [`integrate`], seeded with the panels delimited by `breaks`
/// (sorted ascending; interior points are typically kinks or peaks).
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> QuadResult {
    const MAX_PANELS: usize = 2000;
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            heap.push(gk15(&mut f, w[0], w[1]));
            evaluations += 15;
        }
    }
    loop {
        let (value, error) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.error));
        let target = abs_tol.max(rel_tol * value.abs());
        if error <= target || heap.len() >= MAX_PANELS {
            return QuadResult {
                value,
                error,
                evaluations,
            };
        }
        let worst = match heap.pop() {
            Some(p) => p,
            None => {
                return QuadResult {
                    value: 0.0,
                    error: 0.0,
                    evaluations,
                }
            }
        };
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // panel can no longer be split in floating point
            heap.push(Panel { error: 0.0, ..worst });
            continue;
        }
        heap.push(gk15(&mut f, worst.a, mid));
        heap.push(gk15(&mut f, mid, worst.b));
        evaluations += 30;
    }
}

/// Trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(s, v)| 0.5 * (s[1] - s[0]) * (v[0] + v[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::normal_sf;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(|x| x.powi(5) - 3.0 * x * x + 1.0, -1.0, 2.0, 1e-14, 0.0);
        assert!((r.value - (64.0 / 6.0 - 1.0 / 6.0 - 9.0 + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn gaussian_tail_integral() {
        // int_0^inf Q(t) dt = phi(0)
        let r = integrate(normal_sf, 0.0, 40.0, 1e-13, 0.0);
        assert!((r.value - crate::special::FRAC_1_SQRT_2PI).abs() < 1e-12);
    }

    #[test]
    fn sqrt_endpoint_singularity() {
        let r = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10, 0.0);
        assert!((r.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn breaks_handle_kinks() {
        let r = integrate_with_breaks(|x: f64| (x - 0.3).abs(), &[0.0, 0.3, 1.0], 1e-14, 0.0);
        assert!((r.value - (0.045 + 0.245)).abs() < 1e-14);
    }

    #[test]
    fn trapezoid_linear() {
        let g = [0.0, 0.5, 2.0];
        let v = [1.0, 2.0, 5.0];
        assert!((trapezoid(&g, &v) - 6.0).abs() < 1e-15);
    }
}
