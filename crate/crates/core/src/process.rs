//! Finite centered Gaussian processes realized as point sets in Euclidean
//! space, their canonical metric, and priors on the index set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::neg_xlogx;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const GRAM_TOL: f64 = 1e-8;
const DISTINCT_TOL: f64 = 1e-9;
const PRIOR_SUM_TOL: f64 = 1e-12;

/// Validated covariance `K(s,t) = E G_s G_t`: symmetrized, with its
/// spectrum clipped at zero.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl CovarianceMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clipped eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// Symmetrize `k` and reject it if it is asymmetric beyond 1e-12 (relative
/// to its largest entry) or has an eigenvalue below `-1e-10 * max diagonal`.
/// Eigenvalues in `[-1e-10 * max diagonal, 0)` are clipped to zero.
pub fn validate_covariance(k: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    let (rows, cols) = k.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut max_asym = 0.0f64;
    for i in 0..rows {
        for j in 0..i {
            max_asym = max_asym.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    if !k.iter().all(|v| v.is_finite()) || max_asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: max_asym,
        });
    }
    let entries = (k + k.transpose()) * 0.5;
    let max_diag = (0..rows).fold(0.0f64, |m, i| m.max(entries[(i, i)]));
    let eig = entries.clone().symmetric_eigen();

    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut eigenvalues = Vec::with_capacity(rows);
    let mut eigenvectors = DMatrix::zeros(rows, rows);
    for (c, &j) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[j];
        if lambda < -PSD_TOL * max_diag || (max_diag <= 0.0 && lambda < 0.0) {
            return Err(Error::NotPsd { eigenvalue: lambda });
        }
        eigenvalues.push(lambda.max(0.0));
        // sign convention: largest-magnitude component positive
        let v = eig.eigenvectors.column(j);
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(c, &(v * sign));
    }
    Ok(CovarianceMatrix {
        entries,
        eigenvalues,
        eigenvectors,
    })
}

/// Index set realized as points `h_t` with `G_t = <Z, h_t>`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedProcess {
    points: DMatrix<f64>,
    labels: Vec<String>,
    gram: DMatrix<f64>,
}

impl EmbeddedProcess {
    /// Build from explicit points (one row per index), checking that they are
    /// pairwise distinct.
    pub fn from_points(points: DMatrix<f64>, labels: Option<Vec<String>>) -> Result<Self> {
        let n = points.nrows();
        let labels = match labels {
            Some(l) if l.len() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: l.len(),
                })
            }
            Some(l) => l,
            None => (0..n).map(|i| format!("t{i}")).collect(),
        };
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::BadParams("non-finite coordinate".into()));
        }
        let gram = &points * points.transpose();
        let emb = EmbeddedProcess {
            points,
            labels,
            gram,
        };
        emb.check_distinct()?;
        Ok(emb)
    }

    fn check_distinct(&self) -> Result<()> {
        let n = self.len();
        let mut diam = 0.0f64;
        for s in 0..n {
            for t in 0..s {
                diam = diam.max(self.sq_dist(s, t).sqrt());
            }
        }
        let threshold = DISTINCT_TOL * if diam > 0.0 { diam } else { 1.0 };
        for s in 0..n {
            for t in 0..s {
                let d = self.sq_dist(s, t).sqrt();
                if d < threshold {
                    return Err(Error::DistinctnessViolation {
                        first: t,
                        second: s,
                        distance: d,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, t: usize) -> Vec<f64> {
        self.points.row(t).iter().copied().collect()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `<h_s, h_t>`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `||h_s - h_t||^2` from coordinates.
    pub fn sq_dist(&self, s: usize, t: usize) -> f64 {
        self.points
            .row(s)
            .iter()
            .zip(self.points.row(t).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `<y, h_t>` for every `t`.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|t| self.points.row(t).iter().zip(y).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Same process with every point scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_points(&self.points * c, Some(self.labels.clone()))
    }
}

/// Factor `K = A A^T` through the clipped eigendecomposition and take the rows
/// of `A` as the points.
pub fn embed(k: &CovarianceMatrix) -> Result<EmbeddedProcess> {
    let n = k.len();
    let mut a = k.eigenvectors.clone();
    for (c, &lambda) in k.eigenvalues.iter().enumerate() {
        let r = lambda.sqrt();
        a.column_mut(c).iter_mut().for_each(|v| *v *= r);
    }
    let recon = &a * a.transpose();
    let max_error = (recon - &k.entries).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_error > GRAM_TOL {
        return Err(Error::FactorizationInaccurate { max_error });
    }
    let labels = (0..n).map(|i| format!("t{i}")).collect();
    EmbeddedProcess::from_points(a, Some(labels))
}

/// Canonical metric `d(s,t) = ||h_s - h_t||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMetric {
    dist: Vec<Vec<f64>>,
    diam: f64,
    d_min: f64,
}

impl FiniteMetric {
    /// Build from a distance matrix: square, symmetric, zero diagonal,
    /// nonnegative off-diagonal entries.
    pub fn from_distances(dist: Vec<Vec<f64>>) -> Result<Self> {
        let n = dist.len();
        for (i, row) in dist.iter().enumerate() {
            if row.len() != n {
                return Err(Error::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            if row[i] != 0.0 {
                return Err(Error::BadParams(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (row[j], dist[j][i]);
                if !(a.is_finite() && a >= 0.0) || (a - b).abs() > 1e-12 * a.max(b).max(1.0) {
                    return Err(Error::BadParams(format!("bad distance at ({i},{j})")));
                }
            }
        }
        let mut diam = 0.0f64;
        let mut d_min = f64::INFINITY;
        for i in 0..n {
            for j in 0..i {
                let d = dist[i][j];
                diam = diam.max(d);
                if d > 0.0 {
                    d_min = d_min.min(d);
                }
            }
        }
        Ok(FiniteMetric { dist, diam, d_min })
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    pub fn d(&self, s: usize, t: usize) -> f64 {
        self.dist[s][t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.dist
    }

    pub fn diam(&self) -> f64 {
        self.diam
    }

    /// Smallest nonzero distance; `+inf` when there is none.
    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    /// `E d(U,V)^2` for `U, V` independent with law `prior`.
    pub fn mean_sq_dist(&self, prior: &Prior) -> f64 {
        let w = prior.weights();
        let mut acc = 0.0;
        for (i, row) in self.dist.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                acc += w[i] * w[j] * d * d;
            }
        }
        acc
    }

    /// Metric with every distance multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> FiniteMetric {
        FiniteMetric {
            dist: self
                .dist
                .iter()
                .map(|r| r.iter().map(|d| d * c).collect())
                .collect(),
            diam: self.diam * c,
            d_min: self.d_min * c,
        }
    }

    /// Sub-metric on the given indices.
    pub fn restrict(&self, idx: &[usize]) -> FiniteMetric {
        let dist = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.dist[i][j]).collect())
            .collect();
        FiniteMetric::from_distances(dist).expect("restriction of a valid metric")
    }
}

pub fn metric_of(emb: &EmbeddedProcess) -> FiniteMetric {
    let n = emb.len();
    let mut dist = vec![vec![0.0; n]; n];
    for s in 0..n {
        for t in 0..s {
            let d = emb.sq_dist(s, t).sqrt();
            dist[s][t] = d;
            dist[t][s] = d;
        }
    }
    FiniteMetric::from_distances(dist).expect("Euclidean distances form a metric")
}

/// Probability vector on the index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    weights: Vec<f64>,
}

impl Prior {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidPrior("empty".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidPrior("negative or non-finite weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(Error::InvalidPrior(format!("weights sum to {sum}")));
        }
        Ok(Prior { weights })
    }

    /// Normalize nonnegative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidPrior("weights do not have positive finite sum".into()));
        }
        Prior::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Prior {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        Prior { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    /// Index drawn by inverse CDF from a uniform `u` in `[0, 1)`; never
    /// returns a zero-mass atom.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                cum += w;
                last = i;
                if u < cum {
                    return i;
                }
            }
        }
        last
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &Prior) -> f64 {
    p.weights.iter().map(|&w| neg_xlogx(w)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let n = rows.len();
        DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn identity_accepted() {
        let k = validate_covariance(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(k.entries(), &DMatrix::<f64>::identity(2, 2));
    }

    #[test]
    fn indefinite_rejected() {
        let err = validate_covariance(&mat(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap_err();
        match err {
            Error::NotPsd { eigenvalue } => assert!((eigenvalue + 1.0).abs() < 1e-12),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let err = validate_covariance(&mat(&[&[1.0, 0.5], &[0.4, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
    }

    #[test]
    fn tiny_negative_eigenvalue_clipped() {
        // rank-one matrix nudged to have eigenvalue -1e-14
        let v = [0.6, 0.8];
        let k = DMatrix::from_fn(2, 2, |i, j| {
            let w = [0.8, -0.6];
            v[i] * v[j] - 1e-14 * w[i] * w[j]
        });
        let c = validate_covariance(&k).unwrap();
        assert!(c.eigenvalues().iter().all(|&l| l >= 0.0));
        assert_eq!(c.eigenvalues()[1], 0.0);
    }

    #[test]
    fn embed_identity() {
        let k = validate_covariance(&DMatrix::identity(2, 2)).unwrap();
        let e = embed(&k).unwrap();
        let m = metric_of(&e);
        assert!((m.d(0, 1) - 2f64.sqrt()).abs() < 1e-12);
        assert!((e.gram() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn embed_coincident_fails() {
        let k = validate_covariance(&mat(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap();
        assert!(matches!(embed(&k), Err(Error::DistinctnessViolation { .. })));
    }

    #[test]
    fn embed_rank_deficient() {
        let k = validate_covariance(&mat(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        let e = embed(&k).unwrap();
        assert!((e.point(0)[0] - 1.0).abs() < 1e-12 && e.point(0)[1].abs() < 1e-12);
        assert!(e.point(1).iter().all(|v| v.abs() < 1e-12));
        assert!((metric_of(&e).d(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let single = EmbeddedProcess::from_points(DMatrix::from_element(1, 1, 0.3), None).unwrap();
        let m = metric_of(&single);
        assert_eq!(m.diam(), 0.0);
        assert_eq!(m.d_min(), f64::INFINITY);

        let k = validate_covariance(&DMatrix::identity(3, 3)).unwrap();
        let m = metric_of(&embed(&k).unwrap());
        for s in 0..3 {
            for t in 0..3 {
                let want = if s == t { 0.0 } else { 2f64.sqrt() };
                assert!((m.d(s, t) - want).abs() < 1e-12);
            }
        }
        assert!((m.diam() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&Prior::uniform(2)) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(&Prior::point_mass(3, 1)), 0.0);
        let p = Prior::new(vec![0.25, 0.75]).unwrap();
        assert!((entropy(&p) - 0.562_335_144_618_808_3).abs() < 1e-12);
    }

    #[test]
    fn prior_validation() {
        assert!(Prior::new(vec![0.5, 0.6]).is_err());
        assert!(Prior::new(vec![-0.1, 1.1]).is_err());
        let p = Prior::new(vec![0.0, 0.5, 0.0, 0.5]).unwrap();
        assert_eq!(p.support(), vec![1, 3]);
        assert_eq!(p.sample_index(0.0), 1);
        assert_eq!(p.sample_index(0.9999), 3);
    }

    fn random_psd(n: usize, rank: usize, seed: Vec<f64>) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, rank, |i, j| seed[(i * rank + j) % seed.len()] + 0.01 * (i as f64) - 0.02 * (j as f64));
        &b * b.transpose()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gram_round_trip(n in 1usize..=16, extra in 0usize..4, seed in prop::collection::vec(-2.0f64..2.0, 32..64)) {
            let k = random_psd(n, n + extra, seed);
            let c = validate_covariance(&k).unwrap();
            if let Ok(e) = embed(&c) {
                prop_assert!((e.gram() - c.entries()).amax() <= 1e-8);
                let m = metric_of(&e);
                for s in 0..n {
                    for t in 0..n {
                        let want = k[(s, s)] + k[(t, t)] - 2.0 * k[(s, t)];
                        prop_assert!((m.d(s, t).powi(2) - want).abs() <= 1e-8 * (1.0 + want.abs()));
                    }
                }
            }
        }

        #[test]
        fn triangle_inequality(pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..10)) {
            let n = pts.len();
            let p = DMatrix::from_fn(n, 3, |i, j| pts[i][j]);
            if let Ok(e) = EmbeddedProcess::from_points(p, None) {
                let m = metric_of(&e);
                for a in 0..n { for b in 0..n { for c in 0..n {
                    prop_assert!(m.d(a, c) <= m.d(a, b) + m.d(b, c) + 1e-10);
                }}}
            }
        }
    }
}
