//! Instance files and the generators behind `gen`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{derive_seed, sample_rng};
use crate::process::{embed, validate_covariance, EmbeddedProcess, Prior};

/// A finite Gaussian process given by points or by a covariance matrix,
/// together with a prior on its index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub name: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    pub prior: Vec<f64>,
    pub seed: u64,
}

impl Instance {
    pub fn from_points(name: impl Into<String>, points: Vec<Vec<f64>>, prior: Option<Vec<f64>>, seed: u64) -> Result<Self> {
        let n = points.len();
        let inst = Instance {
            name: name.into(),
            dim: points.first().map_or(0, |p| p.len()),
            points: Some(points),
            covariance: None,
            prior: prior.unwrap_or_else(|| Prior::uniform(n).weights().to_vec()),
            seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_covariance(name: impl Into<String>, covariance: Vec<Vec<f64>>, prior: Option<Vec<f64>>, seed: u64) -> Result<Self> {
        let n = covariance.len();
        let inst = Instance {
            name: name.into(),
            dim: n,
            points: None,
            covariance: Some(covariance),
            prior: prior.unwrap_or_else(|| Prior::uniform(n).weights().to_vec()),
            seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = match (&self.points, &self.covariance) {
            (Some(p), None) => {
                if p.iter().any(|row| row.len() != self.dim) {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: p.iter().map(|r| r.len()).find(|&l| l != self.dim).unwrap_or(0),
                    });
                }
                p.len()
            }
            (None, Some(k)) => {
                if k.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: k.len(),
                    });
                }
                k.len()
            }
            _ => return Err(Error::BadParams("exactly one of points and covariance must be given".into())),
        };
        if n == 0 {
            return Err(Error::BadParams("empty index set".into()));
        }
        if self.prior.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.prior.len(),
            });
        }
        Prior::new(self.prior.clone())?;
        Ok(())
    }

    pub fn embedding(&self) -> Result<EmbeddedProcess> {
        self.validate()?;
        match (&self.points, &self.covariance) {
            (Some(p), _) => {
                let n = p.len();
                EmbeddedProcess::from_points(DMatrix::from_fn(n, self.dim, |i, j| p[i][j]), None)
            }
            (_, Some(k)) => {
                let n = k.len();
                for row in k {
                    if row.len() != n {
                        return Err(Error::NotSquare { rows: n, cols: row.len() });
                    }
                }
                embed(&validate_covariance(&DMatrix::from_fn(n, n, |i, j| k[i][j]))?)
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn prior(&self) -> Result<Prior> {
        Prior::new(self.prior.clone())
    }

    /// Copy with a different prior.
    pub fn with_prior(&self, prior: &Prior) -> Result<Self> {
        let mut out = self.clone();
        out.prior = prior.weights().to_vec();
        out.validate()?;
        Ok(out)
    }

    /// Copy with every distance multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::BadParams(format!("scale must be positive, got {c}")));
        }
        let mut out = self.clone();
        if let Some(p) = out.points.as_mut() {
            p.iter_mut().flatten().for_each(|x| *x *= c);
        }
        if let Some(k) = out.covariance.as_mut() {
            k.iter_mut().flatten().for_each(|x| *x *= c * c);
        }
        Ok(out)
    }

    /// Canonical JSON: object keys sorted, shortest round-trip numbers.
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }
}

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map type is ordered by key
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TwoPoint,
    Orthonormal,
    Simplex,
    Cloud,
    Ultrametric,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::TwoPoint,
        Family::Orthonormal,
        Family::Simplex,
        Family::Cloud,
        Family::Ultrametric,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::TwoPoint => "two_point",
            Family::Orthonormal => "orthonormal",
            Family::Simplex => "simplex",
            Family::Cloud => "cloud",
            Family::Ultrametric => "ultrametric",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::BadParams(format!("unknown family {s:?}")))
    }
}

/// Deterministic instance of the given family with a uniform prior.
///
/// * `two_point`: `+-e_1 / 2` (distance 1), `size` must be 2.
/// * `orthonormal`: the first `size` standard basis vectors.
/// * `simplex`: `e_i / sqrt 2`, all distances 1.
/// * `cloud`: i.i.d. uniform points in the unit ball of dimension `dim`.
/// * `ultrametric`: random binary hierarchy where leaves first separated at
///   depth `k` are at distance `2^-k`, stored as a covariance matrix of
///   dimension `size` (`dim` is ignored).
pub fn generate_instance(family: Family, size: usize, dim: usize, seed: u64) -> Result<Instance> {
    if size == 0 {
        return Err(Error::BadParams("size must be at least 1".into()));
    }
    let basis = |i: usize, c: f64| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = c;
        v
    };
    let name = format!("{family}-n{size}-d{dim}-s{seed}");
    match family {
        Family::TwoPoint => {
            if size != 2 || dim == 0 {
                return Err(Error::BadParams("two_point needs size 2 and dim >= 1".into()));
            }
            Instance::from_points(name, vec![basis(0, 0.5), basis(0, -0.5)], None, seed)
        }
        Family::Orthonormal | Family::Simplex => {
            if dim < size {
                return Err(Error::BadParams(format!("{family} needs dim >= size")));
            }
            let c = if family == Family::Simplex { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            Instance::from_points(name, (0..size).map(|i| basis(i, c)).collect(), None, seed)
        }
        Family::Cloud => {
            if dim == 0 {
                return Err(Error::BadParams("cloud needs dim >= 1".into()));
            }
            let s = derive_seed(seed, "cloud");
            let points = (0..size)
                .map(|i| {
                    let mut rng = sample_rng(s, i as u64);
                    let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
                    g.iter().map(|x| x / norm * radius).collect()
                })
                .collect();
            Instance::from_points(name, points, None, seed)
        }
        Family::Ultrametric => {
            let mut rng = sample_rng(derive_seed(seed, "ultrametric"), 0);
            let mut dist = vec![vec![0.0; size]; size];
            let mut leaves: Vec<usize> = (0..size).collect();
            leaves.shuffle(&mut rng);
            split(&leaves, 0, &mut dist, &mut rng);
            Instance::from_covariance(name, classical_mds_gram(&dist), None, seed)
        }
    }
}

/// Prior drawn from the flat Dirichlet distribution.
pub fn dirichlet_prior(n: usize, seed: u64) -> Prior {
    let mut rng = sample_rng(derive_seed(seed, "dirichlet"), 0);
    let raw: Vec<f64> = (0..n).map(|_| rand_distr::Exp1.sample(&mut rng)).collect();
    Prior::normalized(raw).expect("positive exponential draws")
}

fn split(leaves: &[usize], depth: i32, dist: &mut [Vec<f64>], rng: &mut impl Rng) {
    if leaves.len() < 2 {
        return;
    }
    let cut = rng.random_range(1..leaves.len());
    let (a, b) = leaves.split_at(cut);
    let d = 2f64.powi(-depth);
    for &i in a {
        for &j in b {
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    split(a, depth + 1, dist, rng);
    split(b, depth + 1, dist, rng);
}

/// Gram matrix `-J D^2 J / 2` of a Euclidean distance matrix.
fn classical_mds_gram(dist: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = dist.len();
    let sq = DMatrix::from_fn(n, n, |i, j| dist[i][j] * dist[i][j]);
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let k = -0.5 * &j * sq * &j;
    (0..n)
        .map(|r| (0..n).map(|c| 0.5 * (k[(r, c)] + k[(c, r)])).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::metric_of;

    #[test]
    fn two_point_family() {
        let inst = generate_instance(Family::TwoPoint, 2, 1, 0).unwrap();
        assert_eq!(inst.points.as_ref().unwrap(), &vec![vec![0.5], vec![-0.5]]);
        assert_eq!(metric_of(&inst.embedding().unwrap()).diam(), 1.0);
        assert!(generate_instance(Family::TwoPoint, 3, 1, 0).is_err());
    }

    #[test]
    fn orthonormal_and_simplex_distances() {
        let m = metric_of(&generate_instance(Family::Orthonormal, 3, 3, 0).unwrap().embedding().unwrap());
        for s in 0..3 {
            for t in 0..3 {
                if s != t {
                    assert!((m.d(s, t) - 2f64.sqrt()).abs() < 1e-15);
                }
            }
        }
        let m = metric_of(&generate_instance(Family::Simplex, 4, 4, 0).unwrap().embedding().unwrap());
        assert!((m.diam() - 1.0).abs() < 1e-15 && (m.d_min() - 1.0).abs() < 1e-15);
        assert!(generate_instance(Family::Orthonormal, 3, 2, 0).is_err());
    }

    #[test]
    fn cloud_in_unit_ball_and_deterministic() {
        let a = generate_instance(Family::Cloud, 8, 8, 3).unwrap();
        let b = generate_instance(Family::Cloud, 8, 8, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        for p in a.points.as_ref().unwrap() {
            assert!(p.iter().map(|x| x * x).sum::<f64>() <= 1.0);
        }
        assert_ne!(a, generate_instance(Family::Cloud, 8, 8, 4).unwrap());
    }

    #[test]
    fn ultrametric_distances_are_powers_of_two() {
        let inst = generate_instance(Family::Ultrametric, 6, 6, 2).unwrap();
        let m = metric_of(&inst.embedding().unwrap());
        assert!((m.diam() - 1.0).abs() < 1e-9);
        for s in 0..6 {
            for t in 0..s {
                let k = -m.d(s, t).log2();
                assert!((k - k.round()).abs() < 1e-8, "{}", m.d(s, t));
            }
        }
        // ultrametric inequality
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    assert!(m.d(a, c) <= m.d(a, b).max(m.d(b, c)) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact_and_sorted() {
        let inst = generate_instance(Family::Cloud, 5, 3, 11).unwrap();
        let s = inst.to_json().unwrap();
        let back = Instance::from_json(&s).unwrap();
        assert_eq!(inst, back);
        assert_eq!(s, back.to_json().unwrap());
        let keys: Vec<usize> = ["\"dim\"", "\"name\"", "\"points\"", "\"prior\"", "\"seed\""]
            .iter()
            .map(|k| s.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_both_or_neither_representation() {
        let mut inst = generate_instance(Family::TwoPoint, 2, 1, 0).unwrap();
        inst.covariance = Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(inst.validate().is_err());
        inst.points = None;
        inst.covariance = None;
        assert!(inst.validate().is_err());
    }
}
