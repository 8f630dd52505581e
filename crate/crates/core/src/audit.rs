//! The audit suite: checks A1 to A14 on one instance, collected into a
//! deterministic report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{
    binary_integrated_mmse, binary_mi_direct, binary_mmse, channel_curves, integrate_snr_curve, snr_grid,
    ChannelCurves, DecayCertificate, DEFAULT_GRID_POINTS,
};
use crate::error::{Error, Result};
use crate::functionals::{ft_optimize, ft_value, gamma2_part_exact, penalized_functional, FtBudget, MeasureOnT, StepFunction, GAMMA2_MAX_POINTS};
use crate::instance::{canonical_json, Instance};
use crate::mc::derive_seed;
use crate::prior_search::{least_favorable_search, Objective, SearchBudget};
use crate::process::{entropy, metric_of, EmbeddedProcess, FiniteMetric, Prior};
use crate::rate_distortion::{
    distortion_at_rate_with_tol, layer_cake_integral_with_tol, pareto_trace_with_tol, rate_at_distortion_brute_force,
    rate_at_distortion_with_tol, sqrt_rate_integral_with_tol, two_point_rd_exact, BRUTE_FORCE_MAX_POINTS, DEFAULT_TOL,
};
use crate::special::{normal_cdf, sech_sq, FRAC_1_SQRT_2PI};
use crate::width::{width_mc, WidthEstimate, DEFAULT_SAMPLES};

pub const SCHEMA: &str = "mmt-lab/1";

/// `sech^2(1) (Phi(0) - Phi(-2)) / 2`.
pub fn binary_area_constant() -> f64 {
    0.5 * sech_sq(1.0) * (0.5 - normal_cdf(-2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CheckId {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
    A9,
    A10,
    A11,
    A12,
    A13,
    A14,
}

impl CheckId {
    pub const ALL: [CheckId; 14] = [
        CheckId::A1,
        CheckId::A2,
        CheckId::A3,
        CheckId::A4,
        CheckId::A5,
        CheckId::A6,
        CheckId::A7,
        CheckId::A8,
        CheckId::A9,
        CheckId::A10,
        CheckId::A11,
        CheckId::A12,
        CheckId::A13,
        CheckId::A14,
    ];

    pub fn title(&self) -> &'static str {
        match self {
            CheckId::A1 => "width equals half the MLE error area",
            CheckId::A2 => "mutual information slope equals s times MMSE",
            CheckId::A3 => "MMSE below MLE error",
            CheckId::A4 => "squared distortion-rate at I(s) below twice the MMSE",
            CheckId::A5 => "half the root-rate integral below the width",
            CheckId::A6 => "width above diam / sqrt(2 pi)",
            CheckId::A7 => "layer-cake integral equals twice the root-rate integral",
            CheckId::A8 => "rate-distortion solver against exhaustive oracles",
            CheckId::A9 => "binary integrated MMSE above the explicit constant times delta",
            CheckId::A10 => "marginal residuals and monotone Pareto trace",
            CheckId::A11 => "majorizing-measure functional values",
            CheckId::A12 => "partition gamma_2 enumeration",
            CheckId::A13 => "width, M, root-rate and MMSE functionals side by side",
            CheckId::A14 => "bit-identical reruns",
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        CheckId::ALL
            .into_iter()
            .find(|c| c.to_string() == t)
            .ok_or_else(|| Error::BadParams(format!("unknown check {s:?}")))
    }
}

/// Parse a comma-separated check list; `all` or an empty string enables
/// every check.
pub fn parse_checks(list: &str) -> Result<Vec<CheckId>> {
    let list = list.trim();
    if list.is_empty() || list.eq_ignore_ascii_case("all") {
        return Ok(CheckId::ALL.to_vec());
    }
    let mut out: Vec<CheckId> = list.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    ReportOnly,
    /// The check does not apply to this instance (for example an exact
    /// oracle that exists only for two points).
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check_id: CheckId,
    pub title: String,
    pub status: Status,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub stderr: f64,
    pub samples: usize,
    pub seed: u64,
    /// Always `null` in the report; wall-clock times go to the sidecar.
    pub runtime_ms: Option<u64>,
    pub rule: String,
    pub values: BTreeMap<String, f64>,
    pub detail: Option<String>,
}

impl CheckRecord {
    fn new(id: CheckId, rule: &str) -> Self {
        CheckRecord {
            check_id: id,
            title: id.title().to_string(),
            status: Status::Skipped,
            lhs: f64::NAN,
            rhs: f64::NAN,
            tolerance: f64::NAN,
            stderr: 0.0,
            samples: 0,
            seed: 0,
            runtime_ms: None,
            rule: rule.to_string(),
            values: BTreeMap::new(),
            detail: None,
        }
    }

    fn set(&mut self, lhs: f64, rhs: f64, tolerance: f64, stderr: f64, pass: bool) {
        self.lhs = lhs;
        self.rhs = rhs;
        self.tolerance = tolerance;
        self.stderr = stderr;
        let finite = [lhs, rhs, tolerance, stderr].iter().all(|v| !v.is_nan());
        self.status = if pass && finite { Status::Pass } else { Status::Fail };
    }

    fn skip(&mut self, why: &str) {
        self.status = Status::Skipped;
        self.detail = Some(why.to_string());
    }

    fn value(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub seed: u64,
    pub samples: usize,
    pub grid_points: usize,
    pub rd_tol: f64,
    pub checks: Vec<CheckId>,
    pub ft: FtBudget,
    pub search: SearchBudget,
}

impl AuditConfig {
    pub fn new(seed: u64) -> Self {
        AuditConfig {
            seed,
            samples: DEFAULT_SAMPLES,
            grid_points: DEFAULT_GRID_POINTS,
            rd_tol: DEFAULT_TOL,
            checks: CheckId::ALL.to_vec(),
            ft: FtBudget::default(),
            search: SearchBudget {
                restarts: 4,
                iterations: 10,
                samples: 128,
                grid_points: 24,
                ..SearchBudget::default()
            },
        }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(canonical_json(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub name: String,
    pub size: usize,
    pub dim: usize,
    pub diam: f64,
    pub d_min: f64,
    pub entropy: f64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub pass: usize,
    pub fail: usize,
    pub report_only: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema: String,
    pub instance: InstanceSummary,
    pub config: AuditConfig,
    pub environment: Environment,
    pub checks: Vec<CheckRecord>,
    pub summary: Summary,
}

impl AuditReport {
    pub fn failed(&self) -> bool {
        self.summary.fail > 0
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }
}

/// Wall-clock time per check, kept out of the report so that reruns are
/// byte-identical.
pub type Timings = BTreeMap<String, u64>;

/// Lazily computed quantities shared between checks. Every stochastic
/// artifact has its own seed derived from the master seed, so checks that
/// share an artifact see the same random numbers.
struct Context<'a> {
    config: &'a AuditConfig,
    emb: EmbeddedProcess,
    metric: FiniteMetric,
    prior: Prior,
    cert: DecayCertificate,
    grid: Vec<f64>,
    width: Option<WidthEstimate>,
    curves: Option<ChannelCurves>,
    sqrt_rate: Option<Result<f64>>,
    ft: Option<(MeasureOnT, f64)>,
}

impl<'a> Context<'a> {
    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    fn width(&mut self) -> WidthEstimate {
        if self.width.is_none() {
            self.width = Some(width_mc(&self.emb, self.config.samples, self.seed("width")));
        }
        self.width.expect("just set")
    }

    fn curves(&mut self) -> Result<&ChannelCurves> {
        if self.curves.is_none() {
            let c = channel_curves(&self.emb, &self.prior, &self.grid, self.config.samples, self.seed("curves"))?;
            self.curves = Some(c);
        }
        Ok(self.curves.as_ref().expect("just set"))
    }

    fn sqrt_rate(&mut self) -> Result<f64> {
        if self.sqrt_rate.is_none() {
            self.sqrt_rate = Some(sqrt_rate_integral_with_tol(&self.metric, &self.prior, self.config.rd_tol));
        }
        self.sqrt_rate.clone().expect("just set")
    }

    fn ft(&mut self) -> (MeasureOnT, f64) {
        if self.ft.is_none() {
            self.ft = Some(ft_optimize(&self.metric, &self.config.ft, self.seed("ft_optimize")));
        }
        self.ft.clone().expect("just set")
    }

    fn is_uniform_pair(&self) -> bool {
        self.metric.len() == 2 && self.prior.weights()[0] == 0.5
    }

    /// Common off-diagonal distance when all points are equidistant.
    fn equilateral_side(&self) -> Option<f64> {
        let n = self.metric.len();
        if n < 2 {
            return None;
        }
        let d = self.metric.d(0, 1);
        let all = (0..n).all(|s| (0..s).all(|t| (self.metric.d(s, t) - d).abs() <= 1e-12 * d));
        all.then_some(d)
    }
}

/// Run the enabled checks on `instance`. Errors inside a check are recorded
/// as failures; only an invalid instance aborts.
pub fn run_audit(instance: &Instance, config: &AuditConfig) -> Result<(AuditReport, Timings)> {
    let emb = instance.embedding()?;
    let prior = instance.prior()?;
    let metric = metric_of(&emb);
    let cert = DecayCertificate::from_metric(&metric);
    let grid = snr_grid(&cert, config.grid_points);
    let summary = InstanceSummary {
        name: instance.name.clone(),
        size: emb.len(),
        dim: emb.dim(),
        diam: metric.diam(),
        d_min: metric.d_min(),
        entropy: entropy(&prior),
        sha256: sha256_hex(instance.to_json()?.as_bytes()),
    };
    let mut ctx = Context {
        config,
        emb,
        metric,
        prior,
        cert,
        grid,
        width: None,
        curves: None,
        sqrt_rate: None,
        ft: None,
    };
    let mut checks = Vec::new();
    let mut timings = Timings::new();
    let mut enabled = config.checks.clone();
    enabled.sort();
    enabled.dedup();
    for id in enabled {
        let start = Instant::now();
        let mut rec = CheckRecord::new(id, rule_of(id));
        if let Err(e) = run_check(&mut ctx, id, &mut rec) {
            rec.status = Status::Fail;
            rec.detail = Some(format!("error: {e}"));
        }
        timings.insert(id.to_string(), start.elapsed().as_millis() as u64);
        checks.push(rec);
    }
    let mut s = Summary::default();
    for c in &checks {
        match c.status {
            Status::Pass => s.pass += 1,
            Status::Fail => s.fail += 1,
            Status::ReportOnly => s.report_only += 1,
            Status::Skipped => s.skipped += 1,
        }
    }
    let report = AuditReport {
        schema: SCHEMA.to_string(),
        instance: summary,
        config: config.clone(),
        environment: Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash()?,
        },
        checks,
        summary: s,
    };
    Ok((report, timings))
}

fn rule_of(id: CheckId) -> &'static str {
    match id {
        CheckId::A1 => "|lhs - rhs| <= 3 * stderr + (tail bound + quadrature estimate) / 2",
        CheckId::A2 => "at every interior grid point |slope - s mmse| <= spread of s mmse over neighbours + 4 sigma; exact binary curves within 1e-3",
        CheckId::A3 => "lhs <= rhs + 3 sigma at every grid point",
        CheckId::A4 => "lhs + 4 sigma + 1e-9 diam^2 >= rhs at 20 grid points",
        CheckId::A5 => "lhs <= rhs + 3 stderr",
        CheckId::A6 => "lhs >= rhs - 4 stderr",
        CheckId::A7 => "|lhs - rhs| <= 2e-3 * max(1, rhs)",
        CheckId::A8 => "|solver - brute force| <= 1e-3 on 11 radii; two-point closed form within 1e-6",
        CheckId::A9 => "lhs >= rhs",
        CheckId::A10 => "max marginal residual <= tol and monotone trace",
        CheckId::A11 => "optimized value within tolerance of the exact or grid-search reference",
        CheckId::A12 => "cap-2 value <= cap-1 value; hand-enumerated values exact",
        CheckId::A13 => "ratios recorded; finite and positive",
        CheckId::A14 => "repeated runs bit-identical, also on a single thread",
    }
}

fn run_check(ctx: &mut Context, id: CheckId, rec: &mut CheckRecord) -> Result<()> {
    match id {
        CheckId::A1 => check_area_identity(ctx, rec),
        CheckId::A2 => check_i_mmse(ctx, rec),
        CheckId::A3 => check_bayes_optimality(ctx, rec),
        CheckId::A4 => check_resample_bound(ctx, rec),
        CheckId::A5 => check_headline(ctx, rec),
        CheckId::A6 => check_diameter(ctx, rec),
        CheckId::A7 => check_layer_cake(ctx, rec),
        CheckId::A8 => check_rd_oracles(ctx, rec),
        CheckId::A9 => check_binary_area(ctx, rec),
        CheckId::A10 => check_trace(ctx, rec),
        CheckId::A11 => check_ft(ctx, rec),
        CheckId::A12 => check_gamma2(ctx, rec),
        CheckId::A13 => check_sandwich(ctx, rec),
        CheckId::A14 => check_determinism(ctx, rec),
    }
}

fn check_area_identity(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let w = ctx.width();
    let cert = ctx.cert;
    let area = integrate_snr_curve(&ctx.curves()?.mse_mle, &cert)?;
    let lhs = 0.5 * area.value;
    let se = (0.25 * area.stderr * area.stderr + w.stderr * w.stderr).sqrt();
    let tol = 3.0 * se + 0.5 * (area.tail_bound + area.quadrature_error);
    rec.set(lhs, w.value, tol, se, (lhs - w.value).abs() <= tol);
    rec.samples = ctx.config.samples;
    rec.seed = ctx.seed("curves");
    rec.detail = Some(format!("width seed {}", ctx.seed("width")));
    rec.value("tail_bound", area.tail_bound);
    rec.value("quadrature_error", area.quadrature_error);
    Ok(())
}

/// Largest deviation of the central difference of the direct binary mutual
/// information from `s mmse(s)` on `[0.1, 6] / delta`, step `1e-3 / delta`.
pub fn binary_i_mmse_deviation(delta: f64) -> f64 {
    let h = 1e-3 / delta;
    let steps = 5900;
    (0..=steps)
        .map(|k| {
            let s = (0.1 + k as f64 * 1e-3) / delta;
            let slope = (binary_mi_direct(delta, s + h) - binary_mi_direct(delta, s - h)) / (2.0 * h);
            (slope - s * binary_mmse(delta, s)).abs()
        })
        .fold(0.0, f64::max)
}

fn check_i_mmse(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let seed = ctx.seed("curves");
    let samples = ctx.config.samples;
    let uniform_pair = ctx.is_uniform_pair();
    let diam = ctx.metric.diam();
    let c = ctx.curves()?;
    let g = &c.mmse.grid;
    let sm: Vec<f64> = g.iter().zip(&c.mmse.values).map(|(s, m)| s * m).collect();
    let mut worst: Option<(f64, usize, f64, f64)> = None;
    for k in 1..g.len().saturating_sub(1) {
        let spread = (sm[k - 1] - sm[k]).abs().max((sm[k + 1] - sm[k]).abs());
        let sigma = c.mi_slope.stderrs[k].hypot(g[k] * c.mmse.stderrs[k]);
        let bound = spread + 4.0 * sigma;
        let excess = (c.mi_slope.values[k] - sm[k]).abs() - bound;
        if worst.is_none_or(|w| excess > w.0) {
            worst = Some((excess, k, bound, sigma));
        }
    }
    match worst {
        Some((excess, k, bound, sigma)) => {
            rec.set(c.mi_slope.values[k], sm[k], bound, sigma, excess <= 0.0);
            rec.value("worst_snr", g[k]);
        }
        None => rec.set(0.0, 0.0, 0.0, 0.0, true),
    }
    rec.samples = samples;
    rec.seed = seed;
    if uniform_pair {
        let dev = binary_i_mmse_deviation(diam);
        rec.value("binary_exact_max_deviation", dev);
        if !(dev <= 1e-3) {
            rec.status = Status::Fail;
        }
    }
    Ok(())
}

fn check_bayes_optimality(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let seed = ctx.seed("curves");
    let samples = ctx.config.samples;
    let c = ctx.curves()?;
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for k in 0..c.mmse.grid.len() {
        let excess = c.mmse.values[k] - c.mse_mle.values[k] - 3.0 * c.mle_excess.stderrs[k];
        if excess > worst.0 {
            worst = (excess, k);
        }
    }
    let k = worst.1;
    let sigma = c.mle_excess.stderrs[k];
    rec.set(c.mmse.values[k], c.mse_mle.values[k], 3.0 * sigma, sigma, worst.0 <= 0.0);
    rec.value("worst_snr", c.mmse.grid[k]);
    rec.samples = samples;
    rec.seed = seed;
    Ok(())
}

fn check_resample_bound(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let seed = ctx.seed("curves");
    let samples = ctx.config.samples;
    let tol = ctx.config.rd_tol;
    let h = entropy(&ctx.prior);
    let slack = 1e-9 * ctx.metric.diam().powi(2);
    let metric = ctx.metric.clone();
    let prior = ctx.prior.clone();
    let c = ctx.curves()?.clone();
    let len = c.mmse.grid.len();
    let picks: Vec<usize> = {
        let mut v: Vec<usize> = (0..20).map(|j| (j * (len - 1) + 9) / 19).collect();
        v.dedup();
        v
    };
    let mut worst: Option<(f64, usize, f64, f64)> = None;
    for k in picks {
        let a = (c.mutual_info.values[k] + 4.0 * c.mutual_info.stderrs[k]).clamp(0.0, h);
        let d = distortion_at_rate_with_tol(&metric, &prior, a, tol)?;
        let lhs = 2.0 * c.mmse.values[k];
        let sigma = 2.0 * c.mmse.stderrs[k];
        let excess = d * d - (lhs + 4.0 * sigma + slack);
        if worst.is_none_or(|w| excess > w.0) {
            worst = Some((excess, k, d * d, sigma));
        }
    }
    let (excess, k, rhs, sigma) = worst.expect("at least one grid point");
    rec.set(2.0 * c.mmse.values[k], rhs, 4.0 * sigma + slack, sigma, excess <= 0.0);
    rec.value("worst_snr", c.mmse.grid[k]);
    rec.samples = samples;
    rec.seed = seed;
    Ok(())
}

fn check_headline(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let w = ctx.width();
    let lhs = 0.5 * ctx.sqrt_rate()?;
    rec.set(lhs, w.value, 3.0 * w.stderr, w.stderr, lhs <= w.value + 3.0 * w.stderr);
    rec.samples = w.samples;
    rec.seed = w.seed;
    Ok(())
}

fn check_diameter(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let w = ctx.width();
    let rhs = ctx.metric.diam() * FRAC_1_SQRT_2PI;
    rec.set(w.value, rhs, 4.0 * w.stderr, w.stderr, w.value >= rhs - 4.0 * w.stderr);
    rec.samples = w.samples;
    rec.seed = w.seed;
    Ok(())
}

fn check_layer_cake(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let rhs = 2.0 * ctx.sqrt_rate()?;
    let lhs = layer_cake_integral_with_tol(&ctx.metric, &ctx.prior, ctx.config.rd_tol)?;
    let tol = 2e-3 * rhs.max(1.0);
    rec.set(lhs, rhs, tol, 0.0, (lhs - rhs).abs() <= tol);
    Ok(())
}

fn check_rd_oracles(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let n = ctx.metric.len();
    if n > BRUTE_FORCE_MAX_POINTS {
        rec.skip("exhaustive oracle needs at most 3 points");
        return Ok(());
    }
    let diam = ctx.metric.diam();
    let mut worst = (0.0f64, 0.0, 0.0);
    let mut closed_form = 0.0f64;
    for j in 0..=10 {
        let r = diam * j as f64 / 10.0;
        let solver = rate_at_distortion_with_tol(&ctx.metric, &ctx.prior, r, ctx.config.rd_tol)?;
        let brute = rate_at_distortion_brute_force(&ctx.metric, &ctx.prior, r, 1e-4)?;
        if (solver - brute).abs() >= worst.0 {
            worst = ((solver - brute).abs(), solver, brute);
        }
        if ctx.is_uniform_pair() {
            closed_form = closed_form.max((solver - two_point_rd_exact(diam, 0.5, r)).abs());
        }
    }
    rec.set(worst.1, worst.2, 1e-3, 0.0, worst.0 <= 1e-3 && closed_form <= 1e-6);
    if ctx.is_uniform_pair() {
        rec.value("closed_form_max_error", closed_form);
    }
    Ok(())
}

fn check_binary_area(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    if !ctx.is_uniform_pair() {
        rec.skip("closed form needs two points with a uniform prior");
        return Ok(());
    }
    let delta = ctx.metric.diam();
    let lhs = binary_integrated_mmse(delta);
    let rhs = binary_area_constant() * delta;
    rec.set(lhs, rhs, 0.0, 0.0, lhs >= rhs);
    Ok(())
}

/// Multipliers for the audit's Pareto trace: 0, then geometric from
/// `1e-2 / diam^2` to `1e4 / d_min^2`.
pub fn trace_lambdas(metric: &FiniteMetric) -> Vec<f64> {
    let mut out = vec![0.0];
    if metric.len() < 2 || metric.diam() <= 0.0 {
        return out;
    }
    let lo = 1e-2 / metric.diam().powi(2);
    let hi = 1e4 / metric.d_min().powi(2);
    let k = 40;
    out.extend((0..=k).map(|j| lo * (hi / lo).powf(j as f64 / k as f64)));
    out
}

fn check_trace(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let tol = ctx.config.rd_tol;
    let curve = pareto_trace_with_tol(&ctx.metric, &ctx.prior, &trace_lambdas(&ctx.metric), tol)?;
    rec.set(curve.max_residual, tol, 0.0, 0.0, curve.max_residual <= tol);
    rec.value("points", curve.points.len() as f64);
    Ok(())
}

/// Grid step for [`ft_grid_search`]: about 10^5 grid measures for up to four
/// points, fine enough to land within 1e-2 of the optimum.
pub fn ft_grid_step(n: usize) -> f64 {
    match n {
        0..=2 => 1e-3,
        3 => 2e-3,
        _ => 1e-2,
    }
}

/// Best `ft_value` over the simplex grid with the given step, for up to four
/// points.
pub fn ft_grid_search(metric: &FiniteMetric, step: f64) -> f64 {
    let n = metric.len();
    let m = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    let mut counts = vec![0usize; n];
    fn rec(k: usize, left: usize, counts: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if k + 1 == counts.len() {
            counts[k] = left;
            f(counts);
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            rec(k + 1, left - c, counts, f);
        }
    }
    rec(0, m, &mut counts, &mut |c: &[usize]| {
        let w: Vec<f64> = c.iter().map(|&x| x as f64 / m as f64).collect();
        let v = ft_value(metric, &MeasureOnT { weights: w, floor: 0.0 });
        best = best.min(v);
    });
    best
}

fn check_ft(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let n = ctx.metric.len();
    let (_, opt) = ctx.ft();
    let uniform = ft_value(&ctx.metric, &MeasureOnT::uniform(n));
    rec.value("ft_uniform", uniform);
    rec.seed = ctx.seed("ft_optimize");
    if n <= 1 {
        rec.set(opt, 0.0, 0.0, 0.0, opt == 0.0);
        return Ok(());
    }
    let mut pass = opt <= uniform;
    let (reference, tol) = if n == 2 {
        let exact = 2f64.ln().sqrt() * ctx.metric.diam();
        pass &= (uniform - exact).abs() <= 1e-9;
        (exact, 1e-4)
    } else if let Some(d) = ctx.equilateral_side() {
        ((n as f64).ln().sqrt() * d, 1e-3)
    } else if n <= 4 {
        let g = ft_grid_search(&ctx.metric, ft_grid_step(n));
        rec.value("grid_search", g);
        (g, 1e-2)
    } else {
        (uniform, 0.0)
    };
    if n > 4 && ctx.equilateral_side().is_none() {
        rec.set(opt, reference, tol, 0.0, pass);
        rec.detail = Some("no exact reference; checked against the uniform measure only".into());
    } else {
        rec.set(opt, reference, tol, 0.0, pass && (opt - reference).abs() <= tol);
    }
    Ok(())
}

fn check_gamma2(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let n = ctx.metric.len();
    if n > GAMMA2_MAX_POINTS {
        rec.skip("exhaustive enumeration needs at most 8 points");
        return Ok(());
    }
    let g1 = gamma2_part_exact(&ctx.metric, 1)?;
    let g2 = gamma2_part_exact(&ctx.metric, 2)?;
    rec.value("cap1", g1);
    rec.value("cap2", g2);
    let mut pass = g2 <= g1;
    let expected = match n {
        1 => Some((0.0, 0.0)),
        2 => Some((ctx.metric.diam(), 0.0)),
        3 => ctx.equilateral_side().map(|d| (d, d)),
        _ => None,
    };
    if let Some((e1, e2)) = expected {
        pass &= g1 == e1 && g2 == e2;
        rec.set(g1, e1, 0.0, 0.0, pass);
    } else {
        rec.set(g2, g1, 0.0, 0.0, pass);
    }
    Ok(())
}

fn check_sandwich(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let w = ctx.width();
    let (mu, m_hat) = ctx.ft();
    let budget = ctx.config.search;
    let r_hat = least_favorable_search(&ctx.emb, Objective::SqrtRateIntegral, &budget, ctx.seed("search_rate"))?.value;
    let z_hat = least_favorable_search(&ctx.emb, Objective::IntegratedMmse, &budget, ctx.seed("search_mmse"))?.value;
    rec.value("width", w.value);
    rec.value("m_hat", m_hat);
    rec.value("r_hat", r_hat);
    rec.value("z_hat", z_hat);
    rec.samples = w.samples;
    rec.seed = w.seed;
    if ctx.metric.len() <= 1 {
        rec.lhs = w.value;
        rec.rhs = m_hat;
        rec.status = Status::ReportOnly;
        rec.detail = Some("single point: every functional vanishes".into());
        return Ok(());
    }
    let ratios = [
        ("width_over_m", w.value / m_hat),
        ("width_over_r", w.value / r_hat),
        ("z_over_m", z_hat / m_hat),
    ];
    for (k, v) in ratios {
        rec.value(k, v);
    }
    // ball profile at the point attaining the sup for the optimized measure
    let t_star = (0..ctx.metric.len())
        .max_by(|&a, &b| {
            let pa = StepFunction::ball_profile(&ctx.metric, &mu, a).map(|y| y.integral()).unwrap_or(f64::INFINITY);
            let pb = StepFunction::ball_profile(&ctx.metric, &mu, b).map(|y| y.integral()).unwrap_or(f64::INFINITY);
            pa.total_cmp(&pb).then(b.cmp(&a))
        })
        .expect("nonempty");
    if let Ok(y) = StepFunction::ball_profile(&ctx.metric, &mu, t_star) {
        let p = penalized_functional(&y)?;
        rec.value("penalized_over_profile", p / y.integral());
    }
    rec.lhs = w.value;
    rec.rhs = m_hat;
    rec.stderr = w.stderr;
    let ok = ratios.iter().all(|(_, v)| v.is_finite() && *v > 0.0);
    rec.status = if ok { Status::ReportOnly } else { Status::Fail };
    Ok(())
}

fn check_determinism(ctx: &mut Context, rec: &mut CheckRecord) -> Result<()> {
    let samples = ctx.config.samples.min(4096);
    let seed = ctx.seed("determinism");
    let run = |emb: &EmbeddedProcess, prior: &Prior, grid: &[f64]| -> Result<String> {
        let w = width_mc(emb, samples, seed);
        let c = channel_curves(emb, prior, grid, samples, seed)?;
        Ok(canonical_json(&(w, c))?)
    };
    let a = run(&ctx.emb, &ctx.prior, &ctx.grid)?;
    let b = run(&ctx.emb, &ctx.prior, &ctx.grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::BadParams(e.to_string()))?;
    let c = pool.install(|| run(&ctx.emb, &ctx.prior, &ctx.grid))?;
    let same = a == b && a == c;
    rec.set(if same { 1.0 } else { 0.0 }, 1.0, 0.0, 0.0, same);
    rec.samples = samples;
    rec.seed = seed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_instance, Family};

    fn quick(seed: u64) -> AuditConfig {
        let mut c = AuditConfig::new(seed);
        c.samples = 20_000;
        c.ft.iterations = 300;
        c.ft.restarts = 2;
        c.search.restarts = 1;
        c.search.iterations = 3;
        c.search.samples = 32;
        c
    }

    #[test]
    fn constant_matches_hand_value() {
        assert!((binary_area_constant() - 0.100_216_349_56).abs() < 1e-10);
    }

    #[test]
    fn check_list_parsing() {
        assert_eq!(parse_checks("all").unwrap().len(), 14);
        assert_eq!(parse_checks("a3, A1,A3").unwrap(), vec![CheckId::A1, CheckId::A3]);
        assert!(parse_checks("A15").is_err());
    }

    #[test]
    fn two_point_suite_passes() {
        let inst = generate_instance(Family::TwoPoint, 2, 1, 1).unwrap();
        let (rep, timings) = run_audit(&inst, &quick(1)).unwrap();
        assert_eq!(rep.checks.len(), 14);
        assert_eq!(timings.len(), 14);
        for c in &rep.checks {
            assert!(c.status != Status::Fail, "{c:?}");
            assert!(c.runtime_ms.is_none());
        }
        assert_eq!(rep.schema, SCHEMA);
    }

    #[test]
    fn singleton_suite() {
        let inst = Instance::from_points("one", vec![vec![0.2, 0.1]], None, 0).unwrap();
        let (rep, _) = run_audit(&inst, &quick(2)).unwrap();
        assert!(!rep.failed(), "{:#?}", rep.checks);
        let a6 = rep.checks.iter().find(|c| c.check_id == CheckId::A6).unwrap();
        assert_eq!(a6.lhs, 0.0);
    }

    #[test]
    fn reports_are_byte_identical() {
        let inst = generate_instance(Family::Cloud, 4, 3, 7).unwrap();
        let mut cfg = quick(3);
        cfg.checks = parse_checks("A1,A3,A6,A10").unwrap();
        let a = run_audit(&inst, &cfg).unwrap().0.to_json().unwrap();
        let b = run_audit(&inst, &cfg).unwrap().0.to_json().unwrap();
        assert_eq!(a, b);
    }
}
