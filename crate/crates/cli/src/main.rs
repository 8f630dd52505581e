use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmt_core::audit::{parse_checks, run_audit, AuditConfig, Status};
use mmt_core::channel::DEFAULT_GRID_POINTS;
use mmt_core::export::{content_dir, export_curves, write_csv, write_text, CurveExportConfig, Format};
use mmt_core::functionals::{ft_optimize, ft_value, gamma2_part_exact, penalized_functional, psi_gibbs, FtBudget, MeasureOnT, StepFunction, GAMMA2_MAX_POINTS};
use mmt_core::instance::{canonical_json, dirichlet_prior, generate_instance, Family, Instance};
use mmt_core::mc::derive_seed;
use mmt_core::process::{entropy, metric_of, Prior};
use mmt_core::rate_distortion::{distortion_at_rate_with_tol, layer_cake_integral_with_tol, rate_at_distortion_with_tol, sqrt_rate_integral_with_tol, DEFAULT_TOL};
use mmt_core::width::DEFAULT_SAMPLES;

/// Finite Gaussian process laboratory: widths, channel curves, rate
/// distortion, majorizing-measure functionals and the audit suite.
#[derive(Parser)]
#[command(name = "mmt-lab", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed (defaults to the instance's seed, or 0 for `gen`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo samples per curve point and for the width
    #[arg(long, global = true, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    /// Output file (`gen`) or root directory for run directories
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Marginal tolerance of the rate-distortion solver
    #[arg(long, global = true, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Comma-separated checks to run, or `all`
    #[arg(long, global = true, default_value = "all")]
    checks: String,
    /// Table format for curve and rate-distortion output
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Json => Format::Json,
            OutFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    TwoPoint,
    Orthonormal,
    Simplex,
    Cloud,
    Ultrametric,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::TwoPoint => Family::TwoPoint,
            FamilyArg::Orthonormal => Family::Orthonormal,
            FamilyArg::Simplex => Family::Simplex,
            FamilyArg::Cloud => Family::Cloud,
            FamilyArg::Ultrametric => Family::Ultrametric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance file
    Gen {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        dim: Option<usize>,
        /// Multiply all distances by this factor
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// `uniform`, `dirichlet`, or comma-separated weights
        #[arg(long, default_value = "uniform")]
        prior: String,
    },
    /// Run the audit suite and write a report
    Audit {
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid_points: usize,
    },
    /// Export MLE/MMSE/mutual-information curves and the rate-distortion trace
    Curves {
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid_points: usize,
    },
    /// Tabulate R(r), D(A) and the two integrals
    Rd {
        instance: PathBuf,
        /// Number of radii and rates in the tables
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Majorizing-measure functional, partition gamma_2 and Gibbs quantities
    Functionals {
        instance: PathBuf,
        #[arg(long, default_value_t = FtBudget::default().restarts)]
        restarts: usize,
        #[arg(long, default_value_t = FtBudget::default().iterations)]
        iterations: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Instance> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Instance::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn out_root(g: &Global) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen {
            family,
            size,
            dim,
            scale,
            prior,
        } => {
            let seed = g.seed.unwrap_or(0);
            let mut inst = generate_instance((*family).into(), *size, dim.unwrap_or(*size), seed)?;
            if *scale != 1.0 {
                inst = inst.scaled(*scale)?;
            }
            let p = match prior.as_str() {
                "uniform" => Prior::uniform(*size),
                "dirichlet" => dirichlet_prior(*size, seed),
                list => Prior::normalized(
                    list.split(',')
                        .map(|w| w.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .context("parsing --prior weights")?,
                )?,
            };
            let inst = inst.with_prior(&p)?;
            let text = inst.to_json()?;
            match &g.out {
                Some(path) => {
                    write_text(path, &text)?;
                    eprintln!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { instance, grid_points } => {
            let inst = load(instance)?;
            let mut cfg = AuditConfig::new(g.seed.unwrap_or(inst.seed));
            cfg.samples = g.samples;
            cfg.grid_points = *grid_points;
            cfg.rd_tol = g.tol;
            cfg.checks = parse_checks(&g.checks)?;
            let (report, timings) = run_audit(&inst, &cfg)?;
            let dir = content_dir(&out_root(g), &inst, &cfg)?;
            write_text(&dir.join("instance.json"), &inst.to_json()?)?;
            write_text(&dir.join("report.json"), &report.to_json()?)?;
            write_text(&dir.join("timings.json"), &canonical_json(&timings)?)?;
            for c in &report.checks {
                let status = match c.status {
                    Status::Pass => "pass",
                    Status::Fail => "FAIL",
                    Status::ReportOnly => "report_only",
                    Status::Skipped => "skipped",
                };
                println!(
                    "{:<4} {:<11} lhs={:<13.6e} rhs={:<13.6e} tol={:<11.3e} {}",
                    c.check_id.to_string(),
                    status,
                    c.lhs,
                    c.rhs,
                    c.tolerance,
                    c.detail.as_deref().unwrap_or(&c.title)
                );
            }
            println!(
                "pass={} fail={} report_only={} skipped={} -> {}",
                report.summary.pass,
                report.summary.fail,
                report.summary.report_only,
                report.summary.skipped,
                dir.display()
            );
            Ok(if report.failed() { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Curves { instance, grid_points } => {
            let inst = load(instance)?;
            let cfg = CurveExportConfig {
                seed: g.seed.unwrap_or(inst.seed),
                samples: g.samples,
                grid_points: *grid_points,
                rd_tol: g.tol,
                format: g.format.into(),
            };
            let dir = content_dir(&out_root(g), &inst, &cfg)?;
            let out = export_curves(&inst, &cfg, &dir)?;
            println!("{}", out.curves_path.display());
            println!("{}", out.rd_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Rd { instance, points } => {
            let inst = load(instance)?;
            let emb = inst.embedding()?;
            let metric = metric_of(&emb);
            let prior = inst.prior()?;
            let h = entropy(&prior);
            let k = (*points).max(2);
            let mut rate_rows = Vec::with_capacity(k);
            let mut dist_rows = Vec::with_capacity(k);
            for j in 0..k {
                let r = metric.diam() * j as f64 / (k - 1) as f64;
                rate_rows.push(vec![r, rate_at_distortion_with_tol(&metric, &prior, r, g.tol)?]);
                let a = h * j as f64 / (k - 1) as f64;
                dist_rows.push(vec![a, distortion_at_rate_with_tol(&metric, &prior, a, g.tol)?]);
            }
            let sqrt_rate = sqrt_rate_integral_with_tol(&metric, &prior, g.tol)?;
            let layer_cake = layer_cake_integral_with_tol(&metric, &prior, g.tol)?;
            match (g.format, &g.out) {
                (OutFormat::Csv, Some(root)) => {
                    let dir = content_dir(root, &inst, &json!({"command": "rd", "points": k, "tol": g.tol}))?;
                    write_csv(&dir.join("rate.csv"), &["r", "rate"], &rate_rows)?;
                    write_csv(&dir.join("distortion.csv"), &["rate", "distortion"], &dist_rows)?;
                    write_csv(&dir.join("integrals.csv"), &["sqrt_rate_integral", "layer_cake_integral"], &[vec![sqrt_rate, layer_cake]])?;
                    println!("{}", dir.display());
                }
                (OutFormat::Csv, None) => {
                    println!("r,rate");
                    for row in &rate_rows {
                        println!("{},{}", row[0], row[1]);
                    }
                }
                (OutFormat::Json, out) => {
                    let doc = json!({
                        "entropy": h,
                        "rate_at_distortion": rate_rows,
                        "distortion_at_rate": dist_rows,
                        "sqrt_rate_integral": sqrt_rate,
                        "layer_cake_integral": layer_cake,
                    });
                    emit_json(out.as_deref(), &inst, &json!({"command": "rd", "points": k, "tol": g.tol}), "rd.json", &doc)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Functionals {
            instance,
            restarts,
            iterations,
        } => {
            let inst = load(instance)?;
            let emb = inst.embedding()?;
            let metric = metric_of(&emb);
            let n = metric.len();
            let seed = g.seed.unwrap_or(inst.seed);
            let budget = FtBudget {
                restarts: *restarts,
                iterations: *iterations,
                ..FtBudget::default()
            };
            let (mu, m_hat) = ft_optimize(&metric, &budget, derive_seed(seed, "ft_optimize"));
            let prior_measure = MeasureOnT::from(&inst.prior()?);
            let gamma2 = if n <= GAMMA2_MAX_POINTS {
                json!({ "cap1": gamma2_part_exact(&metric, 1)?, "cap2": gamma2_part_exact(&metric, 2)? })
            } else {
                serde_json::Value::Null
            };
            let alphas = [0.25, 0.5, 1.0, 2.0, 4.0];
            let psi: Vec<Vec<f64>> = (0..n)
                .map(|x| alphas.iter().map(|&a| psi_gibbs(&metric, &mu, x, a)).collect::<mmt_core::Result<Vec<f64>>>())
                .collect::<mmt_core::Result<_>>()?;
            let mut penalized = Vec::new();
            for t in 0..n {
                if let Ok(y) = StepFunction::ball_profile(&metric, &mu, t) {
                    let p = penalized_functional(&y)?;
                    penalized.push(json!({ "t": t, "penalized": p, "profile_integral": y.integral() }));
                }
            }
            let doc = json!({
                "ft_prior": ft_value(&metric, &prior_measure),
                "ft_uniform": ft_value(&metric, &MeasureOnT::uniform(n)),
                "ft_optimized": m_hat,
                "optimized_measure": mu.weights,
                "gamma2_part": gamma2,
                "psi_alphas": alphas,
                "psi": psi,
                "penalized": penalized,
            });
            let cfg = json!({"command": "functionals", "seed": seed, "budget": budget});
            emit_json(g.out.as_deref(), &inst, &cfg, "functionals.json", &doc)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn emit_json(root: Option<&Path>, inst: &Instance, cfg: &serde_json::Value, name: &str, doc: &serde_json::Value) -> Result<()> {
    let text = canonical_json(doc)?;
    match root {
        Some(root) => {
            let dir = content_dir(root, inst, cfg)?;
            write_text(&dir.join(name), &text)?;
            println!("{}", dir.join(name).display());
        }
        None => print!("{text}"),
    }
    if doc.is_null() {
        bail!("empty document");
    }
    Ok(())
}
