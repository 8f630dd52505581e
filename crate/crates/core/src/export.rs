//! Curve exports and append-only output directories.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::{sha256_hex, trace_lambdas};
use crate::channel::{channel_curves, snr_grid, ChannelCurves, DecayCertificate};
use crate::error::{Error, Result};
use crate::instance::{canonical_json, Instance};
use crate::mc::derive_seed;
use crate::process::metric_of;
use crate::rate_distortion::{pareto_trace_with_tol, RdCurve};

pub const CURVE_COLUMNS: [&str; 7] = ["s", "mse_mle", "mse_mle_stderr", "mmse", "mmse_stderr", "mi", "mi_stderr"];
pub const RD_COLUMNS: [&str; 3] = ["lambda", "rate", "distortion_sq"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

/// Rows of the curve table in [`CURVE_COLUMNS`] order.
pub fn curve_rows(c: &ChannelCurves) -> Vec<Vec<f64>> {
    (0..c.mse_mle.grid.len())
        .map(|k| {
            vec![
                c.mse_mle.grid[k],
                c.mse_mle.values[k],
                c.mse_mle.stderrs[k],
                c.mmse.values[k],
                c.mmse.stderrs[k],
                c.mutual_info.values[k],
                c.mutual_info.stderrs[k],
            ]
        })
        .collect()
}

pub fn rd_rows(curve: &RdCurve) -> Vec<Vec<f64>> {
    curve
        .points
        .iter()
        .map(|p| vec![p.lambda, p.rate, p.distortion_sq])
        .collect()
}

/// Open a file that must not exist yet.
fn create_new(path: &Path) -> Result<File> {
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// RFC 4180 table with a header row; numbers in shortest round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_new(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Io(format!("bad number {f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// JSON table `{"columns": [...], "rows": [[...], ...]}`. Non-finite
/// numbers are written as strings so they survive the round trip.
pub fn write_json_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let rows: Vec<Vec<serde_json::Value>> = rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|&x| {
                    if x.is_finite() {
                        serde_json::Value::from(x)
                    } else {
                        serde_json::Value::from(x.to_string())
                    }
                })
                .collect()
        })
        .collect();
    let v = serde_json::json!({ "columns": header, "rows": rows });
    write_text(path, &canonical_json(&v)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create_new(path)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::Io(e.to_string()))
}

fn write_table(path: &Path, format: Format, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    match format {
        Format::Csv => write_csv(path, header, rows),
        Format::Json => write_json_table(path, header, rows),
    }
}

/// Fresh directory under `root` named by the hash of the instance and the
/// configuration. If that name is taken a numeric suffix is appended, so
/// earlier results are never touched.
pub fn content_dir(root: &Path, instance: &Instance, config: &impl Serialize) -> Result<PathBuf> {
    let key = format!("{}{}", instance.to_json()?, canonical_json(config)?);
    let stem = sha256_hex(key.as_bytes())[..16].to_string();
    fs::create_dir_all(root).map_err(|e| Error::Io(format!("{}: {e}", root.display())))?;
    for k in 1.. {
        let name = if k == 1 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!("unbounded suffix search")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveExportConfig {
    pub seed: u64,
    pub samples: usize,
    pub grid_points: usize,
    pub rd_tol: f64,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveExport {
    pub curves_path: PathBuf,
    pub rd_path: PathBuf,
    pub curves: ChannelCurves,
    pub rd: RdCurve,
}

/// Write the channel curve table and the rate-distortion trace into `dir`
/// (which must not already contain them). The curves use the same derived
/// seed as the audit, so exported curves match the audited ones.
pub fn export_curves(instance: &Instance, cfg: &CurveExportConfig, dir: &Path) -> Result<CurveExport> {
    let emb = instance.embedding()?;
    let prior = instance.prior()?;
    let metric = metric_of(&emb);
    let grid = snr_grid(&DecayCertificate::from_metric(&metric), cfg.grid_points);
    let curves = channel_curves(&emb, &prior, &grid, cfg.samples, derive_seed(cfg.seed, "curves"))?;
    let rd = pareto_trace_with_tol(&metric, &prior, &trace_lambdas(&metric), cfg.rd_tol)?;
    let ext = cfg.format.extension();
    let curves_path = dir.join(format!("curves.{ext}"));
    let rd_path = dir.join(format!("rd_trace.{ext}"));
    write_table(&curves_path, cfg.format, &CURVE_COLUMNS, &curve_rows(&curves))?;
    write_table(&rd_path, cfg.format, &RD_COLUMNS, &rd_rows(&rd))?;
    Ok(CurveExport {
        curves_path,
        rd_path,
        curves,
        rd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_instance, Family};
    use crate::special::normal_sf;

    fn cfg(format: Format) -> CurveExportConfig {
        CurveExportConfig {
            seed: 4,
            samples: 20_000,
            grid_points: 32,
            rd_tol: 1e-10,
            format,
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let inst = generate_instance(Family::TwoPoint, 2, 1, 0).unwrap();
        let out = export_curves(&inst, &cfg(Format::Csv), tmp.path()).unwrap();
        let (header, rows) = read_csv(&out.curves_path).unwrap();
        assert_eq!(header, CURVE_COLUMNS);
        let expected = curve_rows(&out.curves);
        assert_eq!(rows.len(), expected.len());
        for (a, b) in rows.iter().zip(&expected) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let (h2, rd) = read_csv(&out.rd_path).unwrap();
        assert_eq!(h2, RD_COLUMNS);
        assert_eq!(rd.last().unwrap()[0], f64::INFINITY);
    }

    #[test]
    fn two_point_rows_follow_closed_form() {
        let tmp = tempfile::tempdir().unwrap();
        let inst = generate_instance(Family::TwoPoint, 2, 1, 0).unwrap();
        let out = export_curves(&inst, &cfg(Format::Csv), tmp.path()).unwrap();
        for row in read_csv(&out.curves_path).unwrap().1 {
            // squared error is D^2 = 1 times a Bernoulli(Q(s/2)) event; use its
            // exact standard error since rare rows can show zero events
            let exact = normal_sf(row[0] / 2.0);
            let sigma = (exact * (1.0 - exact) / 20_000.0).sqrt().max(row[2]);
            assert!((row[1] - exact).abs() <= 3.0 * sigma + 1e-12, "{row:?}");
        }
        let first = &read_csv(&out.curves_path).unwrap().1[0];
        // prior variance of +-1/2 is 1/4
        assert!((first[3] - 0.25).abs() <= 3.0 * first[4] + 1e-12);
    }

    #[test]
    fn never_overwrites() {
        let tmp = tempfile::tempdir().unwrap();
        let inst = generate_instance(Family::TwoPoint, 2, 1, 0).unwrap();
        let a = content_dir(tmp.path(), &inst, &cfg(Format::Csv)).unwrap();
        let b = content_dir(tmp.path(), &inst, &cfg(Format::Csv)).unwrap();
        assert_ne!(a, b);
        assert!(b.file_name().unwrap().to_string_lossy().ends_with("-2"));
        export_curves(&inst, &cfg(Format::Json), &a).unwrap();
        assert!(export_curves(&inst, &cfg(Format::Json), &a).is_err());
    }
}
