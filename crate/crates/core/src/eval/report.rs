use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Condition, EvalGrid, SigmaAxis, PSNR_CAP_DB};
use crate::error::{Error, Result};

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

pub fn format_sig6(x: f64) -> String {
    round_sig6(x).to_string()
}

/// One `(condition, snr, σ_e, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub condition: Condition,
    pub snr_db: f64,
    pub sigma_e: f64,
    pub seed: u64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub snr_db: Vec<f64>,
    pub sigma_e: Vec<f64>,
    pub sigma_axis: SigmaAxis,
    pub samples_per_cell: usize,
    /// grid values actually used for the two curve slices
    pub slice_sigma_e: f64,
    pub slice_snr_db: f64,
    pub psnr_cap_db: f64,
    /// seconds since the Unix epoch
    pub timestamp: u64,
}

fn nearest(values: &[f64], target: f64) -> f64 {
    values
        .iter()
        .copied()
        .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
        .unwrap_or(target)
}

impl Metadata {
    pub fn new(
        grid: &EvalGrid,
        conditions: Vec<Condition>,
        master_seed: u64,
        config_hash: &str,
        samples_per_cell: usize,
    ) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            master_seed,
            seeds: grid.seeds.clone(),
            conditions,
            snr_db: grid.snr_db.clone(),
            sigma_e: grid.sigma_e.clone(),
            sigma_axis: grid.sigma_axis,
            samples_per_cell,
            slice_sigma_e: nearest(&grid.sigma_e, grid.slice_sigma_e),
            slice_snr_db: nearest(&grid.snr_db, grid.slice_snr_db),
            psnr_cap_db: PSNR_CAP_DB,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// Mean and spread across seeds of one `(condition, snr, σ_e)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub condition: Condition,
    pub snr_db: f64,
    pub sigma_e: f64,
    pub mean_db: f64,
    /// sample standard deviation across seeds (0 for a single seed)
    pub std_db: f64,
    pub seeds: usize,
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: Metadata,
    pub rows: Vec<Row>,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "condition,snr_db,sigma_e,seed,psnr_db";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.condition,
                format_sig6(r.snr_db),
                format_sig6(r.sigma_e),
                r.seed,
                format_sig6(r.psnr_db)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut copy = self.clone();
        for r in &mut copy.rows {
            r.psnr_db = round_sig6(r.psnr_db);
            r.snr_db = round_sig6(r.snr_db);
            r.sigma_e = round_sig6(r.sigma_e);
        }
        serde_json::to_string_pretty(&copy).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.rows.iter().map(|r| r.condition).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Mean PSNR of `condition` over the rows accepted by `keep`.
    pub fn mean_where(&self, condition: Condition, keep: impl Fn(&Row) -> bool) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition == condition && keep(r))
            .map(|r| r.psnr_db)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary(&self) -> Vec<SummaryCell> {
        let mut out: Vec<SummaryCell> = Vec::new();
        for c in self.conditions() {
            for &snr in &self.metadata.snr_db {
                for &sig in &self.metadata.sigma_e {
                    let v: Vec<f64> = self
                        .rows
                        .iter()
                        .filter(|r| r.condition == c && r.snr_db == snr && r.sigma_e == sig)
                        .map(|r| r.psnr_db)
                        .collect();
                    if v.is_empty() {
                        continue;
                    }
                    let (mean_db, std_db) = mean_std(&v);
                    out.push(SummaryCell {
                        condition: c,
                        snr_db: snr,
                        sigma_e: sig,
                        mean_db,
                        std_db,
                        seeds: v.len(),
                    });
                }
            }
        }
        out
    }

    fn cell(
        &self,
        summary: &[SummaryCell],
        c: Condition,
        snr: f64,
        sig: f64,
    ) -> Option<(f64, f64)> {
        summary
            .iter()
            .find(|s| s.condition == c && s.snr_db == snr && s.sigma_e == sig)
            .map(|s| (s.mean_db, s.std_db))
    }

    /// Two gnuplot data blocks (select with `index 0` / `index 1`):
    /// PSNR vs SNR at the σ_e slice and PSNR vs σ_e at the SNR slice, with a
    /// mean and std column pair per condition.
    pub fn gnuplot(&self) -> String {
        let summary = self.summary();
        let conds = self.conditions();
        let m = &self.metadata;
        let header = |axis: &str| {
            let mut h = format!("# {axis}");
            for c in &conds {
                let _ = write!(h, " {c}_mean {c}_std");
            }
            h
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# PSNR (dB) vs SNR at sigma_e = {} ({:?} axis)",
            format_sig6(m.slice_sigma_e),
            m.sigma_axis
        );
        let _ = writeln!(s, "{}", header("snr_db"));
        for &snr in &m.snr_db {
            let _ = write!(s, "{}", format_sig6(snr));
            for &c in &conds {
                let (mu, sd) = self
                    .cell(&summary, c, snr, m.slice_sigma_e)
                    .unwrap_or((f64::NAN, f64::NAN));
                let _ = write!(s, " {} {}", format_sig6(mu), format_sig6(sd));
            }
            s.push('\n');
        }
        s.push_str("\n\n");
        let _ = writeln!(
            s,
            "# PSNR (dB) vs sigma_e at snr_db = {}",
            format_sig6(m.slice_snr_db)
        );
        let _ = writeln!(s, "{}", header("sigma_e"));
        for &sig in &m.sigma_e {
            let _ = write!(s, "{}", format_sig6(sig));
            for &c in &conds {
                let (mu, sd) = self
                    .cell(&summary, c, m.slice_snr_db, sig)
                    .unwrap_or((f64::NAN, f64::NAN));
                let _ = write!(s, " {} {}", format_sig6(mu), format_sig6(sd));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.dat` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [
            ("csv", self.to_csv()),
            ("json", self.to_json()),
            ("dat", self.gnuplot()),
        ] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
