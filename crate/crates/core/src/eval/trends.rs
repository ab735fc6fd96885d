use std::fmt;

use serde::{Deserialize, Serialize};

use super::report::{format_sig6, mean_std, Row, SweepReport};
use super::Condition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// the mean difference is within the tie tolerance
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendOptions {
    /// mean differences within this many dB count as ties
    pub tie_tol_db: f64,
    /// σ_e values averaged for the adaptor-benefit hypothesis; `None` uses the whole grid
    pub adaptor_sigma_subset: Option<Vec<f64>>,
}

impl Default for TrendOptions {
    fn default() -> Self {
        Self {
            tie_tol_db: 1e-6,
            adaptor_sigma_subset: Some(vec![0.05, 0.1]),
        }
    }
}

/// `better` is expected to beat `worse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Condition,
    pub worse: Condition,
    pub mean_diff_db: f64,
    pub seed_wins: usize,
    pub seed_losses: usize,
    pub seed_ties: usize,
    /// two-sided sign-test p-value over seeds
    pub sign_p: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub label: String,
    pub statement: String,
    pub comparisons: Vec<Comparison>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdicts {
    pub hypotheses: Vec<Hypothesis>,
}

impl TrendVerdicts {
    pub fn get(&self, label: &str) -> Option<&Hypothesis> {
        self.hypotheses.iter().find(|h| h.label == label)
    }
}

impl fmt::Display for TrendVerdicts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<4} {:<13} {:<34} {:>10} {:>9} {:>8}",
            "hyp", "verdict", "comparison", "diff_db", "w/l/t", "sign_p"
        )?;
        for h in &self.hypotheses {
            for (i, c) in h.comparisons.iter().enumerate() {
                let (label, verdict) = if i == 0 {
                    (h.label.as_str(), h.verdict.to_string())
                } else {
                    ("", String::new())
                };
                writeln!(
                    f,
                    "{:<4} {:<13} {:<34} {:>10} {:>9} {:>8}",
                    label,
                    verdict,
                    format!("{} >= {}", c.better, c.worse),
                    format_sig6(c.mean_diff_db),
                    format!("{}/{}/{}", c.seed_wins, c.seed_losses, c.seed_ties),
                    format_sig6(c.sign_p)
                )?;
            }
        }
        Ok(())
    }
}

/// Two-sided sign test: probability of a split at least as uneven as
/// `wins`/`losses` under a fair coin. Ties are dropped.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // Σ_{i≤k} C(n, i) / 2^n
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = term;
    for i in 0..k {
        term *= (n - i) as f64 / (i + 1) as f64;
        tail += term;
    }
    (2.0 * tail).min(1.0)
}

fn compare(
    report: &SweepReport,
    better: Condition,
    worse: Condition,
    keep: &dyn Fn(&Row) -> bool,
    tol: f64,
) -> Comparison {
    let mean = |c: Condition, seed: Option<u64>| {
        report
            .mean_where(c, |r| keep(r) && seed.is_none_or(|s| r.seed == s))
            .unwrap_or(f64::NAN)
    };
    let mean_diff_db = mean(better, None) - mean(worse, None);
    let (mut w, mut l, mut t) = (0, 0, 0);
    for &s in &report.metadata.seeds {
        let d = mean(better, Some(s)) - mean(worse, Some(s));
        if d.is_nan() {
            continue;
        }
        if d > tol {
            w += 1;
        } else if d < -tol {
            l += 1;
        } else {
            t += 1;
        }
    }
    let verdict = if mean_diff_db.is_nan() {
        Verdict::Inconclusive
    } else if mean_diff_db > tol {
        Verdict::Pass
    } else if mean_diff_db < -tol {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    };
    Comparison {
        better,
        worse,
        mean_diff_db,
        seed_wins: w,
        seed_losses: l,
        seed_ties: t,
        sign_p: sign_test_p(w, l),
        verdict,
    }
}

fn combine(comparisons: &[Comparison]) -> Verdict {
    if comparisons.iter().any(|c| c.verdict == Verdict::Fail) {
        Verdict::Fail
    } else if comparisons
        .iter()
        .any(|c| c.verdict == Verdict::Inconclusive)
    {
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    }
}

/// Ordering hypotheses on grid-mean PSNR:
/// (a) PERFECT ≥ NAIVE_FT ≥ DIRECT, (b) HANA_NO_DISTILL ≥ NAIVE_FT over the
/// σ_e subset, (c) HANA ≥ HANA_NO_DISTILL.
pub fn compare_trends(report: &SweepReport, opts: &TrendOptions) -> Result<TrendVerdicts> {
    let present = report.conditions();
    let missing: Vec<&str> = Condition::ALL
        .iter()
        .filter(|c| !present.contains(c))
        .map(|c| c.tag())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "report lacks conditions {}",
            missing.join(", ")
        )));
    }
    let tol = opts.tie_tol_db;
    let all = |_: &Row| true;
    let a = vec![
        compare(report, Condition::Perfect, Condition::NaiveFt, &all, tol),
        compare(report, Condition::NaiveFt, Condition::Direct, &all, tol),
    ];

    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
    let subset: Vec<f64> = opts
        .adaptor_sigma_subset
        .iter()
        .flatten()
        .copied()
        .filter(|s| report.metadata.sigma_e.iter().any(|g| close(*g, *s)))
        .collect();
    let (keep_b, b_scope): (Box<dyn Fn(&Row) -> bool>, String) = if subset.is_empty() {
        (Box::new(all), "the sigma_e grid".into())
    } else {
        let sub = subset.clone();
        (
            Box::new(move |r: &Row| sub.iter().any(|s| close(*s, r.sigma_e))),
            format!("sigma_e in {subset:?}"),
        )
    };
    let b = vec![compare(
        report,
        Condition::HanaNoDistill,
        Condition::NaiveFt,
        &keep_b,
        tol,
    )];
    let c = vec![compare(
        report,
        Condition::Hana,
        Condition::HanaNoDistill,
        &all,
        tol,
    )];

    let hyp = |label: &str, statement: String, comparisons: Vec<Comparison>| Hypothesis {
        label: label.into(),
        statement,
        verdict: combine(&comparisons),
        comparisons,
    };
    Ok(TrendVerdicts {
        hypotheses: vec![
            hyp(
                "a",
                "PERFECT >= NAIVE_FT >= DIRECT on the grid mean".into(),
                a,
            ),
            hyp(
                "b",
                format!("HANA_NO_DISTILL > NAIVE_FT averaged over {b_scope}"),
                b,
            ),
            hyp("c", "HANA >= HANA_NO_DISTILL on the grid mean".into(), c),
        ],
    })
}

/// PSNR of one condition along the σ_e grid, averaged over SNR and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicCheck {
    pub condition: Condition,
    pub sigma_e: Vec<f64>,
    pub mean_db: Vec<f64>,
    /// spread across seeds of the per-seed means
    pub std_db: Vec<f64>,
    /// steps where PSNR rises with σ_e
    pub inversions: usize,
    /// inversions larger than the std of either neighbour
    pub inversions_beyond_std: usize,
}

impl MonotonicCheck {
    /// Non-increasing up to one inversion within one std.
    pub fn passes(&self) -> bool {
        self.inversions <= 1 && self.inversions_beyond_std == 0
    }
}

pub fn monotonic_degradation(report: &SweepReport, condition: Condition) -> Result<MonotonicCheck> {
    if !report.conditions().contains(&condition) {
        return Err(Error::Validation(format!(
            "report lacks condition {condition}"
        )));
    }
    let mut sigma_e = report.metadata.sigma_e.clone();
    sigma_e.sort_by(f64::total_cmp);
    let (mut mean_db, mut std_db) = (Vec::new(), Vec::new());
    for &sig in &sigma_e {
        let per_seed: Vec<f64> = report
            .metadata
            .seeds
            .iter()
            .filter_map(|&s| report.mean_where(condition, |r| r.sigma_e == sig && r.seed == s))
            .collect();
        let (m, sd) = mean_std(&per_seed);
        mean_db.push(m);
        std_db.push(sd);
    }
    let mut inversions = 0;
    let mut beyond = 0;
    for j in 1..mean_db.len() {
        let rise = mean_db[j] - mean_db[j - 1];
        if rise > 0.0 {
            inversions += 1;
            if rise > std_db[j].max(std_db[j - 1]) {
                beyond += 1;
            }
        }
    }
    Ok(MonotonicCheck {
        condition,
        sigma_e,
        mean_db,
        std_db,
        inversions,
        inversions_beyond_std: beyond,
    })
}
