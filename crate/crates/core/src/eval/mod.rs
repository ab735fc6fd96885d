//! PSNR sweeps over the (SNR, σ_e) grid for the evaluation conditions, with
//! paired channel realizations across conditions, plus report output and
//! trend verdicts.

mod report;
mod trends;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use report::{format_sig6, round_sig6, Metadata, Row, SummaryCell, SweepReport};
pub use trends::{
    compare_trends, monotonic_degradation, sign_test_p, Comparison, MonotonicCheck, TrendOptions,
    TrendVerdicts, Verdict,
};

use crate::channel::{
    complex_normal, derive_seed, snr_to_noise_var, ChannelRealization, ChannelRng, ComplexMatrix,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{JsccNet, LinkBatch, ModelConfig, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::train::{Stage, Trained};

/// Reconstructions with zero error are reported at this value.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10·log10(1/MSE)` for signals in `[0, 1]`.
pub fn psnr<T: Scalar>(x: &[T], x_hat: &[T]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::Validation(format!(
            "psnr of lengths {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    let mse = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    /// teacher, evaluated with `H_est := H_p`
    Perfect,
    /// teacher, evaluated with `H_est`
    Direct,
    /// adaptor-free fine-tune under imperfect CSI
    NaiveFt,
    /// Stage-II output
    Hana,
    /// Stage-I output
    HanaNoDistill,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Perfect,
        Condition::Direct,
        Condition::NaiveFt,
        Condition::Hana,
        Condition::HanaNoDistill,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::Perfect => "PERFECT",
            Condition::Direct => "DIRECT",
            Condition::NaiveFt => "NAIVE_FT",
            Condition::Hana => "HANA",
            Condition::HanaNoDistill => "HANA_NO_DISTILL",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Condition> {
        Condition::ALL
            .into_iter()
            .find(|c| c.tag().eq_ignore_ascii_case(tag))
    }

    /// Checkpoint the condition evaluates.
    pub fn stage(self) -> Stage {
        match self {
            Condition::Perfect | Condition::Direct => Stage::Teacher,
            Condition::NaiveFt => Stage::NaiveFt,
            Condition::Hana => Stage::Stage2,
            Condition::HanaNoDistill => Stage::Stage1,
        }
    }

    pub fn perfect_csi(self) -> bool {
        self == Condition::Perfect
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// How a σ_e grid value maps to the error variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaAxis {
    /// the grid value is `σ²_e` itself (same scale as the training range)
    #[default]
    Variance,
    /// the grid value is the standard deviation, `σ²_e = value²`
    StdDev,
}

impl SigmaAxis {
    pub fn variance(self, value: f64) -> f64 {
        match self {
            SigmaAxis::Variance => value,
            SigmaAxis::StdDev => value * value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalGrid {
    pub snr_db: Vec<f64>,
    pub sigma_e: Vec<f64>,
    pub sigma_axis: SigmaAxis,
    pub seeds: Vec<u64>,
    /// distinct images per cell
    pub images: usize,
    /// channel realizations per image
    pub realizations: usize,
    /// forward-pass batch size
    pub batch: usize,
    /// σ_e held fixed in the PSNR-vs-SNR curve
    pub slice_sigma_e: f64,
    /// SNR held fixed in the PSNR-vs-σ_e curve
    pub slice_snr_db: f64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            snr_db: (0..9).map(|i| -6.0 + 3.0 * i as f64).collect(),
            sigma_e: vec![0.01, 0.025, 0.05, 0.075, 0.1],
            sigma_axis: SigmaAxis::Variance,
            seeds: vec![0, 1, 2],
            images: 256,
            realizations: 4,
            batch: 64,
            slice_sigma_e: 0.05,
            slice_snr_db: 6.0,
        }
    }
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db values must be finite");
        }
        if self.sigma_e.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma_e values must be finite and >= 0");
        }
        if self.images == 0 || self.realizations == 0 || self.batch == 0 {
            return bad("images, realizations and batch must be positive");
        }
        Ok(())
    }

    pub fn samples_per_cell(&self) -> usize {
        self.images * self.realizations
    }
}

/// Unit-variance draws shared by every cell and condition of one seed:
/// `H_p`, a unit estimation-error direction and unit receiver noise.
struct BaseDraw<T> {
    h_p: ComplexMatrix<T>,
    e_unit: ComplexMatrix<T>,
    n_unit: ComplexMatrix<T>,
}

fn base_draw<T: Scalar>(
    model: &ModelConfig,
    master_seed: u64,
    seed: u64,
    sample: usize,
) -> BaseDraw<T> {
    let mut rng = ChannelRng::seed_from_u64(derive_seed(&[master_seed, seed, sample as u64]));
    let mut draw = |rows: usize, cols: usize| {
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let z = complex_normal(&mut rng, 1.0);
            re.push(T::lit(z.re));
            im.push(T::lit(z.im));
        }
        ComplexMatrix::new(rows, cols, re, im).expect("sizes match")
    };
    let h_p = draw(model.n_rx, model.n_tx);
    let e_unit = draw(model.n_rx, model.n_tx);
    let n_unit = draw(model.n_rx, model.d);
    BaseDraw {
        h_p,
        e_unit,
        n_unit,
    }
}

fn realization<T: Scalar>(
    b: &BaseDraw<T>,
    sigma_e_sq: f64,
    snr_db: f64,
) -> Result<ChannelRealization<T>> {
    let h_e = b.e_unit.scale(T::lit(sigma_e_sq.sqrt()));
    let h_est = if sigma_e_sq == 0.0 {
        b.h_p.clone()
    } else {
        b.h_p.add(&h_e)?
    };
    let sigma_n_sq = snr_to_noise_var(snr_db, 1.0);
    Ok(ChannelRealization {
        h_p: b.h_p.clone(),
        h_e,
        h_est,
        sigma_e_sq,
        sigma_n_sq,
        snr_db,
        seed: None,
    })
}

/// Per-sample PSNRs of one model on one link.
fn batch_psnr<T: Scalar>(
    net: &JsccNet,
    store: &ParameterStore<T>,
    images: &crate::tensor::Tensor<T>,
    link: &LinkBatch<T>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let x = g.constant(images.clone());
    let out = net.forward(&mut g, &p, x, link)?;
    let per = images.numel() / link.batch();
    images
        .data()
        .chunks(per)
        .zip(g.data(out.x_hat).chunks(per))
        .map(|(a, b)| psnr(a, b))
        .collect()
}

/// Evaluates `conditions` over the grid. All conditions see the same images
/// and, per `(seed, sample)`, the same `H_p`, error direction and noise
/// direction; cells only rescale them.
pub fn sweep<T: Scalar>(
    model: &ModelConfig,
    trained: &Trained<T>,
    conditions: &[Condition],
    grid: &EvalGrid,
    data: &Dataset<T>,
    master_seed: u64,
    config_hash: &str,
) -> Result<SweepReport> {
    grid.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let mut conditions = conditions.to_vec();
    conditions.sort();
    conditions.dedup();
    let mut nets: BTreeMap<Stage, JsccNet> = BTreeMap::new();
    for c in &conditions {
        let stage = c.stage();
        let store = trained
            .get(&stage)
            .ok_or_else(|| Error::Missing(format!("condition {c} needs the {stage} checkpoint")))?;
        if let std::collections::btree_map::Entry::Vacant(e) = nets.entry(stage) {
            let net = JsccNet::new(&model.clone().with_variant(stage.variant()))?;
            net.check_store(store)?;
            e.insert(net);
        }
    }

    let (n_snr, n_sig) = (grid.snr_db.len(), grid.sigma_e.len());
    let total = grid.samples_per_cell();
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        // sums[cond][snr][sigma]
        let mut sums = vec![vec![vec![0.0f64; n_sig]; n_snr]; conditions.len()];
        let mut start = 0;
        while start < total {
            let end = (start + grid.batch).min(total);
            let idx: Vec<usize> = (start..end)
                .map(|k| (k / grid.realizations) % data.len())
                .collect();
            let images = data.batch(&idx)?;
            let draws: Vec<BaseDraw<T>> = (start..end)
                .map(|k| base_draw(model, master_seed, seed, k))
                .collect();
            let noise_at = |snr: f64| -> Vec<ComplexMatrix<T>> {
                let s = T::lit(snr_to_noise_var(snr, 1.0).sqrt());
                draws.iter().map(|b| b.n_unit.scale(s)).collect()
            };
            for (i, &snr) in grid.snr_db.iter().enumerate() {
                let noise = noise_at(snr);
                let perfect_link = if conditions.iter().any(|c| c.perfect_csi()) {
                    let reals = draws
                        .iter()
                        .map(|b| realization(b, 0.0, snr))
                        .collect::<Result<Vec<_>>>()?;
                    Some(LinkBatch::new(&reals, &noise)?)
                } else {
                    None
                };
                for (j, &sig) in grid.sigma_e.iter().enumerate() {
                    let var = grid.sigma_axis.variance(sig);
                    let reals = draws
                        .iter()
                        .map(|b| realization(b, var, snr))
                        .collect::<Result<Vec<_>>>()?;
                    let link = LinkBatch::new(&reals, &noise)?;
                    for (ci, c) in conditions.iter().enumerate() {
                        if c.perfect_csi() && j > 0 {
                            // σ_e plays no role; reuse the first column
                            sums[ci][i][j] = f64::NAN;
                            continue;
                        }
                        let l = if c.perfect_csi() {
                            perfect_link.as_ref().unwrap()
                        } else {
                            &link
                        };
                        let stage = c.stage();
                        let v = batch_psnr(&nets[&stage], &trained[&stage], &images, l)?;
                        sums[ci][i][j] += v.iter().sum::<f64>();
                    }
                }
            }
            start = end;
        }
        for (ci, &c) in conditions.iter().enumerate() {
            for (i, &snr) in grid.snr_db.iter().enumerate() {
                for (j, &sig) in grid.sigma_e.iter().enumerate() {
                    let s = if c.perfect_csi() {
                        sums[ci][i][0]
                    } else {
                        sums[ci][i][j]
                    };
                    rows.push(Row {
                        condition: c,
                        snr_db: snr,
                        sigma_e: sig,
                        seed,
                        psnr_db: round_sig6(s / total as f64),
                    });
                }
            }
            log::info!("seed {seed}: {c} done");
        }
    }
    rows.sort_by(|a, b| {
        (a.condition, a.seed)
            .cmp(&(b.condition, b.seed))
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then(a.sigma_e.total_cmp(&b.sigma_e))
    });
    Ok(SweepReport {
        metadata: Metadata::new(grid, conditions, master_seed, config_hash, total),
        rows,
    })
}
