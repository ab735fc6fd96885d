//! Two-stage training: fine-tuning with frozen semantic codecs under
//! imperfect CSI, then distillation from a perfect-CSI teacher.
//!
//! Stages run in the order of [`Stage::ORDER`]. Each one derives its random
//! stream from `(master seed, stage)`, so a stage can be rerun on its own
//! from stored predecessors and still reproduce the full pipeline bitwise.

mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use loss::{kd_loss, kl_divergence, l1_loss, KdTerms, KlOrder};
pub use optim::{clip_global_norm, cosine_lr, Adam, AdamConfig};

use crate::channel::{
    derive_seed, inject_estimation_error, sample_rayleigh, ChannelRealization, ChannelRng,
    ComplexMatrix,
};
use crate::data::Dataset;
use crate::error::{Error, Result, TensorError};
use crate::net::{sample_noise, Group, JsccNet, LinkBatch, ModelConfig, ParameterStore, Variant};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    /// adaptor-free model trained end to end under imperfect CSI
    PretrainBaseline,
    /// Stage-I procedure with perfect CSI; frozen afterwards
    Teacher,
    /// Stage-I: channel codec and adaptors under imperfect CSI
    Stage1,
    /// Stage-I procedure on the adaptor-free model (naive fine-tuning)
    NaiveFt,
    /// Stage-II: full network with distillation from the teacher
    Stage2,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [
        Stage::PretrainBaseline,
        Stage::Teacher,
        Stage::Stage1,
        Stage::NaiveFt,
        Stage::Stage2,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::PretrainBaseline => "PRETRAIN_BASELINE",
            Stage::Teacher => "TEACHER",
            Stage::Stage1 => "STAGE1",
            Stage::NaiveFt => "NAIVE_FT",
            Stage::Stage2 => "STAGE2",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Stage> {
        Stage::ORDER
            .into_iter()
            .find(|s| s.tag().eq_ignore_ascii_case(tag))
    }

    pub fn variant(self) -> Variant {
        match self {
            Stage::PretrainBaseline | Stage::NaiveFt => Variant::NoAdaptor,
            _ => Variant::Hana,
        }
    }

    /// Stages whose outputs this one consumes.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::PretrainBaseline => &[],
            Stage::Teacher | Stage::Stage1 | Stage::NaiveFt => &[Stage::PretrainBaseline],
            Stage::Stage2 => &[Stage::Stage1, Stage::Teacher],
        }
    }

    fn index(self) -> u64 {
        Stage::ORDER.iter().position(|&s| s == self).unwrap() as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// training SNRs in dB, one drawn per sample
    pub snr_set_db: Vec<f64>,
    /// `σ²_e ~ U(low, high)` per sample
    pub sigma_e_sq_range: [f64; 2],
    pub beta: f64,
    /// Stage-I batch; Stage-II uses twice this
    pub batch_size: usize,
    pub steps: usize,
    /// overrides `steps` for the baseline
    pub pretrain_steps: Option<usize>,
    pub lr: f64,
    /// overrides `lr` for the baseline
    pub pretrain_lr: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// global gradient-norm clip, `None` to disable
    pub clip_norm: Option<f64>,
    pub kl_order: KlOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            snr_set_db: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            sigma_e_sq_range: [0.01, 0.1],
            beta: 1.0,
            batch_size: 32,
            steps: 2000,
            pretrain_steps: None,
            lr: 1e-3,
            pretrain_lr: None,
            lr_schedule: LrSchedule::Cosine,
            clip_norm: Some(1.0),
            kl_order: KlOrder::StudentFirst,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.snr_set_db.is_empty() || self.snr_set_db.iter().any(|s| !s.is_finite()) {
            return bad(format!(
                "snr_set_db must be non-empty and finite: {:?}",
                self.snr_set_db
            ));
        }
        let [lo, hi] = self.sigma_e_sq_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "sigma_e_sq_range must satisfy 0 <= low <= high: {lo}, {hi}"
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for lr in std::iter::once(self.lr).chain(self.pretrain_lr) {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be positive, got {lr}"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn batch_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::Stage2 => 2 * self.batch_size,
            _ => self.batch_size,
        }
    }

    pub fn steps_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::PretrainBaseline => self.pretrain_steps.unwrap_or(self.steps),
            _ => self.steps,
        }
    }

    pub fn lr_at(&self, stage: Stage, step: usize, total: usize) -> f64 {
        let peak = match stage {
            Stage::PretrainBaseline => self.pretrain_lr.unwrap_or(self.lr),
            _ => self.lr,
        };
        match self.lr_schedule {
            LrSchedule::Cosine => cosine_lr(step, total, peak),
            LrSchedule::Constant => peak,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub l1: f64,
    pub kl: f64,
    pub lr: f64,
    pub seed: u64,
}

impl LogRecord {
    /// Single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Everything that distinguishes one stage run from another.
#[derive(Debug, Clone)]
pub struct StageSpec<'a, T> {
    pub stage: Stage,
    pub variant: Variant,
    /// train with `H_est := H_p`
    pub perfect_csi: bool,
    pub frozen: Vec<Group>,
    pub batch: usize,
    pub steps: usize,
    /// teacher store and `β`
    pub distill: Option<(&'a ParameterStore<T>, f64)>,
}

impl<'a, T: Scalar> StageSpec<'a, T> {
    pub fn new(
        stage: Stage,
        cfg: &TrainConfig,
        teacher: Option<&'a ParameterStore<T>>,
    ) -> Result<Self> {
        let semantic = vec![Group::SemanticEnc, Group::SemanticDec];
        let (perfect_csi, frozen) = match stage {
            Stage::PretrainBaseline | Stage::Stage2 => (false, vec![]),
            Stage::Teacher => (true, semantic),
            Stage::Stage1 | Stage::NaiveFt => (false, semantic),
        };
        let distill = match (stage, teacher) {
            (Stage::Stage2, Some(t)) => Some((t, cfg.beta)),
            (Stage::Stage2, None) => {
                return Err(Error::Missing("Stage-II needs the teacher".into()))
            }
            _ => None,
        };
        Ok(Self {
            stage,
            variant: stage.variant(),
            perfect_csi,
            frozen,
            batch: cfg.batch_for(stage),
            steps: cfg.steps_for(stage),
            distill,
        })
    }
}

/// Trained stores keyed by stage.
pub type Trained<T> = BTreeMap<Stage, ParameterStore<T>>;

#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub store: ParameterStore<T>,
    pub log: Vec<LogRecord>,
}

/// Images, channels and receiver noise for one step.
#[derive(Debug, Clone)]
pub struct StepBatch<T> {
    pub images: Tensor<T>,
    pub realizations: Vec<ChannelRealization<T>>,
    pub noise: Vec<ComplexMatrix<T>>,
}

impl<T: Scalar> StepBatch<T> {
    pub fn link(&self) -> Result<LinkBatch<T>> {
        LinkBatch::new(&self.realizations, &self.noise)
    }

    /// Same physical channel and noise with `H_est := H_p`.
    pub fn perfect_link(&self) -> Result<LinkBatch<T>> {
        let perfect: Vec<_> = self.realizations.iter().map(|r| r.perfect()).collect();
        LinkBatch::new(&perfect, &self.noise)
    }
}

/// Per sample: image index, SNR from the set, `σ²_e` from the range (zero
/// for perfect CSI), `H_p`, `H_e`, then noise, all from `rng` in that order.
pub fn sample_batch<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    batch: usize,
    perfect_csi: bool,
    rng: &mut ChannelRng,
) -> Result<StepBatch<T>> {
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut indices = Vec::with_capacity(batch);
    let mut realizations = Vec::with_capacity(batch);
    let mut noise = Vec::with_capacity(batch);
    let [lo, hi] = cfg.sigma_e_sq_range;
    for _ in 0..batch {
        indices.push(rng.random_range(0..data.len()));
        let snr = cfg.snr_set_db[rng.random_range(0..cfg.snr_set_db.len())];
        let s = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let sigma_e_sq = if perfect_csi { 0.0 } else { s };
        let h_p = sample_rayleigh(model.n_rx, model.n_tx, rng);
        let r = inject_estimation_error(&h_p, sigma_e_sq, rng)?.with_snr(snr);
        noise.push(sample_noise(model.n_rx, model.d, r.sigma_n_sq, rng));
        realizations.push(r);
    }
    Ok(StepBatch {
        images: data.batch(&indices)?,
        realizations,
        noise,
    })
}

/// Seed of one stage's random stream.
pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    derive_seed(&[master, stage.index()])
}

/// Fresh parameters for `variant`, overwritten by every matching entry of `from`.
pub fn init_from<T: Scalar>(
    model: &ModelConfig,
    variant: Variant,
    from: Option<&ParameterStore<T>>,
    seed: u64,
) -> Result<(JsccNet, ParameterStore<T>)> {
    let cfg = model.clone().with_variant(variant);
    let mut rng = ChannelRng::seed_from_u64(derive_seed(&[seed, 0x1417]));
    let (net, mut store) = JsccNet::init::<T>(&cfg, &mut rng)?;
    if let Some(src) = from {
        store.transfer_from(src)?;
    }
    Ok((net, store))
}

/// Runs one stage from `init`. `sink` sees every log record as it is made.
pub fn run_stage<T: Scalar>(
    spec: &StageSpec<'_, T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut store: ParameterStore<T>,
    data: &Dataset<T>,
    seed: u64,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<StageOutcome<T>> {
    cfg.validate()?;
    let net = JsccNet::new(&model.clone().with_variant(spec.variant))?;
    net.check_store(&store)?;
    let teacher = match spec.distill {
        Some((t, beta)) => {
            let tnet = JsccNet::new(&model.clone().with_variant(Variant::Hana))?;
            tnet.check_store(t)?;
            Some((tnet, t, beta))
        }
        None => None,
    };
    store.unfreeze_all();
    for &g in &spec.frozen {
        store.freeze(g);
    }
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut rng = ChannelRng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(spec.steps);
    let diverged = |step: usize, loss: f64| Error::Divergence {
        stage: spec.stage.tag().into(),
        step,
        loss,
    };

    for step in 0..spec.steps {
        let lr = cfg.lr_at(spec.stage, step, spec.steps);
        let batch = sample_batch(model, cfg, data, spec.batch, spec.perfect_csi, &mut rng)?;
        let link = batch.link()?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(batch.images.clone());
        // a domain error here (non-finite norm, exp overflow) means the weights blew up
        let forward = |g: &mut Graph<T>| -> Result<(_, _, _)> {
            let out = net.forward(g, &p, x, &link)?;
            Ok(match &teacher {
                Some((tnet, tstore, beta)) => {
                    let mut tg = Graph::new();
                    let tp = tstore.bind_constant(&mut tg);
                    let tx = tg.constant(batch.images.clone());
                    let to = tnet.forward(&mut tg, &tp, tx, &batch.perfect_link()?)?;
                    let terms = kd_loss(
                        g,
                        out.x_hat,
                        x,
                        (out.z_c, out.z_hat_s),
                        (tg.value(to.z_c), tg.value(to.z_hat_s)),
                        *beta,
                        cfg.kl_order,
                    )?;
                    (terms.total, terms.l1, Some(terms.kl))
                }
                None => {
                    let l1 = l1_loss(g, out.x_hat, x)?;
                    (l1, l1, None)
                }
            })
        };
        let (total, l1, kl) = match forward(&mut g) {
            Err(Error::Tensor(e @ TensorError::Domain { .. })) => {
                log::error!("{}: {e}", spec.stage);
                return Err(diverged(step, f64::NAN));
            }
            r => r?,
        };
        let loss = g.value(total).item().as_f64();
        if !loss.is_finite() {
            return Err(diverged(step, loss));
        }
        let record = LogRecord {
            step,
            stage: spec.stage,
            loss,
            l1: g.value(l1).item().as_f64(),
            kl: kl.map_or(0.0, |k| g.value(k).item().as_f64()),
            lr,
            seed,
        };
        g.backward(total)?;
        let mut grads: Vec<Option<Vec<T>>> = p
            .vars()
            .iter()
            .map(|&v| g.grad(v).map(<[T]>::to_vec))
            .collect();
        let norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        if !norm.is_finite() {
            return Err(diverged(step, norm));
        }
        adam.step(&mut store, &grads, lr);
        sink(&record)?;
        log.push(record);
    }
    if spec.stage == Stage::Teacher {
        store.freeze_all();
    }
    Ok(StageOutcome { store, log })
}

/// Runs `stage` with its predecessors taken from `done`.
pub fn train_stage<T: Scalar>(
    stage: Stage,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    master_seed: u64,
    done: &Trained<T>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<StageOutcome<T>> {
    let need = |s: Stage| {
        done.get(&s)
            .ok_or_else(|| Error::Missing(format!("{stage} needs the {s} checkpoint")))
    };
    for &dep in stage.dependencies() {
        need(dep)?;
    }
    let seed = stage_seed(master_seed, stage);
    let (init, teacher) = match stage {
        Stage::PretrainBaseline => (init_from(model, stage.variant(), None, seed)?.1, None),
        Stage::Teacher | Stage::Stage1 | Stage::NaiveFt => (
            init_from(
                model,
                stage.variant(),
                Some(need(Stage::PretrainBaseline)?),
                seed,
            )?
            .1,
            None,
        ),
        Stage::Stage2 => (need(Stage::Stage1)?.clone(), Some(need(Stage::Teacher)?)),
    };
    let spec = StageSpec::new(stage, cfg, teacher)?;
    log::info!("{stage}: {} steps at batch {}", spec.steps, spec.batch);
    run_stage(&spec, model, cfg, init, data, seed, sink)
}

/// Trains every stage in `stages` (in pipeline order) that is not already in
/// `done`, calling `on_stage` after each one.
pub fn train_pipeline<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    master_seed: u64,
    stages: &[Stage],
    done: &mut Trained<T>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    on_stage: &mut dyn FnMut(Stage, &StageOutcome<T>) -> Result<()>,
) -> Result<()> {
    for stage in Stage::ORDER {
        if !stages.contains(&stage) || done.contains_key(&stage) {
            continue;
        }
        let outcome = train_stage(stage, model, cfg, data, master_seed, done, sink)?;
        on_stage(stage, &outcome)?;
        done.insert(stage, outcome.store);
    }
    Ok(())
}

/// Mean L1 of `store` on one fixed batch drawn from `data` with `seed`.
pub fn held_out_l1<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    store: &ParameterStore<T>,
    data: &Dataset<T>,
    batch: usize,
    perfect_csi: bool,
    seed: u64,
) -> Result<f64> {
    let variant = if store.groups_present().contains(&Group::AdaptorTx) {
        Variant::Hana
    } else {
        Variant::NoAdaptor
    };
    let net = JsccNet::new(&model.clone().with_variant(variant))?;
    net.check_store(store)?;
    let mut rng = ChannelRng::seed_from_u64(seed);
    let b = sample_batch(model, cfg, data, batch, perfect_csi, &mut rng)?;
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let x = g.constant(b.images.clone());
    let out = net.forward(&mut g, &p, x, &b.link()?)?;
    let l1 = l1_loss(&mut g, out.x_hat, x)?;
    Ok(g.value(l1).item().as_f64())
}
