//! Finite-difference suite over every differentiable piece of the model,
//! run at `f64` on the miniature configuration.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};

use crate::channel::{
    sample_rayleigh, sample_realization, ChannelRealization, ChannelRng, ComplexMatrix,
};
use crate::error::{Result, TensorError};
use crate::net::layers::{Builder, Init, MultiHeadAttention, SnrModulator, TransformerBlock};
use crate::net::{
    sample_noise, Bound, Group, JsccNet, LinkBatch, ModelConfig, ParameterStore, Side,
};
use crate::tensor::{grad_check_inputs, GradCheckReport, Graph, Tensor, Var};
use crate::train::{kd_loss, kl_divergence, l1_loss, KlOrder};

pub const FD_EPS: f64 = 1e-6;
/// Tolerance for primitives that are smooth at the probe points.
pub const TOL_SMOOTH: f64 = 1e-5;
/// Tolerance for composite components and kinked primitives.
pub const TOL_COMPONENT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Primitive,
    Layer,
    Stage,
    /// one parameter group under the full forward pass and distillation loss
    Group,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Primitive => "primitive",
            Level::Layer => "layer",
            Level::Stage => "stage",
            Level::Group => "group",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub level: Level,
    pub component: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_error < self.tol
    }

    fn new(level: Level, component: &str, r: &GradCheckReport, tol: f64) -> Self {
        Self {
            level,
            component: component.to_string(),
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            checked: r.checked,
            tol,
        }
    }
}

impl fmt::Display for GradEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<9} {:<28} max_rel {:.3e} (tol {:.0e}, {} entries)",
            if self.passes() { "ok" } else { "FAIL" },
            self.level,
            self.component,
            self.max_rel_error,
            self.tol,
            self.checked
        )
    }
}

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChannelRng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Inputs bounded away from the origin, with random signs.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChannelRng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(rand_t(g.shape(y), seed, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn merged(reports: &[GradCheckReport]) -> GradCheckReport {
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for r in reports {
        total.merge(r);
    }
    total
}

type Prim = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

fn primitives() -> Result<Vec<GradEntry>> {
    let s = |shape: &[usize], seed| rand_t(shape, seed, -1.0, 1.0);
    let pos = |shape: &[usize], seed| rand_t(shape, seed, 0.2, 2.0);
    let mats: Arc<Vec<ComplexMatrix<f64>>> = {
        let mut rng = ChannelRng::seed_from_u64(5);
        Arc::new((0..2).map(|_| sample_rayleigh(3, 4, &mut rng)).collect())
    };
    let cases: Vec<(&str, Prim, Vec<Tensor<f64>>, f64)> = vec![
        (
            "matmul",
            |g, v| g.matmul(v[0], v[1]),
            vec![s(&[4, 3], 1), s(&[3, 5], 2)],
            TOL_SMOOTH,
        ),
        (
            "batch_matmul",
            |g, v| g.batch_matmul(v[0], v[1], false),
            vec![s(&[2, 3, 4], 3), s(&[2, 4, 2], 4)],
            TOL_SMOOTH,
        ),
        (
            "batch_matmul_t",
            |g, v| g.batch_matmul(v[0], v[1], true),
            vec![s(&[2, 3, 4], 5), s(&[2, 5, 4], 6)],
            TOL_SMOOTH,
        ),
        (
            "add_broadcast",
            |g, v| g.add(v[0], v[1]),
            vec![s(&[3, 4], 7), s(&[4], 8)],
            TOL_SMOOTH,
        ),
        (
            "sub",
            |g, v| g.sub(v[0], v[1]),
            vec![s(&[3, 4], 9), s(&[3, 4], 10)],
            TOL_SMOOTH,
        ),
        (
            "mul_broadcast",
            |g, v| g.mul(v[0], v[1]),
            vec![s(&[2, 3, 4], 11), s(&[2, 1, 4], 12)],
            TOL_SMOOTH,
        ),
        (
            "scale",
            |g, v| Ok(g.scale(v[0], -1.7)),
            vec![s(&[5], 13)],
            TOL_SMOOTH,
        ),
        (
            "gelu",
            |g, v| Ok(g.gelu(v[0])),
            vec![s(&[3, 5], 14)],
            TOL_SMOOTH,
        ),
        (
            "sigmoid",
            |g, v| Ok(g.sigmoid(v[0])),
            vec![s(&[3, 5], 15)],
            TOL_SMOOTH,
        ),
        ("exp", |g, v| g.exp(v[0]), vec![s(&[3, 5], 16)], TOL_SMOOTH),
        (
            "log",
            |g, v| g.log(v[0]),
            vec![pos(&[3, 5], 17)],
            TOL_SMOOTH,
        ),
        (
            "relu",
            |g, v| Ok(g.relu(v[0])),
            vec![away_from_zero(&[3, 5], 18)],
            TOL_COMPONENT,
        ),
        (
            "abs",
            |g, v| Ok(g.abs(v[0])),
            vec![away_from_zero(&[3, 5], 19)],
            TOL_COMPONENT,
        ),
        (
            "softmax",
            |g, v| g.softmax(v[0], 1),
            vec![s(&[3, 5], 20)],
            TOL_SMOOTH,
        ),
        (
            "log_softmax",
            |g, v| g.log_softmax(v[0], 2),
            vec![s(&[2, 3, 4], 21)],
            TOL_SMOOTH,
        ),
        (
            "layer_norm",
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            vec![s(&[2, 3, 6], 22), s(&[6], 23), s(&[6], 24)],
            TOL_SMOOTH,
        ),
        (
            "reshape_permute",
            |g, v| {
                let r = g.reshape(v[0], &[3, 2, 4])?;
                g.permute(r, &[2, 0, 1])
            },
            vec![s(&[6, 4], 25)],
            TOL_SMOOTH,
        ),
        (
            "concat_slice",
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                g.slice(c, 1, 1, 4)
            },
            vec![s(&[2, 3, 2], 26), s(&[2, 2, 2], 27)],
            TOL_SMOOTH,
        ),
        (
            "mean",
            |g, v| {
                let m = g.mean(v[0]);
                g.mul(v[0], m)
            },
            vec![s(&[3, 4], 28)],
            TOL_SMOOTH,
        ),
        (
            "power_normalize",
            |g, v| g.power_normalize(v[0]),
            vec![s(&[2, 4, 6], 29)],
            TOL_SMOOTH,
        ),
        (
            "kl_divergence",
            |g, v| kl_divergence(g, v[0], v[1]),
            vec![s(&[2, 3, 4], 30), s(&[2, 3, 4], 31)],
            TOL_SMOOTH,
        ),
    ];
    let mut out = Vec::new();
    for (k, (name, f, inputs, tol)) in cases.into_iter().enumerate() {
        let r = grad_check_inputs(
            |g, v| {
                let y = f(g, v)?;
                probe(g, y, 1000 + k as u64)
            },
            &inputs,
            FD_EPS,
        )?;
        out.push(GradEntry::new(Level::Primitive, name, &merged(&r), tol));
    }

    let x = s(&[2, 4, 6], 32);
    let r = grad_check_inputs(
        |g, v| {
            let y = g.complex_apply(v[0], mats.clone())?;
            probe(g, y, 40)
        },
        &[x],
        FD_EPS,
    )?;
    out.push(GradEntry::new(
        Level::Primitive,
        "complex_apply",
        &merged(&r),
        TOL_SMOOTH,
    ));

    // L1 has a kink at equality; keep the pair well separated
    let a = s(&[2, 6], 33);
    let b = Tensor::new(
        vec![2, 6],
        a.data()
            .iter()
            .zip(away_from_zero(&[2, 6], 34).data())
            .map(|(x, d)| x + d)
            .collect(),
    )?;
    let r = grad_check_inputs(|g, v| l1_loss(g, v[0], v[1]), &[a, b], FD_EPS)?;
    out.push(GradEntry::new(
        Level::Primitive,
        "l1_loss",
        &merged(&r),
        TOL_COMPONENT,
    ));
    Ok(out)
}

/// Checks `f` against the parameters of `store` plus `extra` inputs.
fn check_with_store<F>(
    store: &ParameterStore<f64>,
    extra: &[Tensor<f64>],
    f: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var, TensorError>,
{
    let k = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.clone()).collect();
    inputs.extend_from_slice(extra);
    Ok(grad_check_inputs(
        |g, v| {
            let p = Bound::from_vars(v[..k].to_vec());
            f(g, &p, &v[k..])
        },
        &inputs,
        FD_EPS,
    )?)
}

fn layers() -> Result<Vec<GradEntry>> {
    let mut store = ParameterStore::<f64>::new();
    let mut rng = ChannelRng::seed_from_u64(50);
    let (lin, ln, mha, block, snr) = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        (
            b.linear("channel_enc.lin", 6, 4, Init::Uniform)?,
            b.layer_norm("channel_enc.ln", 6)?,
            MultiHeadAttention::build(&mut b, "adaptor_tx.mha", 6, 2, false)?,
            TransformerBlock::build(&mut b, "adaptor_tx.block", 6, 2, 2)?,
            SnrModulator::build(&mut b, "semantic_enc.snr", 4, 6)?,
        )
    };
    // move zero-initialised layers off their identity point
    store.perturb(&mut rng, 0.3);
    let x = rand_t(&[2, 3, 6], 51, -1.0, 1.0);
    let y = rand_t(&[2, 4, 6], 52, -1.0, 1.0);
    type L = Box<dyn Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var, TensorError>>;
    let cases: Vec<(&str, L, Vec<Tensor<f64>>)> = vec![
        (
            "linear",
            Box::new(move |g, p, v| lin.forward(g, p, v[0])),
            vec![x.clone()],
        ),
        (
            "layer_norm_layer",
            Box::new(move |g, p, v| ln.forward(g, p, v[0])),
            vec![x.clone()],
        ),
        (
            "multi_head_attention",
            Box::new(move |g, p, v| mha.forward(g, p, v[0], v[1], v[1])),
            vec![x.clone(), y],
        ),
        (
            "transformer_block",
            Box::new(move |g, p, v| block.forward(g, p, v[0])),
            vec![x.clone()],
        ),
        (
            "snr_modulator",
            Box::new(move |g, p, v| snr.forward(g, p, v[0], &[2.0, -3.0])),
            vec![x],
        ),
    ];
    let mut out = Vec::new();
    for (k, (name, f, extra)) in cases.into_iter().enumerate() {
        let r = check_with_store(&store, &extra, |g, p, v| {
            let y = f(g, p, v)?;
            probe(g, y, 2000 + k as u64)
        })?;
        out.push(GradEntry::new(
            Level::Layer,
            name,
            &merged(&r),
            TOL_COMPONENT,
        ));
    }
    Ok(out)
}

fn link(
    cfg: &ModelConfig,
    batch: usize,
    sigma_e_sq: f64,
    snr_db: f64,
    seed: u64,
) -> Result<LinkBatch<f64>> {
    let reals: Vec<ChannelRealization<f64>> = (0..batch as u64)
        .map(|i| sample_realization(cfg.n_rx, cfg.n_tx, sigma_e_sq, snr_db, seed * 1000 + i))
        .collect::<Result<_, _>>()?;
    let mut rng = ChannelRng::seed_from_u64(seed ^ 0xabcd);
    let noise: Vec<ComplexMatrix<f64>> = reals
        .iter()
        .map(|r| sample_noise(cfg.n_rx, cfg.d, r.sigma_n_sq, &mut rng))
        .collect();
    LinkBatch::new(&reals, &noise)
}

fn model(cfg: &ModelConfig, seed: u64) -> Result<(JsccNet, ParameterStore<f64>)> {
    let mut rng = ChannelRng::seed_from_u64(seed);
    let (net, mut store) = JsccNet::init::<f64>(cfg, &mut rng)?;
    store.perturb(&mut rng, 0.3);
    Ok((net, store))
}

fn stages(cfg: &ModelConfig) -> Result<Vec<GradEntry>> {
    let (net, store) = model(cfg, 60)?;
    let lk = link(cfg, 1, 0.1, 5.0, 61)?;
    let [cs, hs, ws] = cfg.semantic_dims();
    let [c, h, w] = cfg.image;
    let extra = vec![
        rand_t(&[1, c, h, w], 62, 0.05, 0.95),
        rand_t(&[1, cs, hs, ws], 63, -1.0, 1.0),
        rand_t(&[1, cfg.n_tx, cfg.d_prime], 64, -1.0, 1.0),
        rand_t(&[1, cfg.n_rx, 2 * cfg.d], 65, -1.0, 1.0),
    ];
    type S = fn(&JsccNet, &mut Graph<f64>, &Bound, &[Var], Var) -> Result<Var, TensorError>;
    let cases: [(&str, S); 7] = [
        ("semantic_encode", |n, g, p, v, _| {
            n.semantic_encode(g, p, v[0], &[3.0])
        }),
        ("channel_encode_1", |n, g, p, v, _| {
            n.channel_encode_1(g, p, v[1])
        }),
        ("cma_apply_tx", |n, g, p, v, c| {
            n.cma_apply(g, p, v[2], c, Side::Tx)
        }),
        ("cma_apply_rx", |n, g, p, v, c| {
            n.cma_apply(g, p, v[2], c, Side::Rx)
        }),
        ("channel_encode_2", |n, g, p, v, _| {
            n.channel_encode_2(g, p, v[2])
        }),
        ("channel_decode", |n, g, p, v, c| {
            n.channel_decode(g, p, v[3], c)
        }),
        ("semantic_decode", |n, g, p, v, _| {
            n.semantic_decode(g, p, v[1], &[3.0])
        }),
    ];
    let mut out = Vec::new();
    for (k, (name, f)) in cases.into_iter().enumerate() {
        let r = check_with_store(&store, &extra, |g, p, v| {
            let csi = g.constant(lk.csi.clone());
            let y = f(&net, g, p, v, csi)?;
            probe(g, y, 3000 + k as u64)
        })?;
        out.push(GradEntry::new(
            Level::Stage,
            name,
            &merged(&r),
            TOL_COMPONENT,
        ));
    }
    Ok(out)
}

/// Full forward pass under the Stage-II loss, reported per parameter group
/// and for the input image.
fn full_forward(cfg: &ModelConfig) -> Result<Vec<GradEntry>> {
    let (net, store) = model(cfg, 70)?;
    let (_, teacher) = model(cfg, 71)?;
    let lk = link(cfg, 2, 0.1, 5.0, 72)?;
    let [c, h, w] = cfg.image;
    let img = rand_t(&[2, c, h, w], 73, 0.05, 0.95);
    let target = rand_t(&[2, c, h, w], 74, 0.0, 1.0);

    let (t_zc, t_zs) = {
        let mut g = Graph::new();
        let p = teacher.bind_constant(&mut g);
        let x = g.constant(img.clone());
        let o = net.forward(&mut g, &p, x, &lk)?;
        (g.value(o.z_c).clone(), g.value(o.z_hat_s).clone())
    };
    let reports = check_with_store(&store, &[img, target], |g, p, v| {
        let o = net.forward(g, p, v[0], &lk)?;
        Ok(kd_loss(
            g,
            o.x_hat,
            v[1],
            (o.z_c, o.z_hat_s),
            (&t_zc, &t_zs),
            1.0,
            KlOrder::StudentFirst,
        )?
        .total)
    })?;
    let mut out = Vec::new();
    for group in Group::ALL {
        let picked: Vec<GradCheckReport> = store
            .entries()
            .iter()
            .zip(&reports)
            .filter(|(e, _)| e.group == group)
            .map(|(_, r)| r.clone())
            .collect();
        if !picked.is_empty() {
            out.push(GradEntry::new(
                Level::Group,
                group.prefix(),
                &merged(&picked),
                TOL_COMPONENT,
            ));
        }
    }
    out.push(GradEntry::new(
        Level::Group,
        "input_image",
        &reports[store.len()],
        TOL_COMPONENT,
    ));
    out.push(GradEntry::new(
        Level::Group,
        "full_forward",
        &merged(&reports),
        TOL_COMPONENT,
    ));
    Ok(out)
}

/// Runs every check. Failures are reported in the entries, not as errors.
pub fn gradient_suite() -> Result<Vec<GradEntry>> {
    let cfg = ModelConfig::miniature();
    let mut out = primitives()?;
    out.extend(layers()?);
    out.extend(stages(&cfg)?);
    out.extend(full_forward(&cfg)?);
    Ok(out)
}

/// A graph whose forward value is `x` but whose backward rule has the wrong
/// sign; the suite's oracle must flag it.
pub fn sign_flip_fixture() -> Result<GradEntry> {
    let x = rand_t(&[4], 80, -1.0, 1.0);
    let r = grad_check_inputs(
        |g, v| {
            let doubled = g.value(v[0]).data().iter().map(|a| 2.0 * a).collect();
            let c = g.constant(Tensor::new(vec![4], doubled)?);
            // value 2x - x = x, analytic gradient -1, true gradient +1
            let y = g.sub(c, v[0])?;
            probe(g, y, 81)
        },
        &[x],
        FD_EPS,
    )?;
    Ok(GradEntry::new(
        Level::Primitive,
        "sign_flip_fixture",
        &merged(&r),
        TOL_SMOOTH,
    ))
}
