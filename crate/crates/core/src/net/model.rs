use rand::SeedableRng;

use super::config::{ModelConfig, Variant};
use super::layers::{Builder, Init, Linear, SnrModulator, TransformerBlock};
use super::link::LinkBatch;
use super::params::{Bound, ParameterStore};
use crate::channel::{equalize_var, precode_var, transmit_var, ChannelRng};
use crate::error::{Error, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Which end of the link an adaptor sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Tx,
    Rx,
}

/// Transformer over per-antenna tokens with a prepended CSI token.
#[derive(Debug, Clone)]
pub struct ChannelMatrixAdaptor {
    pub csi: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub tokens: usize,
    pub width: usize,
}

impl ChannelMatrixAdaptor {
    fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: &ModelConfig,
        tokens: usize,
    ) -> Result<Self> {
        let csi = b.linear(
            &format!("{name}.csi"),
            2 * cfg.n_rx * cfg.n_tx,
            cfg.d_prime,
            Init::Uniform,
        )?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                TransformerBlock::build(
                    b,
                    &format!("{name}.block{i}"),
                    cfg.d_prime,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            csi,
            blocks,
            tokens,
            width: cfg.d_prime,
        })
    }

    /// `[B, 2·n_rx·n_tx] → [B, 1, d']`
    pub fn tokenize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        csi: Var,
    ) -> Result<Var, TensorError> {
        let batch = g.shape(csi)[0];
        let t = self.csi.forward(g, p, csi)?;
        g.reshape(t, &[batch, 1, self.width])
    }

    /// `[B, n, d'] → [B, n, d']`: prepend the CSI token, run the blocks, drop it.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        csi: Var,
    ) -> Result<Var, TensorError> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != self.tokens || shape[2] != self.width {
            return Err(TensorError::Shape {
                op: "cma_apply",
                lhs: shape,
                rhs: vec![self.tokens, self.width],
            });
        }
        let token = self.tokenize(g, p, csi)?;
        let mut x = g.concat(&[token, tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        g.slice(x, 1, 1, self.tokens)
    }
}

#[derive(Debug, Clone)]
struct SemanticEncoder {
    stages: Vec<Linear>,
    modulator: SnrModulator,
}

#[derive(Debug, Clone)]
struct SemanticDecoder {
    modulator: SnrModulator,
    stages: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct ChannelEncoder {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct ChannelDecoder {
    fc1: Linear,
    fc2: Linear,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// reconstruction `[B, c, h, w]` in `[0, 1]`
    pub x_hat: Var,
    /// semantic features `[B, c', h', w']`
    pub z_s: Var,
    /// transmitted symbols before precoding, real bridge `[B, n_tx, 2d]`
    pub z_c: Var,
    /// recovered semantic features `[B, c', h', w']`
    pub z_hat_s: Var,
}

/// Semantic codec, split channel codec and (for [`Variant::Hana`]) the
/// transmit/receive channel-matrix adaptors.
#[derive(Debug, Clone)]
pub struct JsccNet {
    cfg: ModelConfig,
    sem_enc: SemanticEncoder,
    sem_dec: SemanticDecoder,
    ch_enc: ChannelEncoder,
    ch_dec: ChannelDecoder,
    adaptor_tx: Option<ChannelMatrixAdaptor>,
    adaptor_rx: Option<ChannelMatrixAdaptor>,
}

impl JsccNet {
    /// Builds the architecture and draws a fresh parameter store.
    pub fn init<T: Scalar>(
        cfg: &ModelConfig,
        rng: &mut ChannelRng,
    ) -> Result<(Self, ParameterStore<T>)> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let c = cfg.image[0];
        let widths = &cfg.stage_channels;
        let c_sem = *widths.last().unwrap();

        let mut enc_stages = Vec::new();
        let mut fan_in = 4 * c;
        for (i, &w) in widths.iter().enumerate() {
            enc_stages.push(b.linear(
                &format!("semantic_enc.stage{i}"),
                fan_in,
                w,
                Init::Uniform,
            )?);
            fan_in = 4 * w;
        }
        let sem_enc = SemanticEncoder {
            stages: enc_stages,
            modulator: SnrModulator::build(&mut b, "semantic_enc.snr", cfg.snr_hidden, c_sem)?,
        };

        let ch_enc = ChannelEncoder {
            fc1: b.linear(
                "channel_enc.fc1",
                cfg.semantic_len(),
                cfg.n_tx * cfg.d_prime,
                Init::Uniform,
            )?,
            fc2: b.linear("channel_enc.fc2", cfg.d_prime, 2 * cfg.d, Init::Uniform)?,
        };
        let ch_dec = ChannelDecoder {
            fc1: b.linear("channel_dec.fc1", 2 * cfg.d, cfg.d_prime, Init::Uniform)?,
            fc2: b.linear(
                "channel_dec.fc2",
                cfg.n_rx * cfg.d_prime,
                cfg.semantic_len(),
                Init::Uniform,
            )?,
        };
        let (adaptor_tx, adaptor_rx) = match cfg.variant {
            Variant::Hana => (
                Some(ChannelMatrixAdaptor::build(
                    &mut b,
                    "adaptor_tx",
                    cfg,
                    cfg.n_tx,
                )?),
                Some(ChannelMatrixAdaptor::build(
                    &mut b,
                    "adaptor_rx",
                    cfg,
                    cfg.n_rx,
                )?),
            ),
            Variant::NoAdaptor => (None, None),
        };

        let modulator = SnrModulator::build(&mut b, "semantic_dec.snr", cfg.snr_hidden, c_sem)?;
        let mut dec_stages = Vec::new();
        for i in (0..widths.len()).rev() {
            let out = if i == 0 { c } else { widths[i - 1] };
            dec_stages.push(b.linear(
                &format!("semantic_dec.stage{i}"),
                widths[i],
                4 * out,
                Init::Uniform,
            )?);
        }
        let sem_dec = SemanticDecoder {
            modulator,
            stages: dec_stages,
        };

        Ok((
            Self {
                cfg: cfg.clone(),
                sem_enc,
                sem_dec,
                ch_enc,
                ch_dec,
                adaptor_tx,
                adaptor_rx,
            },
            store,
        ))
    }

    /// Architecture only; use with a store loaded from a checkpoint.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::init::<f32>(cfg, &mut ChannelRng::seed_from_u64(0))?.0)
    }

    /// Names and shapes of the parameters this architecture expects, in order.
    pub fn layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let (_, store) = Self::init::<f32>(cfg, &mut ChannelRng::seed_from_u64(0))?;
        Ok(store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
            .collect())
    }

    /// Checks that `store` was produced for this architecture.
    pub fn check_store<T: Scalar>(&self, store: &ParameterStore<T>) -> Result<()> {
        let layout = Self::layout(&self.cfg)?;
        if layout.len() != store.len() {
            return Err(Error::Validation(format!(
                "store has {} parameters, architecture expects {}",
                store.len(),
                layout.len()
            )));
        }
        for ((name, shape), e) in layout.iter().zip(store.entries()) {
            if *name != e.name || shape.as_slice() != e.tensor.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    e.name,
                    e.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn adaptor(&self, side: Side) -> Option<&ChannelMatrixAdaptor> {
        match side {
            Side::Tx => self.adaptor_tx.as_ref(),
            Side::Rx => self.adaptor_rx.as_ref(),
        }
    }

    /// `[B, H·W, C]` on an `H×W` grid → `[B, H·W/4, 4C]`.
    fn merge<T: Scalar>(
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Var, TensorError> {
        let x = g.reshape(x, &[batch, h / 2, 2, w / 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        g.reshape(x, &[batch, h * w / 4, 4 * c])
    }

    /// Inverse of [`Self::merge`]: `[B, H·W, 4C]` → `[B, 4·H·W, C]` on a `2H×2W` grid.
    fn split<T: Scalar>(
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<Var, TensorError> {
        let x = g.reshape(x, &[batch, h, w, 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        g.reshape(x, &[batch, 4 * h * w, c])
    }

    /// `E_S`: images `[B, c, h, w]` → semantic features `[B, c', h', w']`.
    pub fn semantic_encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        snr_db: &[f64],
    ) -> Result<Var, TensorError> {
        let [c, h, w] = self.cfg.image;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.cfg.image {
            return Err(TensorError::Shape {
                op: "semantic_encode",
                lhs: shape,
                rhs: self.cfg.image.to_vec(),
            });
        }
        if g.data(x)
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(TensorError::Domain {
                op: "semantic_encode",
                detail: "image values must lie in [0, 1]".into(),
            });
        }
        let batch = shape[0];
        // patchify 2×2: [B, c, h, w] → [B, (h/2)(w/2), 4c]
        let t = g.reshape(x, &[batch, c, h / 2, 2, w / 2, 2])?;
        let t = g.permute(t, &[0, 2, 4, 1, 3, 5])?;
        let mut t = g.reshape(t, &[batch, h * w / 4, 4 * c])?;
        let (mut gh, mut gw) = (h / 2, w / 2);
        let n = self.sem_enc.stages.len();
        for (i, stage) in self.sem_enc.stages.iter().enumerate() {
            if i > 0 {
                let width = self.cfg.stage_channels[i - 1];
                t = Self::merge(g, t, batch, gh, gw, width)?;
                gh /= 2;
                gw /= 2;
            }
            t = stage.forward(g, p, t)?;
            if i + 1 < n {
                t = g.gelu(t);
            }
        }
        let t = self.sem_enc.modulator.forward(g, p, t, snr_db)?;
        let [cs, hs, ws] = self.cfg.semantic_dims();
        let t = g.permute(t, &[0, 2, 1])?;
        g.reshape(t, &[batch, cs, hs, ws])
    }

    /// `E_C,1`: `[B, c', h', w'] → [B, n_tx, d']`, one token per transmit antenna.
    pub fn channel_encode_1<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_s: Var,
    ) -> Result<Var, TensorError> {
        let batch = g.shape(z_s)[0];
        if g.shape(z_s)[1..] != self.cfg.semantic_dims() {
            return Err(TensorError::Shape {
                op: "channel_encode_1",
                lhs: g.shape(z_s).to_vec(),
                rhs: self.cfg.semantic_dims().to_vec(),
            });
        }
        let flat = g.reshape(z_s, &[batch, self.cfg.semantic_len()])?;
        let t = self.ch_enc.fc1.forward(g, p, flat)?;
        let t = if self.cfg.channel_activation {
            g.gelu(t)
        } else {
            t
        };
        g.reshape(t, &[batch, self.cfg.n_tx, self.cfg.d_prime])
    }

    /// `E_C,2`: `[B, n_tx, d'] → [B, n_tx, 2d]` complex symbols on the real
    /// bridge at unit mean power. Streams beyond `min(n_tx, n_rx)` are zeroed.
    pub fn channel_encode_2<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_c2: Var,
    ) -> Result<Var, TensorError> {
        let t = self.ch_enc.fc2.forward(g, p, z_c2)?;
        let t = if self.cfg.n_tx > self.cfg.n_rx {
            let w = 2 * self.cfg.d;
            let mask = (0..self.cfg.n_tx * w)
                .map(|i| {
                    if i / w < self.cfg.n_rx {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let m = g.constant(Tensor::new(vec![self.cfg.n_tx, w], mask)?);
            g.mul(t, m)?
        } else {
            t
        };
        g.power_normalize(t)
    }

    /// Adaptor of one side, or the identity for [`Variant::NoAdaptor`].
    pub fn cma_apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        csi: Var,
        side: Side,
    ) -> Result<Var, TensorError> {
        match self.adaptor(side) {
            Some(a) => a.forward(g, p, tokens, csi),
            None => Ok(tokens),
        }
    }

    /// `D_C,2 ∘ D_CMA ∘ D_C,1`: equalized bridge `[B, n_rx, 2d]` → `[B, c', h', w']`.
    pub fn channel_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_hat_c: Var,
        csi: Var,
    ) -> Result<Var, TensorError> {
        let shape = g.shape(z_hat_c).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.n_rx || shape[2] != 2 * self.cfg.d {
            return Err(TensorError::Shape {
                op: "channel_decode",
                lhs: shape,
                rhs: vec![self.cfg.n_rx, 2 * self.cfg.d],
            });
        }
        let batch = shape[0];
        let t = self.ch_dec.fc1.forward(g, p, z_hat_c)?;
        let t = if self.cfg.channel_activation {
            g.gelu(t)
        } else {
            t
        };
        let t = self.cma_apply(g, p, t, csi, Side::Rx)?;
        let t = g.reshape(t, &[batch, self.cfg.n_rx * self.cfg.d_prime])?;
        let t = self.ch_dec.fc2.forward(g, p, t)?;
        let [cs, hs, ws] = self.cfg.semantic_dims();
        g.reshape(t, &[batch, cs, hs, ws])
    }

    /// `D_S`: `[B, c', h', w'] → [B, c, h, w]`, squashed into `[0, 1]`.
    pub fn semantic_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_hat_s: Var,
        snr_db: &[f64],
    ) -> Result<Var, TensorError> {
        let [cs, hs, ws] = self.cfg.semantic_dims();
        let shape = g.shape(z_hat_s).to_vec();
        if shape.len() != 4 || shape[1..] != [cs, hs, ws] {
            return Err(TensorError::Shape {
                op: "semantic_decode",
                lhs: shape,
                rhs: vec![cs, hs, ws],
            });
        }
        let batch = shape[0];
        let t = g.reshape(z_hat_s, &[batch, cs, hs * ws])?;
        let t = g.permute(t, &[0, 2, 1])?;
        let mut t = self.sem_dec.modulator.forward(g, p, t, snr_db)?;
        let (mut gh, mut gw) = (hs, ws);
        let n = self.sem_dec.stages.len();
        for (k, stage) in self.sem_dec.stages.iter().enumerate() {
            t = stage.forward(g, p, t)?;
            let i = n - 1 - k;
            if i > 0 {
                t = g.gelu(t);
                t = Self::split(g, t, batch, gh, gw, self.cfg.stage_channels[i - 1])?;
                gh *= 2;
                gw *= 2;
            }
        }
        // unpatchify: [B, (h/2)(w/2), 4c] → [B, c, h, w]
        let [c, h, w] = self.cfg.image;
        let t = g.reshape(t, &[batch, h / 2, w / 2, c, 2, 2])?;
        let t = g.permute(t, &[0, 3, 1, 4, 2, 5])?;
        let t = g.reshape(t, &[batch, c, h, w])?;
        Ok(g.sigmoid(t))
    }

    /// Full link: encode, adapt, normalize, precode with `V_est`, transmit over
    /// `H_p`, add noise, equalize with `U_estᴴ`, adapt, decode.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        link: &LinkBatch<T>,
    ) -> Result<ForwardOutput, TensorError> {
        let batch = g.shape(images)[0];
        if link.batch() != batch {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: g.shape(images).to_vec(),
                rhs: vec![link.batch()],
            });
        }
        let csi = g.constant(link.csi.clone());
        let z_s = self.semantic_encode(g, p, images, &link.snr_db)?;
        let t = self.channel_encode_1(g, p, z_s)?;
        let t = self.cma_apply(g, p, t, csi, Side::Tx)?;
        let z_c = self.channel_encode_2(g, p, t)?;
        let z = precode_var(g, z_c, link.v_est.clone())?;
        let z_hat = transmit_var(g, z, link.h_p.clone(), link.noise.clone())?;
        let z_tilde = equalize_var(g, z_hat, link.u_est_h.clone())?;
        let z_hat_s = self.channel_decode(g, p, z_tilde, csi)?;
        let x_hat = self.semantic_decode(g, p, z_hat_s, &link.snr_db)?;
        Ok(ForwardOutput {
            x_hat,
            z_s,
            z_c,
            z_hat_s,
        })
    }
}
