//! Parameterized building blocks. Each layer stores the [`ParamId`]s it
//! registered and reads the matching graph variables from a [`Bound`].

use rand::Rng;

use super::params::{Bound, ParamId, ParameterStore};
use crate::channel::ChannelRng;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`
    Uniform,
    Zero,
}

/// Registers parameters in a store while drawing initial values.
pub struct Builder<'a, T> {
    pub store: &'a mut ParameterStore<T>,
    pub rng: &'a mut ChannelRng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn tensor(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        fan_in: usize,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![T::zero(); n],
            Init::Uniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::lit(self.rng.random_range(-bound..bound)))
                    .collect()
            }
        };
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.w"), &[fan_in, fan_out], init, fan_in)?,
            b: self.tensor(&format!("{name}.b"), &[fan_out], Init::Zero, fan_in)?,
            fan_out,
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNorm> {
        let gain = self
            .store
            .insert(&format!("{name}.gain"), Tensor::full(vec![width], T::one()))?;
        let bias = self.tensor(&format!("{name}.bias"), &[width], Init::Zero, width)?;
        Ok(LayerNorm { gain, bias })
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Var, TensorError> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add(y, p.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LN_EPS))
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    /// `zero_output` starts the output projection at zero so a residual
    /// branch built on it is the identity.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        heads: usize,
        zero_output: bool,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "width {width} not divisible by {heads} heads"
            ))
            .into());
        }
        Ok(Self {
            q: b.linear(&format!("{name}.q"), width, width, Init::Uniform)?,
            k: b.linear(&format!("{name}.k"), width, width, Init::Uniform)?,
            v: b.linear(&format!("{name}.v"), width, width, Init::Uniform)?,
            o: b.linear(
                &format!("{name}.o"),
                width,
                width,
                if zero_output {
                    Init::Zero
                } else {
                    Init::Uniform
                },
            )?,
            heads,
            width,
        })
    }

    fn split_heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let dh = self.width / self.heads;
        let x = g.reshape(x, &[batch, len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * self.heads, len, dh])
    }

    /// Inputs are `[L, D]` or `[B, L, D]`; keys and values share a length.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
    ) -> Result<Var, TensorError> {
        let shape = g.shape(q_in).to_vec();
        let (batch, lq, width) = match shape.as_slice() {
            [l, w] => (1, *l, *w),
            [b, l, w] => (*b, *l, *w),
            _ => {
                return Err(TensorError::Shape {
                    op: "attention",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        if width != self.width {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![self.width],
            });
        }
        let lk = g.shape(k_in)[g.shape(k_in).len() - 2];
        let q = self.q.forward(g, p, q_in)?;
        let k = self.k.forward(g, p, k_in)?;
        let v = self.v.forward(g, p, v_in)?;
        let q = self.split_heads(g, q, batch, lq)?;
        let k = self.split_heads(g, k, batch, lk)?;
        let v = self.split_heads(g, v, batch, lk)?;
        let dh = (self.width / self.heads) as f64;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / dh.sqrt()));
        let attn = g.softmax(scores, 2)?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, lq, self.width / self.heads])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &shape)?;
        self.o.forward(g, p, ctx)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: b.layer_norm(&format!("{name}.ln1"), width)?,
            attn: MultiHeadAttention::build(b, &format!("{name}.attn"), width, heads, true)?,
            ln2: b.layer_norm(&format!("{name}.ln2"), width)?,
            fc1: b.linear(
                &format!("{name}.mlp1"),
                width,
                width * mlp_ratio,
                Init::Uniform,
            )?,
            fc2: b.linear(
                &format!("{name}.mlp2"),
                width * mlp_ratio,
                width,
                Init::Zero,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Maps an SNR in dB to per-channel `(scale, shift)` and applies
/// `x·(1 + a) + b`. The output layer starts at zero, i.e. the identity.
#[derive(Debug, Clone)]
pub struct SnrModulator {
    pub l1: Linear,
    pub l2: Linear,
    pub channels: usize,
}

/// SNR values enter the modulator divided by this.
pub const SNR_INPUT_SCALE: f64 = 10.0;

impl SnrModulator {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        hidden: usize,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            l1: b.linear(&format!("{name}.l1"), 1, hidden, Init::Uniform)?,
            l2: b.linear(&format!("{name}.l2"), hidden, 2 * channels, Init::Zero)?,
            channels,
        })
    }

    /// `x` is `[B, N, C]`; `snr_db` has one entry per sample.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        snr_db: &[f64],
    ) -> Result<Var, TensorError> {
        let batch = g.shape(x)[0];
        if snr_db.len() != batch || snr_db.iter().any(|s| !s.is_finite()) {
            return Err(TensorError::Contract(format!(
                "need {batch} finite SNR values, got {snr_db:?}"
            )));
        }
        let s = g.constant(Tensor::new(
            vec![batch, 1],
            snr_db
                .iter()
                .map(|&v| T::lit(v / SNR_INPUT_SCALE))
                .collect(),
        )?);
        let h = self.l1.forward(g, p, s)?;
        let h = g.gelu(h);
        let ab = self.l2.forward(g, p, h)?;
        let a = g.slice(ab, 1, 0, self.channels)?;
        let b = g.slice(ab, 1, self.channels, self.channels)?;
        let a = g.reshape(a, &[batch, 1, self.channels])?;
        let b = g.reshape(b, &[batch, 1, self.channels])?;
        let xa = g.mul(x, a)?;
        let y = g.add(x, xa)?;
        g.add(y, b)
    }
}
