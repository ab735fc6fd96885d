use std::sync::Arc;

use super::kernels::{self, axis_split, Broadcast};
use super::Tensor;
use crate::channel::ComplexMatrix;
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// tanh approximation
    Gelu,
    Exp,
    Log,
    Sigmoid,
    /// subgradient 0 at the origin
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Scale(Var, T),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        gather: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    ComplexApply {
        x: Var,
        mats: Arc<Vec<ComplexMatrix<T>>>,
    },
    PowerNormalize {
        x: Var,
        norms: Vec<T>,
        target: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation record for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b),
        None => *dst = Some(src.to_vec()),
    }
}

/// `out = M·x` on the real bridge layout `[rows × 2d]`; `adjoint` applies `Mᴴ`.
fn complex_apply<T: Scalar>(m: &ComplexMatrix<T>, x: &[T], d: usize, adjoint: bool) -> Vec<T> {
    let (rows, inner) = if adjoint {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    };
    let w = 2 * d;
    let mut out = vec![T::zero(); rows * w];
    let (mre, mim) = (m.re(), m.im());
    for i in 0..rows {
        let o = &mut out[i * w..(i + 1) * w];
        for p in 0..inner {
            let (ar, ai) = if adjoint {
                (mre[p * m.cols() + i], -mim[p * m.cols() + i])
            } else {
                (mre[i * m.cols() + p], mim[i * m.cols() + p])
            };
            let xr = &x[p * w..p * w + d];
            let xi = &x[p * w + d..(p + 1) * w];
            for j in 0..d {
                o[j] = o[j] + ar * xr[j] - ai * xi[j];
                o[d + j] = o[d + j] + ar * xi[j] + ai * xr[j];
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Derived node; it requires grad when any input does.
    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let t = Tensor::new(shape, data)
            .expect("operation produced consistent shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    /// Registers an existing tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.set_grad(None);
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    // ----- linear algebra -----

    /// `a[..., k] · b[k×n] → [..., n]`; all leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.derived(shape, out, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ab, bb, ob, m, k, n);
            } else {
                kernels::gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        Ok(self.derived(
            vec![batch, m, n],
            out,
            &[a, b],
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = Broadcast::plan(&sa, &sb).ok_or_else(|| TensorError::Shape {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[plan.index(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.derived(sa, out, &[a, b], Op::Binary { kind, a, b, plan }))
    }

    /// `a + b`, with `b` broadcast over leading axes or size-1 axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, &[a], Op::Scale(a, c))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var, TensorError> {
        let x = self.data(a);
        let out: Vec<T> = match kind {
            Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Gelu => x.iter().map(|&v| gelu(v)).collect(),
            Unary::Exp => {
                let o: Vec<T> = x.iter().map(|&v| v.exp()).collect();
                if let Some(p) = o.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::Domain {
                        op: "exp",
                        detail: format!("overflow at element {p} (input {})", x[p]),
                    });
                }
                o
            }
            Unary::Log => {
                if let Some(p) = x.iter().position(|&v| v <= T::zero() || !v.is_finite()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {} at element {p}", x[p]),
                    });
                }
                x.iter().map(|&v| v.ln()).collect()
            }
            Unary::Sigmoid => x
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect(),
            Unary::Abs => x.iter().map(|&v| v.abs()).collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, &[a], Op::Unary(a, kind)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs).expect("abs is total")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Unary::Log)
    }

    // ----- normalization -----

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(), TensorError> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                let sum: T = (0..len).map(|j| (d[at(j)] - mx).exp()).sum();
                let lse = sum.ln();
                for j in 0..len {
                    out[at(j)] = if log {
                        d[at(j)] - mx - lse
                    } else {
                        (d[at(j)] - mx).exp() / sum
                    };
                }
            }
        }
        out
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis, "softmax")?;
        let out = self.softmax_values(x, axis, false);
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis, "log_softmax")?;
        let out = self.softmax_values(x, axis, true);
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, &[x], Op::LogSoftmax { x, axis }))
    }

    /// Normalizes over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / width;
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let wt = T::from_usize(width).unwrap();
        let mut xhat = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); d.len()];
        for r in 0..rows {
            let row = &d[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..width {
                let h = (row[j] - mean) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        Ok(self.derived(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ----- layout -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.derived(shape.to_vec(), data, &[x], Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let gather = kernels::permute_gather(&shape, perm);
        let d = self.data(x);
        let out = gather.iter().map(|&i| d[i]).collect();
        let new_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.derived(new_shape, out, &[x], Op::Permute { x, gather }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(inputs[0]).to_vec();
        self.check_axis(inputs[0], axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.derived(
            shape,
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.derived(new_shape, out, &[x], Op::Slice { x, axis, start }))
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.derived(vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.derived(vec![1], vec![s], &[x], Op::Mean(x))
    }

    // ----- channel-facing ops -----

    /// Left-multiplies each sample of a real-bridge tensor `[B, n, 2d]` by a
    /// constant complex matrix (`mats.len() == B`, or one matrix shared by all).
    /// The matrices are not differentiated.
    pub fn complex_apply(
        &mut self,
        x: Var,
        mats: Arc<Vec<ComplexMatrix<T>>>,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (batch, n, w) = match shape.as_slice() {
            [b, n, w] => (*b, *n, *w),
            [n, w] => (1, *n, *w),
            _ => {
                return Err(TensorError::Shape {
                    op: "complex_apply",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let shared = mats.len() == 1;
        if w % 2 != 0 || !(shared || mats.len() == batch) || mats.iter().any(|m| m.cols() != n) {
            return Err(TensorError::Shape {
                op: "complex_apply",
                lhs: shape,
                rhs: vec![mats.len(), mats[0].rows(), mats[0].cols()],
            });
        }
        let rows = mats[0].rows();
        let d = w / 2;
        let data = self.data(x);
        let mut out = Vec::with_capacity(batch * rows * w);
        for b in 0..batch {
            let m = if shared { &mats[0] } else { &mats[b] };
            out.extend(complex_apply(
                m,
                &data[b * n * w..(b + 1) * n * w],
                d,
                false,
            ));
        }
        let mut new_shape = shape;
        let ax = new_shape.len() - 2;
        new_shape[ax] = rows;
        Ok(self.derived(new_shape, out, &[x], Op::ComplexApply { x, mats }))
    }

    /// Per-sample scaling so that each leading-axis slice, read as complex
    /// symbols on the real bridge, has unit mean symbol power.
    pub fn power_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let batch = if shape.len() >= 3 { shape[0] } else { 1 };
        let per = self.value(x).numel() / batch;
        if !per.is_multiple_of(2) {
            return Err(TensorError::Shape {
                op: "power_normalize",
                lhs: shape,
                rhs: vec![],
            });
        }
        let target = T::from_usize(per / 2).unwrap().sqrt();
        let d = self.data(x);
        let mut norms = Vec::with_capacity(batch);
        let mut out = Vec::with_capacity(d.len());
        for b in 0..batch {
            let s = &d[b * per..(b + 1) * per];
            let r = s.iter().map(|&v| v * v).sum::<T>().sqrt();
            if r == T::zero() || !r.is_finite() {
                return Err(TensorError::Domain {
                    op: "power_normalize",
                    detail: format!("sample {b} has norm {r}"),
                });
            }
            norms.push(r);
            out.extend(s.iter().map(|&v| v * target / r));
        }
        Ok(self.derived(shape, out, &[x], Op::PowerNormalize { x, norms, target }))
    }

    // ----- backward -----

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. A second call without [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value
                    .set_grad(Some(g.unwrap_or_else(|| vec![T::zero(); n])));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm_nt(g, self.data(*b), &mut ga, m, n, k);
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm_tn(self.data(*a), g, &mut gb, m, k, n);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // ga = g · b  (b is [n, k])
                            kernels::gemm_nn(gb, bb, dst, m, n, k);
                        } else {
                            kernels::gemm_nt(gb, bb, dst, m, n, k);
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gbv = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gbv[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // gb[n×k] = gᵀ · a
                            kernels::gemm_tn(gb, ab, dst, m, n, k);
                        } else {
                            kernels::gemm_tn(ab, gb, dst, m, k, n);
                        }
                    }
                    add_into(&mut grads[b.0], &gbv);
                }
            }
            Op::Binary { kind, a, b, plan } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let ga: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(j, &gv)| gv * db[plan.index(j)])
                            .collect(),
                    };
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); db.len()];
                    for (j, &gv) in g.iter().enumerate() {
                        let t = plan.index(j);
                        gb[t] = gb[t]
                            + match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * da[j],
                            };
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Unary(a, kind) => {
                let x = self.data(*a);
                let ga: Vec<T> = match kind {
                    Unary::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                    Unary::Exp => g.iter().zip(out).map(|(&gv, &y)| gv * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect(),
                    Unary::Sigmoid => g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv > T::zero() {
                                gv
                            } else if xv < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                add_into(&mut grads[a.0], &ga);
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        if log {
                            let gs: T = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = g[at(j)] - out[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let width = *node.value.shape().last().unwrap();
                let rows = inv_std.len();
                let gd = self.data(*gain);
                if self.wants(*gain) {
                    let mut gg = vec![T::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            gg[j] = gg[j] + g[r * width + j] * xhat[r * width + j];
                        }
                    }
                    add_into(&mut grads[gain.0], &gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![T::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            gb[j] = gb[j] + g[r * width + j];
                        }
                    }
                    add_into(&mut grads[bias.0], &gb);
                }
                if self.wants(*x) {
                    let wt = T::from_usize(width).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let base = r * width;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..width {
                            let gh = g[base + j] * gd[j];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xhat[base + j];
                        }
                        m1 = m1 / wt;
                        m2 = m2 / wt;
                        for j in 0..width {
                            let gh = g[base + j] * gd[j];
                            gx[base + j] = inv_std[r] * (gh - m1 - xhat[base + j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Permute { x, gather } => {
                let mut gx = vec![T::zero(); g.len()];
                for (o, &src) in gather.iter().enumerate() {
                    gx[src] = g[o];
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut grads[v.0], &gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, full, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gx = vec![g[0] / T::from_usize(n).unwrap(); n];
                add_into(&mut grads[x.0], &gx);
            }
            Op::ComplexApply { x, mats } => {
                let sx = self.shape(*x);
                let (n, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let rows = mats[0].rows();
                let batch = self.value(*x).numel() / (n * w);
                let mut gx = Vec::with_capacity(batch * n * w);
                for b in 0..batch {
                    let m = if mats.len() == 1 { &mats[0] } else { &mats[b] };
                    gx.extend(complex_apply(
                        m,
                        &g[b * rows * w..(b + 1) * rows * w],
                        w / 2,
                        true,
                    ));
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::PowerNormalize { x, norms, target } => {
                let xd = self.data(*x);
                let per = xd.len() / norms.len();
                let mut gx = Vec::with_capacity(xd.len());
                for (b, &r) in norms.iter().enumerate() {
                    let xs = &xd[b * per..(b + 1) * per];
                    let gs = &g[b * per..(b + 1) * per];
                    let dot: T = xs.iter().zip(gs).map(|(&a, &c)| a * c).sum();
                    let k = *target / r;
                    let r2 = r * r;
                    gx.extend(xs.iter().zip(gs).map(|(&xv, &gv)| k * (gv - xv * dot / r2)));
                }
                add_into(&mut grads[x.0], &gx);
            }
        }
    }
}
