use serde::{Deserialize, Serialize};

use super::{gemm, Result, Tensor, TensorError};
use crate::rng::SplitMix64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        inner: usize,
    },
    AddMask(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::AddMask(x)
            | Op::Sum(x) => vec![*x],
            Op::SwapAxes12 { x, .. }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. }
            | Op::Slice { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass. Not `Sync`-shared: one tape per thread of work.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it takes part in backward iff it requires grad.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        #[cfg(debug_assertions)]
        {
            let finite_in = inputs
                .iter()
                .all(|v| self.nodes[v.0].value.data().iter().all(|x| x.is_finite()));
            if finite_in {
                debug_assert!(
                    data.iter().all(|x| x.is_finite()),
                    "{}",
                    TensorError::NonFinite(name)
                );
            }
        }
        let _ = name;
        let value = Tensor::new(shape, data)
            .expect("op produced consistent shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), "mul"))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, factor), "scale")
    }

    /// Adds a `[n]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), "add_bias"))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul2d(a, b, false, "matmul")
    }

    /// `a[..., k] · b[n, k]ᵀ -> [..., n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul2d(a, b, true, "matmul_nt")
    }

    fn matmul2d(&mut self, a: Var, b: Var, trans_b: bool, op: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let k = *sa.last().unwrap();
        let ok = sb.len() == 2 && if trans_b { sb[1] == k } else { sb[0] == k };
        if !ok {
            return Err(TensorError::Shape { op, lhs: sa, rhs: sb });
        }
        let n = if trans_b { sb[0] } else { sb[1] };
        let m = self.value(a).len() / k;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut data, 0.0);
        let node = Op::MatMul {
            a,
            b,
            batch: 1,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(out_shape, data, node, op))
    }

    /// Batched `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        if (trans_b && sb[2] != k) || (!trans_b && sb[1] != k) {
            return Err(bad());
        }
        let mut data = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for p in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[p * m * k..(p + 1) * m * k],
                false,
                &db[p * k * n..(p + 1) * k * n],
                trans_b,
                &mut data[p * m * n..(p + 1) * m * n],
                0.0,
            );
        }
        let node = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(vec![batch, m, n], data, node, "bmm"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), "reshape"))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "swap_axes12",
                msg: format!("expected rank 4, got {s:?}"),
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = permute12(self.data(x), dims);
        Ok(self.push(
            vec![s[0], s[2], s[1], s[3]],
            data,
            Op::SwapAxes12 { x, dims },
            "swap_axes12",
        ))
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, "softmax"))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), "relu")
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Gathers rows of `table[V, d]`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "no ids".into(),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("id {bad} out of range for table {shape:?}"),
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    /// `p == 0` returns `x` unchanged without recording a node.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut SplitMix64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability must be in [0, 1), got {p}"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::Dropout { x, mask }, "dropout"))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let src = self.data(v);
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
                outer,
                inner,
            },
            "concat",
        ))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            out_shape,
            data,
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                inner,
            },
            "slice",
        ))
    }

    /// Adds a constant additive mask `[B, q, k]` to attention scores
    /// `[B * heads, q, k]`, broadcasting over heads.
    pub fn add_mask(&mut self, x: Var, mask: &[f64], heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ok = s.len() == 3 && heads > 0 && s[0] % heads == 0 && mask.len() * heads == self.value(x).len();
        if !ok {
            return Err(TensorError::Shape {
                op: "add_mask",
                lhs: s,
                rhs: vec![mask.len(), heads],
            });
        }
        let block = s[1] * s[2];
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for (bh, chunk) in src.chunks_exact(block).enumerate() {
            let b = bh / heads;
            let m = &mask[b * block..(b + 1) * block];
            data.extend(chunk.iter().zip(m).map(|(v, mm)| v + mm));
        }
        Ok(self.push(s, data, Op::AddMask(x), "add_mask"))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// rows whose target differs from `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut kept = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("target {t} out of range for {v} classes"),
                });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            total += log_z - row[t];
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            "cross_entropy",
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum(x), "sum")
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`. Afterwards
    /// [`Tape::grad`] returns `d loss / d v` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::StaleTape);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad() {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0].value;
        if !node.requires_grad() {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.len()]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(&vb)).for_each(|(s, (g, y))| *s += g * y);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g.iter().zip(&va)).for_each(|(s, (g, x))| *s += g * x);
                }
            }
            Op::Scale(x, f) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, *f);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for row in g.chunks_exact(n) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].value.requires_grad() {
                    let vb = self.data(*b).to_vec();
                    let s = self.slot(grads, *a).unwrap();
                    for p in 0..*batch {
                        let gp = &g[p * m * n..(p + 1) * m * n];
                        let bp = &vb[p * k * n..(p + 1) * k * n];
                        let sp = &mut s[p * m * k..(p + 1) * m * k];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gp, false, bp, !*trans_b, sp, 1.0);
                    }
                }
                if self.nodes[b.0].value.requires_grad() {
                    let va = self.data(*a).to_vec();
                    let s = self.slot(grads, *b).unwrap();
                    for p in 0..*batch {
                        let gp = &g[p * m * n..(p + 1) * m * n];
                        let ap = &va[p * m * k..(p + 1) * m * k];
                        let sp = &mut s[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            gemm(n, m, k, gp, true, ap, false, sp, 1.0);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            gemm(k, m, n, ap, true, gp, false, sp, 1.0);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::SwapAxes12 { x, dims } => {
                if let Some(s) = self.slot(grads, *x) {
                    let back = permute12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    axpy(s, &back, 1.0);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let dot: f64 = (0..n).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..n {
                                s[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = xhat.len() / rstd.len();
                let gv = self.data(*gain).to_vec();
                if let Some(s) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for t in 0..d {
                            s[t] += grow[t] * hrow[t];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for grow in g.chunks_exact(d) {
                        axpy(s, grow, 1.0);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for t in 0..d {
                            dh[t] = grow[t] * gv[t];
                            mean_dh += dh[t];
                            mean_dh_h += dh[t] * hrow[t];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let srow = &mut s[r * d..(r + 1) * d];
                        for t in 0..d {
                            srow[t] += rs * (dh[t] - mean_dh - hrow[t] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(&xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *s += g * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(&xv) {
                        if v > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(s) = self.slot(grads, *table) {
                    let d = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g.iter().zip(mask)).for_each(|(s, (g, m))| *s += g * m);
                }
            }
            Op::Concat {
                inputs,
                sizes,
                outer,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if let Some(s) = self.slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            axpy(&mut s[o * sz * inner..(o + 1) * sz * inner], src, 1.0);
                        }
                    }
                    offset += sz;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                inner,
            } => {
                if let Some(s) = self.slot(grads, *x) {
                    let chunk = g.len() / outer;
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        axpy(&mut s[base..base + chunk], &g[o * chunk..(o + 1) * chunk], 1.0);
                    }
                }
            }
            Op::AddMask(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let v = probs.len() / targets.len();
                    let scale = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut s[r * v..(r + 1) * v];
                        for (c, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *c += scale * p;
                        }
                        row[*t] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn permute12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
