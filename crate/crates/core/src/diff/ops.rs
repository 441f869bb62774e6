//! Forward rules (as `Tensor` methods) and the matching reverse rules.
//!
//! Row-wise operations view a tensor as `[rows x last_dim]`.

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Node, NodeId, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Layer-norm variance epsilon, applied inside the square root.
pub const NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Powf(NodeId, f64),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    MatMulNt { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, m: usize, n: usize },
    SoftmaxRows(NodeId),
    /// `probs` holds every head's `[n x m]` weights, kept only when tracked.
    MultiHeadAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupNorm { x: NodeId, gain: NodeId, bias: NodeId, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(NodeId),
    SumRows(NodeId),
    MaxRows { a: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols { parts: Vec<(NodeId, usize)> },
    SliceCols { a: NodeId, start: usize, len: usize, cols: usize },
    GatherRows { a: NodeId, index: Vec<usize> },
    RepeatRows { a: NodeId, times: usize },
    BilinearSample { map: NodeId, points: NodeId, h: usize, w: usize, d: usize },
    Im2col { a: NodeId, geom: ConvGeom },
    UpsampleNearest { a: NodeId, w: usize, c: usize, factor: usize },
    GroupWeightedSum { weights: NodeId, values: NodeId, n: usize, p: usize, d: usize },
}

/// Geometry of a sliding-window patch extraction over an `[h, w, c]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    /// Calls `f(out_row, out_col, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let base_in = (iy as usize * self.w + ix as usize) * self.c;
                        let base_col = (ky * self.kernel + kx) * self.c;
                        for ch in 0..self.c {
                            f(row, base_col + ch, base_in + ch);
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tensor::multi_head_attention`].
pub struct AttentionParts<'t> {
    /// `[n x d]`, heads side by side.
    pub output: Tensor<'t>,
    /// Head-averaged `[n x m]` weights (untracked).
    pub weights: Vec<f64>,
    /// Per-head scaled `[n x m]` logits, when requested (untracked).
    pub logits: Vec<Vec<f64>>,
}

/// Copies columns `start..start + len` of a row-major `[rows x cols]` buffer.
fn columns(src: &[f64], cols: usize, start: usize, len: usize) -> Vec<f64> {
    src.chunks_exact(cols).flat_map(|row| &row[start..start + len]).copied().collect()
}

/// Adds a row-major `[rows x len]` block into columns `start..start + len`.
fn add_columns(dst: &mut [f64], cols: usize, start: usize, len: usize, block: &[f64]) {
    for (row, b) in dst.chunks_exact_mut(cols).zip(block.chunks_exact(len)) {
        row[start..start + len].iter_mut().zip(b).for_each(|(o, &x)| *o += x);
    }
}

fn dims_panic(op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> ! {
    panic!("{}", Error::Dimension { op, lhs, rhs })
}

impl<'t> Tensor<'t> {
    fn same_tape(&self, other: &Tensor<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "tensors live on different tapes");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor<'t> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.tracked)
        };
        self.tape.push(shape, value, op, tracked)
    }

    fn binary(&self, other: Tensor<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor<'t> {
        self.same_tape(&other);
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                dims_panic(name, a.shape.clone(), b.shape.clone());
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.tracked || b.tracked)
        };
        self.tape.push(shape, value, op, tracked)
    }

    pub fn add(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "minimum", Op::Minimum(self.id, other.id), |a, b| if a <= b { a } else { b })
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, other: Tensor<'t>) -> Tensor<'t> {
        self.binary(other, "maximum", Op::Maximum(self.id, other.id), |a, b| if a >= b { a } else { b })
    }

    fn row_broadcast(&self, row: Tensor<'t>, name: &'static str, mul: bool) -> Tensor<'t> {
        self.same_tape(&row);
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[row.id]);
            let cols = *a.shape.last().unwrap_or(&1);
            if b.value.len() != cols {
                dims_panic(name, a.shape.clone(), b.shape.clone());
            }
            let mut v = a.value.clone();
            for chunk in v.chunks_mut(cols) {
                for (x, &r) in chunk.iter_mut().zip(&b.value) {
                    if mul {
                        *x *= r;
                    } else {
                        *x += r;
                    }
                }
            }
            (a.shape.clone(), v, a.tracked || b.tracked)
        };
        let op = if mul { Op::MulRow(self.id, row.id) } else { Op::AddRow(self.id, row.id) };
        self.tape.push(shape, value, op, tracked)
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_row(self, row: Tensor<'t>) -> Tensor<'t> {
        self.row_broadcast(row, "add_row", false)
    }

    /// Multiplies every row elementwise by a vector of length `last_dim`.
    pub fn mul_row(self, row: Tensor<'t>) -> Tensor<'t> {
        self.row_broadcast(row, "mul_row", true)
    }

    pub fn scale(self, c: f64) -> Tensor<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn sigmoid(self) -> Tensor<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Tensor<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Tensor<'t> {
        self.unary(Op::Gelu(self.id), |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
    }

    pub fn exp(self) -> Tensor<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Tensor<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn abs(self) -> Tensor<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sqrt(self) -> Tensor<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn powf(self, e: f64) -> Tensor<'t> {
        self.unary(Op::Powf(self.id, e), |x| x.powf(e))
    }

    pub fn square(self) -> Tensor<'t> {
        self.mul(self)
    }

    /// `[m x k] * [k x n]`. Panics on a shape mismatch; see [`Tensor::try_matmul`].
    pub fn matmul(self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.try_matmul(rhs).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&rhs);
        let (m, k, n, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm_nn(&a.value, &b.value, &mut out, m, k, n);
            (m, k, n, out, a.tracked || b.tracked)
        };
        Ok(self.tape.push(vec![m, n], value, Op::MatMul { a: self.id, b: rhs.id, m, k, n }, tracked))
    }

    /// `[m x k] * [n x k]^T`.
    pub fn matmul_nt(self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.same_tape(&rhs);
        let (m, k, n, value, tracked) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
                dims_panic("matmul_nt", a.shape.clone(), b.shape.clone());
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
            let mut out = vec![0.0; m * n];
            gemm_nt(&a.value, &b.value, &mut out, m, k, n);
            (m, k, n, out, a.tracked || b.tracked)
        };
        self.tape.push(vec![m, n], value, Op::MatMulNt { a: self.id, b: rhs.id, m, k, n }, tracked)
    }

    pub fn transpose(self) -> Tensor<'t> {
        let (m, n, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 2, "transpose needs a matrix, got {:?}", a.shape);
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.value[i * n + j];
                }
            }
            (m, n, out, a.tracked)
        };
        self.tape.push(vec![n, m], value, Op::Transpose { a: self.id, m, n }, tracked)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(self) -> Tensor<'t> {
        self.try_softmax_rows().unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_softmax_rows(self) -> Result<Tensor<'t>> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.value.iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite("softmax_rows input"));
            }
            let cols = *a.shape.last().unwrap_or(&1);
            let mut v = a.value.clone();
            for row in v.chunks_mut(cols) {
                softmax_in_place(row);
            }
            (a.shape.clone(), v, a.tracked)
        };
        Ok(self.tape.push(shape, value, Op::SoftmaxRows(self.id), tracked))
    }

    /// Scaled dot-product attention of the rows of `self: [n x d]` over
    /// `keys, values: [m x d]`, with the feature axis split into `heads`
    /// equal column groups. Only the per-head weights are kept for the
    /// reverse sweep, and only when the result is tracked.
    pub fn multi_head_attention(self, keys: Tensor<'t>, values: Tensor<'t>, heads: usize, keep_logits: bool) -> AttentionParts<'t> {
        self.same_tape(&keys);
        self.same_tape(&values);
        let (n, d, value, weights, logits, probs, tracked) = {
            let nodes = self.tape.nodes();
            let (q, k, v) = (&nodes[self.id], &nodes[keys.id], &nodes[values.id]);
            if q.shape.len() != 2 || k.shape.len() != 2 || k.shape[1] != q.shape[1] {
                dims_panic("multi_head_attention", q.shape.clone(), k.shape.clone());
            }
            if v.shape != k.shape {
                dims_panic("multi_head_attention", k.shape.clone(), v.shape.clone());
            }
            let (n, d, m) = (q.shape[0], q.shape[1], k.shape[0]);
            assert!(heads >= 1 && d >= heads && d % heads == 0, "{d} features do not split into {heads} heads");
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let tracked = q.tracked || k.tracked || v.tracked;
            let mut out = vec![0.0; n * d];
            let mut weights = vec![0.0; n * m];
            let mut logits = Vec::new();
            let mut probs = Vec::with_capacity(if tracked { heads * n * m } else { 0 });
            for h in 0..heads {
                let (qh, kh, vh) = (columns(&q.value, d, h * dh, dh), columns(&k.value, d, h * dh, dh), columns(&v.value, d, h * dh, dh));
                let mut a = vec![0.0; n * m];
                gemm_nt(&qh, &kh, &mut a, n, dh, m);
                a.iter_mut().for_each(|x| *x *= scale);
                if keep_logits {
                    logits.push(a.clone());
                }
                for row in a.chunks_mut(m.max(1)) {
                    softmax_in_place(row);
                }
                weights.iter_mut().zip(&a).for_each(|(w, &x)| *w += x);
                let mut oh = vec![0.0; n * dh];
                gemm_nn(&a, &vh, &mut oh, n, m, dh);
                add_columns(&mut out, d, h * dh, dh, &oh);
                if tracked {
                    probs.extend_from_slice(&a);
                }
            }
            let inv = 1.0 / heads as f64;
            weights.iter_mut().for_each(|w| *w *= inv);
            (n, d, out, weights, logits, probs, tracked)
        };
        let op = Op::MultiHeadAttention { q: self.id, k: keys.id, v: values.id, heads, probs };
        AttentionParts {
            output: self.tape.push(vec![n, d], value, op, tracked),
            weights,
            logits,
        }
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Tensor<'t>, bias: Tensor<'t>) -> Tensor<'t> {
        let (shape, value, xhat, inv_std, tracked) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *x.shape.last().unwrap_or(&1);
            assert!(d >= 2, "layer_norm needs at least 2 features, got {:?}", x.shape);
            if g.value.len() != d || b.value.len() != d {
                dims_panic("layer_norm", x.shape.clone(), g.shape.clone());
            }
            let rows = x.value.len() / d;
            let mut xhat = vec![0.0; x.value.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; x.value.len()];
            for r in 0..rows {
                let row = &x.value[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[r] = inv;
                for c in 0..d {
                    let h = (row[c] - mean) * inv;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * g.value[c] + b.value[c];
                }
            }
            (x.shape.clone(), out, xhat, inv_std, x.tracked || g.tracked || b.tracked)
        };
        let op = Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std };
        self.tape.push(shape, value, op, tracked)
    }

    /// Group normalization of an `[h, w, c]` map over `groups` channel groups.
    pub fn group_norm(self, groups: usize, gain: Tensor<'t>, bias: Tensor<'t>) -> Tensor<'t> {
        let (shape, value, xhat, inv_std, tracked) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let c = *x.shape.last().unwrap_or(&1);
            assert!(groups >= 1 && c % groups == 0, "{c} channels do not split into {groups} groups");
            if g.value.len() != c || b.value.len() != c {
                dims_panic("group_norm", x.shape.clone(), g.shape.clone());
            }
            let cg = c / groups;
            let positions = x.value.len() / c;
            let count = (positions * cg) as f64;
            let mut xhat = vec![0.0; x.value.len()];
            let mut inv_std = vec![0.0; groups];
            let mut out = vec![0.0; x.value.len()];
            for grp in 0..groups {
                let chans = grp * cg..(grp + 1) * cg;
                let mut sum = 0.0;
                for p in 0..positions {
                    sum += x.value[p * c + chans.start..p * c + chans.end].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for p in 0..positions {
                    for ch in chans.clone() {
                        let dv = x.value[p * c + ch] - mean;
                        var += dv * dv;
                    }
                }
                let inv = 1.0 / (var / count + NORM_EPS).sqrt();
                inv_std[grp] = inv;
                for p in 0..positions {
                    for ch in chans.clone() {
                        let i = p * c + ch;
                        let h = (x.value[i] - mean) * inv;
                        xhat[i] = h;
                        out[i] = h * g.value[ch] + b.value[ch];
                    }
                }
            }
            (x.shape.clone(), out, xhat, inv_std, x.tracked || g.tracked || b.tracked)
        };
        let op = Op::GroupNorm { x: self.id, gain: gain.id, bias: bias.id, groups, xhat, inv_std };
        self.tape.push(shape, value, op, tracked)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Tensor<'t> {
        let (s, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.value.iter().sum::<f64>(), a.tracked)
        };
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), tracked)
    }

    pub fn mean(self) -> Tensor<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Reduces the last axis by summation.
    pub fn sum_rows(self) -> Tensor<'t> {
        let (shape, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let v: Vec<f64> = a.value.chunks(cols).map(|r| r.iter().sum()).collect();
            (vec![v.len()], v, a.tracked)
        };
        self.tape.push(shape, value, Op::SumRows(self.id), tracked)
    }

    pub fn mean_rows(self) -> Tensor<'t> {
        let cols = self.last_dim() as f64;
        self.sum_rows().scale(1.0 / cols)
    }

    /// Reduces the last axis by maximum; the first maximal entry takes the gradient.
    pub fn max_rows(self) -> Tensor<'t> {
        let (value, argmax, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let mut value = Vec::with_capacity(a.value.len() / cols);
            let mut argmax = Vec::with_capacity(a.value.len() / cols);
            for row in a.value.chunks(cols) {
                let (i, v) = first_max(row);
                value.push(v);
                argmax.push(i);
            }
            (value, argmax, a.tracked)
        };
        let shape = vec![value.len()];
        self.tape.push(shape, value, Op::MaxRows { a: self.id, argmax }, tracked)
    }

    /// Maximum over all elements, shape `[1]`.
    pub fn max(self) -> Tensor<'t> {
        let n = self.numel();
        self.reshape(&[1, n]).max_rows()
    }

    pub fn reshape(self, shape: &[usize]) -> Tensor<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                dims_panic("reshape", a.shape.clone(), shape.to_vec());
            }
            (a.value.clone(), a.tracked)
        };
        self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), tracked)
    }

    /// Stacks tensors with equal last dimension along the row axis.
    pub fn concat_rows(parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tape = parts[0].tape;
        let (value, rows, cols, tracked) = {
            let nodes = tape.nodes();
            let cols = *nodes[parts[0].id].shape.last().unwrap_or(&1);
            let mut value = Vec::new();
            let mut tracked = false;
            for p in parts {
                parts[0].same_tape(p);
                let n = &nodes[p.id];
                if *n.shape.last().unwrap_or(&1) != cols {
                    dims_panic("concat_rows", nodes[parts[0].id].shape.clone(), n.shape.clone());
                }
                value.extend_from_slice(&n.value);
                tracked |= n.tracked;
            }
            let rows = value.len() / cols;
            (value, rows, cols, tracked)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        tape.push(vec![rows, cols], value, Op::ConcatRows(ids), tracked)
    }

    /// Joins `[m x c_i]` tensors side by side into `[m x sum(c_i)]`.
    pub fn concat_cols(parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape;
        let (value, rows, total, meta, tracked) = {
            let nodes = tape.nodes();
            let rows = nodes[parts[0].id].value.len() / nodes[parts[0].id].shape.last().copied().unwrap_or(1);
            let mut meta = Vec::with_capacity(parts.len());
            let mut tracked = false;
            for p in parts {
                parts[0].same_tape(p);
                let n = &nodes[p.id];
                let cols = *n.shape.last().unwrap_or(&1);
                if n.value.len() / cols != rows {
                    dims_panic("concat_cols", nodes[parts[0].id].shape.clone(), n.shape.clone());
                }
                meta.push((p.id, cols));
                tracked |= n.tracked;
            }
            let total: usize = meta.iter().map(|m| m.1).sum();
            let mut value = vec![0.0; rows * total];
            let mut offset = 0;
            for &(id, cols) in &meta {
                let src = &nodes[id].value;
                for r in 0..rows {
                    value[r * total + offset..r * total + offset + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
                }
                offset += cols;
            }
            (value, rows, total, meta, tracked)
        };
        tape.push(vec![rows, total], value, Op::ConcatCols { parts: meta }, tracked)
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(self, start: usize, len: usize) -> Tensor<'t> {
        let (rows, cols, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            assert!(start + len <= cols, "slice_cols {start}..{} out of {cols}", start + len);
            let rows = a.value.len() / cols;
            let mut v = Vec::with_capacity(rows * len);
            for r in 0..rows {
                v.extend_from_slice(&a.value[r * cols + start..r * cols + start + len]);
            }
            (rows, cols, v, a.tracked)
        };
        self.tape.push(vec![rows, len], value, Op::SliceCols { a: self.id, start, len, cols }, tracked)
    }

    /// Rows picked by `index` (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Tensor<'t> {
        let (cols, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let rows = a.value.len() / cols;
            let mut v = Vec::with_capacity(index.len() * cols);
            for &i in index {
                assert!(i < rows, "gather_rows index {i} out of {rows} rows");
                v.extend_from_slice(&a.value[i * cols..(i + 1) * cols]);
            }
            (cols, v, a.tracked)
        };
        let op = Op::GatherRows { a: self.id, index: index.to_vec() };
        self.tape.push(vec![index.len(), cols], value, op, tracked)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Tensor<'t> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&index)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Tensor<'t> {
        let (rows, cols, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let rows = a.value.len() / cols;
            let mut v = Vec::with_capacity(rows * cols * times);
            for r in 0..rows {
                for _ in 0..times {
                    v.extend_from_slice(&a.value[r * cols..(r + 1) * cols]);
                }
            }
            (rows, cols, v, a.tracked)
        };
        self.tape.push(vec![rows * times, cols], value, Op::RepeatRows { a: self.id, times }, tracked)
    }

    /// Bilinear read of an `[h, w, d]` map at `[p, 2]` normalized `(u, v)` points.
    ///
    /// `u` runs along the width and maps to the continuous pixel coordinate
    /// `u * (w - 1)`; coordinates outside `[0, 1]` are clamped to the border.
    /// Gradients reach both the map and the coordinates.
    pub fn bilinear_sample(self, points: Tensor<'t>) -> Tensor<'t> {
        self.same_tape(&points);
        let (h, w, d, p, value, tracked) = {
            let nodes = self.tape.nodes();
            let (map, pts) = (&nodes[self.id], &nodes[points.id]);
            if map.shape.len() != 3 || pts.shape.len() != 2 || pts.shape[1] != 2 {
                dims_panic("bilinear_sample", map.shape.clone(), pts.shape.clone());
            }
            let (h, w, d) = (map.shape[0], map.shape[1], map.shape[2]);
            assert!(h >= 2 && w >= 2, "bilinear_sample needs a map of at least 2x2, got {:?}", map.shape);
            let p = pts.shape[0];
            let mut out = vec![0.0; p * d];
            for i in 0..p {
                let s = BilinearTap::new(pts.value[2 * i], pts.value[2 * i + 1], h, w);
                let o = &mut out[i * d..(i + 1) * d];
                for (idx, wt) in s.corners() {
                    let f = &map.value[idx * d..(idx + 1) * d];
                    for (ov, &fv) in o.iter_mut().zip(f) {
                        *ov += wt * fv;
                    }
                }
            }
            (h, w, d, p, out, map.tracked || pts.tracked)
        };
        let op = Op::BilinearSample { map: self.id, points: points.id, h, w, d };
        self.tape.push(vec![p, d], value, op, tracked)
    }

    /// Extracts sliding patches of an `[h, w, c]` map into `[out_h * out_w, k * k * c]`.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Tensor<'t> {
        let (geom, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 3, "im2col needs an [h, w, c] map, got {:?}", a.shape);
            let geom = ConvGeom { h: a.shape[0], w: a.shape[1], c: a.shape[2], kernel, stride, pad };
            assert!(geom.h + 2 * pad >= kernel && geom.w + 2 * pad >= kernel, "kernel larger than map");
            let pl = geom.patch_len();
            let mut out = vec![0.0; geom.out_h() * geom.out_w() * pl];
            geom.for_each_tap(|row, col, src| out[row * pl + col] = a.value[src]);
            (geom, out, a.tracked)
        };
        let shape = vec![geom.out_h() * geom.out_w(), geom.patch_len()];
        self.tape.push(shape, value, Op::Im2col { a: self.id, geom }, tracked)
    }

    /// Nearest-neighbour upsampling of an `[h, w, c]` map by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Tensor<'t> {
        let (h, w, c, value, tracked) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            assert_eq!(a.shape.len(), 3, "upsample needs an [h, w, c] map, got {:?}", a.shape);
            let (h, w, c) = (a.shape[0], a.shape[1], a.shape[2]);
            let (oh, ow) = (h * factor, w * factor);
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..oh {
                for x in 0..ow {
                    let src = ((y / factor) * w + x / factor) * c;
                    out[(y * ow + x) * c..(y * ow + x + 1) * c].copy_from_slice(&a.value[src..src + c]);
                }
            }
            (h, w, c, out, a.tracked)
        };
        let op = Op::UpsampleNearest { a: self.id, w, c, factor };
        self.tape.push(vec![h * factor, w * factor, c], value, op, tracked)
    }

    /// `out[i] = sum_j weights[i, j] * values[i * p + j]` for `weights: [n x p]`,
    /// `values: [n * p x d]`.
    pub fn group_weighted_sum(weights: Tensor<'t>, values: Tensor<'t>) -> Tensor<'t> {
        weights.same_tape(&values);
        let (n, p, d, out, tracked) = {
            let nodes = weights.tape.nodes();
            let (wn, vn) = (&nodes[weights.id], &nodes[values.id]);
            let p = *wn.shape.last().unwrap_or(&1);
            let n = wn.value.len() / p;
            let d = *vn.shape.last().unwrap_or(&1);
            if vn.value.len() != n * p * d {
                dims_panic("group_weighted_sum", wn.shape.clone(), vn.shape.clone());
            }
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let o = &mut out[i * d..(i + 1) * d];
                for j in 0..p {
                    let wt = wn.value[i * p + j];
                    let row = &vn.value[(i * p + j) * d..(i * p + j + 1) * d];
                    for (ov, &x) in o.iter_mut().zip(row) {
                        *ov += wt * x;
                    }
                }
            }
            (n, p, d, out, wn.tracked || vn.tracked)
        };
        let op = Op::GroupWeightedSum { weights: weights.id, values: values.id, n, p, d };
        weights.tape.push(vec![n, d], out, op, tracked)
    }

    /// Row-wise dot products of two `[m x d]` tensors, shape `[m]`.
    pub fn dot_rows(self, other: Tensor<'t>) -> Tensor<'t> {
        self.mul(other).sum_rows()
    }

    /// Row-wise cosine similarity of two `[m x d]` tensors, shape `[m]`.
    /// A zero-norm row yields similarity 0.
    pub fn cosine_rows(self, other: Tensor<'t>) -> Tensor<'t> {
        let num = self.dot_rows(other);
        let na = self.square().sum_rows().add_scalar(1e-24).sqrt();
        let nb = other.square().sum_rows().add_scalar(1e-24).sqrt();
        num.div(na.mul(nb))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn first_max(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// The four taps of one bilinear read.
struct BilinearTap {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    w: usize,
    /// d(pixel x)/du, zero when `u` was clamped.
    dx_du: f64,
    dy_dv: f64,
}

impl BilinearTap {
    fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (uc, du) = clamp_unit(u);
        let (vc, dv) = clamp_unit(v);
        let x = uc * (w - 1) as f64;
        let y = vc * (h - 1) as f64;
        let x0 = (x.floor() as usize).min(w - 2);
        let y0 = (y.floor() as usize).min(h - 2);
        BilinearTap {
            x0,
            y0,
            fx: x - x0 as f64,
            fy: y - y0 as f64,
            w,
            dx_du: du * (w - 1) as f64,
            dy_dv: dv * (h - 1) as f64,
        }
    }

    fn corners(&self) -> [(usize, f64); 4] {
        let i00 = self.y0 * self.w + self.x0;
        let i10 = i00 + self.w;
        [
            (i00, (1.0 - self.fx) * (1.0 - self.fy)),
            (i00 + 1, self.fx * (1.0 - self.fy)),
            (i10, (1.0 - self.fx) * self.fy),
            (i10 + 1, self.fx * self.fy),
        ]
    }
}

fn clamp_unit(u: f64) -> (f64, f64) {
    if u < 0.0 {
        (0.0, 0.0)
    } else if u > 1.0 {
        (1.0, 0.0)
    } else {
        (u, 1.0)
    }
}

fn accumulate<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

macro_rules! with_grad {
    ($nodes:expr, $grads:expr, $id:expr, |$g:ident| $body:block) => {
        if let Some($g) = accumulate($nodes, $grads, $id) $body
    };
}

pub(crate) fn backward_node(nodes: &[Node], id: NodeId, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &t in [a, b].iter() {
                with_grad!(nodes, grads, *t, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
            }
        }
        Op::Sub(a, b) => {
            with_grad!(nodes, grads, *a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            });
            with_grad!(nodes, grads, *b, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            with_grad!(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            });
            with_grad!(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let bv = &nodes[*b].value;
            with_grad!(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] / bv[i];
                }
            });
            with_grad!(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] -= gy[i] * y[i] / bv[i];
                }
            });
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(node.op, Op::Minimum(..));
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let pick_a = |i: usize| if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
            with_grad!(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    if pick_a(i) {
                        g[i] += gy[i];
                    }
                }
            });
            with_grad!(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    if !pick_a(i) {
                        g[i] += gy[i];
                    }
                }
            });
        }
        Op::AddRow(a, b) => {
            with_grad!(nodes, grads, *a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            });
            with_grad!(nodes, grads, *b, |g| {
                let cols = g.len();
                for row in gy.chunks(cols) {
                    g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let cols = bv.len();
            with_grad!(nodes, grads, *a, |g| {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += gy[i] * bv[i % cols];
                }
            });
            with_grad!(nodes, grads, *b, |g| {
                for i in 0..gy.len() {
                    g[i % cols] += gy[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            with_grad!(nodes, grads, *a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += c * d);
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            with_grad!(nodes, grads, *a, |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            });
        }
        Op::Sigmoid(a) => elementwise(nodes, grads, *a, gy, |i, _| y[i] * (1.0 - y[i])),
        Op::Relu(a) => elementwise(nodes, grads, *a, gy, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu(a) => elementwise(nodes, grads, *a, gy, |_, x| {
            let inner = GELU_C * (x + GELU_K * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        }),
        Op::Exp(a) => elementwise(nodes, grads, *a, gy, |i, _| y[i]),
        Op::Ln(a) => elementwise(nodes, grads, *a, gy, |_, x| 1.0 / x),
        Op::Abs(a) => elementwise(nodes, grads, *a, gy, |_, x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Sqrt(a) => elementwise(nodes, grads, *a, gy, |i, _| 0.5 / y[i]),
        Op::Powf(a, e) => elementwise(nodes, grads, *a, gy, |_, x| e * x.powf(e - 1.0)),
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            with_grad!(nodes, grads, *a, |g| {
                gemm_nt(gy, bv, g, *m, *n, *k);
            });
            with_grad!(nodes, grads, *b, |g| {
                gemm_tn(av, gy, g, *m, *k, *n);
            });
        }
        Op::MatMulNt { a, b, m, k, n } => {
            // y = a b^T: da = gy b, db = gy^T a
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            with_grad!(nodes, grads, *a, |g| {
                gemm_nn(gy, bv, g, *m, *n, *k);
            });
            with_grad!(nodes, grads, *b, |g| {
                gemm_tn(gy, av, g, *m, *n, *k);
            });
        }
        Op::Transpose { a, m, n } => {
            with_grad!(nodes, grads, *a, |g| {
                for i in 0..*m {
                    for j in 0..*n {
                        g[i * n + j] += gy[j * m + i];
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            with_grad!(nodes, grads, *a, |g| {
                let cols = *node.shape.last().unwrap_or(&1);
                for ((gr, yr), dr) in g.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols)) {
                    let s = dot(yr, dr);
                    for c in 0..cols {
                        gr[c] += yr[c] * (dr[c] - s);
                    }
                }
            });
        }
        Op::MultiHeadAttention { q, k, v, heads, probs } => {
            let (qn, kn, vn) = (&nodes[*q], &nodes[*k], &nodes[*v]);
            let (n, d, m) = (qn.shape[0], qn.shape[1], kn.shape[0]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..*heads {
                let a = &probs[h * n * m..(h + 1) * n * m];
                let go = columns(gy, d, h * dh, dh);
                with_grad!(nodes, grads, *v, |g| {
                    let mut dv = vec![0.0; m * dh];
                    gemm_tn(a, &go, &mut dv, n, m, dh);
                    add_columns(g, d, h * dh, dh, &dv);
                });
                if !(qn.tracked || kn.tracked) {
                    continue;
                }
                let mut dl = vec![0.0; n * m];
                gemm_nt(&go, &columns(&vn.value, d, h * dh, dh), &mut dl, n, dh, m);
                for (dr, ar) in dl.chunks_mut(m.max(1)).zip(a.chunks(m.max(1))) {
                    let s = dot(ar, dr);
                    for (x, &p) in dr.iter_mut().zip(ar) {
                        *x = p * (*x - s) * scale;
                    }
                }
                with_grad!(nodes, grads, *q, |g| {
                    let mut dq = vec![0.0; n * dh];
                    gemm_nn(&dl, &columns(&kn.value, d, h * dh, dh), &mut dq, n, m, dh);
                    add_columns(g, d, h * dh, dh, &dq);
                });
                with_grad!(nodes, grads, *k, |g| {
                    let mut dk = vec![0.0; m * dh];
                    gemm_tn(&dl, &columns(&qn.value, d, h * dh, dh), &mut dk, n, m, dh);
                    add_columns(g, d, h * dh, dh, &dk);
                });
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = *node.shape.last().unwrap_or(&1);
            let gv = &nodes[*gain].value;
            with_grad!(nodes, grads, *x, |g| {
                let mut dxhat = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let off = r * d;
                    for c in 0..d {
                        dxhat[c] = gy[off + c] * gv[c];
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2 = dot(&dxhat, &xhat[off..off + d]);
                    for c in 0..d {
                        g[off + c] += inv / d as f64 * (d as f64 * dxhat[c] - s1 - xhat[off + c] * s2);
                    }
                }
            });
            with_grad!(nodes, grads, *gain, |g| {
                for i in 0..gy.len() {
                    g[i % d] += gy[i] * xhat[i];
                }
            });
            with_grad!(nodes, grads, *bias, |g| {
                for i in 0..gy.len() {
                    g[i % d] += gy[i];
                }
            });
        }
        Op::GroupNorm { x, gain, bias, groups, xhat, inv_std } => {
            let c = *node.shape.last().unwrap_or(&1);
            let cg = c / groups;
            let positions = gy.len() / c;
            let count = (positions * cg) as f64;
            let gv = &nodes[*gain].value;
            with_grad!(nodes, grads, *x, |g| {
                for grp in 0..*groups {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for p in 0..positions {
                        for ch in grp * cg..(grp + 1) * cg {
                            let i = p * c + ch;
                            let dh = gy[i] * gv[ch];
                            s1 += dh;
                            s2 += dh * xhat[i];
                        }
                    }
                    let inv = inv_std[grp];
                    for p in 0..positions {
                        for ch in grp * cg..(grp + 1) * cg {
                            let i = p * c + ch;
                            let dh = gy[i] * gv[ch];
                            g[i] += inv / count * (count * dh - s1 - xhat[i] * s2);
                        }
                    }
                }
            });
            with_grad!(nodes, grads, *gain, |g| {
                for i in 0..gy.len() {
                    g[i % c] += gy[i] * xhat[i];
                }
            });
            with_grad!(nodes, grads, *bias, |g| {
                for i in 0..gy.len() {
                    g[i % c] += gy[i];
                }
            });
        }
        Op::Sum(a) => {
            with_grad!(nodes, grads, *a, |g| {
                g.iter_mut().for_each(|g| *g += gy[0]);
            });
        }
        Op::SumRows(a) => {
            with_grad!(nodes, grads, *a, |g| {
                let cols = g.len() / gy.len();
                for (r, row) in g.chunks_mut(cols).enumerate() {
                    row.iter_mut().for_each(|g| *g += gy[r]);
                }
            });
        }
        Op::MaxRows { a, argmax } => {
            with_grad!(nodes, grads, *a, |g| {
                let cols = g.len() / gy.len();
                for (r, &i) in argmax.iter().enumerate() {
                    g[r * cols + i] += gy[r];
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                with_grad!(nodes, grads, p, |g| {
                    g.iter_mut().zip(&gy[offset..offset + len]).for_each(|(g, &d)| *g += d);
                });
                offset += len;
            }
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = gy.len() / total;
            let mut offset = 0;
            for &(p, cols) in parts {
                with_grad!(nodes, grads, p, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += gy[r * total + offset + c];
                        }
                    }
                });
                offset += cols;
            }
        }
        Op::SliceCols { a, start, len, cols } => {
            with_grad!(nodes, grads, *a, |g| {
                let rows = gy.len() / len;
                for r in 0..rows {
                    for c in 0..*len {
                        g[r * cols + start + c] += gy[r * len + c];
                    }
                }
            });
        }
        Op::GatherRows { a, index } => {
            with_grad!(nodes, grads, *a, |g| {
                let cols = *node.shape.last().unwrap_or(&1);
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        g[src * cols + c] += gy[r * cols + c];
                    }
                }
            });
        }
        Op::RepeatRows { a, times } => {
            with_grad!(nodes, grads, *a, |g| {
                let cols = *node.shape.last().unwrap_or(&1);
                for (r, row) in gy.chunks(cols).enumerate() {
                    let src = r / times;
                    for c in 0..cols {
                        g[src * cols + c] += row[c];
                    }
                }
            });
        }
        Op::BilinearSample { map, points, h, w, d } => {
            let (mv, pv) = (&nodes[*map].value, &nodes[*points].value);
            let p = pv.len() / 2;
            with_grad!(nodes, grads, *map, |g| {
                for i in 0..p {
                    let s = BilinearTap::new(pv[2 * i], pv[2 * i + 1], *h, *w);
                    let dr = &gy[i * d..(i + 1) * d];
                    for (idx, wt) in s.corners() {
                        for c in 0..*d {
                            g[idx * d + c] += wt * dr[c];
                        }
                    }
                }
            });
            with_grad!(nodes, grads, *points, |g| {
                for i in 0..p {
                    let s = BilinearTap::new(pv[2 * i], pv[2 * i + 1], *h, *w);
                    let [(i00, _), (i01, _), (i10, _), (i11, _)] = s.corners();
                    let dr = &gy[i * d..(i + 1) * d];
                    let (mut gx, mut gyy) = (0.0, 0.0);
                    for c in 0..*d {
                        let (f00, f01) = (mv[i00 * d + c], mv[i01 * d + c]);
                        let (f10, f11) = (mv[i10 * d + c], mv[i11 * d + c]);
                        gx += dr[c] * ((1.0 - s.fy) * (f01 - f00) + s.fy * (f11 - f10));
                        gyy += dr[c] * ((1.0 - s.fx) * (f10 - f00) + s.fx * (f11 - f01));
                    }
                    g[2 * i] += gx * s.dx_du;
                    g[2 * i + 1] += gyy * s.dy_dv;
                }
            });
        }
        Op::Im2col { a, geom } => {
            with_grad!(nodes, grads, *a, |g| {
                let pl = geom.patch_len();
                geom.for_each_tap(|row, col, src| g[src] += gy[row * pl + col]);
            });
        }
        Op::UpsampleNearest { a, w, c, factor } => {
            with_grad!(nodes, grads, *a, |g| {
                let ow = w * factor;
                let oh = gy.len() / (ow * c);
                for yy in 0..oh {
                    for xx in 0..ow {
                        let src = ((yy / factor) * w + xx / factor) * c;
                        let dst = (yy * ow + xx) * c;
                        for ch in 0..*c {
                            g[src + ch] += gy[dst + ch];
                        }
                    }
                }
            });
        }
        Op::GroupWeightedSum { weights, values, n, p, d } => {
            let (wv, vv) = (&nodes[*weights].value, &nodes[*values].value);
            with_grad!(nodes, grads, *weights, |g| {
                for i in 0..*n {
                    for j in 0..*p {
                        let row = &vv[(i * p + j) * d..(i * p + j + 1) * d];
                        g[i * p + j] += dot(row, &gy[i * d..(i + 1) * d]);
                    }
                }
            });
            with_grad!(nodes, grads, *values, |g| {
                for i in 0..*n {
                    for j in 0..*p {
                        let wt = wv[i * p + j];
                        for c in 0..*d {
                            g[(i * p + j) * d + c] += wt * gy[i * d + c];
                        }
                    }
                }
            });
        }
    }
}

fn elementwise(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: NodeId, gy: &[f64], deriv: impl Fn(usize, f64) -> f64) {
    let x = &nodes[a].value;
    if let Some(g) = accumulate(nodes, grads, a) {
        for i in 0..g.len() {
            g[i] += gy[i] * deriv(i, x[i]);
        }
    }
}
