//! Multi-head self/cross attention and single-scale deformable attention.

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};

/// Attention result with the post-softmax weights kept for confidence scoring.
pub struct AttentionOutput<'t> {
    /// `[n x d]`
    pub output: Tensor<'t>,
    /// Head-averaged `[n x m]` weights, row-major and untracked; every row
    /// sums to one.
    pub weights: Vec<f64>,
}

/// Scaled dot-product attention with `heads` heads and bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, false),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, false),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Self-attention over the rows of `x: [n x d]`.
    pub fn mhsa<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> AttentionOutput<'t> {
        self.cross_attention(p, x, x)
    }

    /// `query: [n x d]` attends over `kv: [m x d]`.
    pub fn cross_attention<'t>(&self, p: &Bound<'t>, query: Tensor<'t>, kv: Tensor<'t>) -> AttentionOutput<'t> {
        self.attend(p, query, kv, false).0
    }

    /// Cross attention that also reports the reverse-normalized weights
    /// `[m x n]`: the same logits softmaxed over the query axis, i.e. how much
    /// each key row attends to each query row, averaged over heads.
    pub fn cross_attention_with_reverse<'t>(
        &self,
        p: &Bound<'t>,
        query: Tensor<'t>,
        kv: Tensor<'t>,
    ) -> (AttentionOutput<'t>, Vec<f64>) {
        let (out, logits) = self.attend(p, query, kv, true);
        let n = query.rows();
        let m = kv.rows();
        let mut reverse = vec![0.0; m * n];
        let mut col = vec![0.0; n];
        for vals in &logits {
            for k in 0..m {
                for j in 0..n {
                    col[j] = vals[j * m + k];
                }
                crate::diff::softmax_slice(&mut col);
                for j in 0..n {
                    reverse[k * n + j] += col[j] / self.heads as f64;
                }
            }
        }
        (out, reverse)
    }

    fn attend<'t>(&self, p: &Bound<'t>, query: Tensor<'t>, kv: Tensor<'t>, keep_logits: bool) -> (AttentionOutput<'t>, Vec<Vec<f64>>) {
        let q = self.query.forward(p, query);
        let k = self.key.forward(p, kv);
        let v = self.value.forward(p, kv);
        let parts = q.multi_head_attention(k, v, self.heads, keep_logits);
        let output = self.out.forward(p, parts.output);
        (
            AttentionOutput {
                output,
                weights: parts.weights,
            },
            parts.logits,
        )
    }
}

/// Learned sampling around an externally supplied reference point.
#[derive(Clone, Debug)]
pub struct DeformableParams {
    pub num_points: usize,
    /// query -> `num_points x 2` offsets (normalized units times `max(h, w)`).
    pub offset_projector: Linear,
    /// query -> `num_points` combination logits.
    pub weight_projector: Linear,
}

impl DeformableParams {
    /// Both projectors start at zero: every point samples the reference point
    /// and the points are weighted uniformly.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, num_points: usize) -> Result<Self> {
        if num_points == 0 {
            return Err(Error::Config("deformable attention needs at least one sampling point".into()));
        }
        Ok(DeformableParams {
            num_points,
            offset_projector: Linear::with_init(store, &format!("{name}.offsets"), dim, 2 * num_points, true, Init::Zeros),
            weight_projector: Linear::with_init(store, &format!("{name}.weights"), dim, num_points, true, Init::Zeros),
        })
    }

    /// `query: [n x d]`, `memory: [h x w x d]`, `reference: [n x 2]` as `(u, v)`
    /// in `[0, 1]^2`. Returns `[n x d]`.
    ///
    /// Sampling location `i` of query `q` is `reference[q] + offset_i(q) / max(h, w)`,
    /// read by bilinear interpolation and combined with `softmax(weights(q))`.
    /// Differentiable in the query, the memory and the reference point.
    pub fn forward<'t>(&self, p: &Bound<'t>, query: Tensor<'t>, memory: Tensor<'t>, reference: Tensor<'t>) -> Tensor<'t> {
        let shape = memory.shape();
        assert_eq!(shape.len(), 3, "deformable memory must be [h, w, d], got {shape:?}");
        let n = query.rows();
        let pts = self.num_points;
        let extent = shape[0].max(shape[1]) as f64;
        let offsets = self
            .offset_projector
            .forward(p, query)
            .reshape(&[n * pts, 2])
            .scale(1.0 / extent);
        let locations = reference.repeat_rows(pts).add(offsets);
        let samples = memory.bilinear_sample(locations);
        let weights = self.weight_projector.forward(p, query).softmax_rows();
        Tensor::group_weighted_sum(weights, samples)
    }
}
