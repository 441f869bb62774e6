//! Cross-modal query decoder with layerwise confidence pruning.
//!
//! Every layer refines the live queries with self-attention, attention over
//! the image grid and attention over the text tokens, then scores each query
//! by how much the other queries and the best text token attend to it and
//! keeps the top `ceil(N / k)`. Decoder cost therefore shrinks geometrically
//! with depth; [`CostLedger`] tracks it.

mod ledger;

pub use ledger::{closed_form_bound, retained, unpruned_total, CostLedger, LayerCost};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::MultiHeadAttention;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::frontend::{FrameFeatures, TextFeatures};
use crate::nn::{Bound, FeedForward, LayerNorm, ParamStore};

#[derive(Clone, Debug)]
pub struct ObjectQuerySet<'t> {
    /// `[N x d]`
    pub embeddings: Tensor<'t>,
    pub confidence: Vec<f64>,
    /// Index of each query in the initial selection; strictly increasing.
    pub origin_ids: Vec<usize>,
}

impl<'t> ObjectQuerySet<'t> {
    pub fn len(&self) -> usize {
        self.origin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin_ids.is_empty()
    }
}

/// How queries are dropped between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pruning {
    /// Keep the highest confidence scores.
    Confidence,
    /// Keep a uniformly random subset of the same size (ablation baseline).
    Random { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub layers: usize,
    /// Retention divisor `k`; each layer keeps `ceil(N / k)` queries.
    pub keep_divisor: usize,
    /// Lower bound on the queries kept by a pruning round.
    pub min_keep: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    image_attn: MultiHeadAttention,
    image_norm: LayerNorm,
    text_attn: MultiHeadAttention,
    text_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// One decoder layer's output with the attention maps that drive pruning.
pub struct LayerOutput<'t> {
    pub queries: ObjectQuerySet<'t>,
    /// Head-averaged self-attention, `[N x N]` row-major, rows sum to one.
    pub self_weights: Vec<f64>,
    /// Text-token-to-query weights, `[K x N]` row-major, rows sum to one.
    pub text_weights: Vec<f64>,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            image_attn: MultiHeadAttention::new(store, &format!("{name}.image_attn"), dim, heads)?,
            image_norm: LayerNorm::new(store, &format!("{name}.image_norm"), dim),
            text_attn: MultiHeadAttention::new(store, &format!("{name}.text_attn"), dim, heads)?,
            text_norm: LayerNorm::new(store, &format!("{name}.text_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q: &ObjectQuerySet<'t>,
        image_tokens: Tensor<'t>,
        text: TextFeatures<'t>,
    ) -> LayerOutput<'t> {
        let x = q.embeddings;
        let sa = self.self_attn.mhsa(p, x);
        let self_weights = sa.weights;
        let x = self.self_norm.forward(p, x.add(sa.output));
        let x = self
            .image_norm
            .forward(p, x.add(self.image_attn.cross_attention(p, x, image_tokens).output));
        let (ta, text_weights) = self.text_attn.cross_attention_with_reverse(p, x, text.tokens);
        let x = self.text_norm.forward(p, x.add(ta.output));
        let x = self.ffn_norm.forward(p, x.add(self.ffn.forward(p, x)));
        LayerOutput {
            queries: ObjectQuerySet {
                embeddings: x,
                confidence: q.confidence.clone(),
                origin_ids: q.origin_ids.clone(),
            },
            self_weights,
            text_weights,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig) -> Result<Self> {
        if config.num_queries == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        if config.keep_divisor == 0 {
            return Err(Error::Config("retention divisor k must be at least 1".into()));
        }
        let layers = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("decoder.{l}"), config.dim, config.heads))
            .collect::<Result<_>>()?;
        Ok(QueryDecoder { config, layers })
    }

    /// Runs every layer, pruning after each, and returns the surviving
    /// objects with the cost ledger of the pass.
    pub fn decode_frame<'t>(
        &self,
        p: &Bound<'t>,
        frame: &FrameFeatures<'t>,
        text: TextFeatures<'t>,
        pruning: Pruning,
    ) -> Result<(ObjectQuerySet<'t>, CostLedger)> {
        let image_tokens = frame.image_tokens();
        let mut q = init_queries(self.config.num_queries, image_tokens, text)?;
        let mut ledger = CostLedger::new();
        let mut rng = match pruning {
            Pruning::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Pruning::Confidence => None,
        };
        for layer in &self.layers {
            ledger.record(q.len(), self.config.dim, text.len());
            let out = layer.forward(p, &q, image_tokens, text);
            let scores = confidence_scores(&out.self_weights, &out.text_weights, q.len(), text.len());
            let keep = retained(q.len(), self.config.keep_divisor, self.config.min_keep);
            q = match rng.as_mut() {
                Some(rng) => prune_random(&out.queries, &scores, keep, rng),
                None => prune_to(&out.queries, &scores, keep),
            };
        }
        Ok((q, ledger))
    }
}

/// Picks the `n_q` image positions whose best match among the content tokens
/// is strongest. Similarity is `<f, t> / sqrt(d)`; ties go to the lower
/// position index. The returned queries are ordered by rank.
pub fn init_queries<'t>(n_q: usize, image_tokens: Tensor<'t>, text: TextFeatures<'t>) -> Result<ObjectQuerySet<'t>> {
    let positions = image_tokens.rows();
    if n_q == 0 || n_q > positions {
        return Err(Error::Config(format!("cannot select {n_q} queries from {positions} image positions")));
    }
    let d = image_tokens.last_dim();
    let sims = image_tokens
        .matmul_nt(text.content())
        .scale(1.0 / (d as f64).sqrt())
        .max_rows()
        .to_vec();
    let mut order: Vec<usize> = (0..positions).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(n_q);
    Ok(ObjectQuerySet {
        embeddings: image_tokens.gather_rows(&order),
        confidence: order.iter().map(|&i| sims[i]).collect(),
        origin_ids: (0..n_q).collect(),
    })
}

/// `s_j = mean_{i != j} A_s[i][j] + max_k A_c[k][j]`, with the first term 0
/// when only one query is live.
pub fn confidence_scores(self_weights: &[f64], text_weights: &[f64], n: usize, k: usize) -> Vec<f64> {
    assert_eq!(self_weights.len(), n * n, "self-attention map must be {n}x{n}");
    assert_eq!(text_weights.len(), k * n, "text map must be {k}x{n}");
    let mut received = vec![0.0; n];
    for (i, row) in self_weights.chunks(n).enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if i != j {
                received[j] += a;
            }
        }
    }
    let mut best = vec![f64::NEG_INFINITY; n];
    for row in text_weights.chunks(n) {
        for (b, &a) in best.iter_mut().zip(row) {
            *b = b.max(a);
        }
    }
    let others = n.saturating_sub(1).max(1) as f64;
    received.iter().zip(&best).map(|(r, b)| r / others + b).collect()
}

/// Keeps the `ceil(N / k)` best-scoring queries.
pub fn prune<'t>(q: &ObjectQuerySet<'t>, scores: &[f64], k: usize) -> ObjectQuerySet<'t> {
    prune_to(q, scores, retained(q.len(), k, 1))
}

/// Keeps the `keep` best-scoring queries, breaking ties by smaller origin id.
/// Survivors stay in their incoming order.
pub fn prune_to<'t>(q: &ObjectQuerySet<'t>, scores: &[f64], keep: usize) -> ObjectQuerySet<'t> {
    assert_eq!(scores.len(), q.len());
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(q.origin_ids[a].cmp(&q.origin_ids[b]))
    });
    order.truncate(keep);
    order.sort_unstable();
    select(q, scores, &order)
}

fn prune_random<'t>(q: &ObjectQuerySet<'t>, scores: &[f64], keep: usize, rng: &mut ChaCha8Rng) -> ObjectQuerySet<'t> {
    let mut order = sample(rng, q.len(), keep).into_vec();
    order.sort_unstable();
    select(q, scores, &order)
}

fn select<'t>(q: &ObjectQuerySet<'t>, scores: &[f64], rows: &[usize]) -> ObjectQuerySet<'t> {
    if rows.len() == q.len() {
        return ObjectQuerySet {
            embeddings: q.embeddings,
            confidence: scores.to_vec(),
            origin_ids: q.origin_ids.clone(),
        };
    }
    ObjectQuerySet {
        embeddings: q.embeddings.gather_rows(rows),
        confidence: rows.iter().map(|&r| scores[r]).collect(),
        origin_ids: rows.iter().map(|&r| q.origin_ids[r]).collect(),
    }
}

/// Pre-sigmoid object/text agreement: the best scaled dot product between
/// each object row and any content token. Returns `[N]`.
pub fn classification_logits<'t>(objects: Tensor<'t>, text: TextFeatures<'t>) -> Tensor<'t> {
    let d = objects.last_dim();
    objects
        .matmul_nt(text.content())
        .scale(1.0 / (d as f64).sqrt())
        .max_rows()
}

/// `sigmoid` of [`classification_logits`].
pub fn classification_score<'t>(objects: Tensor<'t>, text: TextFeatures<'t>) -> Tensor<'t> {
    classification_logits(objects, text).sigmoid()
}

#[cfg(test)]
mod tests;
