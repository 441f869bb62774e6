//! Memory-based object alignment across frames and the temporal decoder.
//!
//! Frame `t`'s objects are matched to a momentum memory bank by Hungarian
//! assignment on negative cosine similarity, so slot `i` follows the same
//! object through the clip. The memory moves toward each newly aligned frame
//! by a step gated by how well the object matches that frame's sentence
//! embedding. It is bookkeeping only and carries no gradient.
//!
//! The aligned slots then pass through blocks of per-slot temporal
//! self-attention and sentence-query cross-attention over the whole clip.

use crate::attention::MultiHeadAttention;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::matching::hungarian;
use crate::nn::{Bound, Init, LayerNorm, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMemory {
    /// `[slots x dim]` row-major.
    pub rows: Vec<f64>,
    pub slots: usize,
    pub dim: usize,
    pub alpha: f64,
}

impl ObjectMemory {
    pub fn new(rows: Vec<f64>, slots: usize, dim: usize, alpha: f64) -> Result<Self> {
        if rows.len() != slots * dim {
            return Err(Error::Contract(format!("memory needs {slots}x{dim} values, got {}", rows.len())));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum {alpha} is outside [0, 1]")));
        }
        Ok(ObjectMemory { rows, slots, dim, alpha })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Reorders the rows of `objects: [N x d]` so row `i` is the object matched to
/// memory slot `i`. Returns the reordered tensor and `perm` with
/// `aligned[i] = objects[perm[i]]`.
pub fn align_objects<'t>(memory: &ObjectMemory, objects: Tensor<'t>) -> Result<(Tensor<'t>, Vec<usize>)> {
    let perm = alignment(memory, &objects.to_vec(), objects.rows())?;
    Ok((objects.gather_rows(&perm), perm))
}

fn alignment(memory: &ObjectMemory, objects: &[f64], n: usize) -> Result<Vec<usize>> {
    if n != memory.slots || objects.len() != n * memory.dim {
        return Err(Error::Contract(format!(
            "cannot align {n} objects of width {} to {} memory slots of width {}",
            objects.len() / n.max(1),
            memory.slots,
            memory.dim
        )));
    }
    let d = memory.dim;
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(-cosine(memory.row(i), &objects[j * d..(j + 1) * d]));
        }
    }
    let a = hungarian(&cost, n, n)?;
    Ok(a.pairs.iter().map(|&(_, j)| j).collect())
}

/// `M_i <- (1 - g_i) M_i + g_i O_i` with `g_i = alpha * clamp(cos(O_i, s), 0, 1)`.
/// Results are clipped to the interval spanned by the two inputs so the
/// update stays a convex combination under rounding.
pub fn update_memory(memory: &ObjectMemory, aligned: &[f64], sentence: &[f64]) -> ObjectMemory {
    let d = memory.dim;
    assert_eq!(aligned.len(), memory.rows.len(), "aligned objects must match the memory shape");
    assert_eq!(sentence.len(), d, "sentence embedding must have width {d}");
    let mut rows = memory.rows.clone();
    for i in 0..memory.slots {
        let o = &aligned[i * d..(i + 1) * d];
        let gate = memory.alpha * cosine(o, sentence).clamp(0.0, 1.0);
        for (m, &x) in rows[i * d..(i + 1) * d].iter_mut().zip(o) {
            let mixed = (1.0 - gate) * *m + gate * x;
            *m = mixed.clamp(m.min(x), m.max(x));
        }
    }
    ObjectMemory { rows, ..memory.clone() }
}

#[derive(Clone, Debug)]
pub struct TemporalBlock {
    self_attn: MultiHeadAttention,
    /// Learned per-frame offsets added to the attention input; zero at init.
    pub time_embed: ParamId,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    out_norm: LayerNorm,
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, max_frames: usize) -> Result<Self> {
        Ok(TemporalBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads)?,
            time_embed: store.add(format!("{name}.time_embed"), &[max_frames, dim], Init::Zeros),
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads)?,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), dim),
        })
    }

    /// Self-attention of each slot over its own `frames` embeddings, with
    /// residual and layer norm. `seq` is frame-major `[(T * N) x d]`.
    /// Returns the new sequence and the `[T x T]` weights of every slot.
    pub fn temporal_self_attention<'t>(&self, p: &Bound<'t>, seq: Tensor<'t>, frames: usize) -> (Tensor<'t>, Vec<Vec<f64>>) {
        let n = seq.rows() / frames;
        let slot_major: Vec<usize> = (0..n).flat_map(|i| (0..frames).map(move |t| t * n + i)).collect();
        let by_slot = seq.gather_rows(&slot_major);
        let time = p[self.time_embed].slice_rows(0, frames);
        let mut outs = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let x = by_slot.slice_rows(i * frames, frames);
            let a = self.self_attn.mhsa(p, x.add(time));
            weights.push(a.weights);
            outs.push(x.add(a.output));
        }
        let mixed = self.self_norm.forward(p, Tensor::concat_rows(&outs));
        let frame_major: Vec<usize> = (0..frames).flat_map(|t| (0..n).map(move |i| i * frames + t)).collect();
        (mixed.gather_rows(&frame_major), weights)
    }

    /// One sentence query per frame attends over every object of the clip;
    /// the resulting context is added to all of that frame's objects.
    pub fn forward<'t>(&self, p: &Bound<'t>, seq: Tensor<'t>, sentences: Tensor<'t>) -> Tensor<'t> {
        let frames = sentences.rows();
        let n = seq.rows() / frames;
        let (x, _) = self.temporal_self_attention(p, seq, frames);
        let context = self.cross_attn.cross_attention(p, sentences, x).output;
        let spread: Vec<usize> = (0..frames).flat_map(|t| std::iter::repeat(t).take(n)).collect();
        self.out_norm.forward(p, x.add(context.gather_rows(&spread)))
    }
}

#[derive(Clone, Debug)]
pub struct TemporalEnhancer {
    pub blocks: Vec<TemporalBlock>,
    pub alpha: f64,
    pub max_frames: usize,
}

pub struct Enhanced<'t> {
    /// Per frame `[N x d]`, slot-aligned across frames.
    pub objects: Vec<Tensor<'t>>,
    /// `aligned[t][i] = input[t][perms[t][i]]`.
    pub perms: Vec<Vec<usize>>,
    pub memory: ObjectMemory,
}

impl TemporalEnhancer {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, blocks: usize, max_frames: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("momentum {alpha} is outside [0, 1]")));
        }
        Ok(TemporalEnhancer {
            blocks: (0..blocks)
                .map(|b| TemporalBlock::new(store, &format!("temporal.{b}"), dim, heads, max_frames))
                .collect::<Result<_>>()?,
            alpha,
            max_frames,
        })
    }

    /// Aligns every frame to the memory (initialized from frame 0), then runs
    /// the temporal blocks unless `bypass_blocks` is set.
    pub fn enhance<'t>(
        &self,
        p: &Bound<'t>,
        frames: &[Tensor<'t>],
        sentences: &[Tensor<'t>],
        bypass_blocks: bool,
    ) -> Result<Enhanced<'t>> {
        let t_len = frames.len();
        if t_len == 0 || sentences.len() != t_len {
            return Err(Error::Contract(format!("{t_len} frames but {} sentence embeddings", sentences.len())));
        }
        if t_len > self.max_frames {
            return Err(Error::Config(format!("clip of {t_len} frames exceeds {}", self.max_frames)));
        }
        let n = frames[0].rows();
        let d = frames[0].last_dim();
        let mut memory = ObjectMemory::new(frames[0].to_vec(), n, d, self.alpha)?;
        let mut aligned = vec![frames[0]];
        let mut perms = vec![(0..n).collect::<Vec<_>>()];
        for t in 1..t_len {
            let (a, perm) = align_objects(&memory, frames[t])?;
            memory = update_memory(&memory, &a.to_vec(), &sentences[t].to_vec());
            aligned.push(a);
            perms.push(perm);
        }
        if bypass_blocks || self.blocks.is_empty() {
            return Ok(Enhanced { objects: aligned, perms, memory });
        }
        let sent = Tensor::concat_rows(sentences);
        let mut seq = Tensor::concat_rows(&aligned);
        for block in &self.blocks {
            seq = block.forward(p, seq, sent);
        }
        let objects = (0..t_len).map(|t| seq.slice_rows(t * n, n)).collect();
        Ok(Enhanced { objects, perms, memory })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check, Tape};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn alignment_recovers_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = ObjectMemory::new(random(&mut rng, 4 * 6), 4, 6, 0.1).unwrap();
        let tape = Tape::new();
        let (_, perm) = align_objects(&mem, tape.constant(mem.rows.clone(), &[4, 6])).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        let swapped: Vec<f64> = [1, 0, 2, 3].iter().flat_map(|&r| mem.row(r).to_vec()).collect();
        let (aligned, perm) = align_objects(&mem, tape.constant(swapped, &[4, 6])).unwrap();
        assert_eq!(perm, vec![1, 0, 2, 3]);
        assert_eq!(aligned.to_vec(), mem.rows);
    }

    #[test]
    fn alignment_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let d = rng.gen_range(1..5);
            let mem = ObjectMemory::new(random(&mut rng, n * d), n, d, 0.1).unwrap();
            let objs = random(&mut rng, n * d);
            let perm = alignment(&mem, &objs, n).unwrap();
            let score = |p: &[usize]| -> f64 { (0..n).map(|i| -cosine(mem.row(i), &objs[p[i] * d..(p[i] + 1) * d])).sum() };
            let best = permutations(n)
                .into_iter()
                .map(|p| score(&p))
                .fold(f64::INFINITY, f64::min);
            assert!(score(&perm) <= best + 1e-12);
        }
    }

    #[test]
    fn zero_rows_cost_nothing() {
        let mem = ObjectMemory::new(vec![0.0, 0.0, 1.0, 0.0], 2, 2, 0.1).unwrap();
        assert_eq!(alignment(&mem, &[0.0, 1.0, 0.0, 0.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn update_memory_fixpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, 3 * 4);
        let o = random(&mut rng, 3 * 4);
        let s = random(&mut rng, 4);
        let frozen = update_memory(&ObjectMemory::new(m.clone(), 3, 4, 0.0).unwrap(), &o, &s);
        assert_eq!(frozen.rows, m);
        // Rows parallel to the sentence with exact norms give c = 1 exactly.
        let s_par = vec![1.0, 2.0, 2.0, 0.0];
        let o_par: Vec<f64> = (0..3).flat_map(|i| s_par.iter().map(move |v| v * f64::from(1 << i))).collect();
        let replaced = update_memory(&ObjectMemory::new(m, 3, 4, 1.0).unwrap(), &o_par, &s_par);
        assert_eq!(replaced.rows, o_par);
    }

    #[test]
    fn update_memory_is_convex_and_gated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let alpha = rng.gen::<f64>();
            let m = random(&mut rng, 2 * 5);
            let o = random(&mut rng, 2 * 5);
            let s = random(&mut rng, 5);
            let new = update_memory(&ObjectMemory::new(m.clone(), 2, 5, alpha).unwrap(), &o, &s);
            for i in 0..10 {
                assert!(new.rows[i] >= m[i].min(o[i]) && new.rows[i] <= m[i].max(o[i]));
            }
        }
        // Orthogonal sentence: memory never moves.
        let m = vec![1.0, 0.0, 0.0, 1.0];
        let o = vec![3.0, 0.0, 5.0, 0.0];
        let new = update_memory(&ObjectMemory::new(m.clone(), 2, 2, 0.7).unwrap(), &o, &[0.0, 1.0]);
        assert_eq!(new.rows, m);
    }

    fn enhancer(store: &mut ParamStore, d: usize, blocks: usize) -> TemporalEnhancer {
        TemporalEnhancer::new(store, d, 2, blocks, 8, 0.1).unwrap()
    }

    #[test]
    fn single_frame_attends_to_itself() {
        let mut store = ParamStore::new(5);
        let te = enhancer(&mut store, 8, 1);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = tape.constant(random(&mut rng, 3 * 8), &[3, 8]);
        let (_, weights) = te.blocks[0].temporal_self_attention(&p, seq, 1);
        assert!(weights.iter().all(|w| w == &vec![1.0]));

        let sent = tape.constant(random(&mut rng, 8), &[1, 8]);
        let out = te.enhance(&p, &[seq], &[sent], false).unwrap();
        assert_eq!(out.memory.rows, seq.to_vec());
        assert_eq!(out.objects[0].to_vec(), te.blocks[0].forward(&p, seq, sent).to_vec());
    }

    #[test]
    fn identical_frames_give_identical_rows() {
        let mut store = ParamStore::new(6);
        let te = enhancer(&mut store, 8, 1);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = random(&mut rng, 2 * 8);
        let seq = tape.constant([frame.clone(), frame.clone(), frame].concat(), &[6, 8]);
        let (out, _) = te.blocks[0].temporal_self_attention(&p, seq, 3);
        let v = out.to_vec();
        for t in 1..3 {
            let diff = v[..16].iter().zip(&v[t * 16..(t + 1) * 16]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn zero_context_reduces_to_layer_norm() {
        let mut store = ParamStore::new(7);
        let te = enhancer(&mut store, 8, 1);
        let out_proj = te.blocks[0].cross_attn.out.weight;
        store.get_mut(out_proj).values.iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = tape.constant(random(&mut rng, 4 * 8), &[4, 8]);
        let sent = tape.constant(random(&mut rng, 2 * 8), &[2, 8]);
        let (x, _) = te.blocks[0].temporal_self_attention(&p, seq, 2);
        let want = te.blocks[0].out_norm.forward(&p, x).to_vec();
        assert_eq!(te.blocks[0].forward(&p, seq, sent).to_vec(), want);
        // zero mean and unit variance per row before the affine terms
        for row in want.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn static_shuffled_video_is_realigned() {
        let mut store = ParamStore::new(8);
        let te = enhancer(&mut store, 8, 2);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random(&mut rng, 5 * 8);
        let sent = random(&mut rng, 8);
        let mut frames = Vec::new();
        let mut orders = Vec::new();
        for _ in 0..4 {
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut rng);
            let rows: Vec<f64> = order.iter().flat_map(|&r| base[r * 8..(r + 1) * 8].to_vec()).collect();
            frames.push(tape.constant(rows, &[5, 8]));
            orders.push(order);
        }
        let sents: Vec<_> = (0..4).map(|_| tape.constant(sent.clone(), &[1, 8])).collect();
        let out = te.enhance(&p, &frames, &sents, true).unwrap();
        let first = out.objects[0].to_vec();
        for (t, obj) in out.objects.iter().enumerate() {
            assert_eq!(obj.to_vec(), first, "frame {t}");
            // slot i holds the same underlying object in every frame
            let ids: Vec<usize> = out.perms[t].iter().map(|&j| orders[t][j]).collect();
            assert_eq!(ids, orders[0]);
        }
    }

    #[test]
    fn gradient_through_two_frames() {
        let mut store = ParamStore::new(9);
        let te = enhancer(&mut store, 8, 1);
        // Give the temporal embedding some weight so it is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = te.blocks[0].time_embed;
        store.get_mut(emb).values = random(&mut rng, 8 * 8);
        let x = random(&mut rng, 2 * 2 * 8);
        let s = random(&mut rng, 2 * 8);
        let w = random(&mut rng, 2 * 2 * 8);
        let err = finite_diff_check(
            |tape, x| {
                let p = store.bind_frozen(tape);
                let frames = [x.slice_rows(0, 2), x.slice_rows(2, 2)];
                let sents = [tape.constant(s[..8].to_vec(), &[1, 8]), tape.constant(s[8..].to_vec(), &[1, 8])];
                let out = te.enhance(&p, &frames, &sents, false).unwrap();
                Tensor::concat_rows(&out.objects).mul(tape.constant(w.clone(), &[4, 8])).sum()
            },
            &x,
            &[4, 8],
        );
        assert!(err <= 1e-5, "{err}");
    }
}
