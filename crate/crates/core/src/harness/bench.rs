//! Decoder cost measurements with and without pruning, and the
//! confidence-versus-random pruning comparison on a trained model.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{closed_form_bound, CostLedger, DecoderConfig, Pruning, QueryDecoder};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::frontend::{FrameFeatures, TextFeatures};
use crate::harness::eval::evaluate;
use crate::harness::model::{ForwardOptions, Model};
use crate::harness::train::Prepared;
use crate::nn::ParamStore;

const BENCH_TEXT_TOKENS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub pruned: CostLedger,
    pub unpruned: CostLedger,
    /// Measured pruned / unpruned ledger totals.
    pub ratio: f64,
    /// Depth-independent bound divided by the unpruned total; absent for `k = 1`.
    pub closed_form_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningBench {
    pub n: usize,
    pub layers: usize,
    pub dim: usize,
    pub rows: Vec<BenchRow>,
}

/// Most square `h x w = n` grid.
fn grid_for(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    (h.max(1), n / h.max(1))
}

fn heads_for(dim: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|h| dim % h == 0).unwrap_or(1)
}

/// Runs the decoder on random features at every `k >= 2` and reads its cost
/// ledger. The unpruned reference is the `k = 1` plan, which a real pass
/// matches exactly.
pub fn bench_pruning(n: usize, layers: usize, dim: usize, ks: &[usize], seed: u64) -> Result<PruningBench> {
    if n == 0 || layers == 0 || dim == 0 {
        return Err(Error::Config("n, layers and dim must be positive".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k list must be non-empty and positive".into()));
    }
    let (h, w) = grid_for(n);
    let heads = heads_for(dim);
    let mut store = ParamStore::new(seed);
    let base = DecoderConfig {
        dim,
        heads,
        num_queries: n,
        layers,
        keep_divisor: 1,
        min_keep: 1,
    };
    let decoder = QueryDecoder::new(&mut store, base.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe9c);
    let img: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let text: Vec<f64> = (0..BENCH_TEXT_TOKENS * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let run = |k: usize| -> Result<CostLedger> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let frame = FrameFeatures {
            f_img: tape.constant(img.clone(), &[h, w, dim]),
            f_seg: tape.zeros(&[1, 1, dim]),
        };
        let text = TextFeatures {
            tokens: tape.constant(text.clone(), &[BENCH_TEXT_TOKENS, dim]),
        };
        let mut dec = decoder.clone();
        dec.config.keep_divisor = k;
        Ok(dec.decode_frame(&p, &frame, text, Pruning::Confidence)?.1)
    };

    let unpruned = CostLedger::plan(n, dim, layers, 1, BENCH_TEXT_TOKENS, 1);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let pruned = if k == 1 { unpruned.clone() } else { run(k)? };
        let ratio = pruned.total() as f64 / unpruned.total() as f64;
        let closed_form_ratio = (k >= 2).then(|| closed_form_bound(n, dim, k) / unpruned.total() as f64);
        rows.push(BenchRow {
            k,
            pruned,
            unpruned: unpruned.clone(),
            ratio,
            closed_form_ratio,
        });
    }
    Ok(PruningBench { n, layers, dim, rows })
}

impl PruningBench {
    pub fn to_text(&self) -> String {
        let mut out = format!("decoder cost: N={} L={} d={}\n", self.n, self.layers, self.dim);
        let _ = writeln!(out, "k,pruned_macs,unpruned_macs,ratio,closed_form_ratio");
        for r in &self.rows {
            let cf = r.closed_form_ratio.map_or("-".to_string(), |c| format!("{c:.6}"));
            let _ = writeln!(out, "{},{},{},{:.6},{cf}", r.k, r.pruned.total(), r.unpruned.total(), r.ratio);
        }
        for r in &self.rows {
            let _ = write!(out, "\nper-layer ledger, k={}\n{}", r.k, r.pruned.to_csv());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningAblation {
    pub jf_unpruned: f64,
    pub jf_confidence: f64,
    pub jf_random: f64,
}

/// J&F of `model` on `clips` without pruning, with its own confidence
/// pruning, and with random pruning at the same divisor.
pub fn pruning_ablation(model: &Model, clips: &[Prepared], seed: u64) -> Result<PruningAblation> {
    let full = ForwardOptions {
        keep_divisor: Some(1),
        ..ForwardOptions::default()
    };
    let random = ForwardOptions {
        pruning: Pruning::Random { seed },
        ..ForwardOptions::default()
    };
    Ok(PruningAblation {
        jf_unpruned: evaluate(model, clips, full)?.result.jf_mean,
        jf_confidence: evaluate(model, clips, ForwardOptions::default())?.result.jf_mean,
        jf_random: evaluate(model, clips, random)?.result.jf_mean,
    })
}
