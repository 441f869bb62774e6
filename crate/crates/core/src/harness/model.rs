//! The full pipeline assembled from a [`RunConfig`]: per-frame encoding,
//! fusion and pruned query decoding, temporal enhancement over the clip, then
//! per-frame box, mask and classification heads on the aligned slots.

use crate::decoder::{classification_logits, CostLedger, DecoderConfig, Pruning, QueryDecoder};
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::frontend::{Frame, Frontend, FrontendConfig};
use crate::harness::config::RunConfig;
use crate::harness::scene::vocab;
use crate::mask::{mask_generate, MaskDecoder};
use crate::matching::PredictionSequence;
use crate::nn::{Bound, ParamStore};
use crate::temporal::TemporalEnhancer;

/// Ratio between the canvas and the mask grid (`f_seg` lives at `H/4 x W/4`).
pub const MASK_FACTOR: usize = 4;
const MAX_TOKENS: usize = 8;
const FPN_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub decoder: QueryDecoder,
    pub temporal: TemporalEnhancer,
    pub mask: MaskDecoder,
}

/// Inference-time switches; the defaults reproduce training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub pruning: Pruning,
    /// Replaces the configured keep divisor (1 disables pruning).
    pub keep_divisor: Option<usize>,
    pub bypass_temporal: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            pruning: Pruning::Confidence,
            keep_divisor: None,
            bypass_temporal: false,
        }
    }
}

pub struct ClipOutput<'t> {
    /// One tracked candidate per surviving slot.
    pub candidates: Vec<PredictionSequence<'t>>,
    pub ledgers: Vec<CostLedger>,
    /// Mask grid extent.
    pub mask_height: usize,
    pub mask_width: usize,
}

impl ClipOutput<'_> {
    /// `sigmoid` classification score of every candidate on every frame.
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| c.class_logits.iter().map(|l| 1.0 / (1.0 + (-l.item()).exp())).collect())
            .collect()
    }

    /// Binary masks of candidate `i` (logit above zero).
    pub fn masks(&self, i: usize) -> Vec<Vec<bool>> {
        self.candidates[i]
            .masks
            .iter()
            .map(|m| m.values().iter().map(|&v| v > 0.0).collect())
            .collect()
    }
}

impl Model {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let d = config.dim;
        let frontend = Frontend::new(
            &mut store,
            FrontendConfig {
                dim: d,
                heads: config.heads,
                vocab_size: vocab::SIZE,
                max_tokens: MAX_TOKENS,
                fpn_groups: FPN_GROUPS,
            },
        )?;
        let decoder = QueryDecoder::new(
            &mut store,
            DecoderConfig {
                dim: d,
                heads: config.heads,
                num_queries: config.num_queries,
                layers: config.layers,
                keep_divisor: config.keep_divisor,
                min_keep: config.min_keep,
            },
        )?;
        let temporal = TemporalEnhancer::new(&mut store, d, config.heads, config.temporal_blocks, config.frames, config.alpha)?;
        let mask = MaskDecoder::new(&mut store, d, config.heads, config.mask_blocks, config.num_points)?;
        Ok(Model {
            config,
            store,
            frontend,
            decoder,
            temporal,
            mask,
        })
    }

    pub fn mask_extent(&self) -> (usize, usize) {
        (self.config.height / MASK_FACTOR, self.config.width / MASK_FACTOR)
    }

    /// Runs the clip end to end on parameters already bound to `tape`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        frames: &[Frame],
        program: &[usize],
        opts: ForwardOptions,
    ) -> Result<ClipOutput<'t>> {
        if frames.is_empty() {
            return Err(Error::Contract("clip has no frames".into()));
        }
        let mut decoder = self.decoder.clone();
        if let Some(k) = opts.keep_divisor {
            if k == 0 {
                return Err(Error::Config("keep divisor must be positive".into()));
            }
            decoder.config.keep_divisor = k;
        }
        let text = self.frontend.encode_text(p, program)?;
        let mut objects = Vec::with_capacity(frames.len());
        let mut sentences = Vec::with_capacity(frames.len());
        let mut per_frame = Vec::with_capacity(frames.len());
        let mut ledgers = Vec::with_capacity(frames.len());
        for frame in frames {
            let raw = self.frontend.encode_frame(tape, p, frame)?;
            let (features, fused_text) = self.frontend.fuse(p, &raw, text);
            let (queries, ledger) = decoder.decode_frame(p, &features, fused_text, opts.pruning)?;
            objects.push(queries.embeddings);
            sentences.push(fused_text.cls());
            per_frame.push((features.f_seg, fused_text));
            ledgers.push(ledger);
        }
        let enhanced = self.temporal.enhance(p, &objects, &sentences, opts.bypass_temporal)?;
        let slots = enhanced.objects[0].rows();
        let mut candidates: Vec<PredictionSequence<'t>> = (0..slots)
            .map(|_| PredictionSequence {
                class_logits: Vec::new(),
                boxes: Vec::new(),
                masks: Vec::new(),
            })
            .collect();
        for (o, (f_seg, fused_text)) in enhanced.objects.iter().zip(per_frame) {
            let logits = classification_logits(*o, fused_text).reshape(&[slots, 1]);
            let boxes = self.mask.box_head(p, *o);
            let o_m = self.mask.mask_decode(p, *o, boxes, f_seg, fused_text);
            let masks = mask_generate(o_m, f_seg);
            for (i, c) in candidates.iter_mut().enumerate() {
                c.class_logits.push(logits.slice_rows(i, 1).reshape(&[1]));
                c.boxes.push(boxes.boxes.slice_rows(i, 1));
                c.masks.push(masks.slice_rows(i, 1));
            }
        }
        let (mask_height, mask_width) = self.mask_extent();
        Ok(ClipOutput {
            candidates,
            ledgers,
            mask_height,
            mask_width,
        })
    }
}
