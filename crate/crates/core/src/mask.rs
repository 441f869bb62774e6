//! Grounding, deformation, segmentation: a box head predicts each object's
//! box, deformable attention gathers high-resolution features around the box
//! centre, and the refined embedding is dot-producted with `F_seg`.
//!
//! The centre stays differentiable all the way into the sampling locations,
//! so a mask loss also trains the box head.

use crate::attention::{DeformableParams, MultiHeadAttention};
use crate::diff::Tensor;
use crate::error::Result;
use crate::frontend::TextFeatures;
use crate::nn::{Bound, FeedForward, LayerNorm, Linear, ParamStore};

/// `[n x 4]` boxes as `(cx, cy, w, h)`, every entry in `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct BoxPrediction<'t> {
    pub boxes: Tensor<'t>,
}

impl<'t> BoxPrediction<'t> {
    /// `[n x 2]` box centres, used as deformable reference points.
    pub fn centers(&self) -> Tensor<'t> {
        self.boxes.slice_cols(0, 2)
    }

    pub fn len(&self) -> usize {
        self.boxes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Three-layer ReLU MLP with a sigmoid on its four outputs.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub layers: [Linear; 3],
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BoxHead {
            layers: [
                Linear::new(store, &format!("{name}.0"), dim, dim, true),
                Linear::new(store, &format!("{name}.1"), dim, dim, true),
                Linear::new(store, &format!("{name}.2"), dim, 4, true),
            ],
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, objects: Tensor<'t>) -> BoxPrediction<'t> {
        let [a, b, c] = &self.layers;
        let h = a.forward(p, objects).relu();
        let h = b.forward(p, h).relu();
        BoxPrediction {
            boxes: c.forward(p, h).sigmoid(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskBlock {
    pub deform: DeformableParams,
    deform_value: Linear,
    deform_norm: LayerNorm,
    text_attn: MultiHeadAttention,
    text_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl MaskBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, points: usize) -> Result<Self> {
        Ok(MaskBlock {
            deform: DeformableParams::new(store, &format!("{name}.deform"), dim, points)?,
            deform_value: Linear::new(store, &format!("{name}.deform_value"), dim, dim, true),
            deform_norm: LayerNorm::new(store, &format!("{name}.deform_norm"), dim),
            text_attn: MultiHeadAttention::new(store, &format!("{name}.text_attn"), dim, heads)?,
            text_norm: LayerNorm::new(store, &format!("{name}.text_norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, o: Tensor<'t>, centers: Tensor<'t>, f_seg: Tensor<'t>, text: TextFeatures<'t>) -> Tensor<'t> {
        let sampled = self.deform.forward(p, o, f_seg, centers);
        let o = self.deform_norm.forward(p, o.add(self.deform_value.forward(p, sampled)));
        let o = self
            .text_norm
            .forward(p, o.add(self.text_attn.cross_attention(p, o, text.tokens).output));
        self.ffn_norm.forward(p, o.add(self.ffn.forward(p, o)))
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub box_head: BoxHead,
    pub blocks: Vec<MaskBlock>,
    pub dim: usize,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, blocks: usize, points: usize) -> Result<Self> {
        Ok(MaskDecoder {
            box_head: BoxHead::new(store, "mask.box_head", dim),
            blocks: (0..blocks)
                .map(|b| MaskBlock::new(store, &format!("mask.{b}"), dim, heads, points))
                .collect::<Result<_>>()?,
            dim,
        })
    }

    pub fn box_head<'t>(&self, p: &Bound<'t>, objects: Tensor<'t>) -> BoxPrediction<'t> {
        self.box_head.forward(p, objects)
    }

    /// Runs every block with the same predicted centres as reference points.
    /// With no blocks the embeddings come back unchanged.
    pub fn mask_decode<'t>(
        &self,
        p: &Bound<'t>,
        objects: Tensor<'t>,
        boxes: BoxPrediction<'t>,
        f_seg: Tensor<'t>,
        text: TextFeatures<'t>,
    ) -> Tensor<'t> {
        let centers = boxes.centers();
        self.blocks
            .iter()
            .fold(objects, |o, block| block.forward(p, o, centers, f_seg, text))
    }
}

/// `logits[i][y][x] = <o_m[i], f_seg[y][x]> / sqrt(d)`, returned as
/// `[n x (h * w)]` with each row a row-major mask.
pub fn mask_generate<'t>(mask_embeddings: Tensor<'t>, f_seg: Tensor<'t>) -> Tensor<'t> {
    let s = f_seg.shape();
    let d = s[2];
    mask_embeddings
        .matmul_nt(f_seg.reshape(&[s[0] * s[1], d]))
        .scale(1.0 / (d as f64).sqrt())
}
