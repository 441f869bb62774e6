//! Toy stand-ins for the visual/text backbones and the cross-modal encoder.
//!
//! A frame goes through two strided patch-merge stages (stride 4, then 2) to
//! an `H/8 x W/8 x d` grid; the text program is embedded with a `[CLS]` token
//! at position 0. [`Frontend::fuse`] runs one bidirectional cross-attention
//! block and an FPN that lifts the fused grid back to `H/4 x W/4 x d` for mask
//! prediction.

use crate::attention::MultiHeadAttention;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{position_grid, Bound, FeedForward, Init, LayerNorm, Linear, ParamStore};

/// Token id of the sentence token prepended to every program.
pub const CLS_TOKEN: usize = 0;

/// An RGB frame with values in `[0, 1]`, row-major `[h, w, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "frame buffer does not match {height}x{width}x3");
        Frame { height, width, pixels }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Frame::new(height, width, vec![0.0; height * width * 3])
    }
}

/// Output of the patch-merge stages.
pub struct RawFrameFeatures<'t> {
    /// `[H/8, W/8, d]`
    pub coarse: Tensor<'t>,
    /// `[H/4, W/4, d]`, the stride-4 stage kept for the FPN lateral path.
    pub fine: Tensor<'t>,
}

pub struct FrameFeatures<'t> {
    /// `[H/8, W/8, d]`
    pub f_img: Tensor<'t>,
    /// `[H/4, W/4, d]`
    pub f_seg: Tensor<'t>,
}

impl<'t> FrameFeatures<'t> {
    /// `f_img` flattened to `[(H/8 * W/8) x d]`.
    pub fn image_tokens(&self) -> Tensor<'t> {
        let s = self.f_img.shape();
        self.f_img.reshape(&[s[0] * s[1], s[2]])
    }
}

#[derive(Clone, Copy)]
pub struct TextFeatures<'t> {
    /// `[K x d]`; row 0 is the sentence token.
    pub tokens: Tensor<'t>,
}

impl<'t> TextFeatures<'t> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[1 x d]` sentence embedding.
    pub fn cls(&self) -> Tensor<'t> {
        self.tokens.slice_rows(0, 1)
    }

    /// `[(K - 1) x d]` content tokens.
    pub fn content(&self) -> Tensor<'t> {
        self.tokens.slice_rows(1, self.len() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct FrontendConfig {
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub fpn_groups: usize,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub config: FrontendConfig,
    patch: Linear,
    merge: Linear,
    embed: crate::nn::ParamId,
    positions: crate::nn::ParamId,
    text_attn: MultiHeadAttention,
    text_norm: LayerNorm,
    text_ffn: FeedForward,
    text_ffn_norm: LayerNorm,
    img_from_text: MultiHeadAttention,
    img_norm: LayerNorm,
    text_from_img: MultiHeadAttention,
    text_fused_norm: LayerNorm,
    fpn_coarse: Linear,
    fpn_coarse_norm: LayerNorm,
    fpn_lateral: Linear,
    fpn_fine: Linear,
    fpn_fine_norm: LayerNorm,
}

impl Frontend {
    pub fn new(store: &mut ParamStore, config: FrontendConfig) -> Result<Self> {
        let d = config.dim;
        if d % config.fpn_groups != 0 {
            return Err(Error::Config(format!("dimension {d} does not split into {} groups", config.fpn_groups)));
        }
        if config.vocab_size <= CLS_TOKEN + 1 {
            return Err(Error::Config("vocabulary must hold the sentence token and at least one word".into()));
        }
        Ok(Frontend {
            patch: Linear::new(store, "frontend.patch", 4 * 4 * 3, d, true),
            merge: Linear::new(store, "frontend.merge", 2 * 2 * d, d, true),
            embed: store.add("frontend.embed", &[config.vocab_size, d], Init::Uniform(1.0)),
            positions: store.add("frontend.text_pos", &[config.max_tokens, d], Init::Uniform(0.5)),
            text_attn: MultiHeadAttention::new(store, "frontend.text_attn", d, config.heads)?,
            text_norm: LayerNorm::new(store, "frontend.text_norm", d),
            text_ffn: FeedForward::new(store, "frontend.text_ffn", d, 2 * d),
            text_ffn_norm: LayerNorm::new(store, "frontend.text_ffn_norm", d),
            img_from_text: MultiHeadAttention::new(store, "frontend.img_from_text", d, config.heads)?,
            img_norm: LayerNorm::new(store, "frontend.img_norm", d),
            text_from_img: MultiHeadAttention::new(store, "frontend.text_from_img", d, config.heads)?,
            text_fused_norm: LayerNorm::new(store, "frontend.text_fused_norm", d),
            fpn_coarse: Linear::new(store, "frontend.fpn_coarse", 9 * d, d, true),
            fpn_coarse_norm: LayerNorm::new(store, "frontend.fpn_coarse_gn", d),
            fpn_lateral: Linear::new(store, "frontend.fpn_lateral", d, d, true),
            fpn_fine: Linear::new(store, "frontend.fpn_fine", 9 * d, d, true),
            fpn_fine_norm: LayerNorm::new(store, "frontend.fpn_fine_gn", d),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Two learned patch-merge stages: 4x4 patches to `H/4 x W/4`, then 2x2
    /// merges to `H/8 x W/8`.
    pub fn encode_frame<'t>(&self, tape: &'t Tape, p: &Bound<'t>, frame: &Frame) -> Result<RawFrameFeatures<'t>> {
        let (h, w) = (frame.height, frame.width);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("frame {h}x{w} is not divisible by 8")));
        }
        Ok(self.encode_pixels(p, tape.constant(frame.pixels.clone(), &[h, w, 3])))
    }

    /// [`Frontend::encode_frame`] on a pixel tensor that may itself be tracked.
    pub fn encode_pixels<'t>(&self, p: &Bound<'t>, img: Tensor<'t>) -> RawFrameFeatures<'t> {
        let s = img.shape();
        let (h, w, d) = (s[0], s[1], self.dim());
        let fine = self
            .patch
            .forward(p, img.im2col(4, 4, 0))
            .gelu()
            .reshape(&[h / 4, w / 4, d]);
        let coarse = self
            .merge
            .forward(p, fine.im2col(2, 2, 0))
            .gelu()
            .reshape(&[h / 8, w / 8, d]);
        RawFrameFeatures { coarse, fine }
    }

    /// Embeds `program` behind a `[CLS]` token and runs one attention block.
    pub fn encode_text<'t>(&self, p: &Bound<'t>, program: &[usize]) -> Result<TextFeatures<'t>> {
        if program.is_empty() {
            return Err(Error::Contract("text program is empty".into()));
        }
        if program.len() + 1 > self.config.max_tokens {
            return Err(Error::Contract(format!(
                "program of {} tokens exceeds {} positions",
                program.len(),
                self.config.max_tokens - 1
            )));
        }
        if let Some(&bad) = program.iter().find(|&&t| t >= self.config.vocab_size || t == CLS_TOKEN) {
            return Err(Error::Contract(format!("token id {bad} is not a vocabulary word")));
        }
        let ids: Vec<usize> = std::iter::once(CLS_TOKEN).chain(program.iter().copied()).collect();
        let k = ids.len();
        let x = p[self.embed]
            .gather_rows(&ids)
            .add(p[self.positions].slice_rows(0, k));
        let x = self.text_norm.forward(p, x.add(self.text_attn.mhsa(p, x).output));
        let x = self.text_ffn_norm.forward(p, x.add(self.text_ffn.forward(p, x)));
        Ok(TextFeatures { tokens: x })
    }

    /// Bidirectional image/text cross attention with residual + layer norm,
    /// followed by the FPN producing `f_seg`.
    pub fn fuse<'t>(&self, p: &Bound<'t>, raw: &RawFrameFeatures<'t>, text: TextFeatures<'t>) -> (FrameFeatures<'t>, TextFeatures<'t>) {
        let tape = raw.coarse.tape();
        let d = self.dim();
        let cs = raw.coarse.shape();
        let (hc, wc) = (cs[0], cs[1]);
        let fs = raw.fine.shape();
        let (hf, wf) = (fs[0], fs[1]);

        let img = raw
            .coarse
            .reshape(&[hc * wc, d])
            .add(tape.constant(position_grid(hc, wc, d), &[hc * wc, d]));
        let img_fused = self
            .img_norm
            .forward(p, img.add(self.img_from_text.cross_attention(p, img, text.tokens).output));
        let text_fused = self
            .text_fused_norm
            .forward(p, text.tokens.add(self.text_from_img.cross_attention(p, text.tokens, img).output));
        let f_img = img_fused.reshape(&[hc, wc, d]);

        let groups = self.config.fpn_groups;
        let coarse = self
            .fpn_coarse
            .forward(p, f_img.im2col(3, 1, 1))
            .reshape(&[hc, wc, d])
            .group_norm(groups, p[self.fpn_coarse_norm.gain], p[self.fpn_coarse_norm.bias])
            .relu();
        let lateral = self
            .fpn_lateral
            .forward(p, raw.fine.reshape(&[hf * wf, d]))
            .add(tape.constant(position_grid(hf, wf, d), &[hf * wf, d]))
            .reshape(&[hf, wf, d]);
        let merged = coarse.upsample_nearest(hf / hc).add(lateral);
        let f_seg = self
            .fpn_fine
            .forward(p, merged.im2col(3, 1, 1))
            .reshape(&[hf, wf, d])
            .group_norm(groups, p[self.fpn_fine_norm.gain], p[self.fpn_fine_norm.bias])
            .relu();
        (FrameFeatures { f_img, f_seg }, TextFeatures { tokens: text_fused })
    }
}
