use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_BALANCE: f64 = 0.25;

/// Additive smoothing in the DICE numerator and denominator.
const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 4.0,
            l1: 5.0,
            giou: 2.0,
            dice: 5.0,
            focal: 5.0,
            proj: 5.0,
        }
    }
}

/// Elementwise focal loss on probabilities `p` against 0/1 `targets`.
pub fn focal_loss<'t>(p: Tensor<'t>, targets: &[f64], gamma: f64, balance: f64) -> Tensor<'t> {
    let tape = p.tape();
    let shape = p.shape();
    let t = tape.constant(targets.to_vec(), &shape);
    let not_t = tape.constant(targets.iter().map(|v| 1.0 - v).collect(), &shape);
    let q = p.neg().add_scalar(1.0);
    let pos = q.powf(gamma).mul(p.ln()).mul(t).scale(-balance);
    let neg = p.powf(gamma).mul(q.ln()).mul(not_t).scale(-(1.0 - balance));
    pos.add(neg)
}

/// [`focal_loss`] evaluated from logits, stable for saturated inputs.
pub fn focal_loss_logits<'t>(logits: Tensor<'t>, targets: &[f64], gamma: f64, balance: f64) -> Tensor<'t> {
    let tape = logits.tape();
    let shape = logits.shape();
    let t = tape.constant(targets.to_vec(), &shape);
    let not_t = tape.constant(targets.iter().map(|v| 1.0 - v).collect(), &shape);
    let p = logits.sigmoid();
    let q = logits.neg().sigmoid();
    // -ln p = softplus(-x), -ln(1 - p) = softplus(x)
    let tail = logits.abs().neg().exp().add_scalar(1.0).ln();
    let nll_pos = logits.neg().relu().add(tail);
    let nll_neg = logits.relu().add(tail);
    let pos = q.powf(gamma).mul(nll_pos).mul(t).scale(balance);
    let neg = p.powf(gamma).mul(nll_neg).mul(not_t).scale(1.0 - balance);
    pos.add(neg)
}

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` over all elements.
pub fn dice_loss<'t>(p: Tensor<'t>, target: &[f64]) -> Tensor<'t> {
    let t = p.tape().constant(target.to_vec(), &p.shape());
    let inter = p.mul(t).sum().scale(2.0).add_scalar(DICE_EPS);
    let denom = p.sum().add_scalar(target.iter().sum::<f64>() + DICE_EPS);
    inter.div(denom).neg().add_scalar(1.0)
}

/// Pixels of an `h x w` grid whose centres fall inside the `(cx, cy, w, h)` box.
pub fn rasterize_box(bbox: [f64; 4], h: usize, w: usize) -> Vec<f64> {
    let [cx, cy, bw, bh] = bbox;
    let (x1, x2, y1, y2) = (cx - bw / 2.0, cx + bw / 2.0, cy - bh / 2.0, cy + bh / 2.0);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        if v < y1 || v > y2 {
            continue;
        }
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            if u >= x1 && u <= x2 {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

fn projections(values: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0f64; h];
    let mut cols = vec![0.0f64; w];
    for y in 0..h {
        for x in 0..w {
            rows[y] = rows[y].max(values[y * w + x]);
            cols[x] = cols[x].max(values[y * w + x]);
        }
    }
    (rows, cols)
}

/// DICE between the axis max-projections of the soft mask `p` (`h * w`
/// elements) and those of the rasterized box, summed over both axes.
pub fn projection_loss<'t>(p: Tensor<'t>, bbox: [f64; 4], h: usize, w: usize) -> Tensor<'t> {
    let grid = p.reshape(&[h, w]);
    let (row_t, col_t) = projections(&rasterize_box(bbox, h, w), h, w);
    dice_loss(grid.max_rows(), &row_t).add(dice_loss(grid.transpose().max_rows(), &col_t))
}

/// Mask loss for one object in one frame: DICE, mean pixel focal and the box
/// projection term.
pub fn mask_loss<'t>(logits: Tensor<'t>, gt_mask: &[f64], gt_box: [f64; 4], h: usize, w: usize, wt: &LossWeights) -> Tensor<'t> {
    let p = logits.sigmoid();
    let dice = dice_loss(p, gt_mask);
    let focal = focal_loss_logits(logits, gt_mask, FOCAL_GAMMA, FOCAL_BALANCE).mean();
    let proj = projection_loss(p, gt_box, h, w);
    dice.scale(wt.dice).add(focal.scale(wt.focal)).add(proj.scale(wt.proj))
}

fn corners<'t>(b: Tensor<'t>) -> [Tensor<'t>; 4] {
    let (cx, cy) = (b.slice_cols(0, 1), b.slice_cols(1, 1));
    let (hw, hh) = (b.slice_cols(2, 1).scale(0.5), b.slice_cols(3, 1).scale(0.5));
    [cx.sub(hw), cy.sub(hh), cx.add(hw), cy.add(hh)]
}

/// Generalized IoU of `[n x 4]` predicted boxes against `[n x 4]` targets, both
/// `(cx, cy, w, h)`. Returns `[n x 1]`.
pub fn giou<'t>(pred: Tensor<'t>, target: Tensor<'t>) -> Tensor<'t> {
    let [px1, py1, px2, py2] = corners(pred);
    let [tx1, ty1, tx2, ty2] = corners(target);
    let iw = px2.minimum(tx2).sub(px1.maximum(tx1)).relu();
    let ih = py2.minimum(ty2).sub(py1.maximum(ty1)).relu();
    let inter = iw.mul(ih);
    let area_p = px2.sub(px1).mul(py2.sub(py1));
    let area_t = tx2.sub(tx1).mul(ty2.sub(ty1));
    let union = area_p.add(area_t).sub(inter);
    let enclose = px2
        .maximum(tx2)
        .sub(px1.minimum(tx1))
        .mul(py2.maximum(ty2).sub(py1.minimum(ty1)));
    inter.div(union).sub(enclose.sub(union).div(enclose))
}

/// `(L1, 1 - GIoU)` for a `[1 x 4]` prediction against one target box.
pub fn box_terms<'t>(pred: Tensor<'t>, gt: [f64; 4]) -> (Tensor<'t>, Tensor<'t>) {
    let target = pred.tape().constant(gt.to_vec(), &[1, 4]);
    let l1 = pred.sub(target).abs().sum();
    let g = giou(pred, target).sum().neg().add_scalar(1.0);
    (l1, g)
}

pub fn box_loss<'t>(pred: Tensor<'t>, gt: [f64; 4], wt: &LossWeights) -> Tensor<'t> {
    let (l1, g) = box_terms(pred, gt);
    l1.scale(wt.l1).add(g.scale(wt.giou))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFrame {
    pub present: bool,
    /// `(cx, cy, w, h)`, meaningful only when `present`.
    pub bbox: [f64; 4],
    /// Binary mask at the prediction resolution.
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSequence {
    pub frames: Vec<GroundTruthFrame>,
    pub height: usize,
    pub width: usize,
}

/// One candidate object tracked through a clip.
#[derive(Clone, Debug)]
pub struct PredictionSequence<'t> {
    /// `[1]` pre-sigmoid classification per frame.
    pub class_logits: Vec<Tensor<'t>>,
    /// `[1 x 4]` per frame.
    pub boxes: Vec<Tensor<'t>>,
    /// `[1 x (h * w)]` mask logits per frame.
    pub masks: Vec<Tensor<'t>>,
}

impl PredictionSequence<'_> {
    pub fn len(&self) -> usize {
        self.class_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_logits.is_empty()
    }
}

fn check_lengths(gt: &GroundTruthSequence, pred: &PredictionSequence<'_>) -> Result<()> {
    let t = gt.frames.len();
    if t == 0 || pred.class_logits.len() != t || pred.boxes.len() != t || pred.masks.len() != t {
        return Err(Error::Contract(format!(
            "prediction streams ({}, {}, {}) do not match {t} ground-truth frames",
            pred.class_logits.len(),
            pred.boxes.len(),
            pred.masks.len()
        )));
    }
    Ok(())
}

/// Frame-normalized cost of explaining `gt` with `pred`; box and mask terms
/// only count on frames where the object is present.
pub fn matching_cost<'t>(gt: &GroundTruthSequence, pred: &PredictionSequence<'t>, wt: &LossWeights) -> Result<Tensor<'t>> {
    check_lengths(gt, pred)?;
    let (h, w) = (gt.height, gt.width);
    let mut total: Option<Tensor<'t>> = None;
    for (t, frame) in gt.frames.iter().enumerate() {
        let target = if frame.present { 1.0 } else { 0.0 };
        let mut term = focal_loss_logits(pred.class_logits[t], &[target], FOCAL_GAMMA, FOCAL_BALANCE)
            .sum()
            .scale(wt.cls);
        if frame.present {
            term = term
                .add(box_loss(pred.boxes[t], frame.bbox, wt))
                .add(mask_loss(pred.masks[t], &frame.mask, frame.bbox, h, w, wt));
        }
        total = Some(match total {
            Some(s) => s.add(term),
            None => term,
        });
    }
    Ok(total.expect("at least one frame").scale(1.0 / gt.frames.len() as f64))
}

/// Frame-averaged classification loss pushing every frame of `pred` to 0.
pub fn negative_loss<'t>(pred: &PredictionSequence<'t>, wt: &LossWeights) -> Tensor<'t> {
    let logits = Tensor::concat_rows(&pred.class_logits);
    let zeros = vec![0.0; pred.len()];
    focal_loss_logits(logits, &zeros, FOCAL_GAMMA, FOCAL_BALANCE)
        .mean()
        .scale(wt.cls)
}

pub struct TrainingLoss<'t> {
    pub loss: Tensor<'t>,
    /// Index of the candidate matched to the ground truth.
    pub positive: usize,
    /// Matching cost of every candidate.
    pub costs: Vec<f64>,
}

/// The cheapest candidate takes the full loss; the rest are negatives.
pub fn training_loss<'t>(
    gt: &GroundTruthSequence,
    candidates: &[PredictionSequence<'t>],
    wt: &LossWeights,
) -> Result<TrainingLoss<'t>> {
    if candidates.is_empty() {
        return Err(Error::Contract("training loss needs at least one candidate".into()));
    }
    let costs_t = candidates
        .iter()
        .map(|c| matching_cost(gt, c, wt))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = costs_t.iter().map(|c| c.item()).collect();
    if let Some(bad) = costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::NonFinite(if bad.is_nan() { "matching cost is NaN" } else { "matching cost is infinite" }));
    }
    let positive = (0..costs.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)))
        .expect("non-empty");
    let mut loss = costs_t[positive];
    for (i, c) in candidates.iter().enumerate() {
        if i != positive {
            loss = loss.add(negative_loss(c, wt));
        }
    }
    Ok(TrainingLoss { loss, positive, costs })
}
