//! Candidate selection at inference and the J / F / J&F video metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Average of each candidate's per-frame classification scores.
pub fn average_scores(scores: &[Vec<f64>]) -> Vec<f64> {
    scores
        .iter()
        .map(|s| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 })
        .collect()
}

/// Candidate with the highest average score; the lowest index wins ties.
pub fn select_best(scores: &[Vec<f64>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("no candidates to select from".into()));
    }
    let avg = average_scores(scores);
    let mut best = 0;
    for (i, &a) in avg.iter().enumerate().skip(1) {
        if a > avg[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Every candidate whose average score exceeds `threshold`, in index order.
pub fn select_multi(scores: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    average_scores(scores)
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Per-pixel owner of a set of selected masks: where several overlap, the
/// candidate with the higher score takes the pixel (lower index on ties).
pub fn compose_masks(masks: &[Vec<bool>], scores: &[f64]) -> Vec<Option<usize>> {
    assert_eq!(masks.len(), scores.len());
    let len = masks.first().map_or(0, Vec::len);
    (0..len)
        .map(|px| {
            let mut owner: Option<usize> = None;
            for (i, m) in masks.iter().enumerate() {
                if m[px] && owner.map_or(true, |o| scores[i] > scores[o]) {
                    owner = Some(i);
                }
            }
            owner
        })
        .collect()
}

/// Intersection over union; two empty masks score 1.
pub fn region_similarity(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mask extents differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask pixels with at least one 4-neighbour outside the mask (the image
/// border counts as outside).
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

fn matched_fraction(from: &[bool], to: &[bool], h: usize, w: usize) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            total += 1;
            let near = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| to[yy * w + xx]));
            hit += near as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Boundary F-measure with a one-pixel (Chebyshev) matching tolerance.
pub fn contour_accuracy(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let (np, ng) = (bp.iter().any(|&b| b), bg.iter().any(|&b| b));
    match (np, ng) {
        (false, false) => return 1.0,
        (false, true) | (true, false) => return 0.0,
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, h, w);
    let recall = matched_fraction(&bg, &bp, h, w);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    pub video_id: String,
    pub j: f64,
    pub f: f64,
}

impl VideoScore {
    /// Frame-averaged J and F of one clip.
    pub fn from_frames(video_id: impl Into<String>, pred: &[Vec<bool>], gt: &[Vec<bool>], h: usize, w: usize) -> Self {
        assert_eq!(pred.len(), gt.len(), "frame counts differ");
        let t = pred.len().max(1) as f64;
        let j = pred.iter().zip(gt).map(|(p, g)| region_similarity(p, g)).sum::<f64>() / t;
        let f = pred.iter().zip(gt).map(|(p, g)| contour_accuracy(p, g, h, w)).sum::<f64>() / t;
        VideoScore { video_id: video_id.into(), j, f }
    }

    pub fn jf(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub videos: Vec<VideoScore>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

impl EvalResult {
    pub fn new(videos: Vec<VideoScore>) -> Self {
        let n = videos.len().max(1) as f64;
        let j_mean = videos.iter().map(|v| v.j).sum::<f64>() / n;
        let f_mean = videos.iter().map(|v| v.f).sum::<f64>() / n;
        EvalResult {
            videos,
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
        }
    }

    /// `video_id,J,F,J&F` rows, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video_id,J,F,J&F\n");
        for v in &self.videos {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", v.video_id, v.j, v.f, v.jf());
        }
        let _ = writeln!(out, "mean,{:.6},{:.6},{:.6}", self.j_mean, self.f_mean, self.jf_mean);
        out
    }
}
