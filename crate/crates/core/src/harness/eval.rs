//! Inference over scene sets: trajectory selection, J&F, and whether the
//! selected trajectory is the referred object.

use crate::diff::Tape;
use crate::error::Result;
use crate::harness::model::{ForwardOptions, Model, MASK_FACTOR};
use crate::harness::scene::downsample;
use crate::harness::train::Prepared;
use crate::metrics::{average_scores, region_similarity, select_best, select_multi, EvalResult, VideoScore};

/// Average-score threshold for programs that refer to several objects.
pub const MULTI_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutcome {
    pub score: VideoScore,
    /// Selected candidate slots.
    pub selected: Vec<usize>,
    /// The selection overlaps the referred object more than any other object.
    pub correct: bool,
    /// Per-frame predicted masks at the mask grid resolution.
    pub masks: Vec<Vec<bool>>,
}

pub fn video_id(clip: &Prepared) -> String {
    format!("d{}-{:016x}", clip.scene.difficulty, clip.scene.seed)
}

/// Runs one clip with frozen parameters.
pub fn evaluate_scene(model: &Model, clip: &Prepared, opts: ForwardOptions) -> Result<SceneOutcome> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let out = model.forward(&tape, &p, &clip.frames, &clip.scene.program, opts)?;
    let (h, w) = (out.mask_height, out.mask_width);
    let scores = out.scores();
    let selected = if clip.scene.targets.len() > 1 {
        let multi = select_multi(&scores, MULTI_THRESHOLD);
        if multi.is_empty() {
            vec![select_best(&scores)?]
        } else {
            multi
        }
    } else {
        vec![select_best(&scores)?]
    };
    let frames = clip.frames.len();
    let masks: Vec<Vec<bool>> = (0..frames)
        .map(|t| {
            let mut m = vec![false; h * w];
            for &s in &selected {
                for (o, v) in m.iter_mut().zip(out.candidates[s].masks[t].values().iter()) {
                    *o |= *v > 0.0;
                }
            }
            m
        })
        .collect();
    let gt: Vec<Vec<bool>> = (0..frames).map(|t| clip.scene.target_mask_at(t, MASK_FACTOR)).collect();
    let score = VideoScore::from_frames(video_id(clip), &masks, &gt, h, w);
    let correct = picks_target(clip, &masks, h, w);
    Ok(SceneOutcome {
        score,
        selected,
        correct,
        masks,
    })
}

/// Whether `masks` overlap the union of the targets more (by clip-averaged
/// IoU) than every single non-target object.
fn picks_target(clip: &Prepared, masks: &[Vec<bool>], h: usize, w: usize) -> bool {
    let scene = &clip.scene;
    let (fh, fw) = (scene.height, scene.width);
    let mean_iou = |object_masks: &dyn Fn(usize) -> Vec<bool>| {
        masks
            .iter()
            .enumerate()
            .map(|(t, m)| region_similarity(m, &object_masks(t)))
            .sum::<f64>()
            / masks.len().max(1) as f64
    };
    debug_assert_eq!((fh / MASK_FACTOR, fw / MASK_FACTOR), (h, w));
    let target_iou = mean_iou(&|t| scene.target_mask_at(t, MASK_FACTOR));
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| !scene.targets.contains(i))
        .all(|(_, o)| target_iou > mean_iou(&|t| downsample(&o.silhouette(t, fh, fw), fh, fw, MASK_FACTOR)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    pub outcomes: Vec<SceneOutcome>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        let hits = self.outcomes.iter().filter(|o| o.correct).count();
        hits as f64 / self.outcomes.len().max(1) as f64
    }
}

pub fn evaluate(model: &Model, clips: &[Prepared], opts: ForwardOptions) -> Result<EvalReport> {
    let outcomes = clips
        .iter()
        .map(|c| evaluate_scene(model, c, opts))
        .collect::<Result<Vec<_>>>()?;
    let result = EvalResult::new(outcomes.iter().map(|o| o.score.clone()).collect());
    Ok(EvalReport { result, outcomes })
}

/// Mean classification score of every candidate, for inspection.
pub fn candidate_scores(model: &Model, clip: &Prepared, opts: ForwardOptions) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let out = model.forward(&tape, &p, &clip.frames, &clip.scene.program, opts)?;
    Ok(average_scores(&out.scores()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::harness::scene::Suite;
    use crate::harness::train::{scene_set, Split};

    fn tiny() -> RunConfig {
        RunConfig {
            dim: 16,
            heads: 2,
            num_queries: 16,
            layers: 2,
            temporal_blocks: 1,
            mask_blocks: 1,
            num_points: 4,
            frames: 3,
            height: 32,
            width: 32,
            ..RunConfig::default()
        }
    }

    #[test]
    fn untrained_model_gives_a_well_defined_result() {
        let cfg = tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let clips: Vec<Prepared> = scene_set(&cfg, Suite::Standard, Split::HeldOut, 2)
            .unwrap()
            .into_iter()
            .map(Prepared::new)
            .collect();
        let report = evaluate(&model, &clips, ForwardOptions::default()).unwrap();
        assert_eq!(report.outcomes.len(), 2);
        assert!((0.0..=1.0).contains(&report.result.jf_mean));
        assert!(report.outcomes.iter().all(|o| o.masks.len() == 3 && o.masks[0].len() == 64));
    }

    #[test]
    fn ground_truth_against_itself_scores_one() {
        let cfg = tiny();
        let clip = Prepared::new(scene_set(&cfg, Suite::Standard, Split::HeldOut, 1).unwrap().remove(0));
        let gt: Vec<Vec<bool>> = (0..3).map(|t| clip.scene.target_mask_at(t, MASK_FACTOR)).collect();
        let s = VideoScore::from_frames("gt", &gt, &gt, 8, 8);
        assert_eq!(s.jf(), 1.0);
        assert!(picks_target(&clip, &gt, 8, 8));
    }
}
