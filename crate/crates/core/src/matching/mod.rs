//! Set-prediction training: assignment, per-sequence matching cost and the
//! loss stack (focal classification, L1 + GIoU boxes, DICE + focal +
//! projection masks).

mod hungarian;
mod losses;

pub use hungarian::{hungarian, Assignment};
pub use losses::{
    box_loss, box_terms, dice_loss, focal_loss, focal_loss_logits, giou, mask_loss, matching_cost, negative_loss,
    projection_loss, rasterize_box, training_loss, GroundTruthFrame, GroundTruthSequence, LossWeights,
    PredictionSequence, TrainingLoss, FOCAL_BALANCE, FOCAL_GAMMA,
};
