//! Projection heads, teacher balancing and the four training losses.
//!
//! Losses run in f64 and return gradients w.r.t. their student-side inputs;
//! teacher-side inputs are treated as constants.

mod head;
mod loss;
mod sinkhorn;

pub use head::{
    dino_head_forward, log_softmax_backward, log_softmax_rows, to_f32, to_f64, zeros_like_head, HeadCache, HeadConfig,
    ProjectionHead,
};
pub use loss::{
    hybrid_total_loss, image_level_loss, image_level_loss_grad, koleo_loss, koleo_loss_grad, masked_patch_loss_grad,
    patch_level_loss, supervised_prototype_loss, supervised_prototype_loss_grad, ImageLossGrad, LossComponents,
    LossReport, LossWeights, PrototypeScores, SupervisedGrad, KOLEO_EPS,
};
pub use sinkhorn::{sinkhorn_knopp, sinkhorn_knopp_trace};
