//! The self-supervised per-image training paradigm: renoised pair
//! construction, the consistency objective, the training loop, and two
//! diagnostics (trivial-solution detection and a first-order expansion check).

mod collapse;
mod loss;
mod rdc;
mod taylor;
mod train;

pub use collapse::{
    classify_output, collapse_check, collapse_check_with, estimate_noise_std, CollapseStatus, CollapseThresholds,
};
pub use loss::{dcs_loss, dcs_loss_grad, gamma_schedule, NormMode};
pub use rdc::{draw_scales, rdc_construct, renoise, RenoisedPair};
pub use taylor::{taylor_consistency_check, taylor_with_scales, TaylorCheck, JVP_RELATIVE_STEP};
pub use train::{train_single_image, Component, TrainConfig, TrainReport};
