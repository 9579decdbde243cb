//! Ground-truth modals, suppression, matching and losses.

pub mod losses;
pub mod matching;
pub mod segment;
pub mod superpixel;

pub use losses::{
    disparity_loss, displace_mass, init_loss, online_gt_nms, proposal_loss, refinement_loss, smooth_l1, LossTerms,
};
pub use matching::{exhaustive_assignment, hungarian, match_targets};
pub use superpixel::{superpixel_downsample, window_modals, GtModals, Modal};
