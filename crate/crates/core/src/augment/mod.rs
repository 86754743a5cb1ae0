//! Realistic sample generation: random affine + thin-plate-spline warps.

pub mod distribution;
pub mod fit;
pub mod params;
pub mod tps;
pub mod warp;

pub use distribution::{augment_batch, sample_theta, ParamDistribution};
pub use fit::{fit_pairwise_alignment, AlignConfig, AlignmentFit, PairResult};
pub use params::{AffineComponents, AugmentParams, DeformationCaps, THETA_LEN};
pub use warp::{alignment_loss_grad, warp_volume};
