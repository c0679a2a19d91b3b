//! Per-pseudo-view prior oracles.

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::rasterizer::{render, RenderError};
use crate::scene::GaussianCloud;
use crate::score::{DenoiserOracle, GaussianMixtureOracle, ScoreError};
use crate::synthetic::ground_truth_options;

/// Oracles attached to one pseudo viewpoint.
pub struct PseudoTargets {
    /// Unconditional prior `ε_*`.
    pub prior: Box<dyn DenoiserOracle + Send>,
    /// Inpainting-conditioned oracle `ε_φ`.
    pub rectified: Box<dyn DenoiserOracle + Send>,
    /// Depth oracle for the pseudo view.
    pub depth: Option<Image>,
}

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("seen view {0} has no image in the prior source")]
    UnknownSeenView(usize),
}

pub trait PriorSource: Sync {
    /// Oracles for `pose`, whose warp source is seen view `nearest_seen`
    /// (an index into the trainer's seen views).
    fn targets(&self, pose: &Pose, nearest_seen: usize) -> Result<PseudoTargets, PriorError>;
}

/// Two-mode prior built from the generating cloud of a synthetic scene.
///
/// The target mode is the true rendering at the pseudo pose; the failure
/// mode is the nearest seen image, a plausible but wrong explanation of the
/// pseudo view. The rectified oracle is the same mixture, so the inpainting
/// condition alone decides which mode it favours.
#[derive(Debug, Clone)]
pub struct SyntheticPrior {
    pub ground_truth: GaussianCloud,
    pub camera: CameraIntrinsics,
    pub seen_images: Vec<Image>,
    pub component_std: f64,
    /// Weight of the failure mode; the target mode gets the rest.
    pub failure_weight: f64,
}

impl SyntheticPrior {
    pub const DEFAULT_COMPONENT_STD: f64 = 0.05;

    pub fn new(
        ground_truth: GaussianCloud,
        camera: CameraIntrinsics,
        seen_images: Vec<Image>,
    ) -> Self {
        Self {
            ground_truth,
            camera,
            seen_images,
            component_std: Self::DEFAULT_COMPONENT_STD,
            failure_weight: 0.5,
        }
    }
}

impl PriorSource for SyntheticPrior {
    fn targets(&self, pose: &Pose, nearest_seen: usize) -> Result<PseudoTargets, PriorError> {
        let failure = self
            .seen_images
            .get(nearest_seen)
            .ok_or(PriorError::UnknownSeenView(nearest_seen))?;
        let out = render(
            &self.ground_truth,
            &self.camera,
            pose,
            &ground_truth_options(),
        )?;
        let mixture = GaussianMixtureOracle::new(
            vec![out.color, failure.clone()],
            vec![1.0 - self.failure_weight, self.failure_weight],
            self.component_std * self.component_std,
        )?;
        Ok(PseudoTargets {
            prior: Box::new(mixture.clone()),
            rectified: Box::new(mixture),
            depth: Some(out.depth),
        })
    }
}
