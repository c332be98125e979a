//! Conditioning inputs shared by the sampler and the motion generator.

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

/// Which condition slots are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConditionMask {
    pub speech: bool,
    pub mean: bool,
    pub std: bool,
    pub hint: bool,
}

impl ConditionMask {
    pub const NONE: Self = Self {
        speech: false,
        mean: false,
        std: false,
        hint: false,
    };

    pub const ALL: Self = Self {
        speech: true,
        mean: true,
        std: true,
        hint: true,
    };

    pub fn intersect(self, other: Self) -> Self {
        Self {
            speech: self.speech && other.speech,
            mean: self.mean && other.mean,
            std: self.std && other.std,
            hint: self.hint && other.hint,
        }
    }
}

/// Everything the motion generator can be conditioned on: per-frame speech
/// features, the motion mean and std of the target sequence, and an optional
/// motion hint from the identity image. Sampling and training both pass the
/// full set plus a mask of the slots that are in effect.
#[derive(Debug, Clone)]
pub struct ConditionSet<T: Real> {
    /// `[frames, speech_dim]`
    pub speech: Tensor<T>,
    /// `[motion_dim]`
    pub motion_mean: Tensor<T>,
    /// Root-mean-square of the per-dimension temporal stds, in [0, 1].
    pub motion_std: T,
    /// `[motion_dim]`, motion code of the identity image.
    pub motion_hint: Option<Tensor<T>>,
    pub present: ConditionMask,
}

impl<T: Real> ConditionSet<T> {
    pub fn new(
        speech: Tensor<T>,
        motion_mean: Tensor<T>,
        motion_std: T,
        motion_hint: Option<Tensor<T>>,
    ) -> Result<Self> {
        if motion_std < T::zero() || motion_std > T::one() {
            return Err(CoreError::InvalidArgument {
                what: "motion_std",
                detail: format!("must lie in [0, 1], got {motion_std}"),
            });
        }
        let present = ConditionMask {
            speech: true,
            mean: true,
            std: true,
            hint: motion_hint.is_some(),
        };
        Ok(Self {
            speech,
            motion_mean,
            motion_std,
            motion_hint,
            present,
        })
    }

    /// All-null conditions of the right shapes; used by stubs and tests.
    pub fn unconditional(frames: usize, speech_dim: usize, motion_dim: usize) -> Self {
        Self {
            speech: Tensor::zeros(vec![frames, speech_dim]),
            motion_mean: Tensor::zeros(vec![motion_dim]),
            motion_std: T::zero(),
            motion_hint: None,
            present: ConditionMask::NONE,
        }
    }

    pub fn frames(&self) -> usize {
        self.speech.shape()[0]
    }
}

/// Classifier-free guidance settings: scale and the slots to guide on.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub mask: ConditionMask,
}

impl GuidanceSpec {
    pub fn new(scale: f64, mask: ConditionMask) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(CoreError::InvalidArgument {
                what: "guidance scale",
                detail: format!("must be nonnegative, got {scale}"),
            });
        }
        Ok(Self { scale, mask })
    }

    pub fn uniform(scale: f64) -> Result<Self> {
        Self::new(scale, ConditionMask::ALL)
    }
}
