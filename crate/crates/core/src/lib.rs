//! Motion-code diffusion for sprite talking heads.
//!
//! Two-stage system: a self-supervised appearance/motion disentangler over
//! procedurally rendered sprite faces, and a conditional diffusion
//! transformer over the resulting 20-dimensional motion codes with
//! classifier-free guidance, motion-statistics conditioning, and
//! inference-time motion-degree control.

pub mod conditions;
pub mod generator;
pub mod diffusion;
pub mod error;
pub mod motion;
pub mod nn;
pub mod synth;
pub mod rng;
pub mod stage1;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};

/// Motion codes are 20-dimensional throughout (matches the motion file
/// format, which pins the dimension).
pub const MOTION_DIM: usize = 20;
