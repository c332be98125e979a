//! Motion codes and sequences.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::MOTION_DIM;

pub const DEFAULT_FRAME_RATE: u16 = 25;

/// One frame's implicit motion: 20 coefficients, each strictly inside
/// (-1, 1) when produced by the encoder (tanh output). Diffusion
/// intermediates are unconstrained and live in plain tensors instead.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionCode {
    coeffs: Vec<f32>,
}

impl MotionCode {
    pub fn new(coeffs: Vec<f32>) -> Result<Self> {
        if coeffs.len() != MOTION_DIM {
            return Err(CoreError::InvalidArgument {
                what: "motion code",
                detail: format!("expected {MOTION_DIM} coefficients, got {}", coeffs.len()),
            });
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &[f32] {
        &self.coeffs
    }

    pub fn zeros() -> Self {
        Self {
            coeffs: vec![0.0; MOTION_DIM],
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.coeffs.iter().all(|c| c.abs() < 1.0)
    }
}

/// A sequence of motion codes plus its frame rate; the diffusion target.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// `[frames, MOTION_DIM]`
    codes: Tensor<f32>,
    pub frame_rate: u16,
}

impl MotionSequence {
    pub fn new(codes: Tensor<f32>, frame_rate: u16) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[1] != MOTION_DIM {
            return Err(CoreError::InvalidArgument {
                what: "motion sequence",
                detail: format!("expected [frames, {MOTION_DIM}], got {:?}", codes.shape()),
            });
        }
        Ok(Self { codes, frame_rate })
    }

    pub fn from_codes(codes: &[MotionCode], frame_rate: u16) -> Self {
        let data: Vec<f32> = codes.iter().flat_map(|c| c.coeffs().to_vec()).collect();
        Self {
            codes: Tensor::from_vec(vec![codes.len(), MOTION_DIM], data)
                .expect("codes are fixed-width"),
            frame_rate,
        }
    }

    pub fn empty(frame_rate: u16) -> Self {
        Self {
            codes: Tensor::zeros(vec![0, MOTION_DIM]),
            frame_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codes(&self) -> &Tensor<f32> {
        &self.codes
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.codes.data()[i * MOTION_DIM..(i + 1) * MOTION_DIM]
    }

    pub fn last_frame(&self) -> Option<Vec<f32>> {
        if self.is_empty() {
            None
        } else {
            Some(self.frame(self.len() - 1).to_vec())
        }
    }

    /// Rows `[start, start+len)` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(CoreError::IndexOutOfRange {
                what: "sequence window",
                index: start + len,
                bound: self.len(),
            });
        }
        let data = self.codes.data()[start * MOTION_DIM..(start + len) * MOTION_DIM].to_vec();
        Ok(Self {
            codes: Tensor::from_vec(vec![len, MOTION_DIM], data).expect("window is dense"),
            frame_rate: self.frame_rate,
        })
    }

    /// Concatenate sequences in time; frame rate taken from the first.
    pub fn concat(parts: &[&MotionSequence]) -> Result<Self> {
        let first = parts.first().ok_or(CoreError::EmptySequence)?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            data.extend_from_slice(p.codes.data());
            frames += p.len();
        }
        Ok(Self {
            codes: Tensor::from_vec(vec![frames, MOTION_DIM], data).expect("parts are dense"),
            frame_rate: first.frame_rate,
        })
    }
}

/// Temporal statistics of a sequence: per-dimension mean and the
/// root-mean-square of the per-dimension population stds, clamped to [0, 1].
pub fn compute_motion_stats(seq: &MotionSequence) -> Result<(Vec<f32>, f32)> {
    if seq.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    let n = seq.len() as f64;
    let mut mean = vec![0.0f64; MOTION_DIM];
    for f in 0..seq.len() {
        for (m, &v) in mean.iter_mut().zip(seq.frame(f)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var_sum = 0.0f64;
    for d in 0..MOTION_DIM {
        let mut var = 0.0f64;
        for f in 0..seq.len() {
            let diff = seq.frame(f)[d] as f64 - mean[d];
            var += diff * diff;
        }
        var_sum += var / n;
    }
    let sigma = (var_sum / MOTION_DIM as f64).sqrt().clamp(0.0, 1.0);
    Ok((mean.iter().map(|&m| m as f32).collect(), sigma as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from_rows(rows: Vec<Vec<f32>>) -> MotionSequence {
        let codes: Vec<MotionCode> = rows.into_iter().map(|r| MotionCode::new(r).unwrap()).collect();
        MotionSequence::from_codes(&codes, DEFAULT_FRAME_RATE)
    }

    #[test]
    fn constant_sequence_stats() {
        let mut row = vec![0.0f32; MOTION_DIM];
        row[3] = 0.25;
        row[7] = -0.5;
        let seq = seq_from_rows(vec![row.clone(); 5]);
        let (mu, sigma) = compute_motion_stats(&seq).unwrap();
        assert_eq!(mu, row);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn alternating_dimension_stats() {
        // One dimension alternating ±0.5 has population std 0.5, so the
        // rms over 20 dimensions is 0.5 / sqrt(20).
        let mut a = vec![0.0f32; MOTION_DIM];
        let mut b = vec![0.0f32; MOTION_DIM];
        a[0] = 0.5;
        b[0] = -0.5;
        let seq = seq_from_rows(vec![a.clone(), b.clone(), a, b]);
        let (mu, sigma) = compute_motion_stats(&seq).unwrap();
        assert!(mu.iter().all(|&m| m == 0.0));
        let expected = 0.5 / (MOTION_DIM as f64).sqrt();
        assert!((sigma as f64 - expected).abs() < 1e-7, "sigma {sigma}");
    }

    #[test]
    fn single_frame_has_zero_sigma() {
        let seq = seq_from_rows(vec![vec![0.3; MOTION_DIM]]);
        let (_, sigma) = compute_motion_stats(&seq).unwrap();
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let seq = MotionSequence::empty(DEFAULT_FRAME_RATE);
        assert!(compute_motion_stats(&seq).is_err());
    }

    #[test]
    fn window_and_concat_round_trip() {
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|i| (0..MOTION_DIM).map(|d| (i * MOTION_DIM + d) as f32 / 200.0).collect())
            .collect();
        let seq = seq_from_rows(rows);
        let a = seq.window(0, 2).unwrap();
        let b = seq.window(2, 4).unwrap();
        let glued = MotionSequence::concat(&[&a, &b]).unwrap();
        assert_eq!(glued, seq);
    }
}
