//! Appearance/motion disentangler: visual encoder, linear motion
//! decomposition and decoder, trained by inter-frame reconstruction.
//!
//! The encoder is an MLP over flattened pixels whose successive hidden
//! layers form the appearance stack; a tanh head over the last level yields
//! the 20-D motion code. The decoder mirrors the encoder, consuming the
//! motion latent (code times the learned basis) plus the appearance levels
//! through skip concatenations, and emits pixels through a bounded
//! activation. Reconstructing frame B from frame A's appearance and frame
//! B's motion forces pose and mouth state through the 20-D bottleneck.

use crate::error::{CoreError, Result};
use crate::motion::{MotionCode, MotionSequence, DEFAULT_FRAME_RATE};
use crate::nn::{Init, Linear};
use crate::rng::RandomSource;
use crate::synth::{Image, CANVAS};
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::{Real, Tensor};
use crate::MOTION_DIM;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    /// Flattened input size; the sprite canvas unless overridden for tests.
    pub input_dim: usize,
    /// Encoder hidden sizes; one appearance level per entry.
    pub enc_hidden: Vec<usize>,
    /// Width of the motion latent produced by the decomposition layer.
    pub latent_dim: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            input_dim: CANVAS * CANVAS,
            enc_hidden: vec![512, 256, 128],
            latent_dim: 64,
        }
    }
}

/// Multi-level appearance features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceStack {
    /// One `[1, hidden]` tensor per encoder level.
    pub levels: Vec<Tensor<f32>>,
}

pub struct Stage1Model<T: Real> {
    pub config: Stage1Config,
    pub params: ParamSet<T>,
    enc: Vec<Linear>,
    motion_head: Linear,
    /// Motion basis: `[MOTION_DIM, latent_dim]` of learned directions.
    basis: ParamId,
    dec: Vec<Linear>,
}

impl<T: Real> Stage1Model<T> {
    pub fn new(config: Stage1Config, rng: &mut RandomSource) -> Result<Self> {
        let mut ps = ParamSet::new();
        let mut enc = Vec::new();
        let mut d_in = config.input_dim;
        for (i, &h) in config.enc_hidden.iter().enumerate() {
            enc.push(Linear::new(&mut ps, &format!("enc.fc{i}"), d_in, h, Init::Xavier, rng)?);
            d_in = h;
        }
        let motion_head = Linear::new(&mut ps, "enc.motion", d_in, MOTION_DIM, Init::Xavier, rng)?;
        let basis = ps.add(
            "basis.directions",
            {
                let limit = (6.0 / (MOTION_DIM + config.latent_dim) as f64).sqrt();
                rng.uniform_tensor::<T>(vec![MOTION_DIM, config.latent_dim], -limit, limit)
            },
        )?;
        // Decoder mirrors the encoder: deepest level first, each layer also
        // consuming the matching appearance level.
        let mut dec = Vec::new();
        let levels = config.enc_hidden.len();
        let mut up_in = config.latent_dim + config.enc_hidden[levels - 1];
        for i in (0..levels).rev() {
            let out = if i == 0 {
                config.input_dim
            } else {
                config.enc_hidden[i - 1]
            };
            let init = if i == 0 { Init::Normal(0.01) } else { Init::Xavier };
            dec.push(Linear::new(&mut ps, &format!("dec.fc{i}"), up_in, out, init, rng)?);
            if i > 0 {
                up_in = out + config.enc_hidden[i - 1];
            }
        }
        Ok(Self {
            config,
            params: ps,
            enc,
            motion_head,
            basis,
            dec,
        })
    }

    /// Encoder forward on the tape: appearance level nodes plus the
    /// tanh-bounded motion codes, for a `[batch, input_dim]` input.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: NodeId,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        if tape.value(x).cols() != self.config.input_dim {
            return Err(CoreError::ShapeMismatch {
                op: "encode",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        let mut levels = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for layer in &self.enc {
            h = layer.forward(tape, ps, h)?;
            h = tape.gelu(h)?;
            levels.push(h);
        }
        let raw = self.motion_head.forward(tape, ps, h)?;
        let motion = tape.tanh(raw)?;
        Ok((levels, motion))
    }

    /// Decoder forward: motion codes `[batch, MOTION_DIM]` plus appearance
    /// level nodes to pixels in [0, 1].
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        levels: &[NodeId],
        motion: NodeId,
    ) -> Result<NodeId> {
        let basis = tape.param(ps, self.basis)?;
        let latent = tape.matmul(motion, basis)?;
        let mut h = latent;
        let top = levels.len();
        for (k, layer) in self.dec.iter().enumerate() {
            let skip = levels[top - 1 - k];
            let cat = tape.concat(&[h, skip], 1)?;
            h = layer.forward(tape, ps, cat)?;
            if k + 1 < self.dec.len() {
                h = tape.gelu(h)?;
            }
        }
        // Bounded output: 0.5 * (tanh + 1) keeps pixels in [0, 1].
        let t = tape.tanh(h)?;
        let t = tape.add_scalar(t, T::one())?;
        tape.scale(t, T::from_f64(0.5))
    }

    /// Full inter-frame pass on the tape: appearance from `appearance_src`,
    /// motion from `motion_src`, both `[batch, input_dim]`.
    pub fn reconstruct_on_tape(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        appearance_src: NodeId,
        motion_src: NodeId,
    ) -> Result<NodeId> {
        let (levels, _) = self.encode_on_tape(tape, ps, appearance_src)?;
        let (_, motion) = self.encode_on_tape(tape, ps, motion_src)?;
        self.decode_on_tape(tape, ps, &levels, motion)
    }

    pub fn basis_param(&self) -> ParamId {
        self.basis
    }
}

impl Stage1Model<f32> {
    /// Encode one image into its appearance stack and motion code.
    pub fn encode(&self, image: &Image) -> Result<(AppearanceStack, MotionCode)> {
        let x = flatten_image(image, self.config.input_dim)?;
        let mut tape = Tape::new();
        let xn = tape.input(x)?;
        let (levels, motion) = self.encode_on_tape(&mut tape, &self.params, xn)?;
        let stack = AppearanceStack {
            levels: levels.iter().map(|&l| tape.value(l).clone()).collect(),
        };
        let code = MotionCode::new(tape.value(motion).data().to_vec())?;
        Ok((stack, code))
    }

    /// Decode a motion code against a fixed appearance stack.
    pub fn decode(&self, appearance: &AppearanceStack, code: &MotionCode) -> Result<Image> {
        if appearance.levels.len() != self.enc.len() {
            return Err(CoreError::ShapeMismatch {
                op: "decode",
                lhs: vec![appearance.levels.len()],
                rhs: vec![self.enc.len()],
            });
        }
        let mut tape = Tape::new();
        let levels = appearance
            .levels
            .iter()
            .map(|l| tape.input(l.clone()))
            .collect::<Result<Vec<_>>>()?;
        let m = tape.input(Tensor::from_vec(
            vec![1, MOTION_DIM],
            code.coeffs().to_vec(),
        )?)?;
        let out = self.decode_on_tape(&mut tape, &self.params, &levels, m)?;
        let flat = tape.value(out).clone();
        if self.config.input_dim == CANVAS * CANVAS {
            flat.reshape(vec![CANVAS, CANVAS])
        } else {
            Ok(flat)
        }
    }

    /// Motion codes for every frame of a clip, in clip order.
    pub fn extract_motion_sequence(&self, frames: &[Image]) -> Result<MotionSequence> {
        let codes = frames
            .iter()
            .map(|f| self.encode(f).map(|(_, c)| c))
            .collect::<Result<Vec<_>>>()?;
        Ok(MotionSequence::from_codes(&codes, DEFAULT_FRAME_RATE))
    }
}

/// Linear decomposition of a motion code against a basis matrix
/// `[MOTION_DIM, latent]`: the latent is the code-weighted sum of the
/// basis directions.
pub fn decompose_motion(code: &MotionCode, basis: &Tensor<f32>) -> Result<Vec<f32>> {
    if basis.shape().first() != Some(&MOTION_DIM) {
        return Err(CoreError::ShapeMismatch {
            op: "decompose_motion",
            lhs: vec![MOTION_DIM],
            rhs: basis.shape().to_vec(),
        });
    }
    let m = Tensor::from_vec(vec![1, MOTION_DIM], code.coeffs().to_vec())?;
    Ok(crate::tensor::matmul(&m, basis)?.into_data())
}

pub fn flatten_image(image: &Image, expected: usize) -> Result<Tensor<f32>> {
    if image.numel() != expected {
        return Err(CoreError::ShapeMismatch {
            op: "flatten_image",
            lhs: image.shape().to_vec(),
            rhs: vec![expected],
        });
    }
    Ok(Tensor::from_vec(vec![1, expected], image.data().to_vec())?)
}

/// Stack images into a `[batch, input_dim]` matrix.
pub fn batch_images(images: &[&Image], input_dim: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * input_dim);
    for img in images {
        if img.numel() != input_dim {
            return Err(CoreError::ShapeMismatch {
                op: "batch_images",
                lhs: img.shape().to_vec(),
                rhs: vec![input_dim],
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(vec![images.len(), input_dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_sprite_frame, Pose, SpriteIdentity};

    fn toy_model(seed: u64) -> Stage1Model<f32> {
        let config = Stage1Config {
            input_dim: CANVAS * CANVAS,
            enc_hidden: vec![48, 32, 24],
            latent_dim: 16,
        };
        Stage1Model::new(config, &mut RandomSource::new(seed)).unwrap()
    }

    #[test]
    fn motion_codes_stay_in_bounds() {
        let model = toy_model(1);
        let identity = SpriteIdentity::from_seed(0);
        for a in [0.0, 0.3, 1.0] {
            let img = render_sprite_frame(&identity, &Pose::default(), a).unwrap();
            let (_, code) = model.encode(&img).unwrap();
            assert!(code.in_bounds());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = toy_model(2);
        let identity = SpriteIdentity::from_seed(3);
        let img = render_sprite_frame(&identity, &Pose::default(), 0.5).unwrap();
        let (sa, ca) = model.encode(&img).unwrap();
        let (sb, cb) = model.encode(&img).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let model = toy_model(3);
        let bad = Tensor::full(vec![8, 8], 0.5f32);
        assert!(model.encode(&bad).is_err());
    }

    #[test]
    fn decomposition_is_linear() {
        let mut rng = RandomSource::new(4);
        let basis: Tensor<f32> = rng.normal_tensor(vec![MOTION_DIM, 16]);
        let zero = decompose_motion(&MotionCode::zeros(), &basis).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        // One-hot code returns the matching basis row exactly.
        let mut one_hot = vec![0.0f32; MOTION_DIM];
        one_hot[5] = 1.0;
        let row = decompose_motion(&MotionCode::new(one_hot).unwrap(), &basis).unwrap();
        assert_eq!(&row[..], &basis.data()[5 * 16..6 * 16]);

        // decompose(a m1 + b m2) = a decompose(m1) + b decompose(m2).
        let m1: Vec<f32> = (0..MOTION_DIM).map(|i| (i as f32 / 40.0) - 0.2).collect();
        let m2: Vec<f32> = (0..MOTION_DIM).map(|i| 0.3 - (i as f32 / 60.0)).collect();
        let (a, b) = (0.7f32, -1.3f32);
        let combined: Vec<f32> = m1.iter().zip(&m2).map(|(&x, &y)| a * x + b * y).collect();
        let lhs = decompose_motion(&MotionCode::new(combined).unwrap(), &basis).unwrap();
        let d1 = decompose_motion(&MotionCode::new(m1).unwrap(), &basis).unwrap();
        let d2 = decompose_motion(&MotionCode::new(m2).unwrap(), &basis).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * d1[i] + b * d2[i];
            assert!((lhs[i] - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn decoder_output_is_bounded() {
        let model = toy_model(5);
        // All-zero appearance features still decode to a valid image.
        let levels = model
            .config
            .enc_hidden
            .iter()
            .map(|&h| Tensor::zeros(vec![1, h]))
            .collect();
        let img = model
            .decode(&AppearanceStack { levels }, &MotionCode::zeros())
            .unwrap();
        assert!(img.is_finite());
        for &v in img.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn identical_frames_give_identical_codes() {
        let model = toy_model(6);
        let identity = SpriteIdentity::from_seed(1);
        let img = render_sprite_frame(&identity, &Pose::default(), 0.4).unwrap();
        let frames = vec![img.clone(), img.clone(), img];
        let seq = model.extract_motion_sequence(&frames).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.frame(0), seq.frame(1));
        assert_eq!(seq.frame(1), seq.frame(2));
    }

    #[test]
    fn toy_stage1_grad_check() {
        let config = Stage1Config {
            input_dim: 20,
            enc_hidden: vec![12, 8],
            latent_dim: 6,
        };
        let mut rng = RandomSource::new(7);
        let mut model = Stage1Model::<f64>::new(config, &mut rng).unwrap();
        let a_img = rng.uniform_tensor::<f64>(vec![2, 20], 0.0, 1.0);
        let m_img = rng.uniform_tensor::<f64>(vec![2, 20], 0.0, 1.0);
        let target = rng.uniform_tensor::<f64>(vec![2, 20], 0.0, 1.0);
        let mut ps = std::mem::take(&mut model.params);
        let report = crate::tape::grad_check(&mut ps, 1e-5, |tape, ps| {
            let a = tape.input(a_img.clone())?;
            let m = tape.input(m_img.clone())?;
            let out = model.reconstruct_on_tape(tape, ps, a, m)?;
            let tgt = tape.input(target.clone())?;
            crate::nn::mse(tape, out, tgt)
        })
        .unwrap();
        model.params = ps;
        assert!(report.all_pass(), "worst {:.3e}", report.worst());
    }
}
