//! Noise-predicting transformer over motion sequences.
//!
//! Each block first adds a zero-initialized projection of the per-frame
//! speech features concatenated with the noised motion frame (residual
//! channel concatenation), then scales and shifts the trunk with (gamma,
//! delta) regressed from the global conditioning embedding (temporal
//! modulation), and finally applies pre-norm attention and MLP residuals.
//! The global embedding sums projections of the sinusoidal timestep
//! embedding, the motion mean, the motion std, and mean-pooled speech;
//! dropped condition slots contribute a learned null embedding instead.
//! The modulation regressors and the output head start at zero, so a fresh
//! model predicts exactly zero noise.

use crate::conditions::{ConditionMask, ConditionSet};
use crate::diffusion::{forward_diffuse, EpsilonModel, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::motion::MotionSequence;
use crate::nn::{mse, sinusoidal_embedding, Adam, Init, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::rng::RandomSource;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::{Real, Tensor};
use crate::MOTION_DIM;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Frames per generated chunk.
    pub frames: usize,
    pub speech_dim: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            frames: 32,
            speech_dim: crate::synth::SPEECH_DIM,
            time_embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(CoreError::InvalidArgument {
                what: "generator config",
                detail: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(CoreError::InvalidArgument {
                what: "generator config",
                detail: "time embedding dimension must be even".into(),
            });
        }
        Ok(())
    }
}

struct Block {
    concat_proj: Linear,
    mod_reg: Linear,
    attn: MultiHeadAttention,
    mlp: Mlp,
}

impl Block {
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        cfg: &GeneratorConfig,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        Ok(Self {
            concat_proj: Linear::new(
                ps,
                &format!("{name}.concat"),
                cfg.speech_dim + MOTION_DIM,
                cfg.width,
                Init::Zero,
                rng,
            )?,
            mod_reg: Linear::new(ps, &format!("{name}.mod"), cfg.width, 2 * cfg.width, Init::Zero, rng)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), cfg.width, cfg.heads, rng)?,
            mlp: Mlp::new(
                ps,
                &format!("{name}.mlp"),
                cfg.width,
                cfg.width * cfg.mlp_ratio,
                rng,
            )?,
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        hidden: NodeId,
        global: NodeId,
        per_frame_speech: NodeId,
        noised_frames: NodeId,
        width: usize,
    ) -> Result<NodeId> {
        let cat = tape.concat(&[per_frame_speech, noised_frames], 1)?;
        let u = self.concat_proj.forward(tape, ps, cat)?;
        let mut h = tape.add(hidden, u)?;

        let md = self.mod_reg.forward(tape, ps, global)?;
        let gamma = tape.slice(md, 1, 0, width)?;
        let delta = tape.slice(md, 1, width, width)?;
        let scale = tape.add_scalar(gamma, T::one())?;
        h = tape.mul(h, scale)?;
        h = tape.add(h, delta)?;

        let eps = T::from_f64(1e-5);
        let n1 = tape.layer_norm(h, eps)?;
        let a = self.attn.forward(tape, ps, n1)?;
        h = tape.add(h, a)?;
        let n2 = tape.layer_norm(h, eps)?;
        let m = self.mlp.forward(tape, ps, n2)?;
        tape.add(h, m)
    }
}

pub struct MotionGenerator<T: Real> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    input_proj: Linear,
    pos_embed: ParamId,
    time_fc1: Linear,
    time_fc2: Linear,
    speech_pool_proj: Linear,
    speech_frame_proj: Linear,
    mean_proj: Linear,
    std_proj: Linear,
    null_speech_global: ParamId,
    null_speech_frame: ParamId,
    null_mean: ParamId,
    null_std: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

impl<T: Real> MotionGenerator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let w = config.width;
        let input_proj = Linear::new(&mut ps, "gen.input", MOTION_DIM, w, Init::Xavier, rng)?;
        let pos_embed = ps.add(
            "gen.pos",
            rng.normal_tensor::<T>(vec![config.frames, w]).map(|v| v * T::from_f64(0.02)),
        )?;
        let time_fc1 = Linear::new(&mut ps, "gen.time.fc1", config.time_embed_dim, w, Init::Xavier, rng)?;
        let time_fc2 = Linear::new(&mut ps, "gen.time.fc2", w, w, Init::Xavier, rng)?;
        let speech_pool_proj =
            Linear::new(&mut ps, "gen.cond.speech", config.speech_dim, w, Init::Xavier, rng)?;
        let speech_frame_proj = Linear::new(
            &mut ps,
            "gen.cond.speech_frame",
            config.speech_dim,
            config.speech_dim,
            Init::Xavier,
            rng,
        )?;
        let mean_proj = Linear::new(&mut ps, "gen.cond.mean", MOTION_DIM, w, Init::Xavier, rng)?;
        let std_proj = Linear::new(&mut ps, "gen.cond.std", 1, w, Init::Xavier, rng)?;
        let small = |rng: &mut RandomSource, shape: Vec<usize>| {
            rng.normal_tensor::<T>(shape).map(|v| v * T::from_f64(0.02))
        };
        let null_speech_global = ps.add("gen.null.speech", small(rng, vec![1, w]))?;
        let null_speech_frame =
            ps.add("gen.null.speech_frame", small(rng, vec![1, config.speech_dim]))?;
        let null_mean = ps.add("gen.null.mean", small(rng, vec![1, w]))?;
        let null_std = ps.add("gen.null.std", small(rng, vec![1, w]))?;
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut ps, &format!("gen.block{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut ps, "gen.final_norm", w)?;
        let head = Linear::new(&mut ps, "gen.head", w, MOTION_DIM, Init::Zero, rng)?;
        Ok(Self {
            config,
            params: ps,
            input_proj,
            pos_embed,
            time_fc1,
            time_fc2,
            speech_pool_proj,
            speech_frame_proj,
            mean_proj,
            std_proj,
            null_speech_global,
            null_speech_frame,
            null_mean,
            null_std,
            blocks,
            final_norm,
            head,
        })
    }

    /// Global conditioning embedding `[1, width]` plus per-frame speech
    /// embeddings `[frames, speech_dim]`. Slots outside `active` contribute
    /// their learned null embedding, so dropped content cannot leak.
    pub fn embed_conditions(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        conditions: &ConditionSet<T>,
        t: usize,
        active: ConditionMask,
    ) -> Result<(NodeId, NodeId)> {
        let cfg = &self.config;
        if conditions.speech.shape() != [cfg.frames, cfg.speech_dim] {
            return Err(CoreError::ShapeMismatch {
                op: "embed_conditions",
                lhs: conditions.speech.shape().to_vec(),
                rhs: vec![cfg.frames, cfg.speech_dim],
            });
        }
        if conditions.motion_mean.numel() != MOTION_DIM {
            return Err(CoreError::ShapeMismatch {
                op: "embed_conditions",
                lhs: conditions.motion_mean.shape().to_vec(),
                rhs: vec![MOTION_DIM],
            });
        }
        let t_emb = tape.input(sinusoidal_embedding::<T>(t, cfg.time_embed_dim))?;
        let th = self.time_fc1.forward(tape, ps, t_emb)?;
        let th = tape.gelu(th)?;
        let mut global = self.time_fc2.forward(tape, ps, th)?;

        let speech_part = if active.speech {
            let pooled = pool_rows(&conditions.speech);
            let pn = tape.input(pooled)?;
            self.speech_pool_proj.forward(tape, ps, pn)?
        } else {
            tape.param(ps, self.null_speech_global)?
        };
        global = tape.add(global, speech_part)?;

        let mean_part = if active.mean {
            let m = tape.input(
                Tensor::from_vec(vec![1, MOTION_DIM], conditions.motion_mean.data().to_vec())
                    .expect("mean is MOTION_DIM wide"),
            )?;
            self.mean_proj.forward(tape, ps, m)?
        } else {
            tape.param(ps, self.null_mean)?
        };
        global = tape.add(global, mean_part)?;

        let std_part = if active.std {
            let s = tape.input(Tensor::from_vec(vec![1, 1], vec![conditions.motion_std])?)?;
            self.std_proj.forward(tape, ps, s)?
        } else {
            tape.param(ps, self.null_std)?
        };
        global = tape.add(global, std_part)?;

        let per_frame_src = if active.speech {
            tape.input(conditions.speech.clone())?
        } else {
            // Broadcast the learned null row over all frames.
            let ones = tape.input(Tensor::full(vec![cfg.frames, 1], T::one()))?;
            let null = tape.param(ps, self.null_speech_frame)?;
            tape.matmul(ones, null)?
        };
        let per_frame = self.speech_frame_proj.forward(tape, ps, per_frame_src)?;
        Ok((global, per_frame))
    }

    /// Noise prediction on an existing tape.
    pub fn epsilon_on_tape(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        noised: &Tensor<T>,
        t: usize,
        conditions: &ConditionSet<T>,
        active: ConditionMask,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        if noised.shape() != [cfg.frames, MOTION_DIM] {
            return Err(CoreError::ShapeMismatch {
                op: "predict_epsilon",
                lhs: noised.shape().to_vec(),
                rhs: vec![cfg.frames, MOTION_DIM],
            });
        }
        let x = tape.input(noised.clone())?;
        let (global, per_frame) = self.embed_conditions(tape, ps, conditions, t, active)?;
        let mut h = self.input_proj.forward(tape, ps, x)?;
        let pos = tape.param(ps, self.pos_embed)?;
        h = tape.add(h, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, ps, h, global, per_frame, x, cfg.width)?;
        }
        let n = self.final_norm.forward(tape, ps, h)?;
        self.head.forward(tape, ps, n)
    }

    /// Inference-time noise prediction.
    pub fn predict_epsilon(
        &self,
        noised: &Tensor<T>,
        t: usize,
        conditions: &ConditionSet<T>,
        active: ConditionMask,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.epsilon_on_tape(&mut tape, &self.params, noised, t, conditions, active)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Real> EpsilonModel<T> for MotionGenerator<T> {
    fn predict_noise(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        conditions: &ConditionSet<T>,
        active: ConditionMask,
    ) -> Result<Tensor<T>> {
        self.predict_epsilon(x_t, t, conditions, active)
    }
}

fn pool_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut acc = vec![T::zero(); cols];
    for row in x.data().chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = T::from_f64(rows as f64);
    for a in &mut acc {
        *a /= n;
    }
    Tensor::from_vec(vec![1, cols], acc).expect("pooled row")
}

/// One training item: a target motion sequence with its conditions
/// (the conditions' mean/std are the sequence's own statistics).
pub struct TrainItem<T: Real> {
    pub sequence: Tensor<T>,
    pub conditions: ConditionSet<T>,
}

/// Per-condition dropout probability during training.
pub const COND_DROPOUT: f64 = 0.1;

/// One optimization step of epsilon-prediction: per item, draw a timestep
/// and noise, corrupt the sequence, drop each condition slot independently
/// with probability 0.1, and regress the batch-mean MSE between predicted
/// and drawn noise. Returns the loss.
pub fn train_step<T: Real>(
    model: &mut MotionGenerator<T>,
    batch: &[TrainItem<T>],
    sched: &NoiseSchedule,
    rng: &mut RandomSource,
    opt: &mut Adam<T>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::EmptySet);
    }
    let mut ps = std::mem::take(&mut model.params);
    ps.zero_grads();
    let mut tape = Tape::new();
    let mut total: Option<NodeId> = None;
    let item_weight = T::from_f64(1.0 / batch.len() as f64);
    for item in batch {
        let t = rng.below(sched.len());
        let eps: Tensor<T> = rng.normal_tensor(item.sequence.shape().to_vec());
        let x_t = forward_diffuse(&item.sequence, t, &eps, sched)?;
        let active = ConditionMask {
            speech: item.conditions.present.speech && !rng.bernoulli(COND_DROPOUT),
            mean: item.conditions.present.mean && !rng.bernoulli(COND_DROPOUT),
            std: item.conditions.present.std && !rng.bernoulli(COND_DROPOUT),
            hint: false,
        };
        let eps_hat = model.epsilon_on_tape(&mut tape, &ps, &x_t, t, &item.conditions, active)?;
        let eps_node = tape.input(eps)?;
        let item_loss = mse(&mut tape, eps_hat, eps_node)?;
        let weighted = tape.scale(item_loss, item_weight)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let loss_node = total.expect("batch is nonempty");
    let loss = tape.value(loss_node).item().to_f64();
    tape.backward(loss_node, &mut ps)?;
    opt.step(&mut ps);
    model.params = ps;
    Ok(loss)
}

/// Training item from an extracted motion sequence and its speech features:
/// conditions carry the sequence's own temporal statistics.
pub fn train_item_from_sequence(
    seq: &MotionSequence,
    speech: &Tensor<f32>,
) -> Result<TrainItem<f32>> {
    let (mean, std) = crate::motion::compute_motion_stats(seq)?;
    let conditions = ConditionSet::new(
        speech.clone(),
        Tensor::from_vec(vec![MOTION_DIM], mean)?,
        std,
        None,
    )?;
    Ok(TrainItem {
        sequence: seq.codes().clone(),
        conditions,
    })
}
