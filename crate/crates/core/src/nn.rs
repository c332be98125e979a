//! Layers and the optimizer, built on the tape.

use crate::error::Result;
use crate::rng::RandomSource;
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::{Real, Tensor};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Xavier/Glorot uniform over ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    /// Normal with the given standard deviation.
    Normal(f64),
    Zero,
}

fn init_tensor<T: Real>(shape: Vec<usize>, init: Init, rng: &mut RandomSource) -> Tensor<T> {
    match init {
        Init::Xavier => {
            let (fan_in, fan_out) = match shape.as_slice() {
                [i, o] => (*i, *o),
                [o] => (*o, *o),
                _ => (1, 1),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.uniform_tensor(shape, -limit, limit)
        }
        Init::Normal(std) => rng.normal_tensor::<T>(shape).map(|v| v * T::from_f64(std)),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Fully connected layer `x @ W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), init_tensor(vec![d_in, d_out], init, rng))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![d_out]))?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn new_no_bias<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), init_tensor(vec![d_in, d_out], init, rng))?;
        Ok(Self { w, b: None })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(ps, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bn = tape.param(ps, b)?;
                tape.add(y, bn)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()))?;
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let normed = tape.layer_norm(x, T::from_f64(self.eps))?;
        let g = tape.param(ps, self.gamma)?;
        let b = tape.param(ps, self.beta)?;
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }
}

/// Full (non-causal) multi-head self-attention over the rows of a
/// `[frames, width]` matrix. Heads are column slabs of the joint q/k/v
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        debug_assert_eq!(width % heads, 0);
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.wq"), width, width, Init::Xavier, rng)?,
            wk: Linear::new(ps, &format!("{name}.wk"), width, width, Init::Xavier, rng)?,
            wv: Linear::new(ps, &format!("{name}.wv"), width, width, Init::Xavier, rng)?,
            wo: Linear::new(ps, &format!("{name}.wo"), width, width, Init::Xavier, rng)?,
            heads,
            head_dim: width / heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        h: NodeId,
    ) -> Result<NodeId> {
        let q = self.wq.forward(tape, ps, h)?;
        let k = self.wk.forward(tape, ps, h)?;
        let v = self.wv.forward(tape, ps, h)?;
        let scale = T::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let off = head * self.head_dim;
            let qh = tape.slice(q, 1, off, self.head_dim)?;
            let kh = tape.slice(k, 1, off, self.head_dim)?;
            let vh = tape.slice(v, 1, off, self.head_dim)?;
            let scores = tape.matmul_tb(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = tape.softmax(scaled)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat(&outs, 1)?;
        self.wo.forward(tape, ps, cat)
    }
}

/// Two-layer feed-forward with gelu.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, hidden, Init::Xavier, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, width, Init::Xavier, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, ps, h)
    }
}

/// Scalar mean-squared-error node between two same-shaped tensors.
pub fn mse<T: Real>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Sinusoidal embedding of a diffusion timestep: interleaved sin/cos at
/// geometrically spaced frequencies, shape `[1, dim]`.
pub fn sinusoidal_embedding<T: Real>(t: usize, dim: usize) -> Tensor<T> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        data.push(T::from_f64(arg.sin()));
        data.push(T::from_f64(arg.cos()));
    }
    Tensor::from_vec(vec![1, dim], data).expect("shape/data agree")
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(ps: &ParamSet<T>, lr: f64) -> Self {
        let m = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients currently held in `ps`.
    pub fn step(&mut self, ps: &mut ParamSet<T>) {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step as i32);
        let bc2 = one - self.beta2.powi(self.step as i32);
        for i in 0..ps.len() {
            let p = ps.get_mut(crate::tape::ParamId(i));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] = value[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
