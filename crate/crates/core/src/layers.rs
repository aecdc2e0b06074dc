//! Parameterized building blocks shared by the backbones, the fusion module
//! and the decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Factor, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with variance `1 / fan_in`.
    Scaled,
    Zeros,
    Identity,
}

fn init_weight<R: Rng + ?Sized>(init: Init, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    match init {
        Init::Scaled => Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(&[fan_in, fan_out]),
        Init::Identity => {
            let mut t = Tensor::zeros(&[fan_in, fan_out]);
            for i in 0..fan_in.min(fan_out) {
                t.data_mut()[i * fan_out + i] = 1.0;
            }
            t
        }
    }
}

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(init, in_dim, out_dim, rng),
            trainable,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Sets weight and bias to zero so the map outputs exactly zero.
    pub fn silence(&self, store: &mut ParamStore) {
        for id in self.params() {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
    }
}

/// One-hidden-layer perceptron `in → hidden → out` with ReLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        output_init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, Init::Scaled, trainable, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, output_init, trainable, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }

    /// Zeroes the output layer; the MLP then maps everything to zero.
    pub fn silence(&self, store: &mut ParamStore) {
        self.fc2.silence(store);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), trainable)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention followed by
/// a ReLU MLP, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerBlock {
    pub const MLP_RATIO: usize = 4;

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, trainable)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, true, Init::Scaled, trainable, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, true, Init::Scaled, trainable, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, trainable)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * Self::MLP_RATIO,
                dim,
                Init::Scaled,
                trainable,
                rng,
            )?,
            dim,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let head_dim = self.dim / self.heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice(qkv, 1, head * head_dim, head_dim)?;
            let k = tape.slice(qkv, 1, self.dim + head * head_dim, head_dim)?;
            let v = tape.slice(qkv, 1, 2 * self.dim + head * head_dim, head_dim)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, Factor::Const(inv_sqrt))?;
            let attn = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let attn_out = self.proj.forward(tape, merged)?;
        let x = tape.add(x, attn_out)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}
