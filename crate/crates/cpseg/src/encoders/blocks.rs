//! Pre-norm transformer building blocks shared by both encoders and the
//! thought-fusion module.

use crate::error::{CpSegError, Result};
use crate::rng::Rng;
use crate::tensor::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Multi-head self-attention projections plus output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CpSegError::Config(format!(
                "embed dim {dim} must be divisible by heads {heads}"
            )));
        }
        let w = Init::ScaledUniform { fan_in: dim };
        Ok(AttentionParams {
            wq: store.register(&format!("{prefix}.wq"), &[dim, dim], w, rng)?,
            bq: store.register(&format!("{prefix}.bq"), &[dim], Init::Zeros, rng)?,
            wk: store.register(&format!("{prefix}.wk"), &[dim, dim], w, rng)?,
            bk: store.register(&format!("{prefix}.bk"), &[dim], Init::Zeros, rng)?,
            wv: store.register(&format!("{prefix}.wv"), &[dim, dim], w, rng)?,
            bv: store.register(&format!("{prefix}.bv"), &[dim], Init::Zeros, rng)?,
            wo: store.register(&format!("{prefix}.wo"), &[dim, dim], w, rng)?,
            bo: store.register(&format!("{prefix}.bo"), &[dim], Init::Zeros, rng)?,
            dim,
            heads,
        })
    }

    /// Scaled dot-product self-attention over `x [n,d]`. Returns the output
    /// and the per-head attention matrices.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let q = tape.matmul(x, bind.get(self.wq))?;
        let q = tape.add_bias(q, bind.get(self.bq))?;
        let k = tape.matmul(x, bind.get(self.wk))?;
        let k = tape.add_bias(k, bind.get(self.bk))?;
        let v = tape.matmul(x, bind.get(self.wv))?;
        let v = tape.add_bias(v, bind.get(self.bv))?;

        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qi = tape.slice_cols(q, h * head_dim, head_dim)?;
            let ki = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vi = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(ki)?;
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_last(scores)?;
            outs.push(tape.matmul(attn, vi)?);
            attns.push(attn);
        }
        let cat = tape.concat_cols(&outs)?;
        let proj = tape.matmul(cat, bind.get(self.wo))?;
        let proj = tape.add_bias(proj, bind.get(self.bo))?;
        Ok((proj, attns))
    }
}

/// Two-layer MLP with GELU, hidden width `4 * dim`.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = 4 * dim;
        Ok(MlpParams {
            w1: store.register(
                &format!("{prefix}.w1"),
                &[dim, hidden],
                Init::ScaledUniform { fan_in: dim },
                rng,
            )?,
            b1: store.register(&format!("{prefix}.b1"), &[hidden], Init::Zeros, rng)?,
            w2: store.register(
                &format!("{prefix}.w2"),
                &[hidden, dim],
                Init::ScaledUniform { fan_in: hidden },
                rng,
            )?,
            b2: store.register(&format!("{prefix}.b2"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let h = tape.matmul(x, bind.get(self.w1))?;
        let h = tape.add_bias(h, bind.get(self.b1))?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, bind.get(self.w2))?;
        tape.add_bias(out, bind.get(self.b2))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.register(&format!("{prefix}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.register(&format!("{prefix}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, bind.get(self.gamma), bind.get(self.beta), LN_EPS)
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), dim, rng)?,
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), dim, rng)?,
            mlp: MlpParams::new(store, &format!("{prefix}.mlp"), dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        Ok(self.forward_with_attn(tape, bind, x)?.0)
    }

    pub fn forward_with_attn(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let normed = self.ln1.forward(tape, bind, x)?;
        let (attn_out, attns) = self.attn.self_attention(tape, bind, normed)?;
        let x = tape.add(x, attn_out)?;
        let normed = self.ln2.forward(tape, bind, x)?;
        let mlp_out = self.mlp.forward(tape, bind, normed)?;
        let out = tape.add(x, mlp_out)?;
        Ok((out, attns))
    }
}
