//! Text encoder: token + positional embeddings, transformer blocks, and
//! end-token pooling into a single d-dimensional sentence feature.

use super::blocks::{LayerNormParams, TransformerBlock};
use super::tokenizer::Tokenizer;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNormParams,
    pub dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let token_embedding = store.register(
            &format!("{prefix}.token_embedding"),
            &[vocab_size, dim],
            Init::ScaledUniform { fan_in: dim },
            rng,
        )?;
        let positional = store.register(
            &format!("{prefix}.positional"),
            &[max_len, dim],
            Init::ScaledUniform { fan_in: dim },
            rng,
        )?;
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormParams::new(store, &format!("{prefix}.ln_final"), dim, rng)?;
        Ok(TextEncoder {
            token_embedding,
            positional,
            blocks,
            final_ln,
            dim,
            max_len,
        })
    }

    /// Encode one sentence to a `[1, d]` feature at the end-token position.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        tokenizer: &Tokenizer,
        sentence: &str,
    ) -> Result<TensorId> {
        let ids = tokenizer.encode(sentence)?;
        let end = Tokenizer::end_position(&ids);
        let emb = tape.gather_rows(bind.get(self.token_embedding), &ids)?;
        let mut x = tape.add(emb, bind.get(self.positional))?;
        for block in &self.blocks {
            x = block.forward(tape, bind, x)?;
        }
        let x = self.final_ln.forward(tape, bind, x)?;
        tape.slice_rows(x, end, 1)
    }
}
