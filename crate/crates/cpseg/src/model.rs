//! The assembled segmentation model: dual encoders, prompt pool, thought
//! fusion, and decoder head, plus checkpoint serialization.
//!
//! One forward pass encodes the image, selects pool prompts with the global
//! image feature, encodes each chain thought, folds the thoughts into the
//! class text bank, computes the pixel-text score map, and decodes it to
//! full-resolution logits.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{ClassTaxonomy, SegSample};
use crate::decoder::DecoderHead;
use crate::encoders::tokenizer::{build_vocab, Tokenizer};
use crate::encoders::{TextEncoder, VisionEncoder};
use crate::error::{CpSegError, Result};
use crate::matching::{
    compute_score_map, pixel_text_matching_loss, segmentation_loss, total_loss, ClassTextBank,
    FusionBlock, Reduction, ScoreMap,
};
use crate::prompt::{self, PromptChain, PromptPool};
use crate::rng::Rng;
use crate::tensor::params::{Binding, ParamEntry, ParamStore};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub max_len: usize,
    pub pool_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Cosine similarity in the score map when true, raw dot product when
    /// false.
    pub normalize_scores: bool,
    /// Use raw thought embeddings instead of the refined class bank as the
    /// prompt set of the matching loss.
    pub ptm_use_thoughts: bool,
    pub freeze_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            text_layers: 2,
            vision_layers: 2,
            heads: 2,
            patch_size: 4,
            max_len: 16,
            pool_size: 16,
            image_h: 64,
            image_w: 64,
            normalize_scores: true,
            ptm_use_thoughts: false,
            freeze_text: false,
        }
    }
}

pub struct CpSegModel {
    pub config: ModelConfig,
    pub taxonomy: ClassTaxonomy,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub pool: PromptPool,
    pub fusion: FusionBlock,
    pub decoder: DecoderHead,
}

/// Everything a forward pass produces that training and inspection need.
pub struct SampleForward {
    /// Dense patch features `[grid, d]`.
    pub dense: TensorId,
    /// Thought embeddings after pool-prompt addition, in chain order.
    pub thoughts: Vec<TensorId>,
    /// Bank after each refinement step; `banks[0]` is the unrefined bank.
    pub banks: Vec<ClassTextBank>,
    /// Score map against the final bank.
    pub final_map: ScoreMap,
    /// Score maps after each thought, parallel to `thoughts`.
    pub thought_maps: Vec<ScoreMap>,
    /// Full-resolution logits `[h, w, k]`.
    pub decode_logits: TensorId,
}

/// Loss weighting for one training forward.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda: f64,
    pub reduction: Reduction,
    pub decoder_loss_weight: f64,
}

impl CpSegModel {
    /// Build a fresh model. The vocabulary comes from the taxonomy's question
    /// templates plus any extra sentences (typically the training corpus).
    pub fn new(
        config: ModelConfig,
        taxonomy: ClassTaxonomy,
        extra_corpus: &[String],
        seed: u64,
    ) -> Result<Self> {
        taxonomy.validate()?;
        let mut corpus = prompt::template_corpus(&taxonomy);
        corpus.extend(extra_corpus.iter().cloned());
        let tokenizer = build_vocab(&corpus, config.max_len)?;
        Self::with_tokenizer(config, taxonomy, tokenizer, seed)
    }

    fn with_tokenizer(
        config: ModelConfig,
        taxonomy: ClassTaxonomy,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(
            &mut store,
            "text",
            tokenizer.vocab_size(),
            config.embed_dim,
            config.text_layers,
            config.heads,
            config.max_len,
            &mut rng,
        )?;
        let vision = VisionEncoder::new(
            &mut store,
            "vision",
            config.image_h,
            config.image_w,
            config.patch_size,
            config.embed_dim,
            config.vision_layers,
            config.heads,
            &mut rng,
        )?;
        let pool = PromptPool::new(&mut store, "pool", config.pool_size, config.embed_dim, &mut rng)?;
        let fusion = FusionBlock::new(&mut store, "fusion", config.embed_dim, config.heads, &mut rng)?;
        let decoder = DecoderHead::new(&mut store, "decoder", taxonomy.len(), &mut rng)?;
        if config.freeze_text {
            store.freeze_prefix("text.");
        }
        Ok(CpSegModel {
            config,
            taxonomy,
            tokenizer,
            store,
            text,
            vision,
            pool,
            fusion,
            decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        self.store.bind_all(tape)
    }

    /// Encode a sentence, memoizing per tape so repeated sentences within a
    /// batch share one subgraph (gradients accumulate identically).
    fn encode_sentence(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cache: &mut HashMap<String, TensorId>,
        sentence: &str,
    ) -> Result<TensorId> {
        if let Some(&id) = cache.get(sentence) {
            return Ok(id);
        }
        let id = self.text.encode(tape, bind, &self.tokenizer, sentence)?;
        cache.insert(sentence.to_string(), id);
        Ok(id)
    }

    /// The unrefined class bank: one encoded description per class.
    fn class_bank(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cache: &mut HashMap<String, TensorId>,
    ) -> Result<ClassTextBank> {
        let sentences = self.taxonomy.class_sentences();
        let rows = sentences
            .iter()
            .map(|s| self.encode_sentence(tape, bind, cache, s))
            .collect::<Result<Vec<_>>>()?;
        let values = tape.concat_rows(&rows)?;
        Ok(ClassTextBank {
            values,
            num_classes: self.taxonomy.len(),
        })
    }

    /// Full forward pass for one image and one prompt chain.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cache: &mut HashMap<String, TensorId>,
        image: &[f64],
        chain: &PromptChain,
    ) -> Result<SampleForward> {
        let feats = self.vision.encode(tape, bind, image)?;

        // Pair chain nodes with pool prompts selected by the global feature.
        let k_select = chain.nodes.len().min(self.pool.len());
        let selected = if k_select > 0 {
            let query = tape.data(feats.global).to_vec();
            self.pool.select(&self.store, &query, k_select)?
        } else {
            Vec::new()
        };

        let mut thoughts = Vec::with_capacity(chain.nodes.len());
        for (i, node) in chain.nodes.iter().enumerate() {
            let emb = self.encode_sentence(tape, bind, cache, &node.sentence())?;
            let emb = match selected.get(i) {
                Some(&slot) => tape.add(emb, bind.get(self.pool.entries[slot].prompt))?,
                None => emb,
            };
            thoughts.push(emb);
        }

        let bank0 = self.class_bank(tape, bind, cache)?;
        let banks = self.fusion.refine_chain(tape, bind, &bank0, &thoughts)?;

        let mut thought_maps = Vec::with_capacity(thoughts.len());
        for bank in &banks[1..] {
            thought_maps.push(compute_score_map(
                tape,
                feats.dense,
                feats.grid_h,
                feats.grid_w,
                bank,
                self.config.normalize_scores,
            )?);
        }
        let final_map = match thought_maps.last() {
            Some(&m) => m,
            None => compute_score_map(
                tape,
                feats.dense,
                feats.grid_h,
                feats.grid_w,
                &banks[0],
                self.config.normalize_scores,
            )?,
        };

        let image_leaf = tape.leaf(
            image.to_vec(),
            vec![self.config.image_h, self.config.image_w, 3],
            false,
        )?;
        let decode_logits = self.decoder.decode(
            tape,
            bind,
            &final_map,
            image_leaf,
            self.config.image_h,
            self.config.image_w,
        )?;

        Ok(SampleForward {
            dense: feats.dense,
            thoughts,
            banks,
            final_map,
            thought_maps,
            decode_logits,
        })
    }

    /// Training loss for one sample: score-map loss plus lambda-weighted
    /// pixel-text matching plus the full-resolution decoder loss.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cache: &mut HashMap<String, TensorId>,
        sample: &SegSample,
        chain: &PromptChain,
        weights: &LossWeights,
    ) -> Result<TensorId> {
        let fwd = self.forward(tape, bind, cache, &sample.image, chain)?;
        let labels_low = crate::matching::downsample_labels(
            &sample.mask,
            sample.height,
            sample.width,
            self.config.patch_size,
            self.taxonomy.len(),
        )?;

        let prompts = if self.config.ptm_use_thoughts && !fwd.thoughts.is_empty() {
            tape.concat_rows(&fwd.thoughts)?
        } else {
            fwd.banks.last().unwrap().values
        };
        let mut loss = total_loss(
            tape,
            &fwd.final_map,
            &labels_low,
            fwd.dense,
            prompts,
            weights.lambda,
            weights.tau,
            weights.reduction,
        )?;

        if weights.decoder_loss_weight > 0.0 {
            let labels_full: Vec<usize> = sample.mask.iter().map(|&m| m as usize).collect();
            let full_map = ScoreMap {
                values: fwd.decode_logits,
                grid_h: sample.height,
                grid_w: sample.width,
                num_classes: self.taxonomy.len(),
            };
            let dec_loss = segmentation_loss(tape, &full_map, &labels_full, weights.tau)?;
            let weighted = tape.scale(dec_loss, weights.decoder_loss_weight);
            loss = tape.add(loss, weighted)?;
        }
        Ok(loss)
    }

    /// Standalone pixel-text matching loss against the refined bank, exposed
    /// for tests and the gradient-check suite.
    pub fn ptm_loss_only(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cache: &mut HashMap<String, TensorId>,
        image: &[f64],
        chain: &PromptChain,
        reduction: Reduction,
    ) -> Result<TensorId> {
        let fwd = self.forward(tape, bind, cache, image, chain)?;
        pixel_text_matching_loss(tape, fwd.dense, fwd.banks.last().unwrap().values, reduction)
    }
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub taxonomy: ClassTaxonomy,
    pub vocab_words: Vec<String>,
    /// Training configuration the checkpoint was produced with, kept so
    /// evaluation defaults to the same prompting mode and temperatures.
    pub train_config: crate::train::TrainConfig,
    pub params: Vec<ParamEntry>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl CpSegModel {
    pub fn save(&self, path: &Path, train_config: &crate::train::TrainConfig) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            taxonomy: self.taxonomy.clone(),
            vocab_words: (0..self.tokenizer.vocab_size() - crate::encoders::tokenizer::RESERVED)
                .map(|i| {
                    self.tokenizer
                        .decode(&[crate::encoders::tokenizer::RESERVED + i])
                })
                .collect(),
            train_config: train_config.clone(),
            params: self.store.export(),
        };
        let json = serde_json::to_string(&ckpt).map_err(|e| CpSegError::Serde(e.to_string()))?;
        fs::write(path, json).map_err(|e| CpSegError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, crate::train::TrainConfig)> {
        let text = fs::read_to_string(path).map_err(|e| CpSegError::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CpSegError::Serde(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CpSegError::Validation(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let tokenizer = Tokenizer::from_words(ckpt.vocab_words, ckpt.config.max_len);
        let mut model = Self::with_tokenizer(ckpt.config, ckpt.taxonomy, tokenizer, 0)?;
        model.store.load_values(&ckpt.params)?;
        Ok((model, ckpt.train_config))
    }
}

#[cfg(test)]
mod tests;
