//! Training loop, optimizers, and evaluation.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

use crate::data::{ClassTaxonomy, SegSample};
use crate::decoder::predict;
use crate::error::{CpSegError, Result};
use crate::matching::Reduction;
use crate::metrics::{add_confusion, confusion_matrix, metrics_from_confusion, MetricsReport};
use crate::model::{CpSegModel, LossWeights, ModelConfig};
use crate::prompt::{self, PromptChain, PromptMode};
use crate::rng::Rng;
use crate::tensor::params::{Binding, ParamStore};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_tasks() -> usize {
    1
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_lambda() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.07
}
fn default_batch() -> usize {
    8
}
fn default_seed() -> u64 {
    7
}
fn default_mode() -> PromptMode {
    PromptMode::ChainOfThought
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_embed() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_patch() -> usize {
    4
}
fn default_max_len() -> usize {
    16
}
fn default_pool() -> usize {
    16
}
fn default_dec_weight() -> f64 {
    1.0
}
fn default_reduction() -> String {
    "mean".into()
}

/// Everything a run needs; field names double as the config-file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub prompt_mode: PromptMode,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub text_layers: usize,
    #[serde(default = "default_layers")]
    pub vision_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    /// Samples per task; 0 splits the dataset evenly across tasks.
    #[serde(default)]
    pub samples_per_task: usize,
    #[serde(default = "default_dec_weight")]
    pub decoder_loss_weight: f64,
    /// "mean" or "sum".
    #[serde(default = "default_reduction")]
    pub ptm_reduction: String,
    #[serde(default)]
    pub ptm_use_thoughts: bool,
    #[serde(default)]
    pub freeze_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // The learning rate may be zero (a zero step size is a well-defined
        // degenerate run) but never negative or non-finite.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CpSegError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.tau <= 0.0 {
            return Err(CpSegError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(CpSegError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.tasks < 1 || self.epochs_per_task < 1 {
            return Err(CpSegError::Config(
                "tasks and epochs_per_task must be at least 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(CpSegError::Config("batch_size must be at least 1".into()));
        }
        self.reduction()?;
        Ok(())
    }

    pub fn reduction(&self) -> Result<Reduction> {
        match self.ptm_reduction.to_ascii_lowercase().as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(CpSegError::Config(format!("unknown ptm_reduction {other}"))),
        }
    }

    pub fn model_config(&self, image_h: usize, image_w: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            text_layers: self.text_layers,
            vision_layers: self.vision_layers,
            heads: self.heads,
            patch_size: self.patch_size,
            max_len: self.max_len,
            pool_size: self.pool_size,
            image_h,
            image_w,
            normalize_scores: true,
            ptm_use_thoughts: self.ptm_use_thoughts,
            freeze_text: self.freeze_text,
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            tau: self.tau,
            lambda: self.lambda,
            reduction: self.reduction()?,
            decoder_loss_weight: self.decoder_loss_weight,
        })
    }
}

// ── optimizers ──────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.entries().map(|(_, e)| e.data.len()).collect();
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Apply one update. `grads` must hold one gradient per parameter, in
    /// store order; parameters absent from the graph use zero gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(CpSegError::Contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let ids: Vec<_> = store.entries().map(|(id, e)| (id, e.trainable)).collect();
        for (slot, (pid, trainable)) in ids.into_iter().enumerate() {
            if !trainable {
                continue;
            }
            let g = &grads[slot];
            if g.len() != store.data(pid).len() {
                return Err(CpSegError::Contract(format!(
                    "gradient {slot} has {} values for a parameter of {}",
                    g.len(),
                    store.data(pid).len()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gv) in store.data_mut(pid).iter_mut().zip(g) {
                        *p -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[slot];
                    let v = &mut self.v[slot];
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for (i, p) in store.data_mut(pid).iter_mut().enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Read gradients off the tape in store order, zeros for untouched leaves.
pub fn collect_grads(tape: &Tape, binding: &Binding, store: &ParamStore) -> Vec<Vec<f64>> {
    store
        .entries()
        .map(|(pid, e)| {
            tape.grad(binding.get(pid))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; e.data.len()])
        })
        .collect()
}

// ── training ────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: CpSegModel,
    /// Mean training loss per epoch, length `tasks * epochs_per_task`.
    pub loss_trace: Vec<f64>,
}

/// Resolve a sample's chain for this pass: mode selection, then the
/// relevance filter. A chain that filters to nothing falls back to the
/// generic question-only chain.
fn chain_for(
    mode: PromptMode,
    sample: &SegSample,
    taxonomy: &ClassTaxonomy,
    rng: &mut Rng,
) -> PromptChain {
    let chain = prompt::chain_modes(mode, sample, rng);
    let nodes: Vec<_> = chain
        .nodes
        .into_iter()
        .filter(|n| prompt::verify_relevance(n, sample, taxonomy))
        .collect();
    if nodes.is_empty() {
        prompt::generic_chain(taxonomy)
    } else {
        PromptChain { nodes }
    }
}

pub fn train(config: &TrainConfig, samples: &[SegSample], taxonomy: &ClassTaxonomy) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(CpSegError::Config("training dataset is empty".into()));
    }
    let (h, w) = (samples[0].height, samples[0].width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(CpSegError::Config("training samples have mixed image sizes".into()));
    }

    let corpus: Vec<String> = samples
        .iter()
        .flat_map(|s| s.prompt_records.iter().map(|n| n.sentence()))
        .collect();
    let mut model = CpSegModel::new(config.model_config(h, w), taxonomy.clone(), &corpus, config.seed)?;
    let weights = config.loss_weights()?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.store);
    let mut rng = Rng::new(config.seed ^ 0x5eed_1234_abcd_ef00);

    let per_task = if config.samples_per_task > 0 {
        config.samples_per_task.min(samples.len())
    } else {
        samples.len().div_ceil(config.tasks)
    };

    let mut loss_trace = Vec::with_capacity(config.tasks * config.epochs_per_task);
    for task in 0..config.tasks {
        let start = (task * per_task).min(samples.len());
        let end = ((task + 1) * per_task).min(samples.len());
        let task_samples = if config.tasks == 1 {
            samples
        } else {
            &samples[start..end]
        };
        if task_samples.is_empty() {
            return Err(CpSegError::Config(format!(
                "task {task} received no samples (dataset of {}, {per_task} per task)",
                samples.len()
            )));
        }
        for epoch in 0..config.epochs_per_task {
            let mut order: Vec<usize> = (0..task_samples.len()).collect();
            rng.shuffle(&mut order);

            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for batch in order.chunks(config.batch_size) {
                let mut tape = Tape::new();
                let binding = model.bind(&mut tape)?;
                let mut cache = HashMap::new();
                let mut sample_losses = Vec::with_capacity(batch.len());
                for &idx in batch {
                    let sample = &task_samples[idx];
                    let chain = chain_for(config.prompt_mode, sample, taxonomy, &mut rng);
                    sample_losses.push(model.sample_loss(
                        &mut tape,
                        &binding,
                        &mut cache,
                        sample,
                        &chain,
                        &weights,
                    )?);
                }
                let mut batch_loss = sample_losses[0];
                for &l in &sample_losses[1..] {
                    batch_loss = tape.add(batch_loss, l)?;
                }
                let batch_loss = tape.scale(batch_loss, 1.0 / batch.len() as f64);

                let loss_value = tape.value(batch_loss);
                if !loss_value.is_finite() {
                    return Err(CpSegError::Numeric(format!(
                        "training diverged: loss {loss_value} at task {task}, epoch {epoch}, step {}",
                        seen / config.batch_size
                    )));
                }
                tape.backward(batch_loss)?;
                let grads = collect_grads(&tape, &binding, &model.store);
                optimizer.step(&mut model.store, &grads)?;

                epoch_loss += loss_value * batch.len() as f64;
                seen += batch.len();
            }
            loss_trace.push(epoch_loss / seen as f64);
        }
    }
    Ok(TrainOutcome { model, loss_trace })
}

// ── evaluation ──────────────────────────────────────────────────────

/// Evaluate a model on a dataset. Prompt chains come from each sample's
/// stored records under the given mode; Random-mode draws are derived per
/// sample so evaluation is deterministic.
pub fn evaluate(
    model: &CpSegModel,
    mode: PromptMode,
    samples: &[SegSample],
    eval_seed: u64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(CpSegError::Config("evaluation dataset is empty".into()));
    }
    let k = model.taxonomy.len();
    let start = Instant::now();
    let mut conf = vec![0u64; k * k];
    for (idx, sample) in samples.iter().enumerate() {
        if sample.mask.iter().any(|&m| m as usize >= k) {
            return Err(CpSegError::Config(format!(
                "sample {} has labels outside the checkpoint taxonomy of {k} classes",
                sample.image_id
            )));
        }
        let mut rng = Rng::derive(eval_seed ^ 0xe7a1_0000_0000_0000, idx as u64);
        let chain = chain_for(mode, sample, &model.taxonomy, &mut rng);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape)?;
        let mut cache = HashMap::new();
        let fwd = model.forward(&mut tape, &binding, &mut cache, &sample.image, &chain)?;
        let mask = predict(tape.data(fwd.decode_logits), sample.height, sample.width, k)?;
        let part = confusion_matrix(&sample.mask, &mask, k)?;
        add_confusion(&mut conf, &part);
    }
    let names: Vec<String> = model.taxonomy.names().iter().map(|s| s.to_string()).collect();
    let mut report = metrics_from_confusion(&conf, &names);
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Run segmentation on one image, returning the mask and the per-thought
/// score-map snapshots (values copied off the tape).
pub struct SegmentationOutput {
    pub mask: Vec<u8>,
    pub thought_maps: Vec<Vec<f64>>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seconds: f64,
}

pub fn segment_image(model: &CpSegModel, image: &[f64], chain: &PromptChain) -> Result<SegmentationOutput> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape)?;
    let mut cache = HashMap::new();
    let fwd = model.forward(&mut tape, &binding, &mut cache, image, chain)?;
    let k = model.taxonomy.len();
    let mask = predict(
        tape.data(fwd.decode_logits),
        model.config.image_h,
        model.config.image_w,
        k,
    )?;
    let thought_maps = fwd
        .thought_maps
        .iter()
        .map(|m| tape.data(m.values).to_vec())
        .collect();
    Ok(SegmentationOutput {
        mask,
        thought_maps,
        grid_h: fwd.final_map.grid_h,
        grid_w: fwd.final_map.grid_w,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
