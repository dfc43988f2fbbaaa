//! Pixel-text score maps and the two training losses.
//!
//! Dense patch features are matched against a bank of per-class text
//! embeddings to produce per-pixel per-class similarity logits. The bank is
//! refined once per chain thought by a small transformer decoder block, so
//! the map sharpens as thoughts arrive. The segmentation loss is
//! temperature-scaled cross-entropy on the score map; the pixel-text
//! matching loss is the negated accumulated pixel-prompt similarity.

use crate::encoders::blocks::{AttentionParams, LayerNormParams, MlpParams};
use crate::error::{CpSegError, Result};
use crate::rng::Rng;
use crate::tensor::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// Default temperature for the segmentation loss.
pub const DEFAULT_TAU: f64 = 0.07;

/// Per-pixel per-class similarity logits at patch-grid resolution.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMap {
    /// `[grid_h, grid_w, num_classes]` logits.
    pub values: TensorId,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
}

/// One text embedding per segmentation class, living on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ClassTextBank {
    /// `[num_classes, d]`.
    pub values: TensorId,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Similarity of every dense feature against every class embedding.
/// Cosine when `normalize` is set (the default path), raw dot product
/// otherwise.
pub fn compute_score_map(
    tape: &mut Tape,
    dense: TensorId,
    grid_h: usize,
    grid_w: usize,
    bank: &ClassTextBank,
    normalize: bool,
) -> Result<ScoreMap> {
    let d = tape.shape(dense)[1];
    let bd = tape.shape(bank.values)[1];
    if d != bd {
        return Err(CpSegError::Dimension {
            op: "compute_score_map",
            lhs: tape.shape(dense).to_vec(),
            rhs: tape.shape(bank.values).to_vec(),
        });
    }
    let (px, cls) = if normalize {
        (
            tape.l2_normalize_rows(dense)?,
            tape.l2_normalize_rows(bank.values)?,
        )
    } else {
        (dense, bank.values)
    };
    let clst = tape.transpose(cls)?;
    let flat = tape.matmul(px, clst)?;
    let values = tape.reshape(flat, vec![grid_h, grid_w, bank.num_classes])?;
    Ok(ScoreMap {
        values,
        grid_h,
        grid_w,
        num_classes: bank.num_classes,
    })
}

/// One refinement step: the class bank attends to a thought embedding inside
/// a transformer-decoder-style block (self-attention over classes, a gated
/// cross read of the thought, and an MLP, all residual).
#[derive(Debug, Clone)]
pub struct FusionBlock {
    self_ln: LayerNormParams,
    self_attn: AttentionParams,
    cross_ln: LayerNormParams,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    mlp_ln: LayerNormParams,
    mlp: MlpParams,
    dim: usize,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let w = Init::ScaledUniform { fan_in: dim };
        Ok(FusionBlock {
            self_ln: LayerNormParams::new(store, &format!("{prefix}.self_ln"), dim, rng)?,
            self_attn: AttentionParams::new(store, &format!("{prefix}.self_attn"), dim, heads, rng)?,
            cross_ln: LayerNormParams::new(store, &format!("{prefix}.cross_ln"), dim, rng)?,
            wq: store.register(&format!("{prefix}.cross_wq"), &[dim, dim], w, rng)?,
            bq: store.register(&format!("{prefix}.cross_bq"), &[dim], Init::Zeros, rng)?,
            wk: store.register(&format!("{prefix}.cross_wk"), &[dim, dim], w, rng)?,
            bk: store.register(&format!("{prefix}.cross_bk"), &[dim], Init::Zeros, rng)?,
            wv: store.register(&format!("{prefix}.cross_wv"), &[dim, dim], w, rng)?,
            bv: store.register(&format!("{prefix}.cross_bv"), &[dim], Init::Zeros, rng)?,
            wo: store.register(&format!("{prefix}.cross_wo"), &[dim, dim], w, rng)?,
            bo: store.register(&format!("{prefix}.cross_bo"), &[dim], Init::Zeros, rng)?,
            mlp_ln: LayerNormParams::new(store, &format!("{prefix}.mlp_ln"), dim, rng)?,
            mlp: MlpParams::new(store, &format!("{prefix}.mlp"), dim, rng)?,
            dim,
        })
    }

    /// Zero the three residual output projections so refinement starts as the
    /// identity map.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for p in [self.self_attn.wo, self.self_attn.bo, self.wo, self.bo, self.mlp.w2, self.mlp.b2] {
            store.data_mut(p).fill(0.0);
        }
    }

    /// Fold one thought into the bank.
    pub fn refine_with_thought(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        bank: &ClassTextBank,
        thought: TensorId,
    ) -> Result<ClassTextBank> {
        if tape.shape(thought) != [1, self.dim] {
            return Err(CpSegError::Dimension {
                op: "refine_with_thought",
                lhs: tape.shape(bank.values).to_vec(),
                rhs: tape.shape(thought).to_vec(),
            });
        }
        let k = bank.num_classes;
        let mut x = bank.values;

        // Self-attention over the class rows.
        let normed = self.self_ln.forward(tape, bind, x)?;
        let (attn_out, _) = self.self_attn.self_attention(tape, bind, normed)?;
        x = tape.add(x, attn_out)?;

        // Gated cross read: each class row splits its attention between the
        // thought and itself, so the update is class-dependent.
        let normed = self.cross_ln.forward(tape, bind, x)?;
        let q = tape.matmul(normed, bind.get(self.wq))?;
        let q = tape.add_bias(q, bind.get(self.bq))?;
        let key_thought = tape.matmul(thought, bind.get(self.wk))?;
        let key_thought = tape.add_bias(key_thought, bind.get(self.bk))?;
        let key_self = tape.matmul(normed, bind.get(self.wk))?;
        let key_self = tape.add_bias(key_self, bind.get(self.bk))?;
        let val_thought = tape.matmul(thought, bind.get(self.wv))?;
        let val_thought = tape.add_bias(val_thought, bind.get(self.bv))?;
        let val_self = tape.matmul(normed, bind.get(self.wv))?;
        let val_self = tape.add_bias(val_self, bind.get(self.bv))?;

        let scale = 1.0 / (self.dim as f64).sqrt();
        let kt = tape.transpose(key_thought)?;
        let score_thought = tape.matmul(q, kt)?;
        let score_thought = tape.scale(score_thought, scale);
        let qk_self = tape.mul(q, key_self)?;
        let score_self = tape.row_sums(qk_self)?;
        let score_self = tape.scale(score_self, scale);
        let scores = tape.concat_cols(&[score_thought, score_self])?;
        let alpha = tape.softmax_last(scores)?;
        let alpha_thought = tape.slice_cols(alpha, 0, 1)?;
        let alpha_self = tape.slice_cols(alpha, 1, 1)?;
        let thought_rep = tape.repeat_rows(val_thought, k)?;
        let from_thought = tape.mul_colvec(thought_rep, alpha_thought)?;
        let from_self = tape.mul_colvec(val_self, alpha_self)?;
        let mixed = tape.add(from_thought, from_self)?;
        let projected = tape.matmul(mixed, bind.get(self.wo))?;
        let projected = tape.add_bias(projected, bind.get(self.bo))?;
        x = tape.add(x, projected)?;

        // Position-wise MLP.
        let normed = self.mlp_ln.forward(tape, bind, x)?;
        let mlp_out = self.mlp.forward(tape, bind, normed)?;
        x = tape.add(x, mlp_out)?;

        Ok(ClassTextBank {
            values: x,
            num_classes: k,
        })
    }

    /// Fold a sequence of thoughts in order. Zero thoughts is the identity.
    pub fn refine_chain(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        bank: &ClassTextBank,
        thoughts: &[TensorId],
    ) -> Result<Vec<ClassTextBank>> {
        let mut banks = vec![*bank];
        for &t in thoughts {
            let next = self.refine_with_thought(tape, bind, banks.last().unwrap(), t)?;
            banks.push(next);
        }
        Ok(banks)
    }
}

/// Negated accumulated cosine similarity between every pixel feature and
/// every prompt embedding. `Sum` is the literal accumulation; `Mean` divides
/// by the number of pairs.
pub fn pixel_text_matching_loss(
    tape: &mut Tape,
    pixels: TensorId,
    prompts: TensorId,
    reduction: Reduction,
) -> Result<TensorId> {
    let (n, d) = (tape.shape(pixels)[0], tape.shape(pixels)[1]);
    let (m, pd) = (tape.shape(prompts)[0], tape.shape(prompts)[1]);
    if n == 0 || m == 0 {
        return Err(CpSegError::Contract(
            "pixel-text matching loss needs at least one pixel and one prompt".into(),
        ));
    }
    if d != pd {
        return Err(CpSegError::Dimension {
            op: "pixel_text_matching_loss",
            lhs: tape.shape(pixels).to_vec(),
            rhs: tape.shape(prompts).to_vec(),
        });
    }
    let px = tape.l2_normalize_rows(pixels)?;
    let pr = tape.l2_normalize_rows(prompts)?;
    let prt = tape.transpose(pr)?;
    let sims = tape.matmul(px, prt)?;
    let reduced = match reduction {
        Reduction::Sum => tape.sum_all(sims),
        Reduction::Mean => tape.mean_all(sims),
    };
    Ok(tape.scale(reduced, -1.0))
}

/// Temperature-scaled cross-entropy on a score map against downsampled
/// ground truth labels.
pub fn segmentation_loss(tape: &mut Tape, map: &ScoreMap, labels: &[usize], tau: f64) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(CpSegError::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = map.grid_h * map.grid_w;
    if labels.len() != n {
        return Err(CpSegError::Shape(format!(
            "{} labels for a {}x{} map",
            labels.len(),
            map.grid_h,
            map.grid_w
        )));
    }
    let flat = tape.reshape(map.values, vec![n, map.num_classes])?;
    let scaled = tape.scale(flat, 1.0 / tau);
    let probs = tape.softmax_last(scaled)?;
    tape.cross_entropy_probs(probs, labels)
}

/// `L_seg + lambda * L_PTM`. With `lambda == 0` this returns the
/// segmentation loss node itself, bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    map: &ScoreMap,
    labels: &[usize],
    pixels: TensorId,
    prompts: TensorId,
    lambda: f64,
    tau: f64,
    reduction: Reduction,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(CpSegError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let seg = segmentation_loss(tape, map, labels, tau)?;
    if lambda == 0.0 {
        return Ok(seg);
    }
    let ptm = pixel_text_matching_loss(tape, pixels, prompts, reduction)?;
    let weighted = tape.scale(ptm, lambda);
    tape.add(seg, weighted)
}

/// Majority-vote downsampling of a label mask by integer factor; ties go to
/// the smallest class id.
pub fn downsample_labels(mask: &[u8], height: usize, width: usize, factor: usize, num_classes: usize) -> Result<Vec<usize>> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(CpSegError::Shape(format!(
            "{height}x{width} mask not divisible by factor {factor}"
        )));
    }
    let (gh, gw) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts = vec![0usize; num_classes];
    for by in 0..gh {
        for bx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            for dy in 0..factor {
                for dx in 0..factor {
                    let v = mask[(by * factor + dy) * width + bx * factor + dx] as usize;
                    counts[v] += 1;
                }
            }
            let mut best = 0;
            for k in 1..num_classes {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}
