//! ViT-style vision encoder: non-overlapping patch projection, class token,
//! learned positional embeddings, transformer blocks, and a dense feature
//! grid plus a global image feature.

use super::blocks::{LayerNormParams, TransformerBlock};
use crate::error::{CpSegError, Result};
use crate::rng::Rng;
use crate::tensor::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch_proj: ParamId,
    pub patch_bias: ParamId,
    pub class_token: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNormParams,
    pub dim: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
}

/// Dense grid and global feature for one image.
#[derive(Debug, Clone, Copy)]
pub struct VisionFeatures {
    /// `[grid_h * grid_w, d]`, row-major over the patch grid.
    pub dense: TensorId,
    /// `[1, d]` class-token feature.
    pub global: TensorId,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Flatten an `[h, w, 3]` image into `[num_patches, p*p*3]` rows, patch-major.
pub fn patchify(image: &[f64], h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(gh * gw * p * p * CHANNELS);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * w + px * p + dx) * CHANNELS;
                    out.extend_from_slice(&image[base..base + CHANNELS]);
                }
            }
        }
    }
    out
}

impl VisionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        image_h: usize,
        image_w: usize,
        patch_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0 {
            return Err(CpSegError::Shape(format!(
                "image {image_h}x{image_w} not divisible by patch size {patch_size}"
            )));
        }
        let grid = (image_h / patch_size) * (image_w / patch_size);
        let patch_dim = patch_size * patch_size * CHANNELS;
        let patch_proj = store.register(
            &format!("{prefix}.patch_proj"),
            &[patch_dim, dim],
            Init::ScaledUniform { fan_in: patch_dim },
            rng,
        )?;
        let patch_bias = store.register(&format!("{prefix}.patch_bias"), &[dim], Init::Zeros, rng)?;
        let class_token = store.register(
            &format!("{prefix}.class_token"),
            &[1, dim],
            Init::ScaledUniform { fan_in: dim },
            rng,
        )?;
        let positional = store.register(
            &format!("{prefix}.positional"),
            &[1 + grid, dim],
            Init::ScaledUniform { fan_in: dim },
            rng,
        )?;
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), dim, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormParams::new(store, &format!("{prefix}.ln_final"), dim, rng)?;
        Ok(VisionEncoder {
            patch_proj,
            patch_bias,
            class_token,
            positional,
            blocks,
            final_ln,
            dim,
            patch_size,
            image_h,
            image_w,
        })
    }

    /// Encode an `[h, w, 3]` image (values in [0,1]) into dense patch
    /// features and a global feature.
    pub fn encode(&self, tape: &mut Tape, bind: &Binding, image: &[f64]) -> Result<VisionFeatures> {
        let (h, w, p) = (self.image_h, self.image_w, self.patch_size);
        if image.len() != h * w * CHANNELS {
            return Err(CpSegError::Shape(format!(
                "image has {} values, expected {}x{}x{}",
                image.len(),
                h,
                w,
                CHANNELS
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let grid = gh * gw;
        let patches = tape.leaf(patchify(image, h, w, p), vec![grid, p * p * CHANNELS], false)?;
        let tok = tape.matmul(patches, bind.get(self.patch_proj))?;
        let tok = tape.add_bias(tok, bind.get(self.patch_bias))?;
        let seq = tape.concat_rows(&[bind.get(self.class_token), tok])?;
        let mut x = tape.add(seq, bind.get(self.positional))?;
        for block in &self.blocks {
            x = block.forward(tape, bind, x)?;
        }
        let x = self.final_ln.forward(tape, bind, x)?;
        let global = tape.slice_rows(x, 0, 1)?;
        let dense = tape.slice_rows(x, 1, grid)?;
        Ok(VisionFeatures {
            dense,
            global,
            grid_h: gh,
            grid_w: gw,
        })
    }
}
