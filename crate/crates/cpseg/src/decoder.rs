//! Decoder head: bilinear upsampling of the score map to image resolution
//! followed by one residual 3x3 refinement convolution, then per-pixel
//! argmax into a segmentation mask.
//!
//! The refinement convolution sees the upsampled logits concatenated with
//! the RGB image. Score maps live at patch-grid resolution, so without the
//! image the head could never recover boundaries finer than a patch; the
//! thin roads and small vehicles in the data make that resolution cap a
//! hard accuracy ceiling. The convolution is zero-initialized, so decoding
//! starts as plain upsampling.

use crate::error::{CpSegError, Result};
use crate::matching::ScoreMap;
use crate::rng::Rng;
use crate::tensor::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub num_classes: usize,
}

impl DecoderHead {
    pub fn new(store: &mut ParamStore, prefix: &str, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let conv_w = store.register(
            &format!("{prefix}.conv_w"),
            &[3, 3, num_classes + IMAGE_CHANNELS, num_classes],
            Init::Zeros,
            rng,
        )?;
        let conv_b = store.register(&format!("{prefix}.conv_b"), &[num_classes], Init::Zeros, rng)?;
        Ok(DecoderHead {
            conv_w,
            conv_b,
            num_classes,
        })
    }

    /// Upsample the score map to `(target_h, target_w)` and refine. `image`
    /// is the `[target_h, target_w, 3]` input image on the tape.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        map: &ScoreMap,
        image: TensorId,
        target_h: usize,
        target_w: usize,
    ) -> Result<TensorId> {
        if map.grid_h == 0 || target_h % map.grid_h != 0 || target_w % map.grid_w != 0 {
            return Err(CpSegError::Shape(format!(
                "target {target_h}x{target_w} is not an integer multiple of the {}x{} map",
                map.grid_h, map.grid_w
            )));
        }
        let factor = target_h / map.grid_h;
        if factor != target_w / map.grid_w {
            return Err(CpSegError::Shape(format!(
                "anisotropic upsampling {}x{} -> {target_h}x{target_w}",
                map.grid_h, map.grid_w
            )));
        }
        if tape.shape(image) != [target_h, target_w, IMAGE_CHANNELS] {
            return Err(CpSegError::Shape(format!(
                "decoder image has shape {:?}, expected [{target_h}, {target_w}, {IMAGE_CHANNELS}]",
                tape.shape(image)
            )));
        }
        let up = tape.bilinear_upsample(map.values, factor)?;
        let n = target_h * target_w;
        let up_flat = tape.reshape(up, vec![n, map.num_classes])?;
        let img_flat = tape.reshape(image, vec![n, IMAGE_CHANNELS])?;
        let stacked = tape.concat_cols(&[up_flat, img_flat])?;
        let conv_in = tape.reshape(stacked, vec![target_h, target_w, map.num_classes + IMAGE_CHANNELS])?;
        let refined = tape.conv3x3(conv_in, bind.get(self.conv_w), bind.get(self.conv_b))?;
        tape.add(up, refined)
    }
}

/// Per-pixel argmax over `[h, w, k]` logits; ties go to the smallest class
/// id.
pub fn predict(logits: &[f64], height: usize, width: usize, num_classes: usize) -> Result<Vec<u8>> {
    if logits.len() != height * width * num_classes {
        return Err(CpSegError::Shape(format!(
            "{} logits for a {height}x{width}x{num_classes} volume",
            logits.len()
        )));
    }
    let mut mask = Vec::with_capacity(height * width);
    for pix in logits.chunks(num_classes) {
        let mut best = 0;
        let mut best_v = pix[0];
        if !best_v.is_finite() && best_v.is_nan() {
            return Err(CpSegError::Numeric("NaN logit in prediction".into()));
        }
        for (k, &v) in pix.iter().enumerate().skip(1) {
            if v.is_nan() {
                return Err(CpSegError::Numeric("NaN logit in prediction".into()));
            }
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        mask.push(best as u8);
    }
    Ok(mask)
}
