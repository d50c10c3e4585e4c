//! Dense per-pixel scoring of a frame with a trained patch classifier.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_io::{save_depth_frame, Grid, MaskFrame, MaskLabel};
use crate::error::{Error, Result};
use crate::nn::{Model, Scalar, Tensor};
use crate::patches::extract_patch_into;
use crate::preprocess::NormalizedFrame;

/// Foreground probability per pixel.
pub type ProbabilityMap = Grid<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub threshold: f64,
    /// Patches scored per forward call.
    pub pixel_batch: usize,
    /// Score every other row and column and copy each score to its 2x2
    /// block. Off by default.
    pub stride2: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            threshold: 0.5,
            pixel_batch: 256,
            stride2: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.pixel_batch == 0 {
            return Err(Error::InvalidConfig("pixel_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// `FG` exactly where `p >= threshold`.
pub fn threshold_map(probs: &ProbabilityMap, threshold: f64) -> MaskFrame {
    probs.map(|&p| {
        if p >= threshold {
            MaskLabel::Foreground
        } else {
            MaskLabel::Background
        }
    })
}

/// Scores the patches centered on `pixels` (row, col), in order.
pub fn score_pixels<S: Scalar>(
    model: &Model<S>,
    frame: &NormalizedFrame,
    bg: &NormalizedFrame,
    pixels: &[(usize, usize)],
    pixel_batch: usize,
) -> Result<Vec<f64>> {
    frame.ensure_same_dims(bg, "frame vs background")?;
    if pixel_batch == 0 {
        return Err(Error::InvalidConfig("pixel_batch must be at least 1".into()));
    }
    let arch = model.architecture();
    if arch.in_channels != 2 {
        return Err(Error::InvalidConfig(format!(
            "patch scoring needs a 2-channel model, got {}",
            arch.in_channels
        )));
    }
    let t = arch.input_size;
    let per = 2 * t * t;
    let chunks: Vec<Vec<f64>> = pixels
        .par_chunks(pixel_batch)
        .map(|chunk| {
            let mut buf = vec![S::zero(); chunk.len() * per];
            for (&(i, j), out) in chunk.iter().zip(buf.chunks_exact_mut(per)) {
                extract_patch_into(frame, bg, i, j, t, out)?;
            }
            let x = Tensor::from_vec(&[chunk.len(), 2, t, t], buf)?;
            let probs = model.forward_eval(&x)?;
            Ok(probs.into_iter().map(S::as_f64).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Probability map and thresholded mask for one normalized frame.
pub fn predict_frame<S: Scalar>(
    model: &Model<S>,
    frame: &NormalizedFrame,
    bg: &NormalizedFrame,
    cfg: &InferConfig,
) -> Result<(ProbabilityMap, MaskFrame)> {
    cfg.validate()?;
    frame.ensure_same_dims(bg, "frame vs background")?;
    let (w, h) = frame.dims();
    let step = if cfg.stride2 { 2 } else { 1 };
    let pixels: Vec<(usize, usize)> = (0..h)
        .step_by(step)
        .flat_map(|i| (0..w).step_by(step).map(move |j| (i, j)))
        .collect();
    let scores = score_pixels(model, frame, bg, &pixels, cfg.pixel_batch)?;
    let probs = if cfg.stride2 {
        let sw = w.div_ceil(2);
        let mut data = Vec::with_capacity(w * h);
        for i in 0..h {
            for j in 0..w {
                data.push(scores[(i / 2) * sw + j / 2]);
            }
        }
        Grid::from_vec(w, h, data)?
    } else {
        Grid::from_vec(w, h, scores)?
    };
    let mask = threshold_map(&probs, cfg.threshold);
    Ok((probs, mask))
}

/// Difference-to-background baseline: FG where both pixels are valid and
/// differ by more than `tau`.
pub fn predict_baseline_avg(
    frame: &NormalizedFrame,
    bg: &NormalizedFrame,
    tau: f64,
) -> Result<MaskFrame> {
    frame.ensure_same_dims(bg, "frame vs background")?;
    let data = frame
        .data
        .iter()
        .zip(&bg.data)
        .map(|(&f, &b)| {
            if f != 0.0 && b != 0.0 && (f - b).abs() > tau {
                MaskLabel::Foreground
            } else {
                MaskLabel::Background
            }
        })
        .collect();
    Grid::from_vec(frame.width, frame.height, data)
}

/// Writes `round(p * 65535)` as a 16-bit PGM.
pub fn save_probability_map(probs: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let img = probs.map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16);
    save_depth_frame(&img, path)
}
