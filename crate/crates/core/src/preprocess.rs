//! Depth statistics, extended min-max normalization and the valid-average
//! background.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_io::{DepthFrame, Grid, VideoSequence};
use crate::error::{Error, Result};

/// Normalized depth in `[0, 1]`; 0 is reserved for absent pixels.
pub type NormalizedFrame = Grid<f64>;

/// Depth range of a sequence, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthStats {
    /// Smallest nonzero depth.
    pub min_valid: u16,
    /// Largest depth.
    pub max: u16,
}

impl DepthStats {
    pub fn new(min_valid: u16, max: u16) -> Result<Self> {
        if min_valid == 0 || min_valid > max {
            return Err(Error::InvalidConfig(format!(
                "depth stats need 0 < min_valid <= max, got {min_valid}..{max}"
            )));
        }
        Ok(DepthStats { min_valid, max })
    }

    pub fn merge(self, other: DepthStats) -> DepthStats {
        DepthStats {
            min_valid: self.min_valid.min(other.min_valid),
            max: self.max.max(other.max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormConfig {
    /// Offset in millimeters separating the closest valid depth from the
    /// absent value.
    pub alpha: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { alpha: 10.0 }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The JSON document persisted next to the background image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub min_valid: u16,
    pub max: u16,
    pub alpha: f64,
}

impl StatsFile {
    pub fn new(stats: DepthStats, cfg: NormConfig) -> Self {
        StatsFile {
            min_valid: stats.min_valid,
            max: stats.max,
            alpha: cfg.alpha,
        }
    }

    pub fn stats(&self) -> Result<DepthStats> {
        DepthStats::new(self.min_valid, self.max)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn frame_stats(frame: &DepthFrame) -> Option<DepthStats> {
    let mut min_valid = u16::MAX;
    let mut max = 0u16;
    let mut any = false;
    for &v in &frame.data {
        if v != 0 {
            any = true;
            min_valid = min_valid.min(v);
        }
        max = max.max(v);
    }
    any.then_some(DepthStats { min_valid, max })
}

/// Minimum over nonzero pixels and maximum over all pixels of `frames`.
pub fn compute_frame_stats(frames: &[DepthFrame]) -> Result<DepthStats> {
    frames
        .par_iter()
        .filter_map(frame_stats)
        .reduce_with(DepthStats::merge)
        .ok_or(Error::NoValidDepth)
}

pub fn compute_depth_stats(seq: &VideoSequence) -> Result<DepthStats> {
    compute_frame_stats(&seq.frames)
}

/// Lower bound of every valid normalized value: `alpha / (max - min_valid + alpha)`.
pub fn valid_floor(stats: DepthStats, cfg: NormConfig) -> f64 {
    cfg.alpha / (f64::from(stats.max) - f64::from(stats.min_valid) + cfg.alpha)
}

/// Normalizes one depth value. Absent (0) stays exactly 0; valid values map
/// affinely so that `min_valid - alpha` goes to 0 and `max` to 1.
#[inline]
pub fn normalize_value(x: u16, stats: DepthStats, cfg: NormConfig) -> f64 {
    if x == 0 {
        return 0.0;
    }
    let origin = f64::from(stats.min_valid) - cfg.alpha;
    let v = (f64::from(x) - origin) / (f64::from(stats.max) - origin);
    // only reachable for depths outside the stats range
    v.clamp(valid_floor(stats, cfg), 1.0)
}

pub fn normalize_frame(
    frame: &DepthFrame,
    stats: DepthStats,
    cfg: NormConfig,
) -> Result<NormalizedFrame> {
    cfg.validate()?;
    DepthStats::new(stats.min_valid, stats.max)?;
    Ok(frame.map(|&x| normalize_value(x, stats, cfg)))
}

/// How raw depth is mapped into network input space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Extended min-max normalization with sequence statistics.
    MinMax { stats: DepthStats, cfg: NormConfig },
    /// Plain `x / 65535` scaling (the untreated-input ablation arm).
    Raw,
}

impl Normalization {
    pub fn apply(&self, frame: &DepthFrame) -> Result<NormalizedFrame> {
        match *self {
            Normalization::MinMax { stats, cfg } => normalize_frame(frame, stats, cfg),
            Normalization::Raw => Ok(frame.map(|&x| f64::from(x) / 65535.0)),
        }
    }
}

/// Per-pixel mean over the nonzero observations of `frames`, rounded to the
/// nearest millimeter. Pixels never observed stay 0.
pub fn extract_background_from(frames: &[DepthFrame]) -> Result<DepthFrame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptySequence("background".into()))?;
    let (w, h) = first.dims();
    let n = w * h;
    let mut sums = vec![0u64; n];
    let mut counts = vec![0u32; n];
    for (k, f) in frames.iter().enumerate() {
        if f.dims() != (w, h) {
            return Err(Error::dims((w, h), f.dims(), format!("frame {k}")));
        }
        for ((s, c), &v) in sums.iter_mut().zip(counts.iter_mut()).zip(&f.data) {
            if v != 0 {
                *s += u64::from(v);
                *c += 1;
            }
        }
    }
    let data = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| {
            if c == 0 {
                0
            } else {
                let c = u64::from(c);
                // round half up; the mean of u16 values fits in u16
                ((s + c / 2) / c) as u16
            }
        })
        .collect();
    Ok(Grid {
        width: w,
        height: h,
        data,
    })
}

pub fn extract_background(seq: &VideoSequence) -> Result<DepthFrame> {
    extract_background_from(&seq.frames)
}

/// Output of [`preprocess_sequence`].
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub stats: DepthStats,
    pub background_raw: DepthFrame,
    pub background: NormalizedFrame,
    pub frames: Vec<NormalizedFrame>,
}

/// Extracts the background on raw depth, then normalizes it and every frame
/// with one set of sequence statistics.
pub fn preprocess_sequence(seq: &VideoSequence, cfg: NormConfig) -> Result<Preprocessed> {
    let stats = compute_depth_stats(seq)?;
    let background_raw = extract_background(seq)?;
    preprocess_with(seq, &background_raw, Normalization::MinMax { stats, cfg }, stats)
}

/// Normalizes a sequence against an already extracted background.
pub fn preprocess_with(
    seq: &VideoSequence,
    background_raw: &DepthFrame,
    norm: Normalization,
    stats: DepthStats,
) -> Result<Preprocessed> {
    background_raw.ensure_same_dims(&seq.frames[0], "background vs frames")?;
    let background = norm.apply(background_raw)?;
    let frames = seq
        .frames
        .par_iter()
        .map(|f| norm.apply(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(Preprocessed {
        stats,
        background_raw: background_raw.clone(),
        background,
        frames,
    })
}
