//! Two-channel patch extraction and training-set sampling.
//!
//! A patch for pixel `(i, j)` covers rows `i - T/2 ..= i + T/2 - 1` and
//! columns `j - T/2 ..= j + T/2 - 1`; coordinates outside the frame are
//! clamped to the nearest edge pixel. Channel 0 is the normalized input
//! frame, channel 1 the normalized background.

use std::borrow::Cow;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_io::{GtFrame, GtLabel, MaskFrame, VideoSequence};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::preprocess::{NormalizedFrame, Normalization};

pub const DATASET_MAGIC: [u8; 4] = *b"BGSD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `2 * T * T` values, channel-major.
    pub data: Vec<f32>,
    pub label: u8,
    /// `(frame index, row, col)` of the center pixel.
    pub origin: (u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub patch_size: usize,
    pub max_samples_per_frame: usize,
    /// Target fraction of foreground samples per frame.
    pub fg_fraction: f64,
    /// Share of the background samples drawn from pixels whose patch
    /// overlaps foreground (within `patch_size / 2`, Chebyshev).
    pub near_fg_fraction: f64,
    pub stride: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            patch_size: 40,
            max_samples_per_frame: 100,
            fg_fraction: 0.5,
            near_fg_fraction: 0.5,
            stride: 1,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        validate_patch_size(self.patch_size)?;
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::InvalidConfig(format!(
                "fg_fraction must lie in [0, 1], got {}",
                self.fg_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.near_fg_fraction) {
            return Err(Error::InvalidConfig(format!(
                "near_fg_fraction must lie in [0, 1], got {}",
                self.near_fg_fraction
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn validate_patch_size(t: usize) -> Result<()> {
    if t < 4 || !t.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "patch size must be even and >= 4, got {t}"
        )));
    }
    Ok(())
}

/// Fills `out` (length `2 * T * T`) with the patch centered on `(i, j)`.
pub fn extract_patch_into<S: Scalar>(
    frame: &NormalizedFrame,
    bg: &NormalizedFrame,
    i: usize,
    j: usize,
    t: usize,
    out: &mut [S],
) -> Result<()> {
    frame.ensure_same_dims(bg, "frame vs background")?;
    if i >= frame.height || j >= frame.width {
        return Err(Error::InvalidConfig(format!(
            "patch center ({i}, {j}) outside {}x{} frame",
            frame.width, frame.height
        )));
    }
    assert_eq!(out.len(), 2 * t * t, "patch buffer length");
    let (w, h) = (frame.width as isize, frame.height as isize);
    let half = (t / 2) as isize;
    let (plane0, plane1) = out.split_at_mut(t * t);
    for r in 0..t {
        let src_row = (i as isize - half + r as isize).clamp(0, h - 1) as usize;
        let f_row = &frame.data[src_row * frame.width..(src_row + 1) * frame.width];
        let b_row = &bg.data[src_row * bg.width..(src_row + 1) * bg.width];
        for c in 0..t {
            let src_col = (j as isize - half + c as isize).clamp(0, w - 1) as usize;
            plane0[r * t + c] = S::from_f64(f_row[src_col]);
            plane1[r * t + c] = S::from_f64(b_row[src_col]);
        }
    }
    Ok(())
}

pub fn extract_patch(
    frame: &NormalizedFrame,
    bg: &NormalizedFrame,
    i: usize,
    j: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; 2 * t * t];
    extract_patch_into(frame, bg, i, j, t, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelDecision {
    Keep(u8),
    Skip,
}

pub fn label_from_gt(gt: GtLabel) -> LabelDecision {
    match gt {
        GtLabel::Foreground => LabelDecision::Keep(1),
        GtLabel::Background | GtLabel::Shadow => LabelDecision::Keep(0),
        GtLabel::Unknown | GtLabel::OutsideRoi => LabelDecision::Skip,
    }
}

/// Label of pixel `idx`, accounting for the sequence ROI.
fn pixel_decision(gt: &GtFrame, roi: Option<&MaskFrame>, idx: usize) -> LabelDecision {
    if roi.is_some_and(|r| !r.data[idx].is_fg()) {
        return LabelDecision::Skip;
    }
    label_from_gt(gt.data[idx])
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

/// Whether each pixel has a foreground pixel within Chebyshev distance `r`.
fn near_foreground(gt: &GtFrame, r: usize) -> Vec<bool> {
    let (w, h) = gt.dims();
    // summed-area table of the foreground indicator
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for i in 0..h {
        for j in 0..w {
            let v = u32::from(gt.data[i * w + j] == GtLabel::Foreground);
            sat[(i + 1) * (w + 1) + j + 1] =
                v + sat[i * (w + 1) + j + 1] + sat[(i + 1) * (w + 1) + j] - sat[i * (w + 1) + j];
        }
    }
    let mut out = vec![false; w * h];
    for i in 0..h {
        let (r0, r1) = (i.saturating_sub(r), (i + r + 1).min(h));
        for j in 0..w {
            let (c0, c1) = (j.saturating_sub(r), (j + r + 1).min(w));
            let n = sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0]
                - sat[r0 * (w + 1) + c1]
                - sat[r1 * (w + 1) + c0];
            out[i * w + j] = n > 0;
        }
    }
    out
}

/// Chooses the pixel indices sampled from one frame.
fn sample_frame(
    gt: &GtFrame,
    roi: Option<&MaskFrame>,
    frame_index: usize,
    cfg: &SamplingConfig,
) -> Vec<(usize, u8)> {
    let near = near_foreground(gt, cfg.patch_size / 2);
    let mut fg = Vec::new();
    let mut bg_near = Vec::new();
    let mut bg_far = Vec::new();
    for row in (0..gt.height).step_by(cfg.stride) {
        for col in (0..gt.width).step_by(cfg.stride) {
            let idx = row * gt.width + col;
            match pixel_decision(gt, roi, idx) {
                LabelDecision::Keep(1) => fg.push(idx),
                LabelDecision::Keep(_) if near[idx] => bg_near.push(idx),
                LabelDecision::Keep(_) => bg_far.push(idx),
                LabelDecision::Skip => {}
            }
        }
    }
    let n_bg_avail = bg_near.len() + bg_far.len();
    let total = (fg.len() + n_bg_avail).min(cfg.max_samples_per_frame);
    let want_fg = (total as f64 * cfg.fg_fraction).round() as usize;
    let mut n_fg = want_fg.min(fg.len());
    let n_bg = (total - n_fg).min(n_bg_avail);
    // top up with foreground when background is scarce
    n_fg = (total - n_bg).min(fg.len());
    let want_near = (n_bg as f64 * cfg.near_fg_fraction).round() as usize;
    let mut n_near = want_near.min(bg_near.len());
    let n_far = (n_bg - n_near).min(bg_far.len());
    n_near = n_bg - n_far;

    let mut rng = frame_rng(cfg.seed, frame_index);
    let mut chosen: Vec<(usize, u8)> = Vec::with_capacity(total);
    for (pool, n, label) in [(&fg, n_fg, 1), (&bg_near, n_near, 0), (&bg_far, n_far, 0)] {
        chosen.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|k| (pool[k], label)));
    }
    chosen.sort_unstable();
    chosen
}

/// Samples labeled patches from the frames listed in `frame_indices`.
///
/// `frames` are the normalized frames of `seq` (same order), `bg` the
/// normalized background. Deterministic for a fixed seed.
pub fn generate_training_set(
    seq: &VideoSequence,
    bg: &NormalizedFrame,
    frames: &[NormalizedFrame],
    frame_indices: &[usize],
    cfg: &SamplingConfig,
) -> Result<Vec<PatchSample>> {
    if frames.len() != seq.len() {
        return Err(Error::InvalidConfig(format!(
            "{} normalized frames for a {}-frame sequence",
            frames.len(),
            seq.len()
        )));
    }
    sample_frames(seq, bg, frame_indices, cfg, |k| Ok(Cow::Borrowed(&frames[k])))
}

/// Like [`generate_training_set`], normalizing each sampled frame on the
/// fly instead of holding every normalized frame in memory.
pub fn generate_training_set_with(
    seq: &VideoSequence,
    bg: &NormalizedFrame,
    norm: &Normalization,
    frame_indices: &[usize],
    cfg: &SamplingConfig,
) -> Result<Vec<PatchSample>> {
    sample_frames(seq, bg, frame_indices, cfg, |k| norm.apply(&seq.frames[k]).map(Cow::Owned))
}

fn sample_frames<'a>(
    seq: &VideoSequence,
    bg: &NormalizedFrame,
    frame_indices: &[usize],
    cfg: &SamplingConfig,
    frame_at: impl Fn(usize) -> Result<Cow<'a, NormalizedFrame>> + Sync,
) -> Result<Vec<PatchSample>> {
    cfg.validate()?;
    let gt = seq.gt.as_ref().ok_or(Error::MissingGroundTruth)?;
    let t = cfg.patch_size;
    let per_frame = frame_indices
        .par_iter()
        .map(|&k| -> Result<Vec<PatchSample>> {
            if k >= seq.len() {
                return Err(Error::InvalidConfig(format!("frame index {k} out of range")));
            }
            let frame = frame_at(k)?;
            frame.ensure_same_dims(bg, "frame vs background")?;
            let chosen = sample_frame(&gt[k], seq.roi.as_ref(), k, cfg);
            chosen
                .into_iter()
                .map(|(idx, label)| {
                    let (i, j) = (idx / frame.width, idx % frame.width);
                    let mut data = vec![0f32; 2 * t * t];
                    extract_patch_into(&frame, bg, i, j, t, &mut data)?;
                    Ok(PatchSample {
                        data,
                        label,
                        origin: (k as u32, i as u32, j as u32),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<PatchSample> = per_frame.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

/// A patch dataset with its patch size, as persisted to `dataset.bgsd`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patch_size: usize,
    pub samples: Vec<PatchSample>,
}

impl PatchDataset {
    pub fn new(patch_size: usize, samples: Vec<PatchSample>) -> Result<Self> {
        validate_patch_size(patch_size)?;
        let len = 2 * patch_size * patch_size;
        if let Some(bad) = samples.iter().find(|s| s.data.len() != len) {
            return Err(Error::ShapeMismatch {
                expected: vec![2, patch_size, patch_size],
                found: vec![bad.data.len()],
            });
        }
        Ok(PatchDataset {
            patch_size,
            samples,
        })
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let fg = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - fg, fg)
    }

    /// Header `BGSD | version u32 | T u32 | count u64`, then per sample
    /// `label u8 | frame, row, col u32 | 2*T*T f32`, all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.patch_size as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(13 + 8 * self.patch_size * self.patch_size);
        for s in &self.samples {
            buf.clear();
            buf.push(s.label);
            for v in [s.origin.0, s.origin.1, s.origin.2] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &s.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let corrupt = |what: &str| Error::Corrupt(format!("dataset: {what}"));
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|_| corrupt("truncated header"))?;
        let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let t = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        validate_patch_size(t).map_err(|_| corrupt("invalid patch size"))?;
        let count = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes")) as usize;
        let plen = 2 * t * t;
        let mut record = vec![0u8; 13 + 4 * plen];
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for k in 0..count {
            r.read_exact(&mut record)
                .map_err(|_| corrupt(&format!("truncated at sample {k} of {count}")))?;
            let label = record[0];
            if label > 1 {
                return Err(corrupt(&format!("label {label} at sample {k}")));
            }
            let u = |o: usize| u32::from_le_bytes(record[o..o + 4].try_into().expect("4 bytes"));
            let origin = (u(1), u(5), u(9));
            let data = record[13..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            samples.push(PatchSample {
                data,
                label,
                origin,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|_| corrupt("read error"))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(PatchDataset {
            patch_size: t,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
