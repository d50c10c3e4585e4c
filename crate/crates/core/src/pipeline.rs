//! The command-line stages as library calls.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so running the stages one by one produces the same files as
//! [`run_all`]. File names inside an output directory are fixed:
//!
//! ```text
//! config.json    effective configuration
//! bg.pgm         valid-average background (16-bit depth)
//! stats.json     depth statistics and alpha
//! dataset.bgsd   sampled training patches
//! model.bgsn     trained model with optimizer state
//! history.csv    per-epoch loss and accuracy
//! masks/<id>.pgm predicted masks of the evaluated frames
//! probs/<id>.pgm foreground probabilities (optional)
//! metrics.csv    per-video metrics and averages
//! metrics.txt    the same table, aligned
//! ```
//!
//! A data directory is either one video (it contains `depth/`) or a tree of
//! videos such as `<category>/<video>/depth/`. With several videos each gets
//! its own subdirectory of the output directory; only the metric tables,
//! and with pooled training the dataset and model, live at the top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth_io::{load_depth_frame, load_mask, load_sequence, save_depth_frame, save_mask};
use crate::depth_io::{save_sequence, VideoSequence};
use crate::error::{Error, Result};
use crate::infer::{predict_frame, save_probability_map, InferConfig};
use crate::metrics::{accumulate, ConfusionCounts, MetricTable, VideoResult};
use crate::nn::Architecture;
use crate::patches::{generate_training_set_with, PatchDataset, SamplingConfig};
use crate::preprocess::{
    compute_frame_stats, extract_background_from, NormConfig, Normalization, StatsFile,
};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const BACKGROUND_FILE: &str = "bg.pgm";
pub const STATS_FILE: &str = "stats.json";
pub const DATASET_FILE: &str = "dataset.bgsd";
pub const MODEL_FILE: &str = "model.bgsn";
pub const HISTORY_FILE: &str = "history.csv";
pub const MASK_DIR: &str = "masks";
pub const PROB_DIR: &str = "probs";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input video, or a tree of videos.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Model used by `predict`; defaults to `model.bgsn` in the output
    /// directory.
    pub checkpoint: Option<PathBuf>,
    /// Extended min-max normalization when on; plain `x / 65535` when off.
    pub preprocess: bool,
    /// Fraction of each video's leading frames used for training; the rest
    /// are predicted and evaluated. 1.0 evaluates every frame.
    pub train_fraction: f64,
    /// Evaluate every n-th held-out frame.
    pub eval_stride: usize,
    /// Compute depth statistics and background from the training frames
    /// only instead of the whole video.
    pub stats_from_training_frames: bool,
    /// One model for all videos instead of one per video.
    pub pooled: bool,
    pub save_probabilities: bool,
    pub threads: Option<usize>,
    pub norm: NormConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub architecture: Architecture,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: None,
            out: None,
            checkpoint: None,
            preprocess: true,
            train_fraction: 0.5,
            eval_stride: 1,
            stats_from_training_frames: false,
            pooled: false,
            save_probabilities: false,
            threads: None,
            norm: NormConfig::default(),
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            architecture: Architecture::full_size(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        self.sampling.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.architecture.validate()?;
        if self.sampling.patch_size != self.architecture.input_size {
            return Err(Error::InvalidConfig(format!(
                "patch size {} does not match the model input size {}",
                self.sampling.patch_size, self.architecture.input_size
            )));
        }
        if self.architecture.in_channels != 2 {
            return Err(Error::InvalidConfig(
                "the patch classifier takes 2 input channels".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.eval_stride == 0 {
            return Err(Error::InvalidConfig("eval_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no data directory given".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no output directory given".into()))
    }

    /// Number of leading training frames of an `n`-frame video.
    pub fn training_frames(&self, n: usize) -> usize {
        ((n as f64 * self.train_fraction).floor() as usize).clamp(1, n)
    }

    /// Frames predicted and scored.
    pub fn evaluation_frames(&self, n: usize) -> Vec<usize> {
        let n_train = self.training_frames(n);
        let start = if n_train == n { 0 } else { n_train };
        (start..n).step_by(self.eval_stride).collect()
    }

    fn normalization(&self, stats: &StatsFile) -> Result<Normalization> {
        Ok(if self.preprocess {
            Normalization::MinMax {
                stats: stats.stats()?,
                cfg: NormConfig { alpha: stats.alpha },
            }
        } else {
            Normalization::Raw
        })
    }
}

/// A video found under the data directory.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEntry {
    pub category: String,
    pub name: String,
    pub dir: PathBuf,
    /// Path relative to the data directory; empty for a single video.
    pub rel: PathBuf,
}

impl VideoEntry {
    pub fn out_dir(&self, out: &Path) -> PathBuf {
        out.join(&self.rel)
    }
}

/// Finds the videos (directories holding `depth/`) under `data`, sorted.
pub fn discover_videos(data: &Path) -> Result<Vec<VideoEntry>> {
    if data.join("depth").is_dir() {
        let name = data
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![VideoEntry {
            category: name.clone(),
            name,
            dir: data.to_path_buf(),
            rel: PathBuf::new(),
        }]);
    }
    let mut found = Vec::new();
    walk(data, data, &mut found)?;
    if found.is_empty() {
        return Err(Error::EmptySequence(data.to_path_buf()));
    }
    found.sort_by(|a, b| a.rel.cmp(&b.rel));
    Ok(found)
}

fn walk(root: &Path, dir: &Path, found: &mut Vec<VideoEntry>) -> Result<()> {
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    for sub in subdirs {
        if sub.join("depth").is_dir() {
            let rel = sub.strip_prefix(root).unwrap_or(&sub).to_path_buf();
            let name = rel.to_string_lossy().replace('\\', "/");
            let category = match rel.components().count() {
                0 | 1 => "all".to_string(),
                _ => rel
                    .components()
                    .next()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .unwrap_or_default(),
            };
            found.push(VideoEntry {
                category,
                name,
                dir: sub.clone(),
                rel,
            });
        } else {
            walk(root, &sub, found)?;
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn prepare(cfg: &PipelineConfig) -> Result<(Vec<VideoEntry>, PathBuf)> {
    cfg.validate()?;
    let videos = discover_videos(cfg.data_dir()?)?;
    let out = cfg.out_dir()?.to_path_buf();
    create_dir(&out)?;
    cfg.save(out.join(CONFIG_FILE))?;
    Ok((videos, out))
}

/// Writes the synthetic video described by `cfg.synth` to the output
/// directory in the on-disk video layout.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<VideoSequence> {
    let out = cfg.out_dir()?;
    let seq = generate(&cfg.synth)?;
    save_sequence(&seq, out)?;
    log::info!("wrote {} synthetic frames to {}", seq.len(), out.display());
    Ok(seq)
}

/// Background image and depth statistics of every video.
pub fn cmd_extract_bg(cfg: &PipelineConfig) -> Result<()> {
    let (videos, out) = prepare(cfg)?;
    for v in &videos {
        let seq = load_sequence(&v.dir)?;
        let frames = if cfg.stats_from_training_frames {
            &seq.frames[..cfg.training_frames(seq.len())]
        } else {
            &seq.frames[..]
        };
        let stats = compute_frame_stats(frames)?;
        let bg = extract_background_from(frames)?;
        let dir = v.out_dir(&out);
        create_dir(&dir)?;
        save_depth_frame(&bg, dir.join(BACKGROUND_FILE))?;
        StatsFile::new(stats, cfg.norm).save(dir.join(STATS_FILE))?;
        log::info!(
            "{}: depth range {}..{} mm",
            v.name,
            stats.min_valid,
            stats.max
        );
    }
    Ok(())
}

fn video_dataset(cfg: &PipelineConfig, v: &VideoEntry, out: &Path) -> Result<PatchDataset> {
    let seq = load_sequence(&v.dir)?;
    let dir = v.out_dir(out);
    let stats = StatsFile::load(dir.join(STATS_FILE))?;
    let norm = cfg.normalization(&stats)?;
    let bg = norm.apply(&load_depth_frame(dir.join(BACKGROUND_FILE))?)?;
    let frames: Vec<usize> = (0..cfg.training_frames(seq.len())).collect();
    let samples = generate_training_set_with(&seq, &bg, &norm, &frames, &cfg.sampling)?;
    PatchDataset::new(cfg.sampling.patch_size, samples)
}

/// Samples training patches from the training frames of every video.
pub fn cmd_gen_dataset(cfg: &PipelineConfig) -> Result<()> {
    let (videos, out) = prepare(cfg)?;
    let mut pooled = Vec::new();
    for v in &videos {
        let ds = video_dataset(cfg, v, &out)?;
        let (bg, fg) = ds.label_counts();
        log::info!("{}: {} patches ({fg} foreground, {bg} background)", v.name, ds.samples.len());
        if cfg.pooled {
            pooled.extend(ds.samples);
        } else {
            ds.save(v.out_dir(&out).join(DATASET_FILE))?;
        }
    }
    if cfg.pooled {
        PatchDataset::new(cfg.sampling.patch_size, pooled)?.save(out.join(DATASET_FILE))?;
    }
    Ok(())
}

/// Directories holding a dataset and model: the top-level output directory
/// when pooled, else one per video.
fn model_dirs(cfg: &PipelineConfig, videos: &[VideoEntry], out: &Path) -> Vec<PathBuf> {
    if cfg.pooled {
        vec![out.to_path_buf()]
    } else {
        videos.iter().map(|v| v.out_dir(out)).collect()
    }
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let (videos, out) = prepare(cfg)?;
    for dir in model_dirs(cfg, &videos, &out) {
        let ds = PatchDataset::load(dir.join(DATASET_FILE))?;
        let outcome = train::<f32>(&ds, &cfg.architecture, &cfg.train)?;
        save_checkpoint(&outcome.model, &outcome.optimizer, dir.join(MODEL_FILE))?;
        outcome.history.save_csv(dir.join(HISTORY_FILE))?;
        if let Some(loss) = outcome.history.final_loss() {
            log::info!("{}: final training loss {loss:.5}", dir.display());
        }
    }
    Ok(())
}

fn checkpoint_for(cfg: &PipelineConfig, v: &VideoEntry, out: &Path) -> PathBuf {
    match (&cfg.checkpoint, cfg.pooled) {
        (Some(path), _) => path.clone(),
        (None, true) => out.join(MODEL_FILE),
        (None, false) => v.out_dir(out).join(MODEL_FILE),
    }
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(MASK_DIR).join(format!("{id}.pgm"))
}

/// Masks (and optionally probabilities) for the evaluated frames.
pub fn cmd_predict(cfg: &PipelineConfig) -> Result<()> {
    let (videos, out) = prepare(cfg)?;
    for v in &videos {
        let ckpt = checkpoint_for(cfg, v, &out);
        if !ckpt.is_file() {
            return Err(Error::io(
                &ckpt,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        let (model, _) = load_checkpoint::<f32>(&ckpt)?;
        let seq = load_sequence(&v.dir)?;
        let dir = v.out_dir(&out);
        let stats = StatsFile::load(dir.join(STATS_FILE))?;
        let norm = cfg.normalization(&stats)?;
        let bg = norm.apply(&load_depth_frame(dir.join(BACKGROUND_FILE))?)?;
        create_dir(&dir.join(MASK_DIR))?;
        if cfg.save_probabilities {
            create_dir(&dir.join(PROB_DIR))?;
        }
        let frames = cfg.evaluation_frames(seq.len());
        for (n, &k) in frames.iter().enumerate() {
            let frame = norm.apply(&seq.frames[k])?;
            let (probs, mask) = predict_frame(&model, &frame, &bg, &cfg.infer)?;
            let id = &seq.frame_ids[k];
            save_mask(&mask, mask_path(&dir, id))?;
            if cfg.save_probabilities {
                save_probability_map(&probs, dir.join(PROB_DIR).join(format!("{id}.pgm")))?;
            }
            log::debug!("{}: frame {id} ({}/{})", v.name, n + 1, frames.len());
        }
        log::info!("{}: predicted {} frames", v.name, frames.len());
    }
    Ok(())
}

/// Confusion counts of the saved masks of one video.
pub fn evaluate_video(cfg: &PipelineConfig, v: &VideoEntry, out: &Path) -> Result<ConfusionCounts> {
    let seq = load_sequence(&v.dir)?;
    let gt = seq.gt.as_ref().ok_or(Error::MissingGroundTruth)?;
    let dir = v.out_dir(out);
    let mut counts = ConfusionCounts::default();
    for k in cfg.evaluation_frames(seq.len()) {
        let mask = load_mask(mask_path(&dir, &seq.frame_ids[k]))?;
        counts = counts.merge(accumulate(&mask, &gt[k], seq.roi.as_ref())?);
    }
    Ok(counts)
}

/// Scores the saved masks and writes the metric tables.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<MetricTable> {
    let (videos, out) = prepare(cfg)?;
    let mut results = Vec::with_capacity(videos.len());
    for v in &videos {
        let counts = evaluate_video(cfg, v, &out)?;
        results.push(VideoResult::new(v.category.clone(), v.name.clone(), counts));
    }
    let table = MetricTable::build(&results)?;
    table.save_csv(out.join(METRICS_FILE))?;
    let text = table.to_text();
    let path = out.join(METRICS_TEXT_FILE);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

/// Background, dataset, training, prediction and evaluation in sequence.
pub fn run_all(cfg: &PipelineConfig) -> Result<MetricTable> {
    cmd_extract_bg(cfg)?;
    cmd_gen_dataset(cfg)?;
    cmd_train(cfg)?;
    cmd_predict(cfg)?;
    cmd_evaluate(cfg)
}
