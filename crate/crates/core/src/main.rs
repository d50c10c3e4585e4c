use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bgsnetd::pipeline::{self, PipelineConfig};
use bgsnetd::synth::{camouflage_config, wide_range_config, SynthConfig};
use bgsnetd::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "bgsnetd", version, about = "Depth-video background subtraction")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video with ground truth to --out.
    Synth(Opts),
    /// Background image and depth statistics.
    ExtractBg(Opts),
    /// Sample the training patches.
    GenDataset(Opts),
    /// Train the classifier.
    Train(Opts),
    /// Predict masks for the held-out frames.
    Predict(Opts),
    /// Score the masks against ground truth.
    Evaluate(Opts),
    /// extract-bg, gen-dataset, train, predict and evaluate in sequence.
    RunAll(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Camouflage,
    WideRange,
}

/// Options shared by every command; each overrides its field of the
/// `--config` document.
#[derive(Args)]
struct Opts {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Video directory, or a tree of video directories.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model to predict with (default: model.bgsn under --out).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scale raw depth by 1/65535 instead of min-max normalizing it.
    #[arg(long)]
    no_preprocess: bool,
    #[arg(long, env = "BGSNETD_THREADS")]
    threads: Option<usize>,
    /// Seed for sampling, initialization, shuffling and synthesis.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    max_samples_per_frame: Option<usize>,
    #[arg(long)]
    fg_fraction: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    pixel_batch: Option<usize>,
    /// Score every other pixel and copy the scores to 2x2 blocks.
    #[arg(long)]
    stride2: bool,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    eval_stride: Option<usize>,
    /// Train one model on all videos.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    save_probabilities: bool,
    /// Synthetic scene preset (synth only).
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    absent_rate: Option<f64>,
    #[arg(long)]
    edge_noise: Option<usize>,
}

impl Opts {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        if let Some(p) = self.preset {
            cfg.synth = match p {
                Preset::Default => SynthConfig::default(),
                Preset::Camouflage => camouflage_config(),
                Preset::WideRange => wide_range_config(),
            };
        }
        set! {
            alpha => norm.alpha;
            max_samples_per_frame => sampling.max_samples_per_frame;
            fg_fraction => sampling.fg_fraction;
            stride => sampling.stride;
            learning_rate => train.learning_rate;
            batch_size => train.batch_size;
            epochs => train.epochs;
            threshold => infer.threshold;
            pixel_batch => infer.pixel_batch;
            train_fraction => train_fraction;
            eval_stride => eval_stride;
            width => synth.width;
            height => synth.height;
            frames => synth.frame_count;
            absent_rate => synth.absent_rate;
            edge_noise => synth.edge_noise_px;
        }
        if let Some(t) = self.patch_size {
            cfg.sampling.patch_size = t;
            cfg.architecture.input_size = t;
        }
        if let Some(s) = self.seed {
            cfg.sampling.seed = s;
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        if self.data.is_some() {
            cfg.data = self.data.clone();
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        cfg.preprocess &= !self.no_preprocess;
        cfg.infer.stride2 |= self.stride2;
        cfg.pooled |= self.pooled;
        cfg.save_probabilities |= self.save_probabilities;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Synth(opts)
    | Command::ExtractBg(opts)
    | Command::GenDataset(opts)
    | Command::Train(opts)
    | Command::Predict(opts)
    | Command::Evaluate(opts)
    | Command::RunAll(opts)) = &cli.command;
    let cfg = opts.resolve()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(_) => {
            pipeline::cmd_synth(&cfg)?;
        }
        Command::ExtractBg(_) => pipeline::cmd_extract_bg(&cfg)?,
        Command::GenDataset(_) => pipeline::cmd_gen_dataset(&cfg)?,
        Command::Train(_) => pipeline::cmd_train(&cfg)?,
        Command::Predict(_) => pipeline::cmd_predict(&cfg)?,
        Command::Evaluate(_) => print!("{}", pipeline::cmd_evaluate(&cfg)?.to_text()),
        Command::RunAll(_) => print!("{}", pipeline::run_all(&cfg)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("bgsnetd: error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
