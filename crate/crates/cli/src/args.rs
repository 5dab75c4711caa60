use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mist_core::datagen::SyntheticSpec;
use mist_core::encoders::EncoderConfig;
use mist_core::trainer::{RunSeeds, StochasticMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "mist", version, about = "Multiple stochastic prompt tuning on synthetic few-shot benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train pool and test set.
    GenData(GenDataArgs),
    /// Train one model per seed and write metrics and checkpoints.
    Train(TrainArgs),
    /// Train over a one-dimensional grid of one flag.
    Sweep(SweepArgs),
    /// Plot test embeddings, prototypes and binned class accuracies.
    Plot(PlotArgs),
    /// Finite-difference check of every learnable parameter group.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub modes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Distance between modes of one class.
    #[arg(long, default_value_t = 8.0)]
    pub sep: f64,
    /// Minimum distance between modes of different classes.
    #[arg(long, default_value_t = 4.0)]
    pub class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write CSV mirrors of both files.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            modes_per_class: self.modes,
            feature_dim: self.dim,
            mode_separation: self.sep,
            class_separation: self.class_sep,
            noise_scale: self.noise,
            samples_per_class_train: self.train_per_class,
            samples_per_class_test: self.test_per_class,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StochasticArg {
    None,
    FixedMean,
    Full,
    Mist,
}

impl From<StochasticArg> for StochasticMode {
    fn from(value: StochasticArg) -> Self {
        match value {
            StochasticArg::None => StochasticMode::None,
            StochasticArg::FixedMean => StochasticMode::FixedMean,
            StochasticArg::Full => StochasticMode::Full,
            StochasticArg::Mist => StochasticMode::Mist,
        }
    }
}

/// Flags shared by `train` and `sweep`.
#[derive(Clone, Debug, Args)]
pub struct TrainFlags {
    /// Directory holding `train.mfs` and `test.mfs`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Number of seeds; runs use seeds `first-seed .. first-seed + seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0035)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub prompts: usize,
    #[arg(long, default_value_t = 2)]
    pub length: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 1.0)]
    pub reg_weight: f64,
    #[arg(long, value_enum, default_value_t = StochasticArg::Mist)]
    pub stochastic: StochasticArg,
    #[arg(long, default_value_t = 0)]
    pub infer_samples: usize,
    /// Give every prompt its own Gaussian deep prompts.
    #[arg(long)]
    pub stochastic_deep: bool,
    #[arg(long, default_value_t = 0)]
    pub weight_seed: u64,
    #[arg(long, default_value_t = 32)]
    pub token_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub patches: usize,
}

impl TrainFlags {
    pub fn seed_list(&self) -> Vec<u64> {
        (self.first_seed..self.first_seed + self.seeds).collect()
    }

    /// Training configuration with the seeds of run seed 0; the harness
    /// replaces them per run.
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            temperature: self.temp,
            prompt_length: self.length,
            prompt_count: self.prompts,
            reg_weight: self.reg_weight,
            infer_samples: self.infer_samples,
            stochastic: self.stochastic.into(),
            stochastic_deep: self.stochastic_deep,
            seeds: RunSeeds::from_run(0),
            encoder: EncoderConfig {
                token_dim: self.token_dim,
                num_blocks: self.blocks,
                prompt_depth: self.depth,
                num_patches: self.patches,
                vocab_size: EncoderConfig::default().vocab_size,
                weight_seed: self.weight_seed,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid as `key=v1,v2,...`, e.g. `prompts=1,2,3,4` or `length=1,2,4,8`.
    #[arg(long)]
    pub sweep: String,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory holding `test.mfs`.
    #[arg(long)]
    pub data: PathBuf,
    /// Prototype draws per prompt; 0 plots the distribution means only.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = mist_core::gradcheck::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = mist_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    /// Test hook: perturb the analytic gradient of one group.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// One sweepable flag and its verbatim grid values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub key: String,
    pub values: Vec<String>,
}

pub const SWEEP_KEYS: &[&str] = &[
    "prompts",
    "length",
    "shots",
    "depth",
    "epochs",
    "lr",
    "temp",
    "reg-weight",
    "stochastic",
    "infer-samples",
];

impl Grid {
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| format!("sweep must look like key=v1,v2,... (got {spec:?})"))?;
        let key = key.trim().to_string();
        if !SWEEP_KEYS.contains(&key.as_str()) {
            return Err(format!("unknown sweep key {key:?}; expected one of {}", SWEEP_KEYS.join(", ")));
        }
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if values.is_empty() {
            return Err("sweep grid is empty".into());
        }
        Ok(Self { key, values })
    }

    /// `flags` with the grid key set to `value`.
    pub fn apply(&self, flags: &TrainFlags, value: &str) -> Result<TrainFlags, String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        let mut f = flags.clone();
        match self.key.as_str() {
            "prompts" => f.prompts = num(&self.key, value)?,
            "length" => f.length = num(&self.key, value)?,
            "shots" => f.shots = num(&self.key, value)?,
            "depth" => f.depth = num(&self.key, value)?,
            "epochs" => f.epochs = num(&self.key, value)?,
            "lr" => f.lr = num(&self.key, value)?,
            "temp" => f.temp = num(&self.key, value)?,
            "reg-weight" => f.reg_weight = num(&self.key, value)?,
            "infer-samples" => f.infer_samples = num(&self.key, value)?,
            "stochastic" => {
                f.stochastic = StochasticArg::from_str(value, false)
                    .map_err(|_| format!("bad value {value:?} for stochastic"))?
            }
            other => return Err(format!("unknown sweep key {other:?}")),
        }
        Ok(f)
    }
}
