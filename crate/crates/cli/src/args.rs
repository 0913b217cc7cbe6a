//! Flag definitions. Every training-config key has a flag of the same name
//! (underscores become dashes) that overrides the config file.

use std::path::PathBuf;

use afcl_core::train::TrainConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "afcl",
    version,
    about = "Synthetic manipulation data, contrastive localization training and evaluation",
    after_help = "Exit status: 0 on success, 1 on a usage error, 2 when a run fails."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset (PPM images, PGM masks, JSONL manifest).
    GenData(GenDataArgs),
    /// Sweep the view scale k with a frozen encoder and report embedding distances.
    SelectK(CommonArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(CommonArgs),
    /// Score a checkpoint on a dataset (pixel F1 at 0.5 and AUC).
    Eval(CommonArgs),
    /// Train and score several view-generation / TRM variants over several seeds.
    Ablate(AblateArgs),
    /// Score a checkpoint under a list of image distortions.
    Robustness(RobustnessArgs),
    /// List the parameters of a model: name, shape and element count.
    ModelInfo(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The published training recipe.
    Recipe,
    /// Settings for training the small network from scratch on the synthetic corpus.
    Toy,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Recipe => TrainConfig::default(),
            Preset::Toy => TrainConfig::toy(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Root seed; each sample's seed derives from it and the sample id.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Sample id prefix; ids are `<prefix>-0000`, `<prefix>-0001`, ...
    #[arg(long, default_value = "img")]
    pub prefix: String,
    /// Comma-separated kinds, assigned round-robin: copy_move, splice, removal, authentic.
    #[arg(long, default_value = "copy_move,splice,removal")]
    pub kinds: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants: msvg, msvg-min, randomcrop, copypaste, each optionally
    /// suffixed with -notrm.
    #[arg(long, default_value = "msvg,msvg-notrm,randomcrop,copypaste")]
    pub views: String,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// Comma-separated distortions such as resize:0.78, blur:3, noise:15, jpeg:50 or identity.
    /// Defaults to the standard eight-row suite.
    #[arg(long)]
    pub distortions: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// View method for both training views: msvg, msvg-min, randomcrop or copypaste.
    #[arg(long)]
    pub views: Option<String>,
    /// Build the trace-relation branch.
    #[arg(long)]
    pub trm: Option<bool>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Starting point before the config file and flags are applied.
    #[arg(long, value_enum, default_value_t = Preset::Recipe)]
    pub preset: Preset,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for initialization, shuffling, augmentation and views.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Passes over the training set.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Samples per SGD step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// View scale: area of view 1 relative to the image.
    #[arg(long)]
    pub k: Option<f64>,
    /// Network input side; a multiple of 32.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Add the trace-similarity term to the objective.
    #[arg(long)]
    pub include_simg: Option<bool>,
    /// Learning rate at batch size 256; scaled linearly with the batch.
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// L2 weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Weight of the trace-relation loss.
    #[arg(long)]
    pub lambda_tr: Option<f64>,
    /// Weight of the detection loss.
    #[arg(long)]
    pub lambda_det: Option<f64>,
    /// Probability of a horizontal flip.
    #[arg(long)]
    pub flip_h: Option<f64>,
    /// Probability of a vertical flip.
    #[arg(long)]
    pub flip_v: Option<f64>,
    /// Random quarter-turn rotation.
    #[arg(long)]
    pub rotate: Option<bool>,
    /// Probability of converting to grayscale.
    #[arg(long)]
    pub grayscale: Option<f64>,
    /// Additive Gaussian noise σ on the 0-255 scale.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Brightness jitter range.
    #[arg(long)]
    pub brightness: Option<f64>,
    /// Contrast jitter range.
    #[arg(long)]
    pub contrast: Option<f64>,
    /// Training (or evaluation) dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out dataset directory.
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

impl ConfigArgs {
    /// `(key, value)` for every flag given on the command line.
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let all = [
            ("seed", text(&self.seed)),
            ("epochs", text(&self.epochs)),
            ("batch_size", text(&self.batch_size)),
            ("k", text(&self.k)),
            ("input_size", text(&self.input_size)),
            ("include_simg", text(&self.include_simg)),
            ("base_lr", text(&self.base_lr)),
            ("momentum", text(&self.momentum)),
            ("weight_decay", text(&self.weight_decay)),
            ("grad_clip", text(&self.grad_clip)),
            ("lambda_tr", text(&self.lambda_tr)),
            ("lambda_det", text(&self.lambda_det)),
            ("flip_h", text(&self.flip_h)),
            ("flip_v", text(&self.flip_v)),
            ("rotate", text(&self.rotate)),
            ("grayscale", text(&self.grayscale)),
            ("noise_sigma", text(&self.noise_sigma)),
            ("brightness", text(&self.brightness)),
            ("contrast", text(&self.contrast)),
            ("dataset", path(&self.dataset)),
            ("test_dataset", path(&self.test_dataset)),
            ("checkpoint", path(&self.checkpoint)),
        ];
        all.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
    }
}

impl CommonArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = self.config.overrides();
        out.extend(self.views.clone().map(|v| ("views", v)));
        out.extend(text(&self.trm).map(|v| ("trm", v)));
        out
    }
}
