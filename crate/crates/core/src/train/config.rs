//! Training configuration as flat `key = value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::msvg::{validate_k, DEFAULT_K};
use crate::optim::{DEFAULT_BASE_LR, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};

use super::augment::AugmentSpec;

/// How the two training views are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMethod {
    /// Mask-centred view at scale k plus the full image.
    Msvg,
    /// Minimum (tight mask box) view plus the full image.
    MsvgMin,
    /// Random square crop of area k, ignoring the mask, plus the full image.
    RandomCrop,
    /// The manipulated region pasted onto two fresh backgrounds.
    CopyPaste,
}

impl ViewMethod {
    pub fn name(self) -> &'static str {
        match self {
            ViewMethod::Msvg => "msvg",
            ViewMethod::MsvgMin => "msvg-min",
            ViewMethod::RandomCrop => "randomcrop",
            ViewMethod::CopyPaste => "copypaste",
        }
    }
}

impl fmt::Display for ViewMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msvg" => Ok(ViewMethod::Msvg),
            "msvg-min" => Ok(ViewMethod::MsvgMin),
            "randomcrop" => Ok(ViewMethod::RandomCrop),
            "copypaste" => Ok(ViewMethod::CopyPaste),
            _ => Err(Error::Config(format!(
                "unknown view method `{s}` (expected msvg, msvg-min, randomcrop or copypaste)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k: f64,
    pub input_size: usize,
    pub augment: AugmentSpec,
    pub weights: LossWeights,
    pub include_simg: bool,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub trm: bool,
    pub views: ViewMethod,
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 10,
            k: DEFAULT_K,
            input_size: 64,
            augment: AugmentSpec::default(),
            weights: LossWeights::default(),
            include_simg: true,
            base_lr: DEFAULT_BASE_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            grad_clip: 0.0,
            trm: true,
            views: ViewMethod::Msvg,
            dataset: None,
            test_dataset: None,
            checkpoint: None,
        }
    }
}

/// Every recognised key, in the order [`TrainConfig::to_pairs`] emits them.
pub const CONFIG_KEYS: [&str; 24] = [
    "seed",
    "epochs",
    "batch_size",
    "k",
    "input_size",
    "include_simg",
    "base_lr",
    "momentum",
    "weight_decay",
    "grad_clip",
    "lambda_tr",
    "lambda_det",
    "trm",
    "views",
    "flip_h",
    "flip_v",
    "rotate",
    "grayscale",
    "noise_sigma",
    "brightness",
    "contrast",
    "dataset",
    "test_dataset",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Settings for the small synthetic corpus trained from scratch: a
    /// larger step, a heavier detection weight and gradient clipping. The
    /// defaults follow the recipe for a pretrained backbone and barely move
    /// a randomly initialised network in 30 epochs.
    pub fn toy() -> Self {
        Self {
            base_lr: 1.0,
            grad_clip: 1.0,
            weights: LossWeights {
                lambda_det: 5.0,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "input_size" => self.input_size = parse(key, v)?,
            "include_simg" => self.include_simg = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "lambda_tr" => self.weights.lambda_tr = parse(key, v)?,
            "lambda_det" => self.weights.lambda_det = parse(key, v)?,
            "trm" => self.trm = parse(key, v)?,
            "views" => self.views = v.parse()?,
            "flip_h" => self.augment.flip_h = parse(key, v)?,
            "flip_v" => self.augment.flip_v = parse(key, v)?,
            "rotate" => self.augment.rotate = parse(key, v)?,
            "grayscale" => self.augment.grayscale = parse(key, v)?,
            "noise_sigma" => self.augment.noise_sigma = parse(key, v)?,
            "brightness" => self.augment.brightness = parse(key, v)?,
            "contrast" => self.augment.contrast = parse(key, v)?,
            "dataset" => self.dataset = opt_path(v),
            "test_dataset" => self.test_dataset = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment, blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Text form of every key, in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let a = &self.augment;
        let values = [
            self.seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.k.to_string(),
            self.input_size.to_string(),
            self.include_simg.to_string(),
            self.base_lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.grad_clip.to_string(),
            self.weights.lambda_tr.to_string(),
            self.weights.lambda_det.to_string(),
            self.trm.to_string(),
            self.views.to_string(),
            a.flip_h.to_string(),
            a.flip_v.to_string(),
            a.rotate.to_string(),
            a.grayscale.to_string(),
            a.noise_sigma.to_string(),
            a.brightness.to_string(),
            a.contrast.to_string(),
            p(&self.dataset),
            p(&self.test_dataset),
            p(&self.checkpoint),
        ];
        CONFIG_KEYS.into_iter().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        validate_k(self.k).map_err(|e| Error::Config(e.to_string()))?;
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!("input_size {} must be a multiple of 32", self.input_size)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config("grad_clip must be a finite value >= 0".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = TrainConfig {
            seed: 17,
            views: ViewMethod::RandomCrop,
            dataset: Some("data/train".into()),
            augment: AugmentSpec {
                rotate: false,
                ..AugmentSpec::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_pairs().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::from_text("# header\nepochs = 3 # short\n\nk=0.4\n").unwrap();
        assert_eq!((c.epochs, c.k), (3, 0.4));
        assert!(TrainConfig::from_text("epochs 3").is_err());
        assert!(TrainConfig::from_text("speed = 3").is_err());
        assert!(TrainConfig::from_text("epochs = x").is_err());
        assert!(TrainConfig::from_text("views = crop").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for text in ["epochs = 0", "batch_size = 0", "k = 0.25", "input_size = 48", "lambda_tr = -1"] {
            assert!(TrainConfig::from_text(text).unwrap().validate().is_err(), "{text}");
        }
    }

    #[test]
    fn defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.k, c.momentum, c.weight_decay, c.base_lr), (10, 0.6, 0.9, 1e-4, 0.05));
    }
}
