//! View-method and TRM ablations: every variant trains on the same data
//! with the same seeds, and rows are summarised by their median.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::synth::ImageSample;

use super::{evaluate, fit, TrainConfig, TrainRun, ViewMethod};

/// One training setup in an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub views: ViewMethod,
    pub trm: bool,
}

impl Variant {
    pub const MSVG: Variant = Variant {
        views: ViewMethod::Msvg,
        trm: true,
    };
    pub const MSVG_NO_TRM: Variant = Variant {
        views: ViewMethod::Msvg,
        trm: false,
    };
    pub const MSVG_MIN: Variant = Variant {
        views: ViewMethod::MsvgMin,
        trm: true,
    };
    pub const RANDOM_CROP: Variant = Variant {
        views: ViewMethod::RandomCrop,
        trm: true,
    };
    pub const COPY_PASTE: Variant = Variant {
        views: ViewMethod::CopyPaste,
        trm: true,
    };
    pub const ALL: [Variant; 5] = [
        Variant::MSVG,
        Variant::MSVG_NO_TRM,
        Variant::MSVG_MIN,
        Variant::RANDOM_CROP,
        Variant::COPY_PASTE,
    ];

    /// `msvg`, `msvg-notrm`, `msvg-min`, `randomcrop` or `copypaste`, with
    /// `-notrm` appended whenever the TRM branch is off.
    pub fn name(&self) -> String {
        if self.trm {
            self.views.name().to_string()
        } else {
            format!("{}-notrm", self.views.name())
        }
    }

    /// `base` with this variant's view method and TRM switch.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            views: self.views,
            trm: self.trm,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (views, trm) = match s.strip_suffix("-notrm") {
            Some(v) => (v, false),
            None => (s, true),
        };
        let views = views
            .parse()
            .map_err(|_| Error::Config(format!("unknown ablation variant `{s}`")))?;
        Ok(Variant { views, trm })
    }
}

/// Parses a comma-separated variant list; duplicates and empty lists are
/// rejected.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: Variant = name.parse()?;
        if out.contains(&v) {
            return Err(Error::Config(format!("variant `{name}` listed twice")));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub variant: String,
    pub runs: usize,
    pub f1: f64,
    /// Median over the runs with a defined AUC.
    pub auc: Option<f64>,
}

/// Middle value, or the mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Medians per variant, in order of first appearance.
pub fn medians(rows: &[AblationRow]) -> Vec<MedianRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == name).collect();
            let f1s: Vec<f64> = mine.iter().map(|r| r.f1).collect();
            let aucs: Vec<f64> = mine.iter().filter_map(|r| r.auc).collect();
            MedianRow {
                variant: name.to_string(),
                runs: mine.len(),
                f1: median(&f1s).expect("at least one row per name"),
                auc: median(&aucs),
            }
        })
        .collect()
}

/// Trains and evaluates every variant under every seed, variant-major.
/// `on_run` sees each finished run, e.g. to save its artifacts.
pub fn run_ablation(
    base: &TrainConfig,
    train: &[ImageSample],
    test: &[ImageSample],
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&Variant, u64, &TrainRun, &MetricsReport) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..v.apply(base)
            };
            log::info!("ablation: {v} seed {seed}");
            let run = fit(&cfg, train)?;
            let report = evaluate(&run.model, test)?;
            on_run(v, seed, &run, &report)?;
            rows.push(AblationRow {
                variant: v.name(),
                seed,
                f1: report.mean_f1,
                auc: report.mean_auc,
            });
        }
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

pub fn write_rows_csv(rows: &[AblationRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "variant,seed,f1,auc")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.variant, r.seed, r.f1, fmt_opt(r.auc))?;
    }
    Ok(())
}

pub fn write_medians_csv(rows: &[MedianRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "variant,runs,median_f1,median_auc")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.variant, r.runs, r.f1, fmt_opt(r.auc))?;
    }
    Ok(())
}
