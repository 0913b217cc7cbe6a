//! Pixel F1 at a fixed 0.5 threshold, rank AUC, and robustness tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::synth::{distort, Distortion, ImageSample};
use crate::train::evaluate;

pub const THRESHOLD: f64 = 0.5;

/// 1 where `p > 0.5`; ties go to 0.
pub fn binarize(p: &[f64]) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v > THRESHOLD)).collect()
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn f1(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err("f1", &[pred.len()], &[gt.len()]));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fnn == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64)
}

/// Mann-Whitney AUC with midranks for ties. `None` when `gt` has only one
/// class.
pub fn auc(scores: &[f64], gt: &[u8]) -> Result<Option<f64>> {
    if scores.len() != gt.len() {
        return Err(shape_err("auc", &[scores.len()], &[gt.len()]));
    }
    let n_pos = gt.iter().filter(|&&g| g != 0).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: positions i..=j share the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if gt[idx] != 0 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub f1: f64,
    /// `None` when the ground truth has a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by id.
    pub per_image: Vec<ImageMetrics>,
    pub mean_f1: f64,
    /// Mean over images with a defined AUC.
    pub mean_auc: Option<f64>,
    pub auc_undefined: usize,
}

impl MetricsReport {
    pub fn from_rows(mut rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("metrics report needs at least one image"));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mean_f1 = rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64;
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
        let mean_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(Self {
            auc_undefined: rows.len() - defined.len(),
            per_image: rows,
            mean_f1,
            mean_auc,
        })
    }

    /// Scores one image from its probabilities and binary ground truth.
    pub fn score(id: &str, probs: &[f64], gt: &[u8]) -> Result<ImageMetrics> {
        Ok(ImageMetrics {
            id: id.to_string(),
            f1: f1(&binarize(probs), gt)?,
            auc: auc(probs, gt)?,
        })
    }

    pub fn write_per_image_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "id,f1,auc")?;
        for r in &self.per_image {
            writeln!(w, "{},{},{}", r.id, r.f1, fmt_opt(r.auc))?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "images,mean_f1,mean_auc,auc_undefined")?;
        writeln!(
            w,
            "{},{},{},{}",
            self.per_image.len(),
            self.mean_f1,
            fmt_opt(self.mean_auc),
            self.auc_undefined
        )?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub distortion: String,
    pub f1: f64,
    pub auc: Option<f64>,
    pub delta_f1: f64,
    pub delta_auc: Option<f64>,
}

/// Seed for distorting one sample; shared with anyone re-creating the
/// distorted copies.
pub fn distortion_seed(root: u64, d: &Distortion, id: &str) -> u64 {
    derive_seed(root, &format!("{d}/{id}"))
}

/// A no-distortion baseline row followed by one row per distortion, in the
/// order given.
pub fn robustness_report(
    model: &Model,
    samples: &[ImageSample],
    distortions: &[Distortion],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let base = evaluate(model, samples)?;
    let row = |label: String, r: &MetricsReport| RobustnessRow {
        distortion: label,
        f1: r.mean_f1,
        auc: r.mean_auc,
        delta_f1: r.mean_f1 - base.mean_f1,
        delta_auc: r.mean_auc.zip(base.mean_auc).map(|(a, b)| a - b),
    };
    let mut rows = vec![row("None".into(), &base)];
    for d in distortions {
        let distorted = samples
            .iter()
            .map(|s| distort(s, *d, distortion_seed(seed, d, &s.id)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row(d.label(), &evaluate(model, &distorted)?));
    }
    Ok(rows)
}

pub fn write_robustness_csv(rows: &[RobustnessRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "distortion,f1,auc,delta_f1,delta_auc")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.distortion,
            r.f1,
            fmt_opt(r.auc),
            r.delta_f1,
            fmt_opt(r.delta_auc)
        )?;
    }
    Ok(())
}
