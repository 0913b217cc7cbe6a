//! Training and evaluation: augment → views → shared encoder/TRM/heads/
//! decoder on both views → losses → SGD.

pub mod ablation;
mod augment;
mod config;

pub use augment::{augment, AugmentSpec, Geometric};
pub use config::{TrainConfig, ViewMethod, CONFIG_KEYS};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::image::{BBox, Image, CHANNELS};
use crate::losses::{loss_det, loss_simg, loss_simr, loss_total, loss_tr, BatchLossBreakdown};
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::msvg::{generate_views, min_view_box, ViewPair};
use crate::optim::SgdState;
use crate::rng::{derive_seed, derive_seed_index, Rng};
use crate::synth::{background, read_dataset, GenParams, ImageSample};
use crate::tensor::{bilinear_axis_weights, Tape, Tensor};

/// Builds the two training views of one sample.
pub fn make_views(sample: &ImageSample, method: ViewMethod, k: f64, size: usize, seed: u64) -> Result<ViewPair> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let full = BBox::full(w, h);
    match method {
        ViewMethod::Msvg => generate_views(sample, k, size),
        ViewMethod::MsvgMin => ViewPair::from_boxes(sample, min_view_box(&sample.mask)?, full, k, size),
        ViewMethod::RandomCrop => {
            let side = ((k * (h * w) as f64).sqrt().ceil() as usize).clamp(1, h.min(w));
            let mut rng = Rng::new(seed);
            let y = rng.below(h - side + 1);
            let x = rng.below(w - side + 1);
            ViewPair::from_boxes(sample, BBox::new(x, y, x + side, y + side)?, full, k, size)
        }
        ViewMethod::CopyPaste => {
            let grain = GenParams::default().grain;
            let paste = |label: &str| -> Result<Image> {
                let mut rng = Rng::new(derive_seed(seed, label));
                let mut bg = background(&mut rng, h, w, grain);
                for c in 0..CHANNELS {
                    for y in 0..h {
                        for x in 0..w {
                            if sample.mask.get(y, x) {
                                bg.set(c, y, x, sample.image.get(c, y, x));
                            }
                        }
                    }
                }
                bg.resize_bilinear(size, size)
            };
            let gt = sample.mask.resize_nearest(size, size)?;
            Ok(ViewPair {
                view1: paste("copypaste-1")?,
                view2: paste("copypaste-2")?,
                gt1: gt.clone(),
                gt2: gt,
                geometry: full,
                k,
            })
        }
    }
}

fn stack_images<'a>(imgs: impl ExactSizeIterator<Item = &'a Image>) -> Result<Tensor> {
    let n = imgs.len();
    let mut data = Vec::new();
    let mut dims = None;
    for img in imgs {
        let d = (img.height(), img.width());
        if *dims.get_or_insert(d) != d {
            return Err(invalid("batch images differ in size"));
        }
        data.extend_from_slice(img.data());
    }
    let (h, w) = dims.ok_or(Error::Empty("batch"))?;
    Tensor::new([n, CHANNELS, h, w], data)
}

fn stack_masks<'a>(masks: impl ExactSizeIterator<Item = &'a crate::image::Mask>) -> Result<Tensor> {
    let n = masks.len();
    let mut data = Vec::new();
    let mut dims = None;
    for m in masks {
        let d = (m.height(), m.width());
        if *dims.get_or_insert(d) != d {
            return Err(invalid("batch masks differ in size"));
        }
        data.extend(m.data().iter().map(|&v| f64::from(v)));
    }
    let (h, w) = dims.ok_or(Error::Empty("batch"))?;
    Tensor::new([n, 1, h, w], data)
}

/// Records the full objective for a batch of view pairs on `tape`, returning
/// the total and the per-term breakdown. `include_simg` only takes effect
/// when the model has a TRM branch.
pub fn batch_objective(
    tape: &mut Tape,
    model: &Model,
    bound: &crate::params::Bound,
    pairs: &[ViewPair],
    weights: &crate::losses::LossWeights,
    include_simg: bool,
) -> Result<(crate::tensor::Var, BatchLossBreakdown)> {
    let (total, breakdown, _) = objective_with_targets(tape, model, bound, pairs, weights, include_simg, None)?;
    Ok((total, breakdown))
}

/// [`batch_objective`] with the option of replacing both projections by
/// fixed values, which is what the stop-gradient means to a
/// finite-difference oracle. Also returns the projection values used.
pub(crate) fn objective_with_targets(
    tape: &mut Tape,
    model: &Model,
    bound: &crate::params::Bound,
    pairs: &[ViewPair],
    weights: &crate::losses::LossWeights,
    include_simg: bool,
    targets: Option<&[Tensor; 2]>,
) -> Result<(crate::tensor::Var, BatchLossBreakdown, [Tensor; 2])> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let x1 = tape.constant(stack_images(pairs.iter().map(|p| &p.view1))?);
    let x2 = tape.constant(stack_images(pairs.iter().map(|p| &p.view2))?);
    let g1 = tape.constant(stack_masks(pairs.iter().map(|p| &p.gt1))?);
    let g2 = tape.constant(stack_masks(pairs.iter().map(|p| &p.gt2))?);
    let o1 = model.forward_view(tape, bound, x1, false)?;
    let o2 = model.forward_view(tape, bound, x2, false)?;
    let (z1, z2) = match targets {
        Some([a, b]) => (tape.constant(a.clone()), tape.constant(b.clone())),
        None => (o1.f_z, o2.f_z),
    };
    let used = [tape.value(z1).clone(), tape.value(z2).clone()];
    let simr = loss_simr(tape, o1.f_d, z2, o2.f_d, z1)?;
    let (simg, tr) = match (o1.f_t, o2.f_t, model.trace_head(bound)) {
        (Some(t1), Some(t2), Some(head)) => {
            let simg = loss_simg(tape, t1, t2)?;
            let a = loss_tr(tape, t1, g1, head)?;
            let b = loss_tr(tape, t2, g2, head)?;
            let s = tape.add(a, b)?;
            (simg, tape.scale(s, 0.5))
        }
        _ => {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        }
    };
    let d1 = loss_det(tape, g1, o1.prob)?;
    let d2 = loss_det(tape, g2, o2.prob)?;
    let ds = tape.add(d1, d2)?;
    let det = tape.scale(ds, 0.5);
    let include = include_simg && model.has_trm();
    let total = loss_total(tape, simr, simg, tr, det, weights, include)?;
    let shape = tape.shape(g1);
    let breakdown = BatchLossBreakdown {
        simr: tape.value(simr).item(),
        simg: tape.value(simg).item(),
        tr: tape.value(tr).item(),
        det: tape.value(det).item(),
        total: tape.value(total).item(),
        samples: pairs.len(),
        pixels: shape[0] * shape[2] * shape[3],
        classes: 2,
    };
    Ok((total, breakdown, used))
}

/// Rescales `grads` so their joint ℓ2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One forward/backward/SGD update. Fails without touching the parameters
/// if any gradient is non-finite.
pub fn train_step(model: &mut Model, sgd: &mut SgdState, pairs: &[ViewPair], config: &TrainConfig) -> Result<BatchLossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (total, breakdown) = batch_objective(&mut tape, model, &bound, pairs, &config.weights, config.include_simg)?;
    let grads = tape.backward(total)?;
    let mut grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    for (g, name) in grads.iter().zip(model.params.names()) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    if config.grad_clip > 0.0 {
        clip_global_norm(&mut grads, config.grad_clip);
    }
    sgd.step(model.params.tensors_mut(), &grads)?;
    Ok(breakdown)
}

/// Sample-weighted epoch means of the batch breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub simr: f64,
    pub simg: f64,
    pub tr: f64,
    pub det: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Samples left out of training because their mask is empty.
    pub skipped: usize,
}

impl TrainRun {
    pub fn write_loss_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,simr,simg,tr,det,total")?;
        for r in &self.log {
            writeln!(w, "{},{},{},{},{},{}", r.epoch, r.simr, r.simg, r.tr, r.det, r.total)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model.params.entries())
    }
}

/// Per-sample seed for one epoch of one random stream.
fn stream_seed(root: u64, stream: &str, epoch: usize, id: &str) -> u64 {
    derive_seed(derive_seed_index(derive_seed(root, stream), epoch as u64), id)
}

/// Trains a fresh model. Everything random derives from `config.seed`.
pub fn fit(config: &TrainConfig, samples: &[ImageSample]) -> Result<TrainRun> {
    config.validate()?;
    let usable: Vec<&ImageSample> = samples.iter().filter(|s| !s.mask.is_empty()).collect();
    let skipped = samples.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} samples with empty masks");
    }
    if usable.is_empty() {
        return Err(Error::Empty("training set (no sample has a non-empty mask)"));
    }
    let model_cfg = ModelConfig {
        input_size: config.input_size,
        trm: config.trm,
    };
    let mut model = Model::new(model_cfg, derive_seed(config.seed, "init"))?;
    let mut sgd = SgdState::new(config.momentum, config.weight_decay, config.base_lr, config.batch_size)?;
    let include = config.include_simg && config.trm;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..config.epochs {
        Rng::new(derive_seed_index(derive_seed(config.seed, "shuffle"), epoch as u64)).shuffle(&mut order);
        let mut acc = EpochLog {
            epoch,
            simr: 0.0,
            simg: 0.0,
            tr: 0.0,
            det: 0.0,
            total: 0.0,
        };
        for chunk in order.chunks(config.batch_size) {
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let s = usable[i];
                    let a = augment(s, &config.augment, stream_seed(config.seed, "augment", epoch, &s.id))?;
                    let view_seed = stream_seed(config.seed, "views", epoch, &s.id);
                    make_views(&a, config.views, config.k, config.input_size, view_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            sgd.set_batch_size(pairs.len())?;
            let b = train_step(&mut model, &mut sgd, &pairs, config)?;
            debug_assert!((b.recombine(&config.weights, include) - b.total).abs() < 1e-12);
            let n = b.samples as f64;
            acc.simr += n * b.simr;
            acc.simg += n * b.simg;
            acc.tr += n * b.tr;
            acc.det += n * b.det;
            acc.total += n * b.total;
        }
        let n = usable.len() as f64;
        for v in [&mut acc.simr, &mut acc.simg, &mut acc.tr, &mut acc.det, &mut acc.total] {
            *v /= n;
        }
        log::info!(
            "epoch {epoch}: total {:.5} (simr {:.5}, simg {:.5}, tr {:.5}, det {:.5})",
            acc.total,
            acc.simr,
            acc.simg,
            acc.tr,
            acc.det
        );
        log.push(acc);
    }
    Ok(TrainRun { model, log, skipped })
}

/// Trains on the dataset named in the config.
pub fn fit_from_config(config: &TrainConfig) -> Result<TrainRun> {
    let dir = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no training dataset given".into()))?;
    fit(config, &read_dataset(dir)?)
}

fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let ty = bilinear_axis_weights(h, oh);
    let tx = bilinear_axis_weights(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

/// Probability maps at each sample's own resolution, predicted from the
/// full image (the view-2 path).
pub fn predict(model: &Model, samples: &[ImageSample]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 10;
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let imgs = chunk
            .iter()
            .map(|s| s.image.resize_bilinear(size, size))
            .collect::<Result<Vec<_>>>()?;
        let p = model.predict_masks(stack_images(imgs.iter())?)?;
        for (s, plane) in chunk.iter().zip(p.data().chunks(size * size)) {
            out.push(resize_plane(plane, size, size, s.image.height(), s.image.width()));
        }
    }
    Ok(out)
}

/// Per-image F1/AUC on the full-image predictions.
pub fn evaluate(model: &Model, samples: &[ImageSample]) -> Result<MetricsReport> {
    let probs = predict(model, samples)?;
    evaluate_predictions(samples, &probs)
}

pub fn evaluate_predictions(samples: &[ImageSample], probs: &[Vec<f64>]) -> Result<MetricsReport> {
    if samples.len() != probs.len() {
        return Err(invalid(format!("{} samples but {} predictions", samples.len(), probs.len())));
    }
    let rows = samples
        .iter()
        .zip(probs)
        .map(|(s, p)| MetricsReport::score(&s.id, p, s.mask.data()))
        .collect::<Result<Vec<ImageMetrics>>>()?;
    MetricsReport::from_rows(rows)
}

pub fn load_model(path: &Path, input_size: usize) -> Result<Model> {
    Model::from_entries(checkpoint::load(path)?, input_size)
}
