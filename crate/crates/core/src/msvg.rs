//! Multi-scale view generation.
//!
//! View 2 is the whole image. View 1 covers a fraction `k` of the image
//! area, keeps the image aspect ratio and is centred on the mask centroid:
//!
//! 1. size `bh = ceil(√k·H)`, `bw = ceil(√k·W)` (so the area is at least `k·H·W`);
//! 2. top-left `floor(c − size/2 + 0.5)` per axis, `c` the centroid of pixel
//!    centres;
//! 3. shifted the least amount needed to lie inside the image;
//! 4. on any axis where it still misses part of the mask box, grown by the
//!    same amount on both sides until it covers it, then clipped.
//!
//! The minimum view is the tight mask box with a one-pixel margin.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{BBox, Image, Mask, CHANNELS};
use crate::model::Model;
use crate::synth::ImageSample;
use crate::tensor::Tensor;

/// The discrete scale grid 0.1, 0.2, …, 1.0.
pub const K_VALUES: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DEFAULT_K: f64 = 0.6;

/// Differences within this distance of the minimum count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub fn validate_k(k: f64) -> Result<()> {
    if K_VALUES.iter().any(|&v| (v - k).abs() < 1e-9) {
        Ok(())
    } else {
        Err(invalid(format!("k = {k} is not one of 0.1, 0.2, ..., 1.0")))
    }
}

/// Tight bounding box of the foreground.
pub fn mask_bbox(mask: &Mask) -> Result<BBox> {
    let (mut x_l, mut y_l, mut x_r, mut y_r) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                x_l = x_l.min(x);
                y_l = y_l.min(y);
                x_r = x_r.max(x + 1);
                y_r = y_r.max(y + 1);
            }
        }
    }
    if x_r == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(BBox { x_l, y_l, x_r, y_r })
}

/// Mean pixel-centre coordinates `(x, y)` of the foreground.
pub fn mask_centroid(mask: &Mask) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok((sx / n, sy / n))
}

/// One axis of the view-1 placement: returns `[lo, hi)`.
fn place_axis(len: usize, extent: usize, centre: f64, must_lo: usize, must_hi: usize) -> (usize, usize) {
    let len = len.min(extent);
    let start = (centre - len as f64 / 2.0 + 0.5).floor();
    let start = start.clamp(0.0, (extent - len) as f64) as usize;
    let (mut lo, mut hi) = (start, start + len);
    if lo > must_lo || hi < must_hi {
        let grow = lo.saturating_sub(must_lo).max(must_hi.saturating_sub(hi));
        lo = lo.saturating_sub(grow);
        hi = (hi + grow).min(extent);
    }
    (lo, hi)
}

/// View-1 box for any `k ∈ (0, 1]`, given the mask box and centroid.
pub fn view1_box(width: usize, height: usize, k: f64, mask_box: &BBox, centroid: (f64, f64)) -> Result<BBox> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(invalid(format!("k = {k} outside (0, 1]")));
    }
    if !mask_box.fits_in(width, height) {
        return Err(invalid(format!("mask box {mask_box:?} outside {width}x{height} image")));
    }
    let s = k.sqrt();
    let bw = (s * width as f64).ceil() as usize;
    let bh = (s * height as f64).ceil() as usize;
    let (x_l, x_r) = place_axis(bw, width, centroid.0, mask_box.x_l, mask_box.x_r);
    let (y_l, y_r) = place_axis(bh, height, centroid.1, mask_box.y_l, mask_box.y_r);
    BBox::new(x_l, y_l, x_r, y_r)
}

/// Tight mask box grown by one pixel on each side, clipped to the image.
pub fn min_view_box(mask: &Mask) -> Result<BBox> {
    let b = mask_bbox(mask)?;
    BBox::new(
        b.x_l.saturating_sub(1),
        b.y_l.saturating_sub(1),
        (b.x_r + 1).min(mask.width()),
        (b.y_r + 1).min(mask.height()),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    pub gt1: Mask,
    pub gt2: Mask,
    /// View-1 box in original image coordinates.
    pub geometry: BBox,
    pub k: f64,
}

/// Crops `image`/`mask` to `b` and resizes to `size × size` (bilinear for
/// the image, nearest for the mask).
pub fn crop_resize(image: &Image, mask: &Mask, b: &BBox, size: usize) -> Result<(Image, Mask)> {
    let img = image.crop(b)?.resize_bilinear(size, size)?;
    let m = mask.crop(b)?.resize_nearest(size, size)?;
    Ok((img, m))
}

impl ViewPair {
    pub fn from_boxes(sample: &ImageSample, box1: BBox, box2: BBox, k: f64, size: usize) -> Result<Self> {
        let (view1, gt1) = crop_resize(&sample.image, &sample.mask, &box1, size)?;
        let (view2, gt2) = crop_resize(&sample.image, &sample.mask, &box2, size)?;
        Ok(Self {
            view1,
            view2,
            gt1,
            gt2,
            geometry: box1,
            k,
        })
    }
}

/// Deterministic view pair for one sample at scale `k`.
pub fn generate_views(sample: &ImageSample, k: f64, size: usize) -> Result<ViewPair> {
    validate_k(k)?;
    let (h, w) = (sample.image.height(), sample.image.width());
    let mb = mask_bbox(&sample.mask)?;
    let c = mask_centroid(&sample.mask)?;
    let b1 = view1_box(w, h, k, &mb, c)?;
    ViewPair::from_boxes(sample, b1, BBox::full(w, h), k, size)
}

/// Full-image view and minimum view at network resolution.
pub fn min_view(sample: &ImageSample, size: usize) -> Result<(Image, Mask)> {
    let b = min_view_box(&sample.mask)?;
    crop_resize(&sample.image, &sample.mask, &b, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: f64,
    /// Mean ℓ2 distance between view-1 and view-2 embeddings.
    pub s12: f64,
    /// Mean ℓ2 distance between view-2 and minimum-view embeddings.
    pub s2min: f64,
    pub absdiff: f64,
}

/// Embeddings behind a k sweep, enough to recompute every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub ids: Vec<String>,
    pub view2: Vec<Vec<f64>>,
    pub min_view: Vec<Vec<f64>>,
    /// `(k, per-sample view-1 embeddings)` in grid order.
    pub view1: Vec<(f64, Vec<Vec<f64>>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub rows: Vec<KRow>,
    pub chosen_k: f64,
}

impl KSelectionReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "k,S12,S2min,absdiff")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.k, r.s12, r.s2min, r.absdiff)?;
        }
        Ok(())
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| l2_distance(x, y)).sum::<f64>() / a.len() as f64
}

/// Smallest k whose difference is within [`TIE_TOLERANCE`] of the minimum.
pub fn choose_k(rows: &[KRow]) -> Result<f64> {
    let best = rows
        .iter()
        .map(|r| r.absdiff)
        .fold(f64::INFINITY, f64::min);
    rows.iter()
        .filter(|r| r.absdiff <= best + TIE_TOLERANCE)
        .map(|r| r.k)
        .fold(None, |acc: Option<f64>, k| Some(acc.map_or(k, |a| a.min(k))))
        .ok_or(Error::Empty("k sweep"))
}

/// Rebuilds the report rows from a dump.
pub fn report_from_embeddings(dump: &EmbeddingDump) -> Result<KSelectionReport> {
    if dump.ids.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let s2min = mean_distance(&dump.view2, &dump.min_view);
    let rows: Vec<KRow> = dump
        .view1
        .iter()
        .map(|(k, v1)| {
            let s12 = mean_distance(v1, &dump.view2);
            KRow {
                k: *k,
                s12,
                s2min,
                absdiff: (s12 - s2min).abs(),
            }
        })
        .collect();
    let chosen_k = choose_k(&rows)?;
    Ok(KSelectionReport { rows, chosen_k })
}

/// Embeddings (encoder + global average) of a list of images, in chunks.
pub fn embed_images(model: &Model, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 25;
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * CHANNELS * size * size);
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let batch = Tensor::new([chunk.len(), CHANNELS, size, size], data)?;
        let e = model.embed(batch)?;
        let d = e.shape()[1];
        out.extend(e.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Sweeps the k grid with a frozen encoder. Samples with empty masks are
/// skipped.
pub fn select_k(samples: &[ImageSample], model: &Model) -> Result<(KSelectionReport, EmbeddingDump)> {
    let size = model.config.input_size;
    let usable: Vec<&ImageSample> = samples.iter().filter(|s| !s.mask.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut view2 = Vec::with_capacity(usable.len());
    let mut minv = Vec::with_capacity(usable.len());
    for s in &usable {
        view2.push(s.image.resize_bilinear(size, size)?);
        minv.push(min_view(s, size)?.0);
    }
    let mut view1 = Vec::with_capacity(K_VALUES.len());
    for &k in &K_VALUES {
        let imgs = usable
            .iter()
            .map(|s| generate_views(s, k, size).map(|v| v.view1))
            .collect::<Result<Vec<_>>>()?;
        view1.push((k, embed_images(model, &imgs)?));
    }
    let dump = EmbeddingDump {
        ids: usable.iter().map(|s| s.id.clone()).collect(),
        view2: embed_images(model, &view2)?,
        min_view: embed_images(model, &minv)?,
        view1,
    };
    Ok((report_from_embeddings(&dump)?, dump))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;
    use crate::synth::{generate_corpus, CorpusSpec, Kind};

    fn block_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    fn sample_with(mask: Mask) -> ImageSample {
        let (h, w) = (mask.height(), mask.width());
        let mut r = Rng::new(1);
        let img = Image::new(h, w, (0..3 * h * w).map(|_| r.uniform()).collect()).unwrap();
        ImageSample::new("s", Kind::Splice, img, mask, 0).unwrap()
    }

    #[test]
    fn bbox_examples() {
        let m = block_mask(8, 8, 2, 4, 2, 4);
        assert_eq!(mask_bbox(&m).unwrap(), BBox::new(2, 2, 4, 4).unwrap());
        let full = Mask::from_fn(5, 7, |_, _| true);
        assert_eq!(mask_bbox(&full).unwrap(), BBox::full(7, 5));
        assert!(matches!(mask_bbox(&Mask::zeros(3, 3)), Err(Error::EmptyMask)));
    }

    #[test]
    fn bbox_matches_scan_on_sparse_masks() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let m = Mask::from_fn(9, 11, |_, _| rng.bernoulli(0.08));
            let pts: Vec<(usize, usize)> = (0..9)
                .flat_map(|y| (0..11).map(move |x| (y, x)))
                .filter(|&(y, x)| m.get(y, x))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let b = mask_bbox(&m).unwrap();
            assert_eq!(b.y_l, pts.iter().map(|p| p.0).min().unwrap());
            assert_eq!(b.y_r, pts.iter().map(|p| p.0).max().unwrap() + 1);
            assert_eq!(b.x_l, pts.iter().map(|p| p.1).min().unwrap());
            assert_eq!(b.x_r, pts.iter().map(|p| p.1).max().unwrap() + 1);
        }
    }

    #[test]
    fn centred_quarter_view() {
        let m = block_mask(64, 64, 30, 34, 30, 34);
        assert_eq!(mask_centroid(&m).unwrap(), (32.0, 32.0));
        let b = view1_box(64, 64, 0.25, &mask_bbox(&m).unwrap(), (32.0, 32.0)).unwrap();
        assert_eq!(b, BBox::new(16, 16, 48, 48).unwrap());
    }

    #[test]
    fn full_scale_gives_identical_views() {
        let s = sample_with(block_mask(40, 40, 3, 9, 20, 30));
        let v = generate_views(&s, 1.0, 32).unwrap();
        assert_eq!(v.geometry, BBox::full(40, 40));
        assert_eq!(v.view1, v.view2);
        assert_eq!(v.gt1, v.gt2);
    }

    #[test]
    fn view_is_shifted_inside_the_image() {
        let m = block_mask(64, 64, 0, 2, 0, 2);
        let b = view1_box(64, 64, 0.25, &mask_bbox(&m).unwrap(), mask_centroid(&m).unwrap()).unwrap();
        assert_eq!(b, BBox::new(0, 0, 32, 32).unwrap());
    }

    #[test]
    fn large_masks_force_symmetric_growth() {
        // 40-wide mask cannot fit a 21-wide view
        let m = block_mask(64, 64, 10, 14, 12, 52);
        let mb = mask_bbox(&m).unwrap();
        let b = view1_box(64, 64, 0.1, &mb, mask_centroid(&m).unwrap()).unwrap();
        assert!(b.contains(&mb));
        assert_eq!(b.height(), 21);
        // base 21 wide starting at 22; needs 10 more on the left and 9 on the right
        assert_eq!((b.x_l, b.x_r), (12, 53));
    }

    #[test]
    fn invalid_inputs() {
        let s = sample_with(block_mask(16, 16, 2, 4, 2, 4));
        assert!(generate_views(&s, 0.25, 16).is_err());
        assert!(generate_views(&s, 0.0, 16).is_err());
        let mut empty = s.clone();
        empty.mask = Mask::zeros(16, 16);
        assert!(matches!(generate_views(&empty, 0.6, 16), Err(Error::EmptyMask)));
    }

    #[test]
    fn min_view_has_margin() {
        let m = block_mask(16, 16, 0, 3, 5, 9);
        assert_eq!(min_view_box(&m).unwrap(), BBox::new(4, 0, 10, 4).unwrap());
    }

    #[test]
    fn coverage_of_background_grows_with_k() {
        let samples = generate_corpus(&CorpusSpec::new(2, 30, 64, "m")).unwrap();
        for s in &samples {
            let mut last = -1.0;
            for &k in &K_VALUES {
                let v = generate_views(s, k, 64).unwrap();
                let b = v.geometry;
                let bg = (b.y_l..b.y_r)
                    .flat_map(|y| (b.x_l..b.x_r).map(move |x| (y, x)))
                    .filter(|&(y, x)| !s.mask.get(y, x))
                    .count() as f64;
                let frac = bg / (s.mask.height() * s.mask.width() - s.mask.count()) as f64;
                assert!(frac >= last, "{} k={k}", s.id);
                last = frac;
            }
        }
    }

    #[test]
    fn tie_break_prefers_small_k() {
        let row = |k, d| KRow {
            k,
            s12: 0.0,
            s2min: 0.0,
            absdiff: d,
        };
        let rows = vec![row(0.1, 0.3), row(0.2, 0.1), row(0.3, 0.1 + 1e-13), row(0.4, 0.1)];
        assert_eq!(choose_k(&rows).unwrap(), 0.2);
        assert!(choose_k(&[]).is_err());
    }

    #[test]
    fn select_k_report_recomputes_from_dump() {
        let samples = generate_corpus(&CorpusSpec::new(3, 6, 64, "k")).unwrap();
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let (report, dump) = select_k(&samples, &model).unwrap();
        assert_eq!(report.rows.len(), 10);
        assert_eq!(report.rows[9].s12, 0.0);
        assert_eq!(report_from_embeddings(&dump).unwrap(), report);
        validate_k(report.chosen_k).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("k,S12,S2min,absdiff\n"));
        assert!(select_k(&[], &model).is_err());
    }
}
