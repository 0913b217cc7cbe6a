//! Training-time augmentation. Geometric ops move image and mask together;
//! photometric ops touch the image only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::rng::Rng;
use crate::synth::ImageSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Rotate by a uniformly drawn multiple of 90°.
    pub rotate: bool,
    pub grayscale: f64,
    /// Additive Gaussian noise σ on the 0–255 scale.
    pub noise_sigma: f64,
    /// Brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_h: 0.5,
            flip_v: 0.5,
            rotate: true,
            grayscale: 0.1,
            noise_sigma: 1.0,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            flip_h: 0.0,
            flip_v: 0.0,
            rotate: false,
            grayscale: 0.0,
            noise_sigma: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_h", self.flip_h), ("flip_v", self.flip_v), ("grayscale", self.grayscale)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 || !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(invalid("noise sigma must be >= 0 and jitter ranges in [0, 1)"));
        }
        Ok(())
    }
}

/// Pixel-index permutation helpers shared by image and mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometric {
    FlipH,
    FlipV,
    /// Counter-clockwise quarter turns.
    Rot90(u8),
}

impl Geometric {
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Geometric::Rot90(n) if n % 2 == 1 => (w, h),
            _ => (h, w),
        }
    }

    /// Source `(y, x)` for output pixel `(oy, ox)` of an `h × w` input.
    fn source(self, h: usize, w: usize, oy: usize, ox: usize) -> (usize, usize) {
        match self {
            Geometric::FlipH => (oy, w - 1 - ox),
            Geometric::FlipV => (h - 1 - oy, ox),
            Geometric::Rot90(n) => match n % 4 {
                0 => (oy, ox),
                // output is w × h; its row oy reads input column w-1-oy
                1 => (ox, w - 1 - oy),
                2 => (h - 1 - oy, w - 1 - ox),
                _ => (h - 1 - ox, oy),
            },
        }
    }

    pub fn apply_image(self, img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        let (oh, ow) = self.out_dims(h, w);
        let mut data = Vec::with_capacity(CHANNELS * oh * ow);
        for c in 0..CHANNELS {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = self.source(h, w, oy, ox);
                    data.push(img.get(c, y, x));
                }
            }
        }
        Image::new(oh, ow, data).expect("consistent dims")
    }

    pub fn apply_mask(self, m: &Mask) -> Mask {
        let (h, w) = (m.height(), m.width());
        let (oh, ow) = self.out_dims(h, w);
        Mask::from_fn(oh, ow, |oy, ox| {
            let (y, x) = self.source(h, w, oy, ox);
            m.get(y, x)
        })
    }
}

/// Applies flips, rotation, grayscale, brightness/contrast and noise in that
/// order. Every random draw is made regardless of whether its op is
/// enabled, so toggling one op does not shift the others' streams.
pub fn augment(sample: &ImageSample, spec: &AugmentSpec, seed: u64) -> Result<ImageSample> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let flip_h = rng.bernoulli(spec.flip_h);
    let flip_v = rng.bernoulli(spec.flip_v);
    let turns = rng.below(4) as u8;
    let gray = rng.bernoulli(spec.grayscale);
    let contrast = rng.range(1.0 - spec.contrast, 1.0 + spec.contrast);
    let brightness = rng.range(-spec.brightness, spec.brightness);

    let mut img = sample.image.clone();
    let mut mask = sample.mask.clone();
    let mut ops = Vec::new();
    if flip_h {
        ops.push(Geometric::FlipH);
    }
    if flip_v {
        ops.push(Geometric::FlipV);
    }
    if spec.rotate && turns != 0 {
        ops.push(Geometric::Rot90(turns));
    }
    for op in ops {
        img = op.apply_image(&img);
        mask = op.apply_mask(&mask);
    }
    if gray {
        img = img.to_grayscale();
    }
    if spec.contrast > 0.0 || spec.brightness > 0.0 {
        for v in img.data_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in img.data_mut() {
            *v = (*v + spec.noise_sigma / 255.0 * rng.normal()).clamp(0.0, 1.0);
        }
    }
    Ok(ImageSample {
        image: img,
        mask,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msvg::mask_bbox;
    use crate::image::BBox;
    use crate::synth::Kind;

    fn sample(h: usize, w: usize) -> ImageSample {
        let mut rng = Rng::new(2);
        let img = Image::new(h, w, (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap();
        let mask = Mask::from_fn(h, w, |y, x| (2..4).contains(&y) && (2..4).contains(&x));
        ImageSample::new("a", Kind::Splice, img, mask, 0).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample(5, 7);
        for op in [Geometric::FlipH, Geometric::FlipV] {
            assert_eq!(op.apply_image(&op.apply_image(&s.image)), s.image);
            assert_eq!(op.apply_mask(&op.apply_mask(&s.mask)), s.mask);
        }
        let r = Geometric::Rot90(1);
        let mut img = s.image.clone();
        for _ in 0..4 {
            img = r.apply_image(&img);
        }
        assert_eq!(img, s.image);
    }

    #[test]
    fn rotation_moves_bbox_consistently() {
        // 8×8 with box x∈[1,3), y∈[2,5): a counter-clockwise quarter turn maps
        // pixel (y, x) to (W-1-x, y), so the box becomes x∈[2,5), y∈[5,7).
        let m = Mask::from_fn(8, 8, |y, x| (2..5).contains(&y) && (1..3).contains(&x));
        let r = Geometric::Rot90(1).apply_mask(&m);
        assert_eq!(mask_bbox(&r).unwrap(), BBox::new(2, 5, 5, 7).unwrap());
        let r2 = Geometric::Rot90(2).apply_mask(&m);
        assert_eq!(mask_bbox(&r2).unwrap(), BBox::new(5, 3, 7, 6).unwrap());
        // the image pixel follows the mask pixel
        let s = sample(8, 8);
        let ri = Geometric::Rot90(1).apply_image(&s.image);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(ri.get(1, 7 - x, y), s.image.get(1, y, x));
            }
        }
    }

    #[test]
    fn disabled_spec_is_identity() {
        let s = sample(6, 6);
        for seed in 0..5 {
            assert_eq!(augment(&s, &AugmentSpec::none(), seed).unwrap(), s);
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_keeps_mask_aligned() {
        let s = sample(8, 8);
        let spec = AugmentSpec::default();
        for seed in 0..20 {
            let a = augment(&s, &spec, seed).unwrap();
            assert_eq!(a, augment(&s, &spec, seed).unwrap());
            assert_eq!(a.mask.count(), s.mask.count());
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_probabilities() {
        let spec = AugmentSpec {
            flip_h: 1.5,
            ..AugmentSpec::none()
        };
        assert!(spec.validate().is_err());
    }
}
