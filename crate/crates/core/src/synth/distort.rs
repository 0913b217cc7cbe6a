//! Post-processing distortions for robustness evaluation. Masks are never
//! touched.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;

use super::ImageSample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    Identity,
    /// Bilinear down to `scale` of the size, then back up.
    Resize(f64),
    /// Separable Gaussian with an odd kernel size.
    GaussianBlur(usize),
    /// Additive Gaussian noise, σ on the 0–255 scale.
    GaussianNoise(f64),
    /// 8×8 block DCT quantization at quality 1–100.
    JpegLike(u8),
}

impl Distortion {
    /// The eight standard robustness settings: two each of resize, blur, noise and JPEG-like quantization.
    pub const STANDARD: [Distortion; 8] = [
        Distortion::Resize(0.78),
        Distortion::Resize(0.25),
        Distortion::GaussianBlur(3),
        Distortion::GaussianBlur(15),
        Distortion::GaussianNoise(3.0),
        Distortion::GaussianNoise(15.0),
        Distortion::JpegLike(100),
        Distortion::JpegLike(50),
    ];

    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::Identity => Ok(()),
            Distortion::Resize(s) if s > 0.0 && s <= 1.0 => Ok(()),
            Distortion::Resize(s) => Err(invalid(format!("resize scale {s} outside (0, 1]"))),
            Distortion::GaussianBlur(k) if k >= 3 && k % 2 == 1 => Ok(()),
            Distortion::GaussianBlur(k) => Err(invalid(format!("blur kernel {k} must be odd and >= 3"))),
            Distortion::GaussianNoise(s) if s >= 0.0 && s.is_finite() => Ok(()),
            Distortion::GaussianNoise(s) => Err(invalid(format!("noise sigma {s} must be >= 0"))),
            Distortion::JpegLike(q) if (1..=100).contains(&q) => Ok(()),
            Distortion::JpegLike(q) => Err(invalid(format!("jpeg quality {q} outside 1..=100"))),
        }
    }

    /// Table-style row label, e.g. `Resize(0.78x)`.
    pub fn label(&self) -> String {
        match *self {
            Distortion::Identity => "Identity".into(),
            Distortion::Resize(s) => format!("Resize({s}x)"),
            Distortion::GaussianBlur(k) => format!("GaussianBlur(kernel={k})"),
            Distortion::GaussianNoise(s) => format!("GaussianNoise(sigma={s})"),
            Distortion::JpegLike(q) => format!("JPEG(q={q})"),
        }
    }
}

/// Round-trips through `FromStr`: `identity`, `resize:0.78`, `blur:3`,
/// `noise:15`, `jpeg:50`.
impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distortion::Identity => write!(f, "identity"),
            Distortion::Resize(s) => write!(f, "resize:{s}"),
            Distortion::GaussianBlur(k) => write!(f, "blur:{k}"),
            Distortion::GaussianNoise(s) => write!(f, "noise:{s}"),
            Distortion::JpegLike(q) => write!(f, "jpeg:{q}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(Distortion::Identity);
        }
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("distortion `{s}` must look like name:value")))?;
        let bad = |_| invalid(format!("bad parameter in distortion `{s}`"));
        let d = match name {
            "resize" => Distortion::Resize(arg.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?),
            "blur" => Distortion::GaussianBlur(arg.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
            "noise" => Distortion::GaussianNoise(arg.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?),
            "jpeg" => Distortion::JpegLike(arg.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
            _ => return Err(invalid(format!("unknown distortion `{name}`"))),
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn distort(sample: &ImageSample, d: Distortion, seed: u64) -> Result<ImageSample> {
    d.validate()?;
    let img = &sample.image;
    let image = match d {
        Distortion::Identity => img.clone(),
        Distortion::Resize(s) => resize_round_trip(img, s)?,
        Distortion::GaussianBlur(k) => gaussian_blur(img, k),
        Distortion::GaussianNoise(sigma) => add_noise(img, sigma, seed),
        Distortion::JpegLike(q) => jpeg_like(img, q),
    };
    Ok(ImageSample {
        image,
        ..sample.clone()
    })
}

fn resize_round_trip(img: &Image, scale: f64) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    img.resize_bilinear(sh, sw)?.resize_bilinear(h, w)
}

/// Normalized Gaussian taps with σ = 0.3·((k−1)/2 − 1) + 0.8.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let r = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without repeating the edge pixel (`dcb|abcd|cba`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn gaussian_blur(img: &Image, k: usize) -> Image {
    let taps = gaussian_kernel(k);
    let r = (k / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.plane(c);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, &wt)| wt * src[y * w + reflect101(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, &wt)| wt * tmp[reflect101(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

fn add_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = Rng::new(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + sigma / 255.0 * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

/// IJG standard luminance quantization table (quality 50).
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG quality scaling of the luminance table, entries clamped to [1, 255].
pub fn quant_table(q: u8) -> [f64; 64] {
    let q = u32::from(q.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA_QUANT) {
        *dst = f64::from(((u32::from(base) * scale + 50) / 100).clamp(1, 255));
    }
    t
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Each channel on the 0–255 scale, level-shifted by 128, is split into 8×8
/// blocks (edge blocks padded by replication), transformed, quantized,
/// dequantized and inverted.
fn jpeg_like(img: &Image, q: u8) -> Image {
    let table = quant_table(q);
    let basis = dct_basis();
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        *v = src[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                // forward: rows then columns
                let mut tmp = [[0.0; 8]; 8];
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y][u] = (0..8).map(|x| basis[u][x] * block[y][x]).sum();
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for v in 0..8 {
                    for u in 0..8 {
                        let raw: f64 = (0..8).map(|y| basis[v][y] * tmp[y][u]).sum();
                        let t = table[v * 8 + u];
                        coef[v][u] = (raw / t).round() * t;
                    }
                }
                for y in 0..8 {
                    for u in 0..8 {
                        tmp[y][u] = (0..8).map(|v| basis[v][y] * coef[v][u]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y < h && bx + x < w {
                            let v: f64 = (0..8).map(|u| basis[u][x] * tmp[y][u]).sum();
                            dst[(by + y) * w + bx + x] = ((v + 128.0) / 255.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Mask;
    use crate::synth::{gen_splice, GenParams, Kind};

    fn sample() -> ImageSample {
        let mut s = gen_splice(11, 40, 36, &GenParams::default()).unwrap();
        s.id = "s".into();
        s
    }

    #[test]
    fn identity_cases() {
        let s = sample();
        for d in [Distortion::Identity, Distortion::Resize(1.0), Distortion::GaussianNoise(0.0)] {
            let out = distort(&s, d, 3).unwrap();
            assert!(out.image.data().iter().zip(s.image.data()).all(|(a, b)| (a - b).abs() <= 1e-12), "{d:?}");
        }
    }

    #[test]
    fn shape_kept_and_mask_untouched() {
        let s = sample();
        for d in Distortion::STANDARD {
            let out = distort(&s, d, 5).unwrap();
            assert_eq!((out.image.height(), out.image.width()), (40, 36));
            assert_eq!(out.mask, s.mask);
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out, distort(&s, d, 5).unwrap(), "{d:?} not deterministic");
        }
    }

    #[test]
    fn jpeg_on_constant_image_is_within_dc_step() {
        let img = Image::filled(16, 16, 0.3);
        let s = ImageSample::new("c", Kind::Authentic, img, Mask::zeros(16, 16), 0).unwrap();
        let out = distort(&s, Distortion::JpegLike(100), 0).unwrap();
        // DC coefficient is 8·(v·255−128); rounding moves it by ≤ 0.5, i.e.
        // every pixel by ≤ 0.5/8 grey levels.
        let bound = 0.5 / 8.0 / 255.0 + 1e-12;
        assert!(out.image.data().iter().all(|v| (v - 0.3).abs() <= bound));
    }

    #[test]
    fn quant_table_scaling() {
        assert_eq!(quant_table(50)[0], 16.0);
        assert!(quant_table(100).iter().all(|&t| t == 1.0));
        assert_eq!(quant_table(10)[0], 80.0);
        assert_eq!(quant_table(1)[63], 255.0);
    }

    #[test]
    fn blur_kernel_properties() {
        for k in [3, 5, 15] {
            let t = gaussian_kernel(k);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k {
                assert_eq!(t[i], t[k - 1 - i]);
            }
        }
        // σ = 0.8 for k = 3
        let t = gaussian_kernel(3);
        let e = (-1.0f64 / (2.0 * 0.64)).exp();
        assert!((t[0] - e / (1.0 + 2.0 * e)).abs() < 1e-15);
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let s = ImageSample::new("c", Kind::Authentic, Image::filled(9, 7, 0.6), Mask::zeros(9, 7), 0).unwrap();
        let out = distort(&s, Distortion::GaussianBlur(15), 0).unwrap();
        assert!(out.image.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn parsing_and_validation() {
        for d in Distortion::STANDARD {
            assert_eq!(d.to_string().parse::<Distortion>().unwrap(), d);
        }
        assert_eq!("identity".parse::<Distortion>().unwrap(), Distortion::Identity);
        for bad in ["blur:4", "blur:1", "resize:1.5", "resize:0", "noise:-1", "jpeg:0", "jpeg:101", "sharpen:3", "blur"] {
            assert!(bad.parse::<Distortion>().is_err(), "{bad}");
        }
    }
}
