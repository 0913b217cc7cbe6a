//! RGB images, binary masks, boxes, resampling and the PPM/PGM codecs.
//!
//! Images are stored channel-planar (three H×W planes) so they map directly
//! onto 3×H×W tensor slices. Values live in [0, 1]; quantization to 8 bits
//! happens only when writing files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{bilinear_axis_weights, Tensor};

pub const CHANNELS: usize = 3;

/// Half-open pixel box `[x_l, x_r) × [y_l, y_r)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_l: usize,
    pub y_l: usize,
    pub x_r: usize,
    pub y_r: usize,
}

impl BBox {
    pub fn new(x_l: usize, y_l: usize, x_r: usize, y_r: usize) -> Result<Self> {
        if x_l >= x_r || y_l >= y_r {
            return Err(invalid(format!("degenerate box ({x_l},{y_l},{x_r},{y_r})")));
        }
        Ok(Self { x_l, y_l, x_r, y_r })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x_l: 0,
            y_l: 0,
            x_r: width,
            y_r: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x_r - self.x_l
    }

    pub fn height(&self) -> usize {
        self.y_r - self.y_l
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_l <= other.x_l && self.y_l <= other.y_l && self.x_r >= other.x_r && self.y_r >= other.y_r
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x_l < other.x_r && other.x_l < self.x_r && self.y_l < other.y_r && other.y_l < self.y_r
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x_r <= width && self.y_r <= height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// `data` holds three planes of `height × width` values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(invalid(format!(
                "image of {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rounds every value to the nearest multiple of 1/255, exactly as a
    /// write/read cycle through PPM would.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(to_byte(v)) / 255.0).collect(),
        }
    }

    pub fn crop(&self, b: &BBox) -> Result<Self> {
        if !b.fits_in(self.width, self.height) {
            return Err(invalid(format!("crop {b:?} outside {}x{} image", self.height, self.width)));
        }
        let mut data = Vec::with_capacity(CHANNELS * b.area());
        for c in 0..CHANNELS {
            for y in b.y_l..b.y_r {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + b.x_l..row + b.x_r]);
            }
        }
        Self::new(b.height(), b.width(), data)
    }

    /// Bilinear resize (align-corners=false); same-size resizes are exact
    /// copies.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("resize target must be positive"));
        }
        let ty = bilinear_axis_weights(self.height, height);
        let tx = bilinear_axis_weights(self.width, width);
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            let p = self.plane(c);
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = (1.0 - fx) * p[y0 * self.width + x0] + fx * p[y0 * self.width + x1];
                    let bot = (1.0 - fx) * p[y1 * self.width + x0] + fx * p[y1 * self.width + x1];
                    data.push((1.0 - fy) * top + fy * bot);
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn to_grayscale(&self) -> Self {
        let n = self.height * self.width;
        let mut out = self.clone();
        for i in 0..n {
            let g = 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i];
            for c in 0..CHANNELS {
                out.data[c * n + i] = g;
            }
        }
        out
    }

    /// 3×H×W tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([CHANNELS, self.height, self.width], self.data.clone()).expect("consistent dims")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(invalid(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| usize::from(v)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn crop(&self, b: &BBox) -> Result<Self> {
        if !b.fits_in(self.width, self.height) {
            return Err(invalid(format!("crop {b:?} outside {}x{} mask", self.height, self.width)));
        }
        Ok(Self::from_fn(b.height(), b.width(), |y, x| self.get(b.y_l + y, b.x_l + x)))
    }

    /// Nearest-neighbour resize: output pixel `d` reads source
    /// `floor((d + 0.5) * in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("resize target must be positive"));
        }
        let src = |d: usize, input: usize, output: usize| (((d as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1);
        Ok(Self::from_fn(height, width, |y, x| {
            self.get(src(y, self.height, height), src(x, self.width, width))
        }))
    }

    /// 1×H×W tensor of 0.0/1.0 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("consistent dims")
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255), values rounded to the nearest 8-bit level.
pub fn write_ppm(w: &mut impl Write, img: &Image) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let n = img.height * img.width;
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..CHANNELS {
            bytes.push(to_byte(img.data[c * n + i]));
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Binary PGM (P5, maxval 255) with foreground stored as 255.
pub fn write_pgm(w: &mut impl Write, mask: &Mask) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn netpbm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "netpbm",
        detail: detail.into(),
    }
}

/// Parses a netpbm header (magic, width, height, maxval) and returns the
/// dimensions plus the raster bytes.
fn read_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(netpbm_err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| netpbm_err("bad header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(netpbm_err("missing separator after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(netpbm_err(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(netpbm_err("zero dimension"));
    }
    let raster = &bytes[pos..];
    if raster.len() != width * height * channels {
        return Err(netpbm_err(format!(
            "expected {} raster bytes, found {}",
            width * height * channels,
            raster.len()
        )));
    }
    Ok((width, height, raster))
}

pub fn read_ppm(r: &mut impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (width, height, raster) = read_netpbm(&bytes, b"P6", CHANNELS)?;
    let n = width * height;
    let mut data = vec![0.0; CHANNELS * n];
    for (i, px) in raster.chunks(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            data[c * n + i] = f64::from(px[c]) / 255.0;
        }
    }
    Image::new(height, width, data)
}

/// Reads a PGM mask; any nonzero byte counts as foreground.
pub fn read_pgm(r: &mut impl Read) -> Result<Mask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (width, height, raster) = read_netpbm(&bytes, b"P5", 1)?;
    Mask::new(height, width, raster.iter().map(|&b| u8::from(b != 0)).collect())
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut f, img)?;
    f.flush()?;
    Ok(())
}

pub fn save_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(&mut f, mask)?;
    f.flush()?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    read_ppm(&mut std::fs::File::open(path)?)
}

pub fn load_pgm(path: &Path) -> Result<Mask> {
    read_pgm(&mut std::fs::File::open(path)?)
}
