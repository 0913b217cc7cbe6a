//! Raw numeric kernels on slices. Shapes are validated by the callers.

/// `c = a' * b' + beta * c`, where `a'` is `a` (m×k) or, when `trans_a`, the
/// transpose of a stored k×m matrix; likewise for `b'` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image (cin×h×w) into columns of shape (cin·kh·kw)×(ho·wo).
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (hw_out, pad) = (g.col_cols(), g.pad as isize);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let out = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters columns back onto an image, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (hw_out, pad) = (g.col_cols(), g.pad as isize);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; g.batch * g.cout * cols_n];
    let mut cols = vec![0.0; rows * cols_n];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        let o = &mut out[b * g.cout * cols_n..(b + 1) * g.cout * cols_n];
        gemm(g.cout, rows, cols_n, w, false, &cols, false, o, 0.0);
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of a convolution. Each requested output is returned as `Some`.
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * cols_n;
    let mut dx = need.0.then(|| vec![0.0; g.batch * in_stride]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut db = need.2.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; rows * cols_n];
    for b in 0..g.batch {
        let gy_b = &gy[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
            // dW += gy_b (cout×hw) · colsᵀ (hw×rows)
            gemm(g.cout, cols_n, rows, gy_b, false, &cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ (rows×cout) · gy_b (cout×hw)
            gemm(rows, g.cout, cols_n, w, true, gy_b, false, &mut cols, 0.0);
            col2im(g, &cols, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gy_b.chunks(cols_n).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping k×k mean pooling over the trailing two axes of
/// `planes` stacked planes; trailing rows/columns that do not fill a window are dropped.
pub(crate) fn avg_pool_forward(planes: usize, h: usize, w: usize, k: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    s += row.iter().sum::<f64>();
                }
                dst[oy * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(planes: usize, h: usize, w: usize, k: usize, gy: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * inv;
                for dy in 0..k {
                    for dx_ in 0..k {
                        d[(oy * k + dy) * w + ox * k + dx_] = v;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output axis of a bilinear resize with the
/// align-corners=false convention:
///
/// `src = (dst + 0.5) * in / out - 0.5`, clamped below at 0, then
/// `i0 = floor(src)`, `i1 = min(i0 + 1, in - 1)`, `frac = src - i0` and the
/// sample is `(1 - frac) * v[i0] + frac * v[i1]`.
pub fn bilinear_axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    x: &[f64],
) -> Vec<f64> {
    let ty = bilinear_axis_weights(h, oh);
    let tx = bilinear_axis_weights(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gy: &[f64],
) -> Vec<f64> {
    let ty = bilinear_axis_weights(h, oh);
    let tx = bilinear_axis_weights(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                d[y0 * w + x1] += (1.0 - fy) * fx * v;
                d[y1 * w + x0] += fy * (1.0 - fx) * v;
                d[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    dx
}
