//! Similarity, trace-relation and detection losses, and their weighted total.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated.
//! Sums over the training set are realized as per-batch means.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Tape, Var};

/// Lower bound for probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Divisor used in place of a zero vector norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_tr: f64,
    pub lambda_det: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tr: 0.5,
            lambda_det: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_tr < 0.0 || self.lambda_det < 0.0 || !self.lambda_tr.is_finite() || !self.lambda_det.is_finite() {
            return Err(invalid(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub simr: f64,
    pub simg: f64,
    pub tr: f64,
    pub det: f64,
    pub total: f64,
    /// Samples in the batch.
    pub samples: usize,
    /// Pixels per batch (per view).
    pub pixels: usize,
    /// Detection classes.
    pub classes: usize,
}

impl BatchLossBreakdown {
    /// Recomputes the total from the parts.
    pub fn recombine(&self, weights: &LossWeights, include_simg: bool) -> f64 {
        total_value(self.simr, self.simg, self.tr, self.det, weights, include_simg)
    }
}

/// `simr + λ_TR·tr + λ_Det·det`, plus `simg` when enabled.
pub fn total_value(simr: f64, simg: f64, tr: f64, det: f64, weights: &LossWeights, include_simg: bool) -> f64 {
    let mut total = simr + weights.lambda_tr * tr + weights.lambda_det * det;
    if include_simg {
        total += simg;
    }
    total
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn batch_of(tape: &Tape, v: Var) -> f64 {
    tape.shape(v).first().copied().unwrap_or(1) as f64
}

/// ℓ1 distance between trace summaries, averaged over the batch (first axis).
pub fn loss_simg(tape: &mut Tape, f_t: Var, f_t_other: Var) -> Result<Var> {
    same_shape(tape, "loss_simg", f_t, f_t_other)?;
    let d = tape.sub(f_t, f_t_other)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    let b = batch_of(tape, f_t);
    Ok(tape.scale(s, 1.0 / b))
}

/// Row-wise cosine similarity of two B×D matrices, as a length-B vector.
fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = tape.l2_normalize(a, NORM_EPS)?;
    let nb = tape.l2_normalize(b, NORM_EPS)?;
    let p = tape.mul(na, nb)?;
    let last = tape.shape(p).len() - 1;
    tape.sum_axis(p, last)
}

/// Symmetric negative cosine similarity between predictions and the other
/// view's projections; projections pass through a stop-gradient.
///
/// Inputs are B×D; the result is the batch mean.
pub fn loss_simr(tape: &mut Tape, f_d: Var, f_z_other: Var, f_d_other: Var, f_z: Var) -> Result<Var> {
    for (x, y) in [(f_d, f_z_other), (f_d_other, f_z), (f_d, f_d_other)] {
        same_shape(tape, "loss_simr", x, y)?;
    }
    if tape.shape(f_d).len() != 2 {
        return Err(invalid(format!("loss_simr expects B×D inputs, got {:?}", tape.shape(f_d))));
    }
    let z_other = tape.stop_gradient(f_z_other);
    let z = tape.stop_gradient(f_z);
    let c1 = cosine_rows(tape, f_d, z_other)?;
    let c2 = cosine_rows(tape, f_d_other, z)?;
    let s = tape.add(c1, c2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -0.5))
}

/// The learned 1×1 projection that turns trace summaries into a
/// one-channel map.
#[derive(Clone, Copy, Debug)]
pub struct TraceHead {
    pub weight: Var,
    pub bias: Var,
}

/// `H_t = sigmoid(conv1x1(upsample(F_t → GT size)))`.
pub fn trace_map(tape: &mut Tape, f_t: Var, head: TraceHead, h: usize, w: usize) -> Result<Var> {
    let up = tape.upsample_bilinear(f_t, h, w)?;
    let logits = tape.conv2d(up, head.weight, Some(head.bias), 1, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Pixel-mean binary cross-entropy with probabilities clamped to
/// [1e-7, 1 − 1e-7]. `gt` must be binary and shaped like `prob`.
pub fn bce(tape: &mut Tape, prob: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "bce", prob, gt)?;
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let log_q = tape.log(q);
    let gt_neg = tape.value(gt).map(|g| 1.0 - g);
    let gt_neg = tape.constant(gt_neg);
    let a = tape.mul(gt, log_p)?;
    let b = tape.mul(gt_neg, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Trace relation loss: BCE between `H_t` and the mask.
pub fn loss_tr(tape: &mut Tape, f_t: Var, gt: Var, head: TraceHead) -> Result<Var> {
    let gs = tape.shape(gt).to_vec();
    if gs.len() != 4 || gs[1] != 1 {
        return Err(invalid(format!("loss_tr: GT must be B×1×H×W, got {gs:?}")));
    }
    let h_t = trace_map(tape, f_t, head, gs[2], gs[3])?;
    bce(tape, h_t, gt)
}

/// One class's per-pixel term `gt·log p + 2·gt·p / (gt² + p²)`, with the
/// log argument clamped below at 1e-7 and 0/0 taken as 0.
fn det_class_term(tape: &mut Tape, gt: Var, p: Var) -> Result<Var> {
    let pc = tape.clamp(p, PROB_EPS, 1.0);
    let log_p = tape.log(pc);
    let ce = tape.mul(gt, log_p)?;
    let gp = tape.mul(gt, p)?;
    let num = tape.scale(gp, 2.0);
    let g2 = tape.mul(gt, gt)?;
    let p2 = tape.mul(p, p)?;
    let den = tape.add(g2, p2)?;
    let dice = tape.div_safe(num, den)?;
    tape.add(ce, dice)
}

/// Hybrid cross-entropy + soft-dice detection loss over the two classes
/// (manipulated: `(gt, p)`, authentic: `(1−gt, 1−p)`), normalized by the
/// number of pixels in the batch. A perfect prediction scores −1.
pub fn loss_det(tape: &mut Tape, gt: Var, p: Var) -> Result<Var> {
    same_shape(tape, "loss_det", gt, p)?;
    let pixels = tape.value(p).numel();
    if pixels == 0 {
        return Err(invalid("loss_det over zero pixels"));
    }
    let gt_neg = tape.value(gt).map(|g| 1.0 - g);
    let gt_neg = tape.constant(gt_neg);
    let neg = tape.scale(p, -1.0);
    let p_neg = tape.add_scalar(neg, 1.0);
    let pos_term = det_class_term(tape, gt, p)?;
    let neg_term = det_class_term(tape, gt_neg, p_neg)?;
    let both = tape.add(pos_term, neg_term)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / pixels as f64))
}

/// Weighted total on the tape; see [`total_value`].
pub fn loss_total(
    tape: &mut Tape,
    simr: Var,
    simg: Var,
    tr: Var,
    det: Var,
    weights: &LossWeights,
    include_simg: bool,
) -> Result<Var> {
    let wtr = tape.scale(tr, weights.lambda_tr);
    let wdet = tape.scale(det, weights.lambda_det);
    let mut total = tape.add(simr, wtr)?;
    total = tape.add(total, wdet)?;
    if include_simg {
        total = tape.add(total, simg)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::rng::Rng;
    use crate::testutil::{check_gradients, random_tensor};

    fn scalar_of(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new([1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn simg_examples() {
        let mut t = Tape::new();
        let a = t.constant(row(&[1.0, 2.0]));
        let z = t.constant(row(&[0.0, 0.0]));
        let l = loss_simg(&mut t, a, z).unwrap();
        assert_eq!(scalar_of(&t, l), 3.0);
        let l = loss_simg(&mut t, a, a).unwrap();
        assert_eq!(scalar_of(&t, l), 0.0);
        let bad = t.constant(row(&[1.0]));
        assert!(loss_simg(&mut t, a, bad).is_err());
    }

    #[test]
    fn simr_anchors() {
        let mut t = Tape::new();
        let e1 = t.constant(row(&[1.0, 0.0]));
        let e2 = t.constant(row(&[0.0, 1.0]));
        let l = loss_simr(&mut t, e1, e1, e2, e2).unwrap();
        assert!((scalar_of(&t, l) + 1.0).abs() < 1e-12);

        let basis: Vec<Var> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                t.constant(row(&v))
            })
            .collect();
        let l = loss_simr(&mut t, basis[0], basis[1], basis[2], basis[3]).unwrap();
        assert_eq!(scalar_of(&t, l), 0.0);
    }

    #[test]
    fn simr_projection_gradient_is_cut() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let d1 = t.param(random_tensor(&mut rng, &[3, 5]));
        let d2 = t.param(random_tensor(&mut rng, &[3, 5]));
        let z1 = t.param(random_tensor(&mut rng, &[3, 5]));
        let z2 = t.param(random_tensor(&mut rng, &[3, 5]));
        let l = loss_simr(&mut t, d1, z2, d2, z1).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(z1).is_none() && g.get(z2).is_none());
        assert!(g.wrt(d1).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn tr_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::new([1, 1, 1, 1], vec![0.5]).unwrap());
        let g = t.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let l = bce(&mut t, p, g).unwrap();
        assert!((scalar_of(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let gt = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = t.constant(gt.clone());
        let g = t.constant(gt);
        let l = bce(&mut t, p, g).unwrap();
        assert!(scalar_of(&t, l) <= 1e-6);
    }

    #[test]
    fn det_examples() {
        let mut t = Tape::new();
        let gt = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = t.constant(gt.clone());
        let p = t.constant(gt);
        let l = loss_det(&mut t, g, p).unwrap();
        assert_eq!(scalar_of(&t, l), -1.0);

        let g = t.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let p = t.constant(Tensor::new([1, 1, 1, 1], vec![0.5]).unwrap());
        let l = loss_det(&mut t, g, p).unwrap();
        let want = -(0.5f64.ln() + 0.8);
        assert!((scalar_of(&t, l) - want).abs() < 1e-12);
        assert!((scalar_of(&t, l) + 0.1069).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_value(-1.0, 0.0, 0.0, -1.0, &w, false), -1.5);
        assert_eq!(total_value(0.0, 0.0, 0.0, 0.0, &w, true), 0.0);
        assert_eq!(total_value(-1.0, 2.0, 0.0, -1.0, &w, true), 0.5);
        assert!(LossWeights { lambda_tr: -0.1, lambda_det: 0.5 }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let a = random_tensor(&mut rng, &[2, 3, 2, 2]);
            let b = random_tensor(&mut rng, &[2, 3, 2, 2]);
            check_gradients(&[a, b], |t, v| loss_simg(t, v[0], v[1]));

            // projections sit behind a stop-gradient, so only the predictions are probed
            let vs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[3, 6])).collect();
            let (z, z_other) = (vs[2].clone(), vs[3].clone());
            check_gradients(&vs[..2], |t, v| {
                let zo = t.constant(z_other.clone());
                let z = t.constant(z.clone());
                loss_simr(t, v[0], zo, v[1], z)
            });

            let f_t = random_tensor(&mut rng, &[2, 3, 2, 2]);
            let w = random_tensor(&mut rng, &[1, 3, 1, 1]);
            let bias = random_tensor(&mut rng, &[1]);
            let gt = Tensor::from_fn([2, 1, 5, 4], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
            check_gradients(&[f_t, w, bias], |t, v| {
                let g = t.constant(gt.clone());
                loss_tr(t, v[0], g, TraceHead { weight: v[1], bias: v[2] })
            });

            let logits = random_tensor(&mut rng, &[2, 1, 4, 4]);
            let gt = Tensor::from_fn([2, 1, 4, 4], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
            check_gradients(&[logits], |t, v| {
                let p = t.sigmoid(v[0]);
                let g = t.constant(gt.clone());
                loss_det(t, g, p)
            });

            let parts = random_tensor(&mut rng, &[4]);
            check_gradients(&[parts], |t, v| {
                let r = t.reshape(v[0], &[4])?;
                let sq = t.mul(r, r)?;
                let pieces: Vec<Var> = (0..4)
                    .map(|i| {
                        let mask = Tensor::from_fn([4], |j| if i == j { 1.0 } else { 0.0 });
                        let m = t.constant(mask);
                        let picked = t.mul(sq, m).unwrap();
                        t.sum(picked)
                    })
                    .collect();
                loss_total(t, pieces[0], pieces[1], pieces[2], pieces[3], &LossWeights::default(), true)
            });
        }
    }
}
