//! Tiny Siamese encoder-decoder with projection/prediction heads and the
//! trace-relation branch.
//!
//! ```text
//! x (B×3×S×S)
//!  └ enc1 s2 ─ enc2 s2 ─ enc3 s2 ─ enc4 s1 ─► L (B×64×S/8×S/8)
//!                                             ├ globalavg ─ projection ─► F_z ─ prediction ─► F_d
//!                                             ├ downsample ─ GCN ─► F_g ─ avgpool ─► F_t
//!                                             └ fuse[L, up(F_g)] ─ dec1 ─ dec2 ─ dec3 ─ head ─► P
//! ```
//!
//! The input is centred and scaled by [`INPUT_GAIN`] before the encoder.
//! Each encoder stage is conv3×3 → ReLU → per-channel layer scale. Decoder
//! stages upsample ×2, concatenate the encoder feature (or the normalized
//! input) of matching resolution, then conv3×3 → ReLU. The projection and
//! prediction MLPs standardize their hidden (and, for the projection,
//! output) activations over the batch.

use crate::error::{invalid, shape_err, Result};
use crate::losses::TraceHead;
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::trm;

pub const IN_CHANNELS: usize = 3;
/// Images in [0, 1] enter the network as `(x - 0.5) * INPUT_GAIN`.
pub const INPUT_GAIN: f64 = 4.0;
pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const ENCODER_STRIDES: [usize; 4] = [2, 2, 2, 1];
pub const DECODER_CHANNELS: [usize; 3] = [16, 8, 8];
pub const PROJ_HIDDEN: usize = 128;
pub const EMBED_DIM: usize = 64;
pub const PRED_HIDDEN: usize = 32;

/// Latent channel count C.
pub const LATENT_CHANNELS: usize = ENCODER_CHANNELS[3];
/// GCN hidden width (C/2).
/// Variance floor of the batch standardization in the projection and
/// prediction MLPs.
pub const BN_EPS: f64 = 1e-5;
pub const GCN_HIDDEN: usize = LATENT_CHANNELS / 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub trm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            trm: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderStage {
    conv: Conv,
    scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct TrmParams {
    pub m0: ParamId,
    pub m1: ParamId,
    pub trace_head: Conv,
    pub fuse: Conv,
    pub state: trm::TrmState,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: [EncoderStage; 4],
    proj: [Affine; 2],
    pred: [Affine; 2],
    trm: Option<TrmParams>,
    decoder: [Conv; 3],
    head: Conv,
}

/// Encoder outputs: the latent plus the higher-resolution features the
/// decoder reuses.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub input: Var,
    pub stage1: Var,
    pub stage2: Var,
    pub latent: Var,
}

/// Everything one view produces in a training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutputs {
    pub latent: Var,
    pub f_z: Var,
    pub f_d: Var,
    pub f_g: Option<Var>,
    pub f_t: Option<Var>,
    pub prob: Var,
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Conv {
    let fan_in = cin * k * k;
    let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &[cout, cin, k, k], fan_in));
    let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
    Conv {
        weight,
        bias,
        stride,
        pad: (k - 1) / 2,
    }
}

/// Removes each 3×3 kernel's mean so the filter starts out blind to flat
/// regions.
fn high_pass(w: &mut Tensor) {
    for k in w.data_mut().chunks_mut(9) {
        let m = k.iter().sum::<f64>() / 9.0;
        k.iter_mut().for_each(|v| *v -= m);
    }
}

fn add_affine(store: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Affine {
    let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &[din, dout], din));
    let bias = store.add(format!("{name}.bias"), Tensor::zeros([dout]));
    Affine { weight, bias }
}

impl Model {
    /// Kaiming-uniform weights (zero-mean kernels in the first layer), zero
    /// biases and unit layer scales, all drawn from one seeded stream in
    /// parameter order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.input_size < 32 || !config.input_size.is_multiple_of(32) {
            return Err(invalid(format!(
                "input size must be a positive multiple of 32, got {}",
                config.input_size
            )));
        }
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let mut cin = IN_CHANNELS;
        let encoder = std::array::from_fn(|i| {
            let cout = ENCODER_CHANNELS[i];
            let conv = add_conv(&mut p, &mut rng, &format!("encoder.{i}"), cin, cout, 3, ENCODER_STRIDES[i]);
            let scale = p.add(format!("encoder.{i}.scale"), Tensor::full([cout], 1.0));
            if i == 0 {
                high_pass(p.get_mut(conv.weight));
            }
            cin = cout;
            EncoderStage { conv, scale }
        });
        let proj = [
            add_affine(&mut p, &mut rng, "projection.0", LATENT_CHANNELS, PROJ_HIDDEN),
            add_affine(&mut p, &mut rng, "projection.1", PROJ_HIDDEN, EMBED_DIM),
        ];
        let pred = [
            add_affine(&mut p, &mut rng, "prediction.0", EMBED_DIM, PRED_HIDDEN),
            add_affine(&mut p, &mut rng, "prediction.1", PRED_HIDDEN, EMBED_DIM),
        ];
        let grid = config.input_size / 16;
        let trm = if config.trm {
            let m0 = p.add("trm.m0", kaiming_uniform(&mut rng, &[LATENT_CHANNELS, GCN_HIDDEN], LATENT_CHANNELS));
            let m1 = p.add("trm.m1", kaiming_uniform(&mut rng, &[GCN_HIDDEN, LATENT_CHANNELS], GCN_HIDDEN));
            let trace_head = add_conv(&mut p, &mut rng, "trm.trace_head", LATENT_CHANNELS, 1, 1, 1);
            let fuse = add_conv(&mut p, &mut rng, "fuse", 2 * LATENT_CHANNELS, LATENT_CHANNELS, 1, 1);
            Some(TrmParams {
                m0,
                m1,
                trace_head,
                fuse,
                state: trm::TrmState::new(grid, grid)?,
            })
        } else {
            None
        };
        let skip_channels = [ENCODER_CHANNELS[1], ENCODER_CHANNELS[0], IN_CHANNELS];
        let mut cin = LATENT_CHANNELS;
        let decoder = std::array::from_fn(|i| {
            let cout = DECODER_CHANNELS[i];
            let conv = add_conv(&mut p, &mut rng, &format!("decoder.{i}"), cin + skip_channels[i], cout, 3, 1);
            cin = cout;
            conv
        });
        let head = add_conv(&mut p, &mut rng, "head", DECODER_CHANNELS[2], 1, 1, 1);
        Ok(Self {
            config,
            params: p,
            encoder,
            proj,
            pred,
            trm,
            decoder,
            head,
        })
    }

    /// Rebuilds a model from checkpoint entries; the TRM branch is present
    /// exactly when the checkpoint holds its weights.
    pub fn from_entries(entries: Vec<(String, Tensor)>, input_size: usize) -> Result<Self> {
        let trm = entries.iter().any(|(n, _)| n == "trm.m0");
        let mut m = Self::new(ModelConfig { input_size, trm }, 0)?;
        m.params.load_entries(entries)?;
        Ok(m)
    }

    pub fn has_trm(&self) -> bool {
        self.trm.is_some()
    }

    pub fn trm_params(&self) -> Option<&TrmParams> {
        self.trm.as_ref()
    }

    /// Layer name and shape of every parameter, in checkpoint order.
    pub fn describe(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().map(|t| t.shape().to_vec()))
            .collect()
    }

    fn conv(&self, tape: &mut Tape, b: &Bound, c: Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, b[c.weight], Some(b[c.bias]), c.stride, c.pad)
    }

    fn affine(&self, tape: &mut Tape, b: &Bound, a: Affine, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b[a.weight])?;
        tape.add_bias(y, b[a.bias])
    }

    /// Runs the encoder; `x` must be B×3×S×S at the configured input size.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Encoded> {
        let s = tape.shape(x).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != IN_CHANNELS || s[2] != size || s[3] != size {
            return Err(shape_err("encode", &s, &[0, IN_CHANNELS, size, size]));
        }
        let mut feats = Vec::with_capacity(4);
        let xc = tape.add_scalar(x, -0.5);
        let x = tape.scale(xc, INPUT_GAIN);
        let mut h = x;
        for stage in &self.encoder {
            let c = self.conv(tape, b, stage.conv, h)?;
            let r = tape.relu(c);
            h = tape.mul_channel(r, b[stage.scale])?;
            feats.push(h);
        }
        Ok(Encoded {
            input: x,
            stage1: feats[0],
            stage2: feats[1],
            latent: feats[3],
        })
    }

    /// Global average of the latent: B×C.
    pub fn pool_latent(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let s = tape.shape(latent).to_vec();
        let flat = tape.reshape(latent, &[s[0], s[1], s[2] * s[3]])?;
        tape.mean_axis(flat, 2)
    }

    pub fn project(&self, tape: &mut Tape, b: &Bound, pooled: Var) -> Result<Var> {
        let h = self.affine(tape, b, self.proj[0], pooled)?;
        let h = tape.batch_standardize(h, BN_EPS)?;
        let h = tape.relu(h);
        let z = self.affine(tape, b, self.proj[1], h)?;
        tape.batch_standardize(z, BN_EPS)
    }

    pub fn predict(&self, tape: &mut Tape, b: &Bound, f_z: Var) -> Result<Var> {
        let h = self.affine(tape, b, self.pred[0], f_z)?;
        let h = tape.batch_standardize(h, BN_EPS)?;
        let h = tape.relu(h);
        self.affine(tape, b, self.pred[1], h)
    }

    /// Projection and prediction outputs `(F_z, F_d)`, both B×64. The
    /// stop-gradient on `F_z` is applied where it enters the similarity
    /// loss.
    pub fn heads(&self, tape: &mut Tape, b: &Bound, latent: Var) -> Result<(Var, Var)> {
        let pooled = self.pool_latent(tape, latent)?;
        let f_z = self.project(tape, b, pooled)?;
        let f_d = self.predict(tape, b, f_z)?;
        Ok((f_z, f_d))
    }

    /// Trace relations `F_g` (B×C×h/2×w/2) from the latent, or `None` when
    /// the model has no TRM branch. `dense` selects the explicit-adjacency path.
    pub fn trace_relations(&self, tape: &mut Tape, b: &Bound, latent: Var, dense: bool) -> Result<Option<Var>> {
        let Some(t) = &self.trm else { return Ok(None) };
        let l_prime = tape.downsample_avg2(latent)?;
        let f_g = if dense {
            let a_hat = tape.constant(t.state.a_hat.clone());
            trm::gcn_forward(tape, l_prime, a_hat, b[t.m0], b[t.m1])?
        } else {
            trm::gcn_forward_fast(tape, l_prime, b[t.m0], b[t.m1])?
        };
        Ok(Some(f_g))
    }

    pub fn trace_head(&self, b: &Bound) -> Option<TraceHead> {
        self.trm.as_ref().map(|t| TraceHead {
            weight: b[t.trace_head.weight],
            bias: b[t.trace_head.bias],
        })
    }

    /// Decodes to per-pixel probabilities B×1×S×S. With a TRM branch,
    /// `f_g` is upsampled to the latent grid, concatenated with it and
    /// fused by a 1×1 conv first.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, enc: &Encoded, f_g: Option<Var>) -> Result<Var> {
        let ls = tape.shape(enc.latent).to_vec();
        let mut h = match (&self.trm, f_g) {
            (Some(t), Some(f_g)) => {
                let gs = tape.shape(f_g).to_vec();
                if gs.len() != 4 || gs[0] != ls[0] || gs[2] * 2 != ls[2] || gs[3] * 2 != ls[3] {
                    return Err(shape_err("decode: trace relations vs latent", &gs, &ls));
                }
                let up = tape.upsample_bilinear(f_g, ls[2], ls[3])?;
                let cat = tape.concat(enc.latent, up, 1)?;
                let fused = self.conv(tape, b, t.fuse, cat)?;
                tape.relu(fused)
            }
            (None, None) => enc.latent,
            (Some(_), None) => return Err(invalid("decode: model has a TRM branch but no trace relations given")),
            (None, Some(_)) => return Err(invalid("decode: trace relations given to a model without TRM")),
        };
        let skips = [enc.stage2, enc.stage1, enc.input];
        for (conv, skip) in self.decoder.iter().zip(skips) {
            let s = tape.shape(h).to_vec();
            let up = tape.upsample_bilinear(h, s[2] * 2, s[3] * 2)?;
            let cat = tape.concat(up, skip, 1)?;
            let c = self.conv(tape, b, *conv, cat)?;
            h = tape.relu(c);
        }
        let logits = self.conv(tape, b, self.head, h)?;
        Ok(tape.sigmoid(logits))
    }

    /// Full forward for one view.
    pub fn forward_view(&self, tape: &mut Tape, b: &Bound, x: Var, dense_trm: bool) -> Result<ViewOutputs> {
        let enc = self.encode(tape, b, x)?;
        let (f_z, f_d) = self.heads(tape, b, enc.latent)?;
        let f_g = self.trace_relations(tape, b, enc.latent, dense_trm)?;
        let f_t = match f_g {
            Some(g) => Some(trm::pool_traces(tape, g)?),
            None => None,
        };
        let prob = self.decode(tape, b, &enc, f_g)?;
        Ok(ViewOutputs {
            latent: enc.latent,
            f_z,
            f_d,
            f_g,
            f_t,
            prob,
        })
    }

    /// Inference on a batch of images; returns B×1×S×S probabilities.
    pub fn predict_masks(&self, images: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let enc = self.encode(&mut tape, &b, x)?;
        let f_g = self.trace_relations(&mut tape, &b, enc.latent, false)?;
        let p = self.decode(&mut tape, &b, &enc, f_g)?;
        Ok(tape.value(p).clone())
    }

    /// Global-average embeddings of the latent for a batch (B×C).
    pub fn embed(&self, images: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let enc = self.encode(&mut tape, &b, x)?;
        let e = self.pool_latent(&mut tape, enc.latent)?;
        Ok(tape.value(e).clone())
    }

    pub fn affine_ids(&self) -> ([Affine; 2], [Affine; 2]) {
        (self.proj, self.pred)
    }

    pub fn first_conv(&self) -> Conv {
        self.encoder[0].conv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(trm: bool) -> Model {
        Model::new(ModelConfig { input_size: 64, trm }, 3).unwrap()
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn([b, 3, 64, 64], |_| r.uniform())
    }

    #[test]
    fn shapes() {
        let m = model(true);
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let x = t.constant(images(2, 1));
        let out = m.forward_view(&mut t, &b, x, false).unwrap();
        assert_eq!(t.shape(out.latent), &[2, 64, 8, 8]);
        assert_eq!(t.shape(out.f_z), &[2, 64]);
        assert_eq!(t.shape(out.f_d), &[2, 64]);
        assert_eq!(t.shape(out.f_g.unwrap()), &[2, 64, 4, 4]);
        assert_eq!(t.shape(out.f_t.unwrap()), &[2, 64, 2, 2]);
        assert_eq!(t.shape(out.prob), &[2, 1, 64, 64]);
        assert!(t.value(out.prob).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let m = model(false);
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let x = t.constant(Tensor::zeros([1, 3, 32, 32]));
        assert!(m.encode(&mut t, &b, x).is_err());
        assert!(Model::new(ModelConfig { input_size: 40, trm: true }, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latent_and_half_probability() {
        let mut m = model(true);
        for t in m.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let x = t.constant(images(1, 2));
        let out = m.forward_view(&mut t, &b, x, false).unwrap();
        assert!(t.value(out.latent).data().iter().all(|&v| v == 0.0));
        assert!(t.value(out.prob).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn projection_is_standardized_over_the_batch() {
        let m = model(false);
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let x = t.constant(images(4, 4));
        let enc = m.encode(&mut t, &b, x).unwrap();
        let (f_z, _) = m.heads(&mut t, &b, enc.latent).unwrap();
        let z = t.value(f_z);
        for j in 0..EMBED_DIM {
            let col: Vec<f64> = (0..4).map(|i| z.data()[i * EMBED_DIM + j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!(var <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn trm_off_has_no_gcn_parameters() {
        let m = model(false);
        assert!(m.params.id("trm.m0").is_none());
        assert!(m.params.id("trm.m1").is_none());
        let m = model(true);
        assert!(m.params.id("trm.m0").is_some() && m.params.id("trm.m1").is_some());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(true);
        let a = m.predict_masks(images(2, 9)).unwrap();
        let b = m.predict_masks(images(2, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(Model::new(ModelConfig::default(), 3).unwrap().params, m.params);
    }
}
