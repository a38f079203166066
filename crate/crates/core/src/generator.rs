//! Unmasked-face decoder with mask-suppressed skip connections, and the
//! patch discriminator used to train it.

use candle_core::{DType, Tensor};

use crate::error::{MeerError, Result};
use crate::model::{DecoupledFeatures, EncoderOutput, ModelConfig};
use crate::nn::{leaky_relu, Conv2d, Linear, ParamStore};

/// Skip features `f_l' = f_l ⊙ U_l(Φ)` for l = 1..3.
#[derive(Clone, Debug)]
pub struct SuppressedSkips {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
}

impl SuppressedSkips {
    /// The raw encoder features (no suppression).
    pub fn unsuppressed(enc: &EncoderOutput) -> Self {
        Self {
            f1: enc.f1.clone(),
            f2: enc.f2.clone(),
            f3: enc.f3.clone(),
        }
    }

    fn level(&self, l: usize) -> &Tensor {
        match l {
            1 => &self.f1,
            2 => &self.f2,
            _ => &self.f3,
        }
    }
}

/// Row-stochastic `out × in` bilinear weights with half-pixel centres
/// (the `align_corners = false` convention).
fn interpolation_weights(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for o in 0..out_size {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let frac = src - i0 as f64;
        m[o * in_size + i0] += 1.0 - frac;
        m[o * in_size + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of a `B×C×h×w` tensor, written as two
/// matrix products so gradients flow through the standard matmul rule.
pub fn upsample_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let dev = t.device();
    let rows = Tensor::from_vec(interpolation_weights(h, out_h), (out_h, h), dev)?.to_dtype(t.dtype())?;
    // transpose built directly so the right operand stays contiguous
    let cols = interpolation_weights(w, out_w);
    let mut cols_t = vec![0.0; w * out_w];
    for o in 0..out_w {
        for i in 0..w {
            cols_t[i * out_w + o] = cols[o * w + i];
        }
    }
    let cols_t = Tensor::from_vec(cols_t, (w, out_w), dev)?.to_dtype(t.dtype())?;
    let along_w = t.broadcast_matmul(&cols_t)?;
    Ok(rows.broadcast_matmul(&along_w)?)
}

/// Mask information suppression: Φ is averaged over channels, bilinearly
/// upsampled to each skip resolution and multiplied into every channel.
pub fn suppress_skips(enc: &EncoderOutput, phi: &Tensor) -> Result<SuppressedSkips> {
    let (b, _, _, _) = phi.dims4()?;
    if b != enc.f1.dim(0)? {
        return Err(MeerError::Shape(format!(
            "attention batch {b} does not match feature batch {}",
            enc.f1.dim(0)?
        )));
    }
    let map = phi.mean_keepdim(1)?;
    let weigh = |f: &Tensor| -> Result<Tensor> {
        let (_, _, h, w) = f.dims4()?;
        Ok(f.broadcast_mul(&upsample_bilinear(&map, h, w)?)?)
    };
    Ok(SuppressedSkips {
        f1: weigh(&enc.f1)?,
        f2: weigh(&enc.f2)?,
        f3: weigh(&enc.f3)?,
    })
}

/// Instance normalization modulated by a style vector (AdaIN).
fn adaptive_instance_norm(h: &Tensor, style_fc: &Linear, style: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    let mean = h.mean_keepdim((2, 3))?;
    let centered = h.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    let params = style_fc.forward(style)?;
    let scale = params.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
    let shift = params.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
    Ok(normed.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    style: Linear,
    /// Encoder level concatenated after upsampling, if any.
    skip_level: Option<usize>,
    skip_channels: usize,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, style: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(2 * h, 2 * w)?;
        let h = match skip {
            Some(s) => Tensor::cat(&[&up, s], 1)?,
            None => up,
        };
        let h = self.conv1.forward(&h)?;
        let h = leaky_relu(&adaptive_instance_norm(&h, &self.style, style)?)?;
        leaky_relu(&self.conv2.forward(&h)?)
    }
}

/// Which encoder levels feed the decoder for a given skip-connection count.
pub fn skip_levels(sc_count: usize) -> &'static [usize] {
    match sc_count {
        0 => &[],
        1 => &[1],
        _ => &[1, 2, 3],
    }
}

/// U-Net style decoder: four ×2 upsampling blocks from X_id back to the input
/// resolution, skip features concatenated at the f3, f2 and f1 resolutions,
/// and per-block AdaIN driven by the spatially pooled X_id.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<DecoderBlock>,
    to_rgb: Conv2d,
    skip_shapes: [(usize, usize); 3],
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = skip_levels(cfg.sc_count);
        let style_dim = cfg.channels[3];
        let s = cfg.input_size;
        // block i upsamples to the resolution of level 3 - i (f3, f2, f1, image)
        let block_levels = [Some(3), Some(2), Some(1), None];
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = cfg.channels[3];
        for (i, level) in block_levels.iter().enumerate() {
            let skip_level = level.filter(|l| levels.contains(l));
            let skip_channels = skip_level.map(|l| cfg.channels[l - 1]).unwrap_or(0);
            let out = cfg.decoder_channels[i];
            let name = format!("decoder.block{}", i + 1);
            blocks.push(DecoderBlock {
                conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch + skip_channels, out, 3, 1, 1, 1.0)?,
                conv2: Conv2d::new(store, &format!("{name}.conv2"), out, out, 3, 1, 1, 1.0)?,
                style: Linear::new(store, &format!("{name}.style"), style_dim, 2 * out, 0.1)?,
                skip_level,
                skip_channels,
            });
            in_ch = out;
        }
        let to_rgb = Conv2d::new(store, "decoder.to_rgb", in_ch, 3, 3, 1, 1, 1.0)?;
        Ok(Self {
            blocks,
            to_rgb,
            skip_shapes: [
                (cfg.channels[0], s / 2),
                (cfg.channels[1], s / 4),
                (cfg.channels[2], s / 8),
            ],
        })
    }

    /// `I_fu = D({f_l'}, X_id)` in `[-1, 1]`.
    pub fn decode(&self, skips: &SuppressedSkips, x_id: &Tensor) -> Result<Tensor> {
        let style = x_id.mean((2, 3))?;
        self.decode_with_style(skips, x_id, &style)
    }

    /// Decoding with an explicit style vector (`B×C`).
    pub fn decode_with_style(&self, skips: &SuppressedSkips, x_id: &Tensor, style: &Tensor) -> Result<Tensor> {
        let batch = x_id.dim(0)?;
        let mut h = x_id.clone();
        for block in &self.blocks {
            let skip = match block.skip_level {
                Some(l) => {
                    let f = skips.level(l);
                    let (c, side) = self.skip_shapes[l - 1];
                    if f.dims() != [batch, c, side, side] {
                        return Err(MeerError::Shape(format!(
                            "skip f{l} has shape {:?}, decoder expects [{batch}, {c}, {side}, {side}]",
                            f.dims()
                        )));
                    }
                    debug_assert_eq!(c, block.skip_channels);
                    Some(f)
                }
                None => None,
            };
            h = block.forward(&h, skip, style)?;
        }
        Ok(self.to_rgb.forward(&h)?.tanh()?)
    }
}

/// Decoder plus the skip-connection policy of the configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    pub decoder: Decoder,
    mis_on: bool,
}

impl Generator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            decoder: Decoder::new(store, cfg)?,
            mis_on: cfg.mis_on,
        })
    }

    /// Skip features after mask information suppression (when enabled and an
    /// attention map exists).
    pub fn skips(&self, enc: &EncoderOutput, decoupled: &DecoupledFeatures) -> Result<SuppressedSkips> {
        match (&decoupled.attention, self.mis_on) {
            (Some(phi), true) => suppress_skips(enc, phi),
            _ => Ok(SuppressedSkips::unsuppressed(enc)),
        }
    }

    pub fn restore(&self, enc: &EncoderOutput, decoupled: &DecoupledFeatures) -> Result<Tensor> {
        let skips = self.skips(enc, decoupled)?;
        self.decoder.decode(&skips, &decoupled.x_id)
    }
}

/// Three stride-2 4×4 convolutions and a 3×3 scoring convolution; a 112×112
/// input gives a 14×14 map of raw (unsquashed) patch scores.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut cin = 3;
        for (i, &c) in cfg.disc_channels.iter().enumerate() {
            layers.push(Conv2d::new(store, &format!("discriminator.conv{}", i + 1), cin, c, 4, 2, 1, 1.0)?);
            cin = c;
        }
        let head = Conv2d::new(store, "discriminator.head", cin, 1, 3, 1, 1, 1.0)?;
        Ok(Self { layers, head })
    }

    pub fn discriminate(&self, image: &Tensor) -> Result<Tensor> {
        let mut h = image.clone();
        for layer in &self.layers {
            h = candle_nn::ops::leaky_relu(&layer.forward(&h)?, 0.2)?;
        }
        self.head.forward(&h)
    }
}

/// Mean of the channel-averaged upsampled attention over the rows
/// `[row_start, row_end)` of the f1 resolution, per batch element.
pub fn upsampled_attention_rows(phi: &Tensor, side: usize, row_start: usize, row_end: usize) -> Result<Vec<f64>> {
    let map = upsample_bilinear(&phi.mean_keepdim(1)?, side, side)?;
    let rows = map.narrow(2, row_start, row_end - row_start)?;
    Ok(rows
        .mean((1, 2, 3))?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;
    use crate::model::{Encoder, MaskDecouplingModule};

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            channels: [4, 6, 8, 8],
            embedding_dim: 16,
            mask_hidden: 12,
            attention_reduction: 2,
            decoder_channels: [8, 6, 4, 4],
            disc_channels: [4, 6, 8],
            ..ModelConfig::toy(3)
        }
    }

    /// Scalar bilinear sampler with half-pixel centres.
    fn reference_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
        };
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            let (y0, y1, ty) = coord(y, h, oh);
            for x in 0..ow {
                let (x0, x1, tx) = coord(x, w, ow);
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                out[y * ow + x] = top * (1.0 - ty) + bot * ty;
            }
        }
        out
    }

    fn encoder_output(cfg: &ModelConfig, dtype: DType) -> (EncoderOutput, Tensor) {
        let mut store = ParamStore::new(2, dtype, Device::Cpu);
        let enc = Encoder::new(&mut store, cfg).unwrap();
        let mdm = MaskDecouplingModule::new(&mut store, cfg).unwrap();
        let img = Tensor::randn(0f32, 0.5, (2, 3, 32, 32), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        let out = enc.encode(&img).unwrap();
        let phi = mdm.attention_map(&out.x).unwrap();
        (out, phi)
    }

    #[test]
    fn unit_and_half_attention() {
        let cfg = tiny();
        let (enc, phi) = encoder_output(&cfg, DType::F32);
        let ones = phi.ones_like().unwrap();
        let s = suppress_skips(&enc, &ones).unwrap();
        for (a, b) in [(&s.f1, &enc.f1), (&s.f2, &enc.f2), (&s.f3, &enc.f3)] {
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        let half = (ones * 0.5).unwrap();
        let s = suppress_skips(&enc, &half).unwrap();
        let a = s.f2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = enc.f2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - 0.5 * y).abs() <= 1e-7 * y.abs().max(1.0));
        }
    }

    #[test]
    fn bilinear_matches_scalar_reference() {
        let src = Tensor::randn(0f64, 1.0, (2, 3, 7, 7), &Device::Cpu).unwrap();
        for (oh, ow) in [(14, 14), (28, 28), (56, 56), (9, 11)] {
            let up = upsample_bilinear(&src, oh, ow).unwrap();
            assert_eq!(up.dims(), &[2, 3, oh, ow]);
            for b in 0..2 {
                for c in 0..3 {
                    let plane = src.get(b).unwrap().get(c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                    let expected = reference_bilinear(&plane, 7, 7, oh, ow);
                    let got = up.get(b).unwrap().get(c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                    for (e, g) in expected.iter().zip(&got) {
                        assert!((e - g).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn spatially_varying_suppression_matches_reference() {
        let cfg = tiny();
        let (enc, phi) = encoder_output(&cfg, DType::F64);
        let s = suppress_skips(&enc, &phi).unwrap();
        let map = phi.mean_keepdim(1).unwrap();
        for (f, fs) in [(&enc.f1, &s.f1), (&enc.f3, &s.f3)] {
            let (_, c, h, w) = f.dims4().unwrap();
            for b in 0..2 {
                let m = map.get(b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let (mh, mw) = (phi.dim(2).unwrap(), phi.dim(3).unwrap());
                let up = reference_bilinear(&m, mh, mw, h, w);
                for ch in 0..c {
                    let raw = f.get(b).unwrap().get(ch).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                    let got = fs.get(b).unwrap().get(ch).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                    for i in 0..h * w {
                        assert!((raw[i] * up[i] - got[i]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn decoder_output_contract() {
        let cfg = tiny();
        let (enc, phi) = encoder_output(&cfg, DType::F32);
        let mut store = ParamStore::new(3, DType::F32, Device::Cpu);
        let dec = Decoder::new(&mut store, &cfg).unwrap();
        let d = crate::model::decouple(&enc.x, &phi).unwrap();
        let skips = suppress_skips(&enc, &phi).unwrap();
        let a = dec.decode(&skips, &d.x_id).unwrap();
        assert_eq!(a.dims(), &[2, 3, 32, 32]);
        let va = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
        let vb = dec.decode(&skips, &d.x_id).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);

        // zeroing the style and zeroing a skip level both matter, differently
        let style0 = d.x_id.mean((2, 3)).unwrap().zeros_like().unwrap();
        let no_style = dec.decode_with_style(&skips, &d.x_id, &style0).unwrap();
        let mut no_f2 = skips.clone();
        no_f2.f2 = no_f2.f2.zeros_like().unwrap();
        let no_skip = dec.decode(&no_f2, &d.x_id).unwrap();
        let vs = no_style.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vk = no_skip.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(va, vs);
        assert_ne!(va, vk);
        assert_ne!(vs, vk);

        let mut bad = skips.clone();
        bad.f1 = bad.f1.narrow(1, 0, 2).unwrap();
        assert!(dec.decode(&bad, &d.x_id).is_err());
    }

    #[test]
    fn decoder_builds_for_every_skip_count() {
        for sc in [0, 1, 3] {
            let cfg = ModelConfig { sc_count: sc, ..tiny() };
            let (enc, phi) = encoder_output(&cfg, DType::F32);
            let mut store = ParamStore::new(3, DType::F32, Device::Cpu);
            let dec = Decoder::new(&mut store, &cfg).unwrap();
            let d = crate::model::decouple(&enc.x, &phi).unwrap();
            let out = dec.decode(&SuppressedSkips::unsuppressed(&enc), &d.x_id).unwrap();
            assert_eq!(out.dims(), &[2, 3, 32, 32]);
        }
    }

    #[test]
    fn discriminator_shape_and_shift() {
        let cfg = ModelConfig {
            input_size: 112,
            ..tiny()
        };
        let mut store = ParamStore::new(4, DType::F64, Device::Cpu);
        let disc = PatchDiscriminator::new(&mut store, &cfg).unwrap();
        let img = Tensor::rand(-1f64, 1.0, (1, 3, 112, 112), &Device::Cpu).unwrap();
        let s = disc.discriminate(&img).unwrap();
        assert_eq!(s.dims(), &[1, 1, 14, 14]);
        let again = disc.discriminate(&img).unwrap();
        assert_eq!(
            s.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );

        // shift right by one patch stride (8 px): interior scores shift by one
        let shifted = Tensor::cat(
            &[&Tensor::zeros((1, 3, 112, 8), DType::F64, &Device::Cpu).unwrap(), &img.narrow(3, 0, 104).unwrap()],
            3,
        )
        .unwrap();
        let t = disc.discriminate(&shifted).unwrap();
        let a = s.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let b = t.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for y in 2..12 {
            for x in 2..10 {
                assert!((a[y][x] - b[y][x + 1]).abs() < 1e-9, "patch ({y},{x})");
            }
        }
    }
}
