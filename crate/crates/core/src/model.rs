//! Encoder, mask decoupling module and the identity / mask-pattern heads.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{MeerError, Result};
use crate::mask_patterns::DEFAULT_PATTERN_COUNT;
use crate::nn::{leaky_relu, BatchNorm1d, Conv2d, Init, Linear, ParamStore};

/// Architecture and ablation switches shared by every network in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image; must be a multiple of 16.
    pub input_size: usize,
    /// Encoder widths for f1, f2, f3 and the hybrid feature X.
    pub channels: [usize; 4],
    pub embedding_dim: usize,
    pub num_identities: usize,
    pub num_patterns: usize,
    pub mask_hidden: usize,
    pub attention_reduction: usize,
    /// When off, X is split by channel halves instead of by attention.
    pub mdm_on: bool,
    pub decoder_channels: [usize; 4],
    /// Number of skip connections into the decoder: 0, 1 or 3.
    pub sc_count: usize,
    /// Weight skip connections by the upsampled attention map.
    pub mis_on: bool,
    pub disc_channels: [usize; 3],
}

impl ModelConfig {
    /// Reduced encoder used for CPU-scale experiments.
    pub fn toy(num_identities: usize) -> Self {
        Self {
            input_size: 32,
            channels: [16, 32, 64, 128],
            embedding_dim: 512,
            num_identities,
            num_patterns: DEFAULT_PATTERN_COUNT,
            mask_hidden: 256,
            attention_reduction: 8,
            mdm_on: true,
            decoder_channels: [64, 32, 16, 16],
            sc_count: 3,
            mis_on: true,
            disc_channels: [16, 32, 64],
        }
    }

    /// Stage widths of IResNet-50 at 112×112.
    pub fn full(num_identities: usize) -> Self {
        Self {
            input_size: 112,
            channels: [64, 128, 256, 512],
            embedding_dim: 512,
            num_identities,
            num_patterns: DEFAULT_PATTERN_COUNT,
            mask_hidden: 512,
            attention_reduction: 16,
            mdm_on: true,
            decoder_channels: [256, 128, 64, 32],
            sc_count: 3,
            mis_on: true,
            disc_channels: [64, 128, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeerError::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad(format!("input size must be a positive multiple of 16, got {}", self.input_size));
        }
        if self.channels.iter().chain(&self.decoder_channels).chain(&self.disc_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if !matches!(self.sc_count, 0 | 1 | 3) {
            return bad(format!("sc_count must be 0, 1 or 3, got {}", self.sc_count));
        }
        if !self.mdm_on && !self.channels[3].is_multiple_of(2) {
            return bad("channel-split ablation needs an even number of X channels".into());
        }
        if self.num_identities == 0 || self.num_patterns == 0 || self.embedding_dim == 0 {
            return bad("identity count, pattern count and embedding size must be positive".into());
        }
        if self.attention_reduction == 0 || self.mask_hidden == 0 {
            return bad("attention reduction and mask head width must be positive".into());
        }
        Ok(())
    }

    /// Side of the hybrid feature map X.
    pub fn feature_size(&self) -> usize {
        self.input_size / 16
    }

    fn flat_features(&self) -> usize {
        self.channels[3] * self.feature_size() * self.feature_size()
    }
}

/// Multi-level encoder features for one batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    /// Hybrid feature X.
    pub x: Tensor,
}

/// Strided residual block: two 3×3 convolutions plus a 1×1 projection.
#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl DownBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 2, 1, 1.0)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 0.5)?,
            shortcut: Conv2d::new(store, &format!("{name}.shortcut"), cin, cout, 1, 2, 0, 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        let h = self.conv2.forward(&h)?;
        leaky_relu(&(h + self.shortcut.forward(x)?)?)
    }
}

/// Four-stage residual encoder; each stage halves the resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    input_size: usize,
    stem: Conv2d,
    stages: [DownBlock; 4],
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2, c3, c4] = cfg.channels;
        Ok(Self {
            input_size: cfg.input_size,
            stem: Conv2d::new(store, "encoder.stem", 3, c1, 3, 1, 1, 1.0)?,
            stages: [
                DownBlock::new(store, "encoder.stage1", c1, c1)?,
                DownBlock::new(store, "encoder.stage2", c1, c2)?,
                DownBlock::new(store, "encoder.stage3", c2, c3)?,
                DownBlock::new(store, "encoder.stage4", c3, c4)?,
            ],
        })
    }

    pub fn encode(&self, images: &Tensor) -> Result<EncoderOutput> {
        let dims = images.dims();
        let s = self.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(MeerError::Shape(format!(
                "encoder expects B×3×{s}×{s} images, got {dims:?}"
            )));
        }
        let h = leaky_relu(&self.stem.forward(images)?)?;
        let f1 = self.stages[0].forward(&h)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;
        let x = self.stages[3].forward(&f3)?;
        Ok(EncoderOutput { f1, f2, f3, x })
    }
}

/// Channel (squeeze-excitation) and spatial attention on X, merged by an
/// elementwise product into the map Φ(X) ∈ (0, 1).
#[derive(Clone, Debug)]
pub struct MaskDecouplingModule {
    squeeze: Linear,
    excite: Linear,
    spatial: Conv2d,
}

impl MaskDecouplingModule {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels[3];
        let hidden = (c / cfg.attention_reduction).max(4);
        Ok(Self {
            squeeze: Linear::new(store, "mdm.channel.squeeze", c, hidden, 1.0)?,
            excite: Linear::new(store, "mdm.channel.excite", hidden, c, 1.0)?,
            spatial: Conv2d::new(store, "mdm.spatial", 2, 1, 3, 1, 1, 1.0)?,
        })
    }

    /// `B×C×1×1` sigmoid gate from globally pooled X.
    pub fn channel_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.mean((2, 3))?;
        let h = self.squeeze.forward(&pooled)?.relu()?;
        let gate = candle_nn::ops::sigmoid(&self.excite.forward(&h)?)?;
        Ok(gate.reshape((b, c, 1, 1))?)
    }

    /// `B×1×h×w` sigmoid map from the channel-mean and channel-max of X.
    pub fn spatial_attention(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let stacked = Tensor::cat(&[&avg, &max], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.spatial.forward(&stacked)?)?)
    }

    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let ca = self.channel_attention(x)?;
        let sa = self.spatial_attention(x)?;
        Ok(ca.broadcast_mul(&sa)?)
    }
}

/// Identity and mask parts of X.
#[derive(Clone, Debug)]
pub struct DecoupledFeatures {
    /// Φ(X); absent for the channel-split ablation.
    pub attention: Option<Tensor>,
    pub x_id: Tensor,
    pub x_mask: Tensor,
}

/// `x_id = X ⊙ Φ`, `x_mask = X ⊙ (1 − Φ)`.
pub fn decouple(x: &Tensor, phi: &Tensor) -> Result<DecoupledFeatures> {
    if x.dims() != phi.dims() {
        return Err(MeerError::Shape(format!(
            "attention map {:?} does not match features {:?}",
            phi.dims(),
            x.dims()
        )));
    }
    let x_id = (x * phi)?;
    let x_mask = (x * phi.affine(-1.0, 1.0)?)?;
    Ok(DecoupledFeatures {
        attention: Some(phi.clone()),
        x_id,
        x_mask,
    })
}

/// How X is split into identity and mask parts.
#[derive(Clone, Debug)]
pub enum Decoupler {
    Attention(MaskDecouplingModule),
    /// First half of the channels carries identity, second half the mask.
    ChannelSplit { keep: Tensor },
}

impl Decoupler {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        if cfg.mdm_on {
            return Ok(Decoupler::Attention(MaskDecouplingModule::new(store, cfg)?));
        }
        let c = cfg.channels[3];
        let keep: Vec<f64> = (0..c).map(|i| if i < c / 2 { 1.0 } else { 0.0 }).collect();
        let keep = Tensor::from_vec(keep, (1, c, 1, 1), store.device())?.to_dtype(store.dtype())?;
        Ok(Decoupler::ChannelSplit { keep })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DecoupledFeatures> {
        match self {
            Decoupler::Attention(mdm) => decouple(x, &mdm.attention_map(x)?),
            Decoupler::ChannelSplit { keep } => Ok(DecoupledFeatures {
                attention: None,
                x_id: x.broadcast_mul(keep)?,
                x_mask: x.broadcast_mul(&keep.affine(-1.0, 1.0)?)?,
            }),
        }
    }
}

/// M¹: flatten → linear → batch normalization.
#[derive(Clone, Debug)]
pub struct IdentityHead {
    fc: Linear,
    norm: BatchNorm1d,
}

impl IdentityHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, "id_head.fc", cfg.flat_features(), cfg.embedding_dim, 1.0)?,
            norm: BatchNorm1d::new(store, "id_head.bn", cfg.embedding_dim)?,
        })
    }

    /// Pre-normalization activations.
    pub fn project(&self, x_id: &Tensor) -> Result<Tensor> {
        self.fc.forward(&x_id.flatten_from(1)?)
    }

    pub fn forward(&self, x_id: &Tensor, train: bool) -> Result<Tensor> {
        self.norm.forward(&self.project(x_id)?, train)
    }
}

/// M²: flatten → linear → activation → linear to pattern logits.
#[derive(Clone, Debug)]
pub struct MaskHead {
    fc1: Linear,
    fc2: Linear,
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, "mask_head.fc1", cfg.flat_features(), cfg.mask_hidden, 1.0)?,
            fc2: Linear::new(store, "mask_head.fc2", cfg.mask_hidden, cfg.num_patterns, 1.0)?,
        })
    }

    pub fn forward(&self, x_mask: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.fc1.forward(&x_mask.flatten_from(1)?)?)?;
        self.fc2.forward(&h)
    }
}

/// Everything a stage-1 forward pass produces.
#[derive(Clone, Debug)]
pub struct RecognitionOutput {
    pub features: EncoderOutput,
    pub decoupled: DecoupledFeatures,
    /// Z_id, `B×d_id`.
    pub embedding: Tensor,
    /// Z_mask, `B×num_patterns`.
    pub mask_logits: Tensor,
}

/// Encoder, decoupler, both heads and the ArcFace class centres.
#[derive(Clone, Debug)]
pub struct RecognitionModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoupler: Decoupler,
    pub identity_head: IdentityHead,
    pub mask_head: MaskHead,
    /// ArcFace class centres, `K×d_id`.
    pub class_weights: Tensor,
}

impl RecognitionModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(store, config)?,
            decoupler: Decoupler::new(store, config)?,
            identity_head: IdentityHead::new(store, config)?,
            mask_head: MaskHead::new(store, config)?,
            class_weights: store.param(
                "arcface.weight",
                &[config.num_identities, config.embedding_dim],
                Init::Normal(0.01),
            )?,
        })
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<RecognitionOutput> {
        let features = self.encoder.encode(images)?;
        let decoupled = self.decoupler.forward(&features.x)?;
        let embedding = self.identity_head.forward(&decoupled.x_id, train)?;
        let mask_logits = self.mask_head.forward(&decoupled.x_mask)?;
        Ok(RecognitionOutput {
            features,
            decoupled,
            embedding,
            mask_logits,
        })
    }

    /// Z_id only (skips the mask head).
    pub fn embed(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let features = self.encoder.encode(images)?;
        let decoupled = self.decoupler.forward(&features.x)?;
        self.identity_head.forward(&decoupled.x_id, train)
    }

    /// Closed-set identity prediction: nearest class centre by cosine.
    pub fn predict_identity(&self, embedding: &Tensor) -> Result<Vec<usize>> {
        let z = crate::nn::l2_normalize_rows(embedding)?;
        let w = crate::nn::l2_normalize_rows(&self.class_weights)?;
        let cos = z.matmul(&w.t()?)?;
        Ok(cos.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize).collect())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(D::Minus1)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|v| v as usize)
        .collect())
}

/// Largest relative deviation of `x_id + x_mask` from X.
pub fn decomposition_error(x: &Tensor, d: &DecoupledFeatures) -> Result<f64> {
    let sum = (&d.x_id + &d.x_mask)?;
    let diff = (sum - x)?.abs()?.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let base = x.abs()?.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(diff
        .iter()
        .zip(&base)
        .map(|(d, b)| d / b.max(f64::MIN_POSITIVE))
        .filter(|r| r.is_finite())
        .fold(0.0, f64::max))
}
