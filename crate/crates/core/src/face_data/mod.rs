//! Aligned face images, procedural toy identities, mask overlays and
//! dataset manifests.

mod dataset;
mod image_io;
mod manifest;
mod mask;
mod synth;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::error::{MeerError, Result};

pub use dataset::{FaceDataset, FaceSample};
pub(crate) use dataset::stack_pixels;
pub use image_io::{load_face_image, save_face_image};
pub use manifest::{build_manifest, DatasetManifest, ManifestRecord, Pairing, MANIFEST_SCHEMA_VERSION};
pub use mask::{overlay_mask, Fill, MaskSpec, PatternLabeler};
pub use synth::{synth_identity_face, synth_toy_set, MaskStyle, SynthConfig, SynthRecord, MIN_SYNTH_SIZE};

/// Which of the three image sets a face belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskFlag {
    RealUnmasked,
    SimulatedMasked,
    FakeUnmasked,
}

impl MaskFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskFlag::RealUnmasked => "real_unmasked",
            MaskFlag::SimulatedMasked => "simulated_masked",
            MaskFlag::FakeUnmasked => "fake_unmasked",
        }
    }
}

impl fmt::Display for MaskFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskFlag {
    type Err = MeerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_unmasked" => Ok(MaskFlag::RealUnmasked),
            "simulated_masked" => Ok(MaskFlag::SimulatedMasked),
            "fake_unmasked" => Ok(MaskFlag::FakeUnmasked),
            other => Err(MeerError::Parse(format!("unknown mask flag `{other}`"))),
        }
    }
}

/// RGB image in channel-major layout with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePixels {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FacePixels {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(MeerError::Shape(format!(
                "pixel buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(MeerError::InvalidArgument(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(-1.0, 1.0); 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(-1.0, 1.0);
    }

    /// `3×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`FacePixels::to_tensor`]; values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(MeerError::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear resize (used when stored images differ from the model input size).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0f32; 3 * height * width];
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out[(c * height + y) * width + x] = (top * (1.0 - ty) + bot * ty).clamp(-1.0, 1.0);
                }
            }
        }
        Self {
            height,
            width,
            data: out,
        }
    }
}

/// A normalized, pre-aligned face with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace {
    pub pixels: FacePixels,
    pub identity_label: usize,
    pub mask_flag: MaskFlag,
    pub pattern_class: usize,
    pub paired_unmasked_path: Option<String>,
}

impl AlignedFace {
    pub fn unmasked(pixels: FacePixels, identity_label: usize) -> Self {
        Self {
            pixels,
            identity_label,
            mask_flag: MaskFlag::RealUnmasked,
            pattern_class: 0,
            paired_unmasked_path: None,
        }
    }
}
