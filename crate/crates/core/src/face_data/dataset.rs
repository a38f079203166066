use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;

use super::manifest::base_dir;
use super::{load_face_image, DatasetManifest, FacePixels, MaskFlag, SynthRecord};
use crate::error::{MeerError, Result};
use crate::mask_patterns::Region;

/// One training/evaluation image held in memory at model resolution.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub pixels: FacePixels,
    pub identity_label: usize,
    pub pattern_class: usize,
    pub mask_flag: MaskFlag,
    /// Unmasked source of a simulated-masked image.
    pub paired: Option<FacePixels>,
    pub region: Option<Region>,
    pub path: Option<String>,
}

impl FaceSample {
    pub fn is_masked(&self) -> bool {
        self.mask_flag == MaskFlag::SimulatedMasked
    }

    /// Mask coverage, either as generated or recovered from the pixels that
    /// differ from the paired source.
    pub fn mask_region(&self) -> Option<Region> {
        if let Some(r) = &self.region {
            return Some(r.clone());
        }
        let src = self.paired.as_ref()?;
        let (h, w) = (self.pixels.height(), self.pixels.width());
        let mut region = Region::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let differs = (0..3).any(|c| self.pixels.get(c, y, x) != src.get(c, y, x));
                region.set(y, x, differs);
            }
        }
        Some(region)
    }
}

#[derive(Clone, Debug)]
pub struct FaceDataset {
    pub samples: Vec<FaceSample>,
    pub num_identities: usize,
    pub image_size: usize,
}

/// Worker count for image decoding, from `MEER_NUM_WORKERS` (default: rayon's choice).
pub(crate) fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MEER_NUM_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| MeerError::Config(format!("MEER_NUM_WORKERS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| MeerError::Config(format!("cannot start data workers: {e}")))
}

impl FaceDataset {
    /// Loads every record of a manifest, resizing images to `image_size`.
    pub fn from_manifest(manifest: &DatasetManifest, manifest_path: &Path, image_size: usize) -> Result<Self> {
        let base = base_dir(manifest_path);
        let pool = worker_pool()?;
        let samples = pool.install(|| {
            manifest
                .records
                .par_iter()
                .map(|r| -> Result<FaceSample> {
                    let pixels = load_face_image(&base.join(&r.path))?.resized(image_size, image_size);
                    let paired = match &r.paired_path {
                        Some(p) => Some(load_face_image(&base.join(p))?.resized(image_size, image_size)),
                        None => None,
                    };
                    Ok(FaceSample {
                        pixels,
                        identity_label: r.identity_label,
                        pattern_class: r.pattern_class,
                        mask_flag: r.mask_flag,
                        paired,
                        region: None,
                        path: Some(r.path.clone()),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            samples,
            num_identities: manifest.num_identities,
            image_size,
        })
    }

    pub fn from_synth(records: &[SynthRecord]) -> Result<Self> {
        let image_size = records
            .first()
            .map(|r| r.face.pixels.height())
            .ok_or_else(|| MeerError::Empty("no synthetic records".into()))?;
        let samples = records
            .iter()
            .map(|r| FaceSample {
                pixels: r.face.pixels.clone(),
                identity_label: r.face.identity_label,
                pattern_class: r.face.pattern_class,
                mask_flag: r.face.mask_flag,
                paired: r.source.clone(),
                region: r.region.clone(),
                path: None,
            })
            .collect::<Vec<_>>();
        let num_identities = samples.iter().map(|s| s.identity_label + 1).max().unwrap_or(0);
        Ok(Self {
            samples,
            num_identities,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of masked samples that carry an unmasked source.
    pub fn paired_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].is_masked() && self.samples[i].paired.is_some())
            .collect()
    }

    pub fn images(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        stack_pixels(indices.iter().map(|&i| &self.samples[i].pixels), dtype, device)
    }

    pub fn paired_images(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let sources = indices
            .iter()
            .map(|&i| {
                self.samples[i]
                    .paired
                    .as_ref()
                    .ok_or_else(|| MeerError::InvalidArgument(format!("sample {i} has no paired unmasked image")))
            })
            .collect::<Result<Vec<_>>>()?;
        stack_pixels(sources.into_iter(), dtype, device)
    }

    pub fn identity_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].identity_label).collect()
    }

    pub fn pattern_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].pattern_class).collect()
    }
}

/// `B×3×H×W` batch from individual images.
pub(crate) fn stack_pixels<'a>(
    images: impl Iterator<Item = &'a FacePixels>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for px in images {
        let d = (px.height(), px.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(MeerError::Shape(format!(
                    "batch mixes image sizes {prev:?} and {d:?}"
                )))
            }
            _ => {}
        }
        data.extend_from_slice(px.as_slice());
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| MeerError::Empty("empty image batch".into()))?;
    Ok(Tensor::from_vec(data, (n, 3, h, w), device)?.to_dtype(dtype)?)
}
