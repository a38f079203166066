//! Versioned safetensors checkpoints: parameters, running statistics,
//! optimizer moments, step counter and the configs that produced them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{MeerError, Result};
use crate::generator::{Generator, PatchDiscriminator};
use crate::model::{ModelConfig, RecognitionModel};
use crate::nn::ParamStore;
use crate::training::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "meer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefixes of the tensors that belong to the recognition network.
pub const RECOGNITION_PREFIXES: [&str; 5] = ["encoder.", "mdm.", "id_head.", "mask_head.", "arcface."];
pub const GENERATOR_PREFIXES: [&str; 1] = ["decoder."];
pub const DISCRIMINATOR_PREFIXES: [&str; 1] = ["discriminator."];

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u8,
    /// Optimizer steps completed.
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Step counters of each optimizer, keyed by its tensor prefix.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Networks rebuilt from a checkpoint.
pub struct Models {
    pub store: ParamStore,
    pub recognition: RecognitionModel,
    pub generator: Option<Generator>,
    pub discriminator: Option<PatchDiscriminator>,
}

impl Models {
    /// Builds the networks of `stage` in canonical registration order.
    pub fn build(cfg: &ModelConfig, stage: u8, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, Device::Cpu);
        let recognition = RecognitionModel::new(&mut store, cfg)?;
        let (generator, discriminator) = if stage >= 2 {
            (
                Some(Generator::new(&mut store, cfg)?),
                Some(PatchDiscriminator::new(&mut store, cfg)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            store,
            recognition,
            generator,
            discriminator,
        })
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => {
            return Err(MeerError::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}")));
        }
    };
    Ok(t)
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| MeerError::Checkpoint(format!("cannot encode metadata: {e}")))
}

fn parse_meta<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| MeerError::Checkpoint(format!("metadata key `{key}` missing")))?
        .parse()
        .map_err(|_| MeerError::Checkpoint(format!("metadata key `{key}` is malformed")))
}

fn parse_json<T: serde::de::DeserializeOwned>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| MeerError::Checkpoint(format!("metadata key `{key}` missing")))?;
    serde_json::from_str(raw).map_err(|e| MeerError::Checkpoint(format!("metadata key `{key}`: {e}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("stage".to_string(), self.stage.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("model_config".to_string(), json(&self.model)?);
        meta.insert("train_config".to_string(), json(&self.train)?);
        meta.insert("optimizer_steps".to_string(), json(&self.optimizer_steps)?);

        let encoded = self
            .tensors
            .iter()
            .map(|(name, t)| Ok((name.clone(), t.dims().to_vec(), to_bytes(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let views = encoded
            .iter()
            .map(|(name, shape, (dtype, bytes))| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| MeerError::Checkpoint(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| MeerError::io(parent, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| MeerError::Checkpoint(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MeerError::io(path, e))?;
        let bad = |e: safetensors::SafeTensorError| {
            MeerError::Checkpoint(format!("{} is not a valid checkpoint: {e}", path.display()))
        };
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| MeerError::Checkpoint(format!("{} has no checkpoint metadata", path.display())))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(MeerError::Checkpoint(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let version: u32 = parse_meta(&meta, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(MeerError::Checkpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&name, &view)?;
            tensors.insert(name, t);
        }
        Ok(Self {
            stage: parse_meta(&meta, "stage")?,
            step: parse_meta(&meta, "step")?,
            model: parse_json(&meta, "model_config")?,
            train: parse_json(&meta, "train_config")?,
            optimizer_steps: parse_json(&meta, "optimizer_steps")?,
            tensors,
        })
    }

    /// Rebuilds the networks of this checkpoint's stage and loads every
    /// parameter and running statistic.
    pub fn instantiate(&self) -> Result<Models> {
        let dtype = self
            .tensors
            .get("arcface.weight")
            .map(|t| t.dtype())
            .ok_or_else(|| MeerError::Checkpoint("checkpoint has no recognition weights".into()))?;
        let models = Models::build(&self.model, self.stage, self.train.seed, dtype)?;
        models.store.load(&self.tensors)?;
        Ok(models)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: DType) -> Checkpoint {
        let cfg = ModelConfig {
            channels: [4, 4, 8, 8],
            embedding_dim: 8,
            mask_hidden: 8,
            attention_reduction: 2,
            decoder_channels: [4, 4, 4, 4],
            disc_channels: [4, 4, 4],
            ..ModelConfig::toy(3)
        };
        let models = Models::build(&cfg, 2, 5, dtype).unwrap();
        let mut tensors = models.store.named_tensors();
        tensors.insert("optim.m.encoder.stem.weight".into(), tensors["encoder.stem.weight"].ones_like().unwrap());
        Checkpoint {
            stage: 2,
            step: 17,
            model: cfg,
            train: TrainConfig::default(),
            optimizer_steps: [("optim".to_string(), 17u64)].into_iter().collect(),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for dtype in [DType::F32, DType::F64] {
            let ck = sample(dtype);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("nested/ck.safetensors");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back.stage, 2);
            assert_eq!(back.step, 17);
            assert_eq!(back.model, ck.model);
            assert_eq!(back.train, ck.train);
            assert_eq!(back.optimizer_steps, ck.optimizer_steps);
            assert_eq!(back.tensors.len(), ck.tensors.len());
            for (name, t) in &ck.tensors {
                let b = &back.tensors[name];
                assert_eq!(b.dims(), t.dims());
                assert_eq!(b.dtype(), t.dtype());
                let x = t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                let y = b.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                assert_eq!(x, y, "{name}");
            }
            let models = back.instantiate().unwrap();
            assert!(models.generator.is_some() && models.discriminator.is_some());
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&junk), Err(MeerError::Checkpoint(_))));

        let plain = dir.path().join("plain.safetensors");
        let data = [1u8, 0, 0, 0];
        let view = TensorView::new(Dtype::F32, vec![1], &data).unwrap();
        safetensors::serialize_to_file(vec![("x", view)], None, &plain).unwrap();
        assert!(matches!(Checkpoint::load(&plain), Err(MeerError::Checkpoint(_))));
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(MeerError::Io { .. })));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut ck = sample(DType::F32);
        ck.tensors.remove("decoder.to_rgb.weight");
        let err = ck.instantiate().err().unwrap();
        assert!(err.to_string().contains("decoder.to_rgb.weight"));
    }
}
