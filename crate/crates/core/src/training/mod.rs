//! Stage-1 multi-task training and stage-2 joint restoration training.

mod adam;
mod stage1;
mod stage2;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use stage1::train_stage1;
pub use stage2::train_stage2;

use crate::checkpoint::Checkpoint;
use crate::error::{MeerError, Result};
use crate::face_data::FaceDataset;
use crate::losses::LossWeights;
use crate::model::{argmax_rows, RecognitionModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    /// Epochs at which the learning rate is divided by 10. Empty means 50%
    /// and 75% of `epochs`.
    pub lr_milestones: Vec<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fraction of each stage-1 batch drawn from masked images.
    pub masked_ratio: f64,
    pub weights: LossWeights,
    /// Keep the mask-pattern loss on in stage 2.
    pub stage2_pattern_loss: bool,
    /// Check the feature decomposition on every step.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            lr_initial: 0.01,
            lr_floor: 1e-4,
            lr_milestones: Vec::new(),
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            masked_ratio: 0.5,
            weights: LossWeights::default(),
            stage2_pattern_loss: false,
            debug_checks: cfg!(debug_assertions),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeerError::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return bad(format!(
                "learning rates must satisfy 0 < floor <= initial, got floor {} and initial {}",
                self.lr_floor, self.lr_initial
            ));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr milestones must be strictly increasing, got {:?}", self.lr_milestones));
        }
        if !(0.0..=1.0).contains(&self.masked_ratio) {
            return bad(format!("masked ratio must be in [0, 1], got {}", self.masked_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("Adam decays must be in [0, 1) and weight decay non-negative".into());
        }
        self.weights.validate()
    }

    /// Milestones in epochs, with the 50%/75% default applied.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        if !self.lr_milestones.is_empty() {
            return self.lr_milestones.clone();
        }
        let mut m = vec![self.epochs / 2, self.epochs * 3 / 4];
        m.retain(|&e| e > 0);
        m.dedup();
        m
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            floor: self.lr_floor,
            milestones: self.milestone_epochs().iter().map(|e| e * steps_per_epoch).collect(),
        }
    }
}

/// Piecewise-constant learning rate: divided by 10 at each milestone step,
/// never below `floor`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub milestones: Vec<usize>,
}

pub fn lr_at(step: usize, schedule: &LrSchedule) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| step >= m).count();
    (schedule.initial / 10f64.powi(passed as i32)).max(schedule.floor)
}

/// Seeded permutation of `pool`, distinct per (seed, epoch, stream).
fn shuffled(pool: &[usize], seed: u64, epoch: usize, stream: u64) -> Vec<usize> {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(stream.wrapping_mul(0x94D0_49BB_1331_11EB));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let mut out = pool.to_vec();
    out.shuffle(&mut rng);
    out
}

/// The batches of one epoch. Each batch takes `round(ratio·B)` items from
/// the shuffled `masked` pool and the rest from `unmasked`, wrapping around
/// a pool when it runs out; an empty pool hands its share to the other.
pub fn epoch_batches(
    masked: &[usize],
    unmasked: &[usize],
    batch: usize,
    ratio: f64,
    seed: u64,
    epoch: usize,
    steps: usize,
) -> Vec<Vec<usize>> {
    let m = shuffled(masked, seed, epoch, 1);
    let u = shuffled(unmasked, seed, epoch, 2);
    let n_masked = match (m.is_empty(), u.is_empty()) {
        (true, _) => 0,
        (_, true) => batch,
        _ => ((ratio * batch as f64).round() as usize).min(batch),
    };
    let (mut mi, mut ui) = (0, 0);
    (0..steps)
        .map(|_| {
            let mut b = Vec::with_capacity(batch);
            for _ in 0..n_masked {
                b.push(m[mi % m.len()]);
                mi += 1;
            }
            for _ in n_masked..batch {
                b.push(u[ui % u.len()]);
                ui += 1;
            }
            b
        })
        .collect()
}

/// One row of the loss log. Terms that do not apply to a stage are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub l_sm: Option<f64>,
    pub l_arc: f64,
    pub l_gan: Option<f64>,
    pub l_disc: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_idp: Option<f64>,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_sm,l_arc,L_D,L_Dadv,L_rec,L_idp,total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            opt(self.l_sm),
            self.l_arc,
            opt(self.l_gan),
            opt(self.l_disc),
            opt(self.l_rec),
            opt(self.l_idp),
            self.total
        )
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Rows for the steps run in this call (resumed runs start mid-way).
    pub log: Vec<LossRecord>,
}

impl TrainRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.total)
    }
}

pub(crate) const TRAIN_DTYPE: DType = DType::F32;

pub(crate) fn checked(step: usize, term: &str, t: &Tensor, indices: &[usize]) -> Result<f64> {
    let v = crate::losses::scalar(t)?;
    if !v.is_finite() {
        log::error!("non-finite {term} at step {step}; batch indices {indices:?}");
        return Err(MeerError::NonFinite {
            step,
            term: term.to_string(),
            indices: indices.to_vec(),
        });
    }
    Ok(v)
}

pub(crate) fn check_labels(data: &FaceDataset, classes: usize, patterns: usize) -> Result<()> {
    for s in &data.samples {
        if s.identity_label >= classes {
            return Err(MeerError::LabelOutOfRange {
                label: s.identity_label,
                classes,
            });
        }
        if s.pattern_class >= patterns {
            return Err(MeerError::LabelOutOfRange {
                label: s.pattern_class,
                classes: patterns,
            });
        }
    }
    Ok(())
}

/// Closed-set accuracy of identity prediction and mask-pattern
/// classification over a dataset, in evaluation mode.
pub fn training_accuracy(model: &RecognitionModel, data: &FaceDataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(MeerError::Empty("no samples to score".into()));
    }
    let dtype = model.class_weights.dtype();
    let (mut id_hits, mut pattern_hits) = (0usize, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let images = data.images(chunk, dtype, &Device::Cpu)?;
        let out = model.forward(&images, false)?;
        let ids = model.predict_identity(&out.embedding)?;
        let pats = argmax_rows(&out.mask_logits)?;
        for (k, &i) in chunk.iter().enumerate() {
            id_hits += usize::from(ids[k] == data.samples[i].identity_label);
            pattern_hits += usize::from(pats[k] == data.samples[i].pattern_class);
        }
    }
    let n = data.len() as f64;
    Ok((id_hits as f64 / n, pattern_hits as f64 / n))
}
