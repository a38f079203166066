use candle_core::Device;

use super::{check_labels, checked, epoch_batches, lr_at, Adam, LossRecord, TrainConfig, TrainRun, TRAIN_DTYPE};
use crate::checkpoint::{Checkpoint, Models};
use crate::error::{MeerError, Result};
use crate::face_data::FaceDataset;
use crate::losses::{arcface_loss, mask_pattern_loss, stage1_loss};
use crate::model::{decomposition_error, ModelConfig};

const OPTIMIZER: &str = "optim";

/// Multi-task training of encoder, decoupler, identity head and mask head on
/// `l_sm + λ·l_arc`. Unmasked images carry pattern class 0.
///
/// With `resume`, parameters, running statistics and optimizer moments are
/// restored and training continues at the saved step; the batch sequence is
/// a pure function of seed and epoch, so a resumed run matches an
/// uninterrupted one.
pub fn train_stage1(
    data: &FaceDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(MeerError::Empty("training set has no images".into()));
    }
    check_labels(data, model_cfg.num_identities, model_cfg.num_patterns)?;

    let models = Models::build(model_cfg, 1, cfg.seed, TRAIN_DTYPE)?;
    let model = &models.recognition;
    let mut opt = Adam::new(
        models.store.trainable(&[""]),
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.weight_decay,
    )?;
    let start = match resume {
        Some(ck) => {
            if ck.stage != 1 {
                return Err(MeerError::Checkpoint(format!("cannot resume stage 1 from a stage-{} checkpoint", ck.stage)));
            }
            if &ck.model != model_cfg {
                return Err(MeerError::Checkpoint("model configuration differs from the checkpoint".into()));
            }
            models.store.load(&ck.tensors)?;
            let steps = ck.optimizer_steps.get(OPTIMIZER).copied().unwrap_or(ck.step as u64);
            opt.load_state(&ck.tensors, OPTIMIZER, steps)?;
            ck.step
        }
        None => 0,
    };

    let batch = cfg.batch_size.min(data.len());
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = cfg.schedule(steps_per_epoch);
    let (masked, unmasked): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.samples[i].is_masked());
    let tolerance = if TRAIN_DTYPE == candle_core::DType::F64 { 1e-6 } else { 1e-5 };
    let w = &cfg.weights;

    let mut log = Vec::with_capacity(total_steps.saturating_sub(start));
    let mut plan: (usize, Vec<Vec<usize>>) = (usize::MAX, Vec::new());
    for step in start..total_steps {
        let epoch = step / steps_per_epoch;
        if plan.0 != epoch {
            plan = (
                epoch,
                epoch_batches(&masked, &unmasked, batch, cfg.masked_ratio, cfg.seed, epoch, steps_per_epoch),
            );
        }
        let indices = &plan.1[step % steps_per_epoch];
        let images = data.images(indices, TRAIN_DTYPE, &Device::Cpu)?;
        let out = model.forward(&images, true)?;
        if cfg.debug_checks {
            let err = decomposition_error(&out.features.x, &out.decoupled)?;
            if err > tolerance {
                return Err(MeerError::Invariant(format!(
                    "x_id + x_mask deviates from X by {err:e} at step {step}"
                )));
            }
        }
        let l_arc = arcface_loss(
            &out.embedding,
            &model.class_weights,
            &data.identity_labels(indices),
            w.arcface_scale,
            w.arcface_margin,
        )?;
        let l_sm = mask_pattern_loss(&out.mask_logits, &data.pattern_labels(indices))?;
        let total = stage1_loss(&l_sm, &l_arc, w.lambda)?;
        let record = LossRecord {
            step,
            lr: lr_at(step, &schedule),
            l_sm: Some(checked(step, "l_sm", &l_sm, indices)?),
            l_arc: checked(step, "l_arc", &l_arc, indices)?,
            l_gan: None,
            l_disc: None,
            l_rec: None,
            l_idp: None,
            total: checked(step, "total", &total, indices)?,
        };
        opt.step(&total.backward()?, record.lr)?;
        log::debug!("stage1 step {step}: {}", record.csv_row());
        log.push(record);
    }

    let mut tensors = models.store.named_tensors();
    tensors.extend(opt.state(OPTIMIZER));
    Ok(TrainRun {
        checkpoint: Checkpoint {
            stage: 1,
            step: total_steps.max(start),
            model: model_cfg.clone(),
            train: cfg.clone(),
            optimizer_steps: [(OPTIMIZER.to_string(), opt.steps())].into_iter().collect(),
            tensors,
        },
        log,
    })
}
