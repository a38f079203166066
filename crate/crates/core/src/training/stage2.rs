use candle_core::{Device, Tensor};

use super::{check_labels, checked, epoch_batches, lr_at, Adam, LossRecord, TrainConfig, TrainRun, TRAIN_DTYPE};
use crate::checkpoint::{Checkpoint, Models, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES, RECOGNITION_PREFIXES};
use crate::error::{MeerError, Result};
use crate::face_data::FaceDataset;
use crate::losses::{
    arcface_loss, gan_discriminator_loss, gan_generator_loss, id_preserving_loss, mask_pattern_loss,
    reconstruction_loss, stage2_loss, Stage2Terms,
};
use crate::model::{decomposition_error, DecoupledFeatures, EncoderOutput, ModelConfig};

const GEN_OPTIMIZER: &str = "optim_g";
const DISC_OPTIMIZER: &str = "optim_d";

fn head(t: &Tensor, n: usize) -> Result<Tensor> {
    Ok(t.narrow(0, 0, n)?)
}

fn tail(t: &Tensor, n: usize) -> Result<Tensor> {
    Ok(t.narrow(0, n, t.dim(0)? - n)?)
}

/// Fields of the recognition network that a stage-2 config must share with
/// its stage-1 checkpoint.
fn same_recognition(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.input_size == b.input_size
        && a.channels == b.channels
        && a.embedding_dim == b.embedding_dim
        && a.num_identities == b.num_identities
        && a.num_patterns == b.num_patterns
        && a.mask_hidden == b.mask_hidden
        && a.attention_reduction == b.attention_reduction
        && a.mdm_on == b.mdm_on
}

/// Joint training of encoder, decoupler, decoder and patch discriminator on
/// paired masked/unmasked images, starting from a stage-1 checkpoint.
///
/// Each step runs one discriminator update on `α·L_Dadv` with the fakes
/// detached, then one generator/encoder update on the full objective with
/// the fakes re-encoded and the real embedding held fixed as the
/// id-preserving target. The two updates come from separate backward passes.
pub fn train_stage2(
    data: &FaceDataset,
    model_cfg: &ModelConfig,
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    if stage1.stage != 1 {
        return Err(MeerError::Checkpoint(format!(
            "stage 2 starts from a stage-1 checkpoint, got stage {}",
            stage1.stage
        )));
    }
    if !same_recognition(model_cfg, &stage1.model) {
        return Err(MeerError::Checkpoint(
            "recognition network configuration differs from the stage-1 checkpoint".into(),
        ));
    }
    let paired = data.paired_indices();
    if paired.is_empty() {
        return Err(MeerError::InvalidArgument(
            "stage 2 needs masked images paired with their unmasked sources".into(),
        ));
    }
    check_labels(data, model_cfg.num_identities, model_cfg.num_patterns)?;

    let models = Models::build(model_cfg, 2, cfg.seed, TRAIN_DTYPE)?;
    models.store.load_prefixed(&stage1.tensors, &RECOGNITION_PREFIXES)?;
    let model = &models.recognition;
    let generator = models.generator.as_ref().expect("stage-2 models include a generator");
    let disc = models.discriminator.as_ref().expect("stage-2 models include a discriminator");
    let gen_prefixes: Vec<&str> = RECOGNITION_PREFIXES.iter().chain(&GENERATOR_PREFIXES).copied().collect();
    let new_adam = |prefixes: &[&str]| {
        Adam::new(
            models.store.trainable(prefixes),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )
    };
    let mut gen_opt = new_adam(&gen_prefixes)?;
    let mut disc_opt = new_adam(&DISCRIMINATOR_PREFIXES)?;
    let start = match resume {
        Some(ck) => {
            if ck.stage != 2 || &ck.model != model_cfg {
                return Err(MeerError::Checkpoint(
                    "resume checkpoint is not a stage-2 checkpoint of this configuration".into(),
                ));
            }
            models.store.load(&ck.tensors)?;
            let steps = |k: &str| ck.optimizer_steps.get(k).copied().unwrap_or(ck.step as u64);
            gen_opt.load_state(&ck.tensors, GEN_OPTIMIZER, steps(GEN_OPTIMIZER))?;
            disc_opt.load_state(&ck.tensors, DISC_OPTIMIZER, steps(DISC_OPTIMIZER))?;
            ck.step
        }
        None => 0,
    };

    let batch = cfg.batch_size.min(paired.len());
    let steps_per_epoch = paired.len().div_ceil(batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = cfg.schedule(steps_per_epoch);
    let w = &cfg.weights;
    let tolerance = if TRAIN_DTYPE == candle_core::DType::F64 { 1e-6 } else { 1e-5 };

    let mut log = Vec::with_capacity(total_steps.saturating_sub(start));
    let mut plan: (usize, Vec<Vec<usize>>) = (usize::MAX, Vec::new());
    for step in start..total_steps {
        let epoch = step / steps_per_epoch;
        if plan.0 != epoch {
            plan = (epoch, epoch_batches(&paired, &[], batch, 1.0, cfg.seed, epoch, steps_per_epoch));
        }
        let indices = &plan.1[step % steps_per_epoch];
        let n = indices.len();
        let lr = lr_at(step, &schedule);
        let labels = data.identity_labels(indices);
        let i_sm = data.images(indices, TRAIN_DTYPE, &Device::Cpu)?;
        let i_ru = data.paired_images(indices, TRAIN_DTYPE, &Device::Cpu)?;

        // masked and real unmasked images share one forward pass
        let out = model.forward(&Tensor::cat(&[&i_sm, &i_ru], 0)?, true)?;
        if cfg.debug_checks {
            let err = decomposition_error(&out.features.x, &out.decoupled)?;
            if err > tolerance {
                return Err(MeerError::Invariant(format!(
                    "x_id + x_mask deviates from X by {err:e} at step {step}"
                )));
            }
        }
        let enc_sm = EncoderOutput {
            f1: head(&out.features.f1, n)?,
            f2: head(&out.features.f2, n)?,
            f3: head(&out.features.f3, n)?,
            x: head(&out.features.x, n)?,
        };
        let dec_sm = DecoupledFeatures {
            attention: out.decoupled.attention.as_ref().map(|a| head(a, n)).transpose()?,
            x_id: head(&out.decoupled.x_id, n)?,
            x_mask: head(&out.decoupled.x_mask, n)?,
        };
        let i_fu = generator.restore(&enc_sm, &dec_sm)?;

        let l_disc = (gan_discriminator_loss(&disc.discriminate(&i_ru)?, &disc.discriminate(&i_fu.detach())?)?
            * w.alpha)?;
        let l_disc_v = checked(step, "L_Dadv", &l_disc, indices)?;
        disc_opt.step(&l_disc.backward()?, lr)?;

        let l_gan = gan_generator_loss(&disc.discriminate(&i_fu)?)?;
        let both_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let l_id = arcface_loss(
            &out.embedding,
            &model.class_weights,
            &both_labels,
            w.arcface_scale,
            w.arcface_margin,
        )?;
        let z_fu = model.embed(&i_fu, true)?;
        let l_id_fake = arcface_loss(&z_fu, &model.class_weights, &labels, w.arcface_scale, w.arcface_margin)?;
        let l_rec = reconstruction_loss(&i_fu, &i_ru)?;
        let l_idp = id_preserving_loss(&z_fu, &tail(&out.embedding, n)?)?;
        let terms = Stage2Terms {
            gan: l_gan,
            id: l_id,
            id_fake: l_id_fake,
            rec: l_rec,
            id_preserving: l_idp,
        };
        let mut total = stage2_loss(&terms, w)?;
        let mut l_sm_v = None;
        if cfg.stage2_pattern_loss {
            let patterns: Vec<usize> = data.pattern_labels(indices).into_iter().chain(std::iter::repeat_n(0, n)).collect();
            let l_sm = mask_pattern_loss(&out.mask_logits, &patterns)?;
            l_sm_v = Some(checked(step, "l_sm", &l_sm, indices)?);
            total = (total + l_sm)?;
        }
        let record = LossRecord {
            step,
            lr,
            l_sm: l_sm_v,
            l_arc: checked(step, "l_arc", &terms.id, indices)? + checked(step, "l_arc_fake", &terms.id_fake, indices)?,
            l_gan: Some(checked(step, "L_D", &terms.gan, indices)?),
            l_disc: Some(l_disc_v),
            l_rec: Some(checked(step, "L_rec", &terms.rec, indices)?),
            l_idp: Some(checked(step, "L_idp", &terms.id_preserving, indices)?),
            total: checked(step, "total", &total, indices)?,
        };
        gen_opt.step(&total.backward()?, lr)?;
        log::debug!("stage2 step {step}: {}", record.csv_row());
        log.push(record);
    }

    let mut tensors = models.store.named_tensors();
    tensors.extend(gen_opt.state(GEN_OPTIMIZER));
    tensors.extend(disc_opt.state(DISC_OPTIMIZER));
    Ok(TrainRun {
        checkpoint: Checkpoint {
            stage: 2,
            step: total_steps.max(start),
            model: model_cfg.clone(),
            train: cfg.clone(),
            optimizer_steps: [
                (GEN_OPTIMIZER.to_string(), gen_opt.steps()),
                (DISC_OPTIMIZER.to_string(), disc_opt.steps()),
            ]
            .into_iter()
            .collect(),
            tensors,
        },
        log,
    })
}
