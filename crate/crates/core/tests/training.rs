use meer::checkpoint::Checkpoint;
use meer::face_data::{synth_toy_set, FaceDataset, PatternLabeler, SynthConfig};
use meer::model::ModelConfig;
use meer::training::{train_stage1, train_stage2, TrainConfig, TrainRun};
use meer::MeerError;

fn toy_data(ids: usize, per: usize, masked_ratio: f64) -> FaceDataset {
    let cfg = SynthConfig {
        num_identities: ids,
        images_per_identity: per,
        masked_ratio,
        seed: 11,
        ..SynthConfig::default()
    };
    FaceDataset::from_synth(&synth_toy_set(&cfg, &PatternLabeler::default()).unwrap()).unwrap()
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr_initial: 1e-3,
        lr_milestones: vec![2, 3],
        seed: 5,
        ..TrainConfig::default()
    }
}

fn assert_same_weights(a: &Checkpoint, b: &Checkpoint) {
    assert_eq!(a.step, b.step);
    assert_eq!(a.optimizer_steps, b.optimizer_steps);
    assert_eq!(a.tensors.keys().collect::<Vec<_>>(), b.tensors.keys().collect::<Vec<_>>());
    for (name, t) in &a.tensors {
        let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b.tensors[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y, "{name}");
    }
}

fn totals(run: &TrainRun) -> Vec<f64> {
    run.log.iter().map(|r| r.total).collect()
}

#[test]
fn single_image_is_fit_exactly() {
    let data = toy_data(1, 1, 0.0);
    let model = ModelConfig::toy(1);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 200,
        ..TrainConfig::default()
    };
    let run = train_stage1(&data, &model, &cfg, None).unwrap();
    assert_eq!(run.log.len(), 200);
    // one identity: the ArcFace term is identically zero
    assert!(run.log.iter().all(|r| r.l_arc == 0.0));
    let last = run.final_loss().unwrap();
    assert!(last < 1e-3, "final loss {last}");
}

#[test]
fn stage1_is_deterministic() {
    let data = toy_data(3, 4, 0.25);
    let model = ModelConfig::toy(3);
    let a = train_stage1(&data, &model, &small_cfg(2), None).unwrap();
    let b = train_stage1(&data, &model, &small_cfg(2), None).unwrap();
    assert!((a.final_loss().unwrap() - b.final_loss().unwrap()).abs() < 1e-6);
    assert_eq!(totals(&a), totals(&b));
    assert_same_weights(&a.checkpoint, &b.checkpoint);

    let other = TrainConfig { seed: 6, ..small_cfg(2) };
    let c = train_stage1(&data, &model, &other, None).unwrap();
    assert_ne!(totals(&a), totals(&c));
}

#[test]
fn stage1_resume_matches_uninterrupted_run() {
    let data = toy_data(3, 4, 0.25);
    let model = ModelConfig::toy(3);
    let full = train_stage1(&data, &model, &small_cfg(4), None).unwrap();
    let half = train_stage1(&data, &model, &small_cfg(2), None).unwrap();
    let rest = train_stage1(&data, &model, &small_cfg(4), Some(&half.checkpoint)).unwrap();

    assert_eq!(half.checkpoint.step, 6);
    assert_eq!(rest.log.first().unwrap().step, 6);
    let mut joined = totals(&half);
    joined.extend(totals(&rest));
    assert_eq!(joined, totals(&full));
    assert_same_weights(&full.checkpoint, &rest.checkpoint);

    // resuming a finished run is a no-op
    let again = train_stage1(&data, &model, &small_cfg(4), Some(&full.checkpoint)).unwrap();
    assert!(again.log.is_empty());
    assert_same_weights(&full.checkpoint, &again.checkpoint);
}

#[test]
fn stage2_resume_and_determinism() {
    let data = toy_data(2, 4, 0.5);
    let model = ModelConfig::toy(2);
    let s1 = train_stage1(&data, &model, &small_cfg(1), None).unwrap().checkpoint;
    let full = train_stage2(&data, &model, &s1, &small_cfg(4), None).unwrap();
    let twice = train_stage2(&data, &model, &s1, &small_cfg(4), None).unwrap();
    assert_eq!(totals(&full), totals(&twice));

    let half = train_stage2(&data, &model, &s1, &small_cfg(2), None).unwrap();
    let rest = train_stage2(&data, &model, &s1, &small_cfg(4), Some(&half.checkpoint)).unwrap();
    let mut joined = totals(&half);
    joined.extend(totals(&rest));
    assert_eq!(joined, totals(&full));
    assert_same_weights(&full.checkpoint, &rest.checkpoint);
    assert_eq!(full.checkpoint.stage, 2);
    assert!(full.log.iter().all(|r| r.l_rec.is_some() && r.l_gan.is_some() && r.l_disc.is_some()));
}

#[test]
fn stage2_keeps_stage1_recognition_at_start() {
    let data = toy_data(2, 2, 0.5);
    let model = ModelConfig::toy(2);
    let s1 = train_stage1(&data, &model, &small_cfg(1), None).unwrap().checkpoint;
    let a = s1.instantiate().unwrap();
    let s2 = train_stage2(&data, &model, &s1, &small_cfg(1), None).unwrap().checkpoint;
    let b = s2.instantiate().unwrap();
    assert!(a.generator.is_none() && b.generator.is_some() && b.discriminator.is_some());
    // training moved the shared encoder
    let wa = a.store.named_tensors();
    let wb = b.store.named_tensors();
    let key = wa.keys().find(|k| k.starts_with("encoder.")).unwrap();
    assert_ne!(
        wa[key].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        wb[key].flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn training_errors() {
    let model = ModelConfig::toy(2);
    let empty = FaceDataset {
        samples: Vec::new(),
        num_identities: 2,
        image_size: 32,
    };
    assert!(matches!(
        train_stage1(&empty, &model, &small_cfg(1), None),
        Err(MeerError::Empty(_))
    ));

    let unpaired = toy_data(2, 2, 0.0);
    let s1 = train_stage1(&unpaired, &model, &small_cfg(1), None).unwrap().checkpoint;
    assert!(train_stage2(&unpaired, &model, &s1, &small_cfg(1), None).is_err());

    let paired = toy_data(2, 2, 0.5);
    let s2 = train_stage2(&paired, &model, &s1, &small_cfg(1), None).unwrap().checkpoint;
    assert!(matches!(
        train_stage2(&paired, &model, &s2, &small_cfg(1), None),
        Err(MeerError::Checkpoint(_))
    ));
    assert!(matches!(
        train_stage1(&paired, &model, &small_cfg(1), Some(&s2)),
        Err(MeerError::Checkpoint(_))
    ));
    let wider = ModelConfig {
        embedding_dim: 64,
        ..model.clone()
    };
    assert!(train_stage1(&paired, &wider, &small_cfg(1), Some(&s1)).is_err());

    let too_few_classes = ModelConfig::toy(1);
    assert!(matches!(
        train_stage1(&paired, &too_few_classes, &small_cfg(1), None),
        Err(MeerError::LabelOutOfRange { .. })
    ));
}

#[test]
fn non_finite_loss_aborts_with_batch_indices() {
    let data = toy_data(2, 4, 0.25);
    let model = ModelConfig::toy(2);
    let cfg = TrainConfig {
        lr_initial: 1e300,
        ..small_cfg(2)
    };
    match train_stage1(&data, &model, &cfg, None) {
        Err(MeerError::NonFinite { step, indices, .. }) => {
            assert!(step >= 1);
            assert_eq!(indices.len(), 4);
            assert!(indices.iter().all(|&i| i < data.len()));
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.log.len())),
    }
}
