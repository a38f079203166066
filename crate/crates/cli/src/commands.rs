use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::info;
use meer::checkpoint::Checkpoint;
use meer::config::RunConfig;
use meer::evaluation::{
    balanced_pairs, pairs_to_text, read_pairs, restore_images, similarity_distribution, verify_pairs, MetricReport,
};
use meer::face_data::{
    build_manifest, load_face_image, save_face_image, synth_toy_set, DatasetManifest, FaceDataset, FacePixels,
    Pairing, PatternLabeler, SynthConfig,
};
use meer::mask_patterns::enumerate_patterns;
use meer::training::{loss_csv, train_stage1, train_stage2};
use meer::{MeerError, Result};

const EVAL_BATCH: usize = 64;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MeerError + '_ {
    move |source| MeerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Relative config paths resolve against the config file's directory.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        parent_dir(config_path).join(p)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth_data(
    out: &Path,
    identities: usize,
    per_identity: usize,
    masked_ratio: f64,
    size: usize,
    seed: u64,
    pairs_per_class: usize,
    occupancy_threshold: f64,
) -> Result<()> {
    if identities == 0 || per_identity == 0 {
        return Err(MeerError::InvalidArgument("need at least one identity and one image".into()));
    }
    let cfg = SynthConfig {
        num_identities: identities,
        images_per_identity: per_identity,
        masked_ratio,
        size,
        seed,
        ..SynthConfig::default()
    };
    let labeler = PatternLabeler {
        threshold: occupancy_threshold,
        ..PatternLabeler::default()
    };
    let records = synth_toy_set(&cfg, &labeler)?;
    for r in &records {
        let dir = out.join(format!("id_{:04}", r.face.identity_label));
        match &r.source {
            None => save_face_image(&r.face.pixels, &dir.join(format!("img_{:02}.png", r.variation)))?,
            Some(src) => {
                let name = format!("img_{:02}.masked.p{:03}.png", r.variation, r.face.pattern_class);
                save_face_image(&r.face.pixels, &dir.join(name))?;
                save_face_image(src, &dir.join(format!("img_{:02}.ref.png", r.variation)))?;
            }
        }
    }
    let manifest = build_manifest(out, Pairing::MaskedUnmasked)?;
    manifest.write(&out.join("manifest.tsv"))?;
    let items: Vec<(String, usize)> = manifest
        .records
        .iter()
        .map(|r| (r.path.clone(), r.identity_label))
        .collect();
    let pairs = balanced_pairs(&items, pairs_per_class, seed);
    write_file(&out.join("pairs.tsv"), &pairs_to_text(&pairs))?;
    let masked = records.iter().filter(|r| r.source.is_some()).count();
    info!(
        "wrote {} images ({masked} masked), {} pairs to {}",
        records.len(),
        pairs.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    stage: u8,
    from_checkpoint: Option<&Path>,
    resume: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let stage1 = match (stage, from_checkpoint) {
        (2, None) => {
            return Err(MeerError::InvalidArgument(
                "stage 2 needs a stage-1 checkpoint (--from-checkpoint)".into(),
            ))
        }
        (2, Some(p)) => Some(Checkpoint::load(p)?),
        (_, Some(_)) => return Err(MeerError::InvalidArgument("--from-checkpoint only applies to stage 2".into())),
        _ => None,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;

    let manifest_path = cfg
        .manifest
        .as_deref()
        .map(|p| resolve(config_path, p))
        .ok_or_else(|| MeerError::Config("data.manifest is not set".into()))?;
    let manifest = DatasetManifest::read(&manifest_path)?;
    let data = FaceDataset::from_manifest(&manifest, &manifest_path, cfg.input_size)?;
    let model_cfg = cfg.model_config(data.num_identities)?;
    info!(
        "stage {stage}: {} images, {} identities, {} paired",
        data.len(),
        data.num_identities,
        data.paired_indices().len()
    );

    let run = match stage1 {
        None => train_stage1(&data, &model_cfg, &cfg.train, resume.as_ref())?,
        Some(s1) => train_stage2(&data, &model_cfg, &s1, &cfg.train, resume.as_ref())?,
    };

    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => resolve(config_path, &cfg.output_dir),
    };
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let ckpt_path = out_dir.join(format!("stage{stage}.safetensors"));
    run.checkpoint.save(&ckpt_path)?;

    let csv_path = out_dir.join(format!("stage{stage}_losses.csv"));
    if resume.is_some() && csv_path.is_file() {
        let mut f = fs::OpenOptions::new().append(true).open(&csv_path).map_err(io_err(&csv_path))?;
        for r in &run.log {
            writeln!(f, "{}", r.csv_row()).map_err(io_err(&csv_path))?;
        }
    } else {
        write_file(&csv_path, &loss_csv(&run.log))?;
    }
    write_file(&out_dir.join("config.txt"), &cfg.to_text())?;

    match run.final_loss() {
        Some(l) => info!("stage {stage} done at step {}, final loss {l:.6}", run.checkpoint.step),
        None => info!("stage {stage}: nothing left to train at step {}", run.checkpoint.step),
    }
    info!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    pairs_path: &Path,
    base: Option<&Path>,
    far: f64,
    folds: usize,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let models = ckpt.instantiate()?;
    let mut pairs = read_pairs(pairs_path)?;
    let base = base.map(Path::to_path_buf).unwrap_or_else(|| parent_dir(pairs_path));
    let scores = verify_pairs(&models.recognition, &mut pairs, &base, EVAL_BATCH)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    let report = MetricReport::compute(&scores, &labels, far, folds)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = out {
        write_file(out, &text)?;
    }
    Ok(())
}

pub fn removemask(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let models = ckpt.instantiate()?;
    let generator = models
        .generator
        .as_ref()
        .ok_or_else(|| MeerError::Checkpoint(format!("{} has no generator; use a stage-2 checkpoint", checkpoint.display())))?;
    let size = models.recognition.config.input_size;
    let face = load_face_image(input)?;
    let x = face
        .resized(size, size)
        .to_tensor(models.recognition.class_weights.dtype(), &Device::Cpu)?
        .unsqueeze(0)?;
    let restored = restore_images(&models.recognition, generator, &x)?.squeeze(0)?;
    let restored = FacePixels::from_tensor(&restored)?.resized(face.height(), face.width());
    save_face_image(&restored, output)?;
    info!("restored {} -> {}", input.display(), output.display());
    Ok(())
}

pub fn plot_data(checkpoint: &Path, manifest_path: &Path, out: &Path, bins: usize) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let models = ckpt.instantiate()?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let data = FaceDataset::from_manifest(&manifest, manifest_path, models.recognition.config.input_size)?;
    let hist = similarity_distribution(&models.recognition, &data, bins)?;
    write_file(out, &hist.to_csv())?;
    info!(
        "{} identities, mean masked/unmasked similarity {:.4}",
        hist.identity_means.len(),
        hist.mean()
    );
    Ok(())
}

pub fn dump_patterns(grid: usize, out: Option<&Path>) -> Result<()> {
    let text = enumerate_patterns(grid)?.dump();
    match out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
