//! 1:1 verification metrics over cosine similarities, pair files, the
//! masked/unmasked similarity histogram and restoration statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MeerError, Result};
use crate::face_data::{load_face_image, stack_pixels, FaceDataset, FacePixels};
use crate::generator::Generator;
use crate::model::RecognitionModel;
use crate::nn::l2_normalize_rows;

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationPair {
    pub path_a: String,
    pub path_b: String,
    pub same_identity: bool,
    pub similarity: Option<f64>,
}

impl VerificationPair {
    pub fn new(path_a: impl Into<String>, path_b: impl Into<String>, same_identity: bool) -> Self {
        Self {
            path_a: path_a.into(),
            path_b: path_b.into(),
            same_identity,
            similarity: None,
        }
    }
}

/// Tab-separated `path_a  path_b  {0,1}` lines; blank lines and `#` comments
/// are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<VerificationPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| MeerError::Parse(format!("pairs line {}: {m}", n + 1));
        if fields.len() != 3 {
            return Err(bad(&format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let same = match fields[2].trim() {
            "1" => true,
            "0" => false,
            other => return Err(bad(&format!("label must be 0 or 1, got `{other}`"))),
        };
        out.push(VerificationPair::new(fields[0], fields[1], same));
    }
    Ok(out)
}

pub fn pairs_to_text(pairs: &[VerificationPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{}", p.path_a, p.path_b, u8::from(p.same_identity));
    }
    s
}

pub fn read_pairs(path: &Path) -> Result<Vec<VerificationPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| MeerError::io(path, e))?;
    let pairs = parse_pairs(&text)?;
    if pairs.is_empty() {
        return Err(MeerError::Empty(format!("{} contains no pairs", path.display())));
    }
    Ok(pairs)
}

/// Equal numbers of same-identity and different-identity pairs drawn from
/// `(path, label)` items, at most `per_class` of each, in seeded order.
pub fn balanced_pairs(items: &[(String, usize)], per_class: usize, seed: u64) -> Vec<VerificationPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items[i].1 == items[j].1 {
                positives.push((i, j));
            }
        }
    }
    positives.shuffle(&mut rng);
    let mut per_label: BTreeMap<usize, usize> = BTreeMap::new();
    for x in items {
        *per_label.entry(x.1).or_default() += 1;
    }
    let possible_neg = per_label.values().map(|c| c * (items.len() - c)).sum::<usize>() / 2;
    let n = positives.len().min(per_class).min(possible_neg);
    positives.truncate(n);
    let mut negatives = std::collections::BTreeSet::new();
    while negatives.len() < n {
        let i = rng.gen_range(0..items.len());
        let j = rng.gen_range(0..items.len());
        if items[i].1 != items[j].1 {
            negatives.insert((i.min(j), i.max(j)));
        }
    }
    let mut pairs: Vec<VerificationPair> = positives
        .iter()
        .map(|&(i, j)| VerificationPair::new(&items[i].0, &items[j].0, true))
        .chain(negatives.iter().map(|&(i, j)| VerificationPair::new(&items[i].0, &items[j].0, false)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs
}

fn split_labels(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(MeerError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MeerError::InvalidArgument("similarity scores contain NaN".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MeerError::InvalidArgument("metrics need both positive and negative pairs".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by the trapezoidal rule; tied scores form one
/// diagonal segment.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_labels(scores, labels)?;
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (mut dtp, mut dfp) = (0.0, 0.0);
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            i += 1;
        }
        area += (dfp / nn) * ((tp + tp + dtp) / (2.0 * np));
        tp += dtp;
        fp += dfp;
    }
    debug_assert_eq!(fp, nn);
    Ok(area)
}

/// True-accept rate at the smallest threshold (among the scores and +∞)
/// whose false-accept rate does not exceed `far`. A pair is accepted when
/// its score is at least the threshold.
pub fn tpr_at_far(scores: &[f64], labels: &[bool], far: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&far) {
        return Err(MeerError::InvalidArgument(format!("FAR target must be in [0, 1], got {far}")));
    }
    let (mut pos, mut neg) = split_labels(scores, labels)?;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let nn = neg.len() as f64;
    let t = candidates
        .into_iter()
        .find(|&t| at_least(&neg, t) as f64 / nn <= far)
        .unwrap_or(f64::INFINITY);
    Ok(at_least(&pos, t) as f64 / pos.len() as f64)
}

/// Smallest threshold maximizing accuracy on the given scores.
fn best_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos = labels.iter().filter(|&&l| l).count();
    // at threshold order[i].0: accepted = items i.., rejected = items ..i
    let (mut best_t, mut best_correct) = (f64::INFINITY, order.len() - total_pos);
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        let correct = (total_pos - pos_below) + neg_below;
        if correct > best_correct || (correct == best_correct && t < best_t) {
            best_correct = correct;
            best_t = t;
        }
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    best_t
}

/// Cross-validated verification accuracy: contiguous folds, threshold picked
/// on the other folds, accuracy measured on the held-out fold.
pub fn fold_accuracy(scores: &[f64], labels: &[bool], folds: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MeerError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if folds < 2 || scores.len() < folds {
        return Err(MeerError::InvalidArgument(format!(
            "{} pairs cannot be split into {folds} folds",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MeerError::InvalidArgument("similarity scores contain NaN".into()));
    }
    let n = scores.len();
    let mut total = 0.0;
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let train_s: Vec<f64> = scores[..lo].iter().chain(&scores[hi..]).copied().collect();
        let train_l: Vec<bool> = labels[..lo].iter().chain(&labels[hi..]).copied().collect();
        let t = best_threshold(&train_s, &train_l);
        let correct = (lo..hi).filter(|&i| (scores[i] >= t) == labels[i]).count();
        total += correct as f64 / (hi - lo) as f64;
    }
    Ok(total / folds as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auc: f64,
    pub tpr_at_far: f64,
    pub far: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[bool], far: f64, folds: usize) -> Result<Self> {
        Ok(Self {
            accuracy: fold_accuracy(scores, labels, folds)?,
            auc: roc_auc(scores, labels)?,
            tpr_at_far: tpr_at_far(scores, labels, far)?,
            far,
            positives: labels.iter().filter(|&&l| l).count(),
            negatives: labels.iter().filter(|&&l| !l).count(),
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "ACC\t{:.6}\nAUC\t{:.6}\nTPR@FAR={}%\t{:.6}\npairs\t{}\npositives\t{}\nnegatives\t{}\n",
            self.accuracy,
            self.auc,
            self.far * 100.0,
            self.tpr_at_far,
            self.positives + self.negatives,
            self.positives,
            self.negatives
        )
    }
}

/// L2-normalized Z_id rows for `faces`, computed in evaluation mode.
pub fn embed_faces(model: &RecognitionModel, faces: &[&FacePixels], batch: usize) -> Result<Vec<Vec<f64>>> {
    let dtype = model.class_weights.dtype();
    let mut out = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(batch.max(1)) {
        let images = stack_pixels(chunk.iter().copied(), dtype, &Device::Cpu)?;
        let z = l2_normalize_rows(&model.embed(&images, false)?)?;
        out.extend(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

/// Fills `similarity` of every pair; image paths are relative to `base`.
pub fn verify_pairs(
    model: &RecognitionModel,
    pairs: &mut [VerificationPair],
    base: &Path,
    batch: usize,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(MeerError::Empty("no verification pairs".into()));
    }
    let size = model.config.input_size;
    let mut paths: Vec<&str> = pairs.iter().flat_map(|p| [p.path_a.as_str(), p.path_b.as_str()]).collect();
    paths.sort_unstable();
    paths.dedup();
    let faces = paths
        .iter()
        .map(|p| Ok(load_face_image(&base.join(p))?.resized(size, size)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FacePixels> = faces.iter().collect();
    let z = embed_faces(model, &refs, batch)?;
    let index: BTreeMap<&str, usize> = paths.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let sims: Vec<f64> = pairs
        .iter()
        .map(|p| cosine(&z[index[p.path_a.as_str()]], &z[index[p.path_b.as_str()]]))
        .collect();
    for (p, s) in pairs.iter_mut().zip(&sims) {
        p.similarity = Some(*s);
    }
    Ok(sims)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHistogram {
    /// `bins + 1` ascending edges spanning [-1, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean masked/unmasked cosine of each identity, by label.
    pub identity_means: BTreeMap<usize, f64>,
}

impl SimilarityHistogram {
    pub fn from_means(identity_means: BTreeMap<usize, f64>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(MeerError::InvalidArgument("histogram needs at least one bin".into()));
        }
        let bin_edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &m in identity_means.values() {
            let k = (((m + 1.0) / 2.0 * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[k] += 1;
        }
        Ok(Self {
            bin_edges,
            counts,
            identity_means,
        })
    }

    pub fn mean(&self) -> f64 {
        self.identity_means.values().sum::<f64>() / self.identity_means.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c);
        }
        s
    }
}

/// Per identity, the mean cosine between each masked image and its paired
/// unmasked source, histogrammed over `bins` equal bins of [-1, 1].
pub fn similarity_distribution(model: &RecognitionModel, data: &FaceDataset, bins: usize) -> Result<SimilarityHistogram> {
    let paired = data.paired_indices();
    if paired.is_empty() {
        return Err(MeerError::InvalidArgument("similarity distribution needs paired masked images".into()));
    }
    let masked: Vec<&FacePixels> = paired.iter().map(|&i| &data.samples[i].pixels).collect();
    let sources: Vec<&FacePixels> = paired
        .iter()
        .map(|&i| data.samples[i].paired.as_ref().expect("paired index has a source"))
        .collect();
    let za = embed_faces(model, &masked, 64)?;
    let zb = embed_faces(model, &sources, 64)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (k, &i) in paired.iter().enumerate() {
        let e = sums.entry(data.samples[i].identity_label).or_insert((0.0, 0));
        e.0 += cosine(&za[k], &zb[k]);
        e.1 += 1;
    }
    let means = sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect();
    SimilarityHistogram::from_means(means, bins)
}

/// Restored images for a batch, in evaluation mode.
pub fn restore_images(model: &RecognitionModel, generator: &Generator, images: &Tensor) -> Result<Tensor> {
    let out = model.forward(images, false)?;
    generator.restore(&out.features, &out.decoupled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationStats {
    /// Mean cos(Z_id(I_fu), Z_id(I_ru)).
    pub identity_cosine: f64,
    /// Mean absolute pixel difference to the real unmasked image inside the
    /// mask region.
    pub mask_region_error: f64,
    pub full_image_error: f64,
}

/// Restores every paired masked image and compares it with its source.
pub fn restoration_stats(model: &RecognitionModel, generator: &Generator, data: &FaceDataset) -> Result<RestorationStats> {
    let paired = data.paired_indices();
    if paired.is_empty() {
        return Err(MeerError::InvalidArgument("restoration statistics need paired masked images".into()));
    }
    let dtype = model.class_weights.dtype();
    let (mut cos_sum, mut region_sum, mut region_n, mut full_sum, mut full_n) = (0.0, 0.0, 0usize, 0.0, 0usize);
    for chunk in paired.chunks(32) {
        let i_sm = data.images(chunk, dtype, &Device::Cpu)?;
        let i_ru = data.paired_images(chunk, dtype, &Device::Cpu)?;
        let i_fu = restore_images(model, generator, &i_sm)?;
        let z_fu = l2_normalize_rows(&model.embed(&i_fu, false)?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let z_ru = l2_normalize_rows(&model.embed(&i_ru, false)?)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let diff = (&i_fu - &i_ru)?.abs()?.to_dtype(DType::F64)?;
        for (k, &i) in chunk.iter().enumerate() {
            cos_sum += cosine(&z_fu[k], &z_ru[k]);
            let d = diff.get(k)?.flatten_all()?.to_vec1::<f64>()?;
            full_sum += d.iter().sum::<f64>();
            full_n += d.len();
            if let Some(region) = data.samples[i].mask_region() {
                let (h, w) = (region.height(), region.width());
                for y in 0..h {
                    for x in 0..w {
                        if region.get(y, x) {
                            for c in 0..3 {
                                region_sum += d[c * h * w + y * w + x];
                            }
                            region_n += 3;
                        }
                    }
                }
            }
        }
    }
    Ok(RestorationStats {
        identity_cosine: cos_sum / paired.len() as f64,
        mask_region_error: region_sum / region_n.max(1) as f64,
        full_image_error: full_sum / full_n as f64,
    })
}
