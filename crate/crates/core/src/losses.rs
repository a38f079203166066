//! Objective terms for both training stages.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{MeerError, Result};
use crate::nn::l2_normalize_rows;

/// Cosines are kept this far inside ±1 so that `sin θ` stays differentiable.
const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the ArcFace term in stage 1.
    pub lambda: f64,
    /// Weight of the discriminator objective.
    pub alpha: f64,
    /// Weight of the identity terms on real and fake images in stage 2.
    pub beta: f64,
    /// Weight of the pixel reconstruction term.
    pub gamma: f64,
    /// Weight of the id-preserving term.
    pub eta: f64,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            alpha: 1.0,
            beta: 1.0,
            gamma: 10.0,
            eta: 0.1,
            arcface_scale: 64.0,
            arcface_margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("arcface_scale", self.arcface_scale),
            ("arcface_margin", self.arcface_margin),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(MeerError::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize, batch: usize) -> Result<Tensor> {
    if labels.len() != batch {
        return Err(MeerError::Shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MeerError::LabelOutOfRange { label, classes });
    }
    let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::new(ids.as_slice(), &candle_core::Device::Cpu)?)
}

fn one_hot(labels: &[usize], classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0.0f64; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), like.device())?.to_dtype(like.dtype())?)
}

/// Additive-angular-margin logits: `s·cos(θ_y + m)` for the true class and
/// `s·cos θ_j` elsewhere, with `cos θ` between normalized embeddings and
/// normalized class weights.
pub fn arcface_logits(embeddings: &Tensor, class_weights: &Tensor, labels: &[usize], s: f64, m: f64) -> Result<Tensor> {
    let (batch, dim) = embeddings.dims2()?;
    let (classes, wdim) = class_weights.dims2()?;
    if dim != wdim {
        return Err(MeerError::Shape(format!(
            "embedding size {dim} does not match class weight size {wdim}"
        )));
    }
    check_labels(labels, classes, batch)?;
    let cos = l2_normalize_rows(embeddings)?
        .matmul(&l2_normalize_rows(class_weights)?.t()?)?
        .clamp(-COS_CLAMP, COS_CLAMP)?;
    let sin = cos.sqr()?.affine(-1.0, 1.0)?.sqrt()?;
    let with_margin = ((&cos * m.cos())? - (sin * m.sin())?)?;
    let mask = one_hot(labels, classes, &cos)?;
    let logits = (&cos + mask.mul(&(with_margin - &cos)?)?)?;
    Ok((logits * s)?)
}

/// Per-sample softmax cross-entropy.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = logits.dims2()?;
    let targets = check_labels(labels, classes, batch)?.to_device(logits.device())?;
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(log_probs.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?)
}

/// Identity classification loss l_arc.
pub fn arcface_loss(embeddings: &Tensor, class_weights: &Tensor, labels: &[usize], s: f64, m: f64) -> Result<Tensor> {
    let logits = arcface_logits(embeddings, class_weights, labels, s, m)?;
    Ok(cross_entropy_per_sample(&logits, labels)?.mean_all()?)
}

/// Mask-location classification loss l_sm.
pub fn mask_pattern_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(logits, labels)?.mean_all()?)
}

/// `l_sm + λ·l_arc`.
pub fn stage1_loss(l_sm: &Tensor, l_arc: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok((l_sm + (l_arc * lambda)?)?)
}

/// Generator-side LSGAN term `½·mean((D(fake) − 1)²)`.
pub fn gan_generator_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok((fake_scores.affine(1.0, -1.0)?.sqr()?.mean_all()? * 0.5)?)
}

/// Discriminator LSGAN objective `½·mean((D(real) − 1)²) + ½·mean(D(fake)²)`.
pub fn gan_discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = real_scores.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake = fake_scores.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Mean squared pixel difference.
pub fn reconstruction_loss(fake: &Tensor, real: &Tensor) -> Result<Tensor> {
    if fake.dims() != real.dims() {
        return Err(MeerError::Shape(format!(
            "reconstruction of shape {:?} against target {:?}",
            fake.dims(),
            real.dims()
        )));
    }
    Ok((fake - real)?.sqr()?.mean_all()?)
}

/// Batch mean of `1 − cos(Z_fu, Z_ru)`; the real embedding is a fixed target.
pub fn id_preserving_loss(z_fake: &Tensor, z_real: &Tensor) -> Result<Tensor> {
    if z_fake.dims() != z_real.dims() || z_fake.rank() != 2 {
        return Err(MeerError::Shape(format!(
            "id-preserving loss needs matching B×d embeddings, got {:?} and {:?}",
            z_fake.dims(),
            z_real.dims()
        )));
    }
    let target = z_real.detach();
    for (name, z) in [("fake", z_fake), ("real", &target)] {
        let norms = z.sqr()?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(i) = norms.iter().position(|&n| n.is_nan() || n <= 0.0) {
            return Err(MeerError::InvalidArgument(format!(
                "{name} embedding {i} has zero norm; cosine is undefined"
            )));
        }
    }
    let dot = (z_fake * &target)?.sum(1)?;
    let norms = (z_fake.sqr()?.sum(1)?.sqrt()? * target.sqr()?.sum(1)?.sqrt()?)?;
    Ok(dot.div(&norms)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Components of the stage-2 generator/encoder objective.
#[derive(Clone, Debug)]
pub struct Stage2Terms {
    /// L_D on the fake images.
    pub gan: Tensor,
    /// ArcFace over real unmasked and simulated masked images.
    pub id: Tensor,
    /// ArcFace over fake unmasked images with the real labels.
    pub id_fake: Tensor,
    pub rec: Tensor,
    pub id_preserving: Tensor,
}

/// `L_D + β·(L_id + L_id') + γ·L_rec + η·L_idp`.
pub fn stage2_loss(t: &Stage2Terms, w: &LossWeights) -> Result<Tensor> {
    let id = ((&t.id + &t.id_fake)? * w.beta)?;
    let total = (&t.gan + id)?;
    let total = (total + (&t.rec * w.gamma)?)?;
    Ok((total + (&t.id_preserving * w.eta)?)?)
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn full(v: f64, shape: &[usize]) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    /// Relative L2 error between autograd and central differences.
    fn grad_check(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
        let var = Var::from_tensor(x).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = s(&f(&t64(&plus, x.dims())));
            let fm = s(&f(&t64(&minus, x.dims())));
            numeric.push((fp - fm) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
            .max(1e-12);
        diff / scale
    }

    #[test]
    fn defaults_and_validation() {
        let w = LossWeights::default();
        assert_eq!((w.lambda, w.alpha, w.beta, w.gamma, w.eta), (0.01, 1.0, 1.0, 10.0, 0.1));
        w.validate().unwrap();
        assert!(LossWeights { eta: -0.1, ..w.clone() }.validate().is_err());
        assert!(LossWeights { gamma: f64::NAN, ..w }.validate().is_err());
    }

    #[test]
    fn lsgan_closed_forms() {
        for (v, want) in [(1.0, 0.0), (0.5, 0.125), (0.0, 0.5)] {
            assert_eq!(s(&gan_generator_loss(&full(v, &[2, 1, 4, 4])).unwrap()), want);
        }
        for (r, f, want) in [(1.0, 0.0, 0.0), (0.5, 0.5, 0.25), (0.0, 1.0, 1.0)] {
            let l = gan_discriminator_loss(&full(r, &[2, 1, 4, 4]), &full(f, &[2, 1, 4, 4])).unwrap();
            assert_eq!(s(&l), want);
        }
    }

    #[test]
    fn pattern_loss_closed_forms() {
        let uniform = Tensor::zeros((3, 101), DType::F64, &Device::Cpu).unwrap();
        let l = s(&mask_pattern_loss(&uniform, &[0, 50, 100]).unwrap());
        assert!((l - 101f64.ln()).abs() < 1e-6);

        let mut peaked = vec![0.0; 101];
        peaked[7] = 50.0;
        let l = s(&mask_pattern_loss(&t64(&peaked, &[1, 101]), &[7]).unwrap());
        assert!(l < 1e-8);

        assert!(matches!(
            mask_pattern_loss(&uniform, &[0, 1, 101]),
            Err(MeerError::LabelOutOfRange { label: 101, classes: 101 })
        ));
    }

    #[test]
    fn batch_mean_of_per_sample_losses() {
        let logits = Tensor::randn(0f64, 2.0, (5, 101), &Device::Cpu).unwrap();
        let labels = [3, 0, 100, 42, 3];
        let batch = s(&mask_pattern_loss(&logits, &labels).unwrap());
        let rows = logits.to_vec2::<f64>().unwrap();
        let mean = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| {
                let mx = r.iter().cloned().fold(f64::MIN, f64::max);
                let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                lse - r[y]
            })
            .sum::<f64>()
            / 5.0;
        assert!((batch - mean).abs() < 1e-12);
    }

    #[test]
    fn arcface_degenerates_to_cosine_softmax() {
        let z = Tensor::randn(0f64, 1.0, (4, 8), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1.0, (5, 8), &Device::Cpu).unwrap();
        let labels = [0, 4, 2, 2];
        let arc = s(&arcface_loss(&z, &w, &labels, 1.0, 0.0).unwrap());
        // plain softmax CE over cosines, computed row by row
        let zr = z.to_vec2::<f64>().unwrap();
        let wr = w.to_vec2::<f64>().unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (zi, &y) in zr.iter().zip(&labels) {
            let cos: Vec<f64> = wr
                .iter()
                .map(|wj| zi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() / (norm(zi) * norm(wj)))
                .collect();
            let lse = cos.iter().map(|c| c.exp()).sum::<f64>().ln();
            total += lse - cos[y];
        }
        assert!((arc - total / 4.0).abs() < 1e-7);
    }

    #[test]
    fn arcface_single_class_and_margin() {
        let z = Tensor::randn(0f64, 1.0, (3, 6), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1.0, (1, 6), &Device::Cpu).unwrap();
        assert_eq!(s(&arcface_loss(&z, &w, &[0, 0, 0], 64.0, 0.5).unwrap()), 0.0);

        // margin only lowers the true logit
        let w = Tensor::randn(0f64, 1.0, (4, 6), &Device::Cpu).unwrap();
        let plain = arcface_logits(&z, &w, &[1, 2, 3], 64.0, 0.0).unwrap().to_vec2::<f64>().unwrap();
        let marg = arcface_logits(&z, &w, &[1, 2, 3], 64.0, 0.5).unwrap().to_vec2::<f64>().unwrap();
        for (i, y) in [1, 2, 3].into_iter().enumerate() {
            for j in 0..4 {
                if j == y {
                    let theta = (plain[i][j] / 64.0).acos();
                    assert!((marg[i][j] - 64.0 * (theta + 0.5).cos()).abs() < 1e-9);
                } else {
                    assert_eq!(plain[i][j], marg[i][j]);
                }
            }
        }
        assert!(arcface_loss(&z, &w, &[0, 4, 1], 64.0, 0.5).is_err());
    }

    #[test]
    fn arcface_finite_on_parallel_and_antiparallel() {
        let z = t64(&[1.0, 0.0, -1.0, 0.0], &[2, 2]);
        let w = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let var = Var::from_tensor(&z).unwrap();
        let l = arcface_loss(var.as_tensor(), &w, &[0, 0], 64.0, 0.5).unwrap();
        assert!(s(&l).is_finite());
        let g = l.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reconstruction_closed_forms() {
        let a = Tensor::rand(-1f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(s(&reconstruction_loss(&a, &a).unwrap()), 0.0);
        let b = (&a + 0.1).unwrap();
        assert!((s(&reconstruction_loss(&b, &a).unwrap()) - 0.01).abs() < 1e-12);
        let c = Tensor::rand(-1f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let cv = c.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut acc = 0.0;
        for i in 0..av.len() {
            acc += (av[i] - cv[i]) * (av[i] - cv[i]);
        }
        assert!((s(&reconstruction_loss(&a, &c).unwrap()) - acc / av.len() as f64).abs() < 1e-7);
        assert!(reconstruction_loss(&a, &c.narrow(3, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn id_preserving_closed_forms() {
        let z = t64(&[1.0, 2.0, 3.0], &[1, 3]);
        assert!(s(&id_preserving_loss(&z, &z).unwrap()).abs() < 1e-12);
        let orth = t64(&[3.0, 0.0, -1.0], &[1, 3]);
        assert!((s(&id_preserving_loss(&z, &orth).unwrap()) - 1.0).abs() < 1e-12);
        assert!((s(&id_preserving_loss(&z, &z.neg().unwrap()).unwrap()) - 2.0).abs() < 1e-12);
        let zero = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(id_preserving_loss(&zero, &z).is_err());
        assert!(id_preserving_loss(&z, &zero).is_err());
    }

    #[test]
    fn id_preserving_blocks_target_gradient() {
        let a = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 4), &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 4), &Device::Cpu).unwrap()).unwrap();
        let grads = id_preserving_loss(a.as_tensor(), b.as_tensor()).unwrap().backward().unwrap();
        assert!(grads.get(a.as_tensor()).is_some());
        assert!(grads.get(b.as_tensor()).is_none());
    }

    #[test]
    fn composites() {
        let sc = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        assert!((s(&stage1_loss(&sc(2.0), &sc(10.0), 0.01).unwrap()) - 2.1).abs() < 1e-12);
        assert_eq!(s(&stage1_loss(&sc(0.0), &sc(0.0), 0.3).unwrap()), 0.0);
        assert_eq!(s(&stage1_loss(&sc(1.7), &sc(9.0), 0.0).unwrap()), 1.7);

        let w = LossWeights::default();
        let unit = Stage2Terms {
            gan: sc(1.0),
            id: sc(1.0),
            id_fake: sc(1.0),
            rec: sc(1.0),
            id_preserving: sc(1.0),
        };
        assert!((s(&stage2_loss(&unit, &w).unwrap()) - 13.1).abs() < 1e-12);
        let zero = Stage2Terms {
            gan: sc(0.0),
            id: sc(0.0),
            id_fake: sc(0.0),
            rec: sc(0.0),
            id_preserving: sc(0.0),
        };
        assert_eq!(s(&stage2_loss(&zero, &w).unwrap()), 0.0);

        // linear in each term: doubling one term adds exactly its weight
        let base = s(&stage2_loss(&unit, &w).unwrap());
        let bumped = [
            (Stage2Terms { gan: sc(2.0), ..unit.clone() }, 1.0),
            (Stage2Terms { id: sc(2.0), ..unit.clone() }, w.beta),
            (Stage2Terms { id_fake: sc(2.0), ..unit.clone() }, w.beta),
            (Stage2Terms { rec: sc(2.0), ..unit.clone() }, w.gamma),
            (Stage2Terms { id_preserving: sc(2.0), ..unit.clone() }, w.eta),
        ];
        for (t, weight) in bumped {
            assert!((s(&stage2_loss(&t, &w).unwrap()) - base - weight).abs() < 1e-12);
        }
        for gamma in [1.0, 5.0, 10.0, 20.0] {
            let w = LossWeights { gamma, ..LossWeights::default() };
            assert!((s(&stage2_loss(&unit, &w).unwrap()) - (3.1 + gamma)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let z = Tensor::randn(0f64, 1.0, (3, 5), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 5), &dev).unwrap();
        for (sc, m) in [(64.0, 0.5), (8.0, 0.5), (1.0, 0.0)] {
            let e = grad_check(&z, |x| arcface_loss(x, &w, &[0, 3, 1], sc, m).unwrap());
            assert!(e < 1e-4, "arcface embeddings s={sc}: {e}");
            let e = grad_check(&w, |x| arcface_loss(&z, x, &[0, 3, 1], sc, m).unwrap());
            assert!(e < 1e-4, "arcface weights s={sc}: {e}");
        }
        let a = Tensor::rand(-1f64, 1.0, (1, 3, 3, 3), &dev).unwrap();
        let b = Tensor::rand(-1f64, 1.0, (1, 3, 3, 3), &dev).unwrap();
        assert!(grad_check(&a, |x| reconstruction_loss(x, &b).unwrap()) < 1e-4);
        let target = Tensor::randn(0f64, 1.0, (3, 5), &dev).unwrap();
        assert!(grad_check(&z, |x| id_preserving_loss(x, &target).unwrap()) < 1e-4);
        let scores = Tensor::randn(0f64, 1.0, (2, 1, 3, 3), &dev).unwrap();
        assert!(grad_check(&scores, |x| gan_generator_loss(x).unwrap()) < 1e-4);
        assert!(grad_check(&scores, |x| gan_discriminator_loss(x, &b.narrow(1, 0, 1).unwrap()).unwrap()) < 1e-4);
        assert!(grad_check(&scores, |x| gan_discriminator_loss(&b.narrow(1, 0, 1).unwrap(), x).unwrap()) < 1e-4);
        let logits = Tensor::randn(0f64, 1.0, (3, 7), &dev).unwrap();
        assert!(grad_check(&logits, |x| mask_pattern_loss(x, &[6, 0, 2]).unwrap()) < 1e-4);
    }
}
