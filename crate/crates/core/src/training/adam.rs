use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{MeerError, Result};

/// Adam with decoupled weight decay. Moments are kept per parameter name so
/// they can be checkpointed next to the weights.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &vars {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient in
    /// `grads` are left untouched (no decay either).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // keep optimizer state off the autograd graph
            let g = g.detach();
            let g = &g;
            let m = ((&self.m[name] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[name] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moments keyed `{prefix}.m.{param}` and `{prefix}.v.{param}`.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.m {
            out.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}.v.{name}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str, step: u64) -> Result<()> {
        for (name, var) in &self.vars {
            for (kind, store) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| MeerError::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(MeerError::Checkpoint(format!("optimizer state `{key}` has the wrong shape")));
                }
                store.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device};

    use super::*;

    #[test]
    fn matches_scalar_reference() {
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), w.clone())], 0.9, 0.999, 1e-8, 5e-4).unwrap();
        let (mut p, mut m, mut v) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=5 {
            // loss = sum(w^3) so the gradient changes every step
            let loss = w.as_tensor().powf(3.0).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.01).unwrap();
            for i in 0..2 {
                let g = 3.0 * p[i] * p[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] = p[i] * (1.0 - 0.01 * 5e-4) - 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            let got = w.as_tensor().to_vec1::<f64>().unwrap();
            for i in 0..2 {
                assert!((got[i] - p[i]).abs() < 1e-12);
            }
        }
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let run = |split: Option<usize>| {
            let w = Var::from_tensor(&Tensor::new(&[0.5f32, 1.5, -1.0], &Device::Cpu).unwrap()).unwrap();
            let mut opt = Adam::new(vec![("w".into(), w.clone())], 0.9, 0.999, 1e-8, 5e-4).unwrap();
            for i in 0..6 {
                if Some(i) == split {
                    let state = opt.state("optim");
                    let mut fresh = Adam::new(vec![("w".into(), w.clone())], 0.9, 0.999, 1e-8, 5e-4).unwrap();
                    fresh.load_state(&state, "optim", opt.steps()).unwrap();
                    opt = fresh;
                }
                let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap(), 0.05).unwrap();
            }
            w.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(None), run(Some(3)));
        let w = Var::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("w".into(), w)], 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert!(opt.load_state(&BTreeMap::new(), "optim", 1).is_err());
    }
}
