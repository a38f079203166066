//! Seeded parameter storage and the handful of layers the networks use.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MeerError, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// He-uniform bound for a layer with `fan_in` inputs, scaled by `gain`.
    pub fn he(fan_in: usize, gain: f64) -> Self {
        Init::Uniform(gain * (6.0 / fan_in as f64).sqrt())
    }
}

/// Named trainable parameters plus non-trainable buffers (running statistics).
///
/// Initial values come from a ChaCha stream seeded at construction, so two
/// stores built with the same seed and the same sequence of `param` calls are
/// bit-identical.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| MeerError::InvalidArgument(format!("bad init std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(MeerError::Invariant(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&self.sample(shape, init)?)?;
        let t = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(MeerError::Invariant(format!("buffer `{name}` registered twice")));
        }
        let var = Var::from_tensor(&self.sample(shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Trainable variables whose names start with any of `prefixes`.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer, keyed by canonical name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites stored values by name. Every stored tensor must be present
    /// in `tensors` with a matching shape; extra entries are ignored.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| MeerError::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(MeerError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Loads only the entries whose names start with one of `prefixes`.
    pub fn load_prefixed(&self, tensors: &BTreeMap<String, Tensor>, prefixes: &[&str]) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let src = tensors
                .get(name)
                .ok_or_else(|| MeerError::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(MeerError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.1)?)
}

/// Cross-correlation written as patch extraction plus one batched matmul.
///
/// Each kernel offset contributes a strided view of the padded input, taken
/// with `narrow` and a reshape that drops the skipped rows and columns. Its
/// backward pass is made of the same cheap primitives, which is much faster
/// on CPU than a dedicated convolution backward.
pub fn conv2d_unfolded(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (cout, cin, k, k2) = weight.dims4()?;
    if cin != c || k != k2 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(MeerError::Shape(format!(
            "cannot convolve input {:?} with kernel {:?} (stride {stride}, padding {padding})",
            x.dims(),
            weight.dims()
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    // extra trailing zeros keep every strided window in bounds; they are never selected
    let xp = x
        .pad_with_zeros(2, padding, padding + stride)?
        .pad_with_zeros(3, padding, padding + stride)?;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let t = xp.narrow(2, ky, stride * ho)?.narrow(3, kx, stride * wo)?;
            let t = if stride > 1 {
                t.reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?
            } else {
                t
            };
            taps.push(t);
        }
    }
    let patches = Tensor::stack(&taps, 2)?.reshape((b, c * k * k, ho * wo))?;
    let kernel = weight.reshape((cout, c * k * k))?;
    Ok(kernel.broadcast_matmul(&patches)?.reshape((b, cout, ho, wo))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::he(fan_in, gain),
        )?;
        let bias = store.param(&format!("{name}.bias"), &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_unfolded(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, gain: f64) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::he(in_dim, gain))?;
        let bias = store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over the feature dimension of a `B×F` input.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; evaluation mode uses the running estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[features], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[features], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[features], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[features], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let n = x.dim(0)?;
            let mean = x.mean_keepdim(0)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let unbiased = if n > 1 {
                (var.detach() * (n as f64 / (n - 1) as f64))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().unsqueeze(0)?,
                self.running_var.as_tensor().unsqueeze(0)?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Rows scaled to unit L2 norm (`eps` guards all-zero rows).
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unfolded_conv_matches_reference() {
        let dev = Device::Cpu;
        for (k, stride, pad, size) in [(3, 1, 1, 8), (3, 2, 1, 8), (4, 2, 1, 16), (1, 2, 0, 8), (3, 1, 1, 1), (1, 1, 0, 5)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, size, size), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let want = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let got = conv2d_unfolded(&x, &w, stride, pad).unwrap();
            assert_eq!(want.dims(), got.dims(), "k{k} s{stride} p{pad}");
            let d = (want - got).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "k{k} s{stride} p{pad}: {d}");
        }
        let x = Tensor::zeros((1, 2, 4, 4), DType::F32, &dev).unwrap();
        let w = Tensor::zeros((1, 3, 3, 3), DType::F32, &dev).unwrap();
        assert!(conv2d_unfolded(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut s = ParamStore::new(3, DType::F32, Device::Cpu);
            s.param("a", &[4, 5], Init::he(5, 1.0)).unwrap();
            s.param("b", &[3], Init::Normal(0.5)).unwrap();
            s
        };
        let (a, b) = (build().named_tensors(), build().named_tensors());
        for (k, t) in &a {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.param("w", &[1], Init::Zeros).unwrap();
        assert!(s.param("w", &[1], Init::Zeros).is_err());
        assert!(s.buffer("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn load_requires_matching_shapes() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.param("w", &[2], Init::Zeros).unwrap();
        let mut src = BTreeMap::new();
        src.insert("w".to_string(), Tensor::new(&[1f32, 2.0, 3.0], &Device::Cpu).unwrap());
        assert!(s.load(&src).is_err());
        src.insert("w".to_string(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap());
        s.load(&src).unwrap();
        let w = s.named_tensors()["w"].to_vec1::<f32>().unwrap();
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn batch_norm_tracks_running_statistics() {
        let mut s = ParamStore::new(0, DType::F64, Device::Cpu);
        let bn = BatchNorm1d::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::new(&[[1f64, 10.0], [3.0, 30.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap().to_vec2::<f64>().unwrap();
        // normalized batch: each column becomes (-1, 1) up to eps
        assert!((y[0][0] + 1.0).abs() < 1e-4 && (y[1][1] - 1.0).abs() < 1e-4);
        let rm = s.named_tensors()["bn.running_mean"].to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
        // eval mode is per-sample: the first row does not depend on the second
        let a = bn.forward(&x, false).unwrap().to_vec2::<f64>().unwrap();
        let b = bn.forward(&x.narrow(0, 0, 1).unwrap(), false).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a[0], b[0]);
    }
}
