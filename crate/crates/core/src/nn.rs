//! Named parameter storage and the handful of layers the agents and encoders
//! are built from.
//!
//! Parameters are initialized from an explicit seeded stream (never from the
//! device RNG), so two stores built with the same seed are bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// He-uniform bound for ReLU layers: `sqrt(6 / fan_in)`.
    pub fn he_uniform(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in as f64).sqrt())
    }

    /// The customary default for linear layers: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }

    fn tensor(self, dims: &[usize], dtype: DType, device: &Device, rng: &mut impl Rng) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let t = match self {
            Init::Zeros => Tensor::zeros(dims, dtype, device)?,
            Init::Ones => Tensor::ones(dims, dtype, device)?,
            Init::Uniform(b) if dtype == DType::F64 => {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-b..b)).collect();
                Tensor::from_vec(v, dims, device)?
            }
            Init::Uniform(b) => {
                let b = b as f32;
                let v: Vec<f32> = (0..n).map(|_| rng.random_range(-b..b)).collect();
                Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?
            }
            Init::Normal(std) => {
                let v: Vec<f64> = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?
            }
        };
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Learnable weight.
    Param,
    /// Non-learnable state (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    kind: Kind,
    trainable: bool,
}

/// Every tensor of a model, keyed by dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        ParamStore {
            device,
            dtype,
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(
        &mut self,
        name: String,
        dims: &[usize],
        init: Init,
        kind: Kind,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let tensor = init.tensor(dims, self.dtype, &self.device, rng)?;
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                kind,
                trainable: kind == Kind::Param,
            },
        );
        Ok(var)
    }

    pub fn param(&mut self, name: impl Into<String>, dims: &[usize], init: Init, rng: &mut impl Rng) -> Result<Var> {
        self.insert(name.into(), dims, init, Kind::Param, rng)
    }

    pub fn buffer(&mut self, name: impl Into<String>, dims: &[usize], init: Init, rng: &mut impl Rng) -> Result<Var> {
        self.insert(name.into(), dims, init, Kind::Buffer, rng)
    }

    /// Mark every parameter under `prefix` as non-trainable.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// Number of trainable scalars under `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, e)| e.trainable && n.starts_with(prefix))
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, e)| e.kind == Kind::Param && n.starts_with(prefix))
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    /// SHA-256 over names and little-endian f32 values of every parameter and
    /// buffer under `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, e) in self.entries.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            hasher.update(name.as_bytes());
            let values = e.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Snapshot of all tensors under `prefix` (detached copies).
    pub fn snapshot(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, e)| Ok((n.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrite the tensors under `prefix` from `source`, checking presence
    /// and shape of every one. On error nothing has been modified.
    pub fn assign_from(&self, source: &HashMap<String, Tensor>, prefix: &str, origin: &Path) -> Result<()> {
        let mut problems = Vec::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let expected = e.var.dims();
            match source.get(name) {
                None => problems.push(format!("missing {name} {expected:?}")),
                Some(t) if t.dims() != expected => {
                    problems.push(format!("{name}: expected {expected:?}, found {:?}", t.dims()))
                }
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::load(
                "weights",
                origin,
                format!("layer shape mismatch: {}", problems.join("; ")),
            ));
        }
        for (name, e) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let t = source[name].to_device(&self.device)?.to_dtype(self.dtype)?;
            e.var.set(&t)?;
        }
        Ok(())
    }

    pub fn save_safetensors(&self, prefix: &str, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, e)| (n.clone(), e.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load_safetensors(&self, prefix: &str, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::load("weights", path, e))?;
        self.assign_from(&map, prefix, path)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let init = Init::fan_in_uniform(in_dim);
        Ok(Linear {
            weight: store.param(format!("{name}.weight"), &[out_dim, in_dim], init, rng)?,
            bias: store.param(format!("{name}.bias"), &[out_dim], init, rng)?,
        })
    }

    /// He-uniform weights, zero bias (the encoder convention).
    pub fn new_he(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.param(format!("{name}.weight"), &[out_dim, in_dim], Init::he_uniform(in_dim), rng)?,
            bias: store.param(format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Batch normalization over the feature axis of `[batch, features]` inputs.
///
/// Training mode normalizes with the (biased) batch statistics and updates
/// the running estimates with the unbiased variance; evaluation mode uses the
/// running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BatchNorm1d {
            weight: store.param(format!("{name}.weight"), &[features], Init::Ones, rng)?,
            bias: store.param(format!("{name}.bias"), &[features], Init::Zeros, rng)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[features], Init::Zeros, rng)?,
            running_var: store.buffer(format!("{name}.running_var"), &[features], Init::Ones, rng)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.weight.dims()[0] {
            return Err(Error::Shape(format!(
                "batch-norm expects {} features, got {f}",
                self.weight.dims()[0]
            )));
        }
        let (mean, var) = if train {
            if n < 2 {
                return Err(Error::Shape("batch-norm training needs at least 2 samples".into()));
            }
            let mean = x.mean_keepdim(0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?;
            let m = self.momentum;
            let unbiased = (var.detach() * (n as f64 / (n as f64 - 1.0)))?.squeeze(0)?;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().squeeze(0)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().unsqueeze(0)?,
                self.running_var.as_tensor().unsqueeze(0)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Single-layer LSTM cell with the usual `i, f, g, o` gate layout.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let init = Init::fan_in_uniform(hidden);
        Ok(LstmCell {
            w_ih: store.param(format!("{name}.weight_ih"), &[4 * hidden, in_dim], init, rng)?,
            w_hh: store.param(format!("{name}.weight_hh"), &[4 * hidden, hidden], init, rng)?,
            b_ih: store.param(format!("{name}.bias_ih"), &[4 * hidden], init, rng)?,
            b_hh: store.param(format!("{name}.bias_hh"), &[4 * hidden], init, rng)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (x
            .matmul(&self.w_ih.as_tensor().t()?)?
            .broadcast_add(self.b_ih.as_tensor())?
            + state
                .h
                .matmul(&self.w_hh.as_tensor().t()?)?
                .broadcast_add(self.b_hh.as_tensor())?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}

/// 3x3, stride-1, same-padding convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Var,
    bias: Var,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Conv3x3 {
            weight: store.param(
                format!("{name}.weight"),
                &[out_ch, in_ch, 3, 3],
                Init::he_uniform(in_ch * 9),
                rng,
            )?,
            bias: store.param(format!("{name}.bias"), &[out_ch], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        Ok(x
            .conv2d(self.weight.as_tensor(), 1, 1, 1, 1)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, out_ch, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn seeded_stores_are_identical() {
        let build = || {
            let mut s = ParamStore::new(Device::Cpu, DType::F32);
            let mut rng = seeded(7);
            Linear::new(&mut s, "a", 5, 3, &mut rng).unwrap();
            LstmCell::new(&mut s, "b", 3, 4, &mut rng).unwrap();
            s
        };
        assert_eq!(build().checksum("").unwrap(), build().checksum("").unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = seeded(0);
        Linear::new(&mut s, "a", 2, 2, &mut rng).unwrap();
        assert!(Linear::new(&mut s, "a", 2, 2, &mut rng).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let mut s = ParamStore::new(Device::Cpu, DType::F64);
        let bn = BatchNorm1d::new(&mut s, "bn", 2, &mut seeded(0)).unwrap();
        let x = Tensor::new(&[[1.0f64, 10.0], [3.0, 20.0], [5.0, 30.0]], &Device::Cpu).unwrap();
        let y = bn.forward_t(&x, true).unwrap().to_vec2::<f64>().unwrap();
        let col0: Vec<f64> = y.iter().map(|r| r[0]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / 3.0;
        let var: f64 = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
        let rm = s.get("bn.running_mean").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12, "{rm:?}");
        let rv = s.get("bn.running_var").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        // unbiased variance of [1,3,5] is 4
        assert!((rv[0] - (0.9 + 0.4)).abs() < 1e-12, "{rv:?}");
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut s = ParamStore::new(Device::Cpu, DType::F64);
        let bn = BatchNorm1d::new(&mut s, "bn", 1, &mut seeded(0)).unwrap();
        let x = Tensor::new(&[[2.0f64]], &Device::Cpu).unwrap();
        let y = bn.forward_t(&x, false).unwrap().to_vec2::<f64>().unwrap();
        assert!((y[0][0] - 2.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn assign_reports_expected_shapes() {
        let mut s = ParamStore::new(Device::Cpu, DType::F32);
        Linear::new(&mut s, "enc.fc", 4, 2, &mut seeded(0)).unwrap();
        let mut src = HashMap::new();
        src.insert("enc.fc.weight".to_string(), Tensor::zeros((3, 4), DType::F32, &Device::Cpu).unwrap());
        let before = s.checksum("").unwrap();
        let err = s.assign_from(&src, "enc.", Path::new("w.safetensors")).unwrap_err().to_string();
        assert!(err.contains("expected [2, 4]"), "{err}");
        assert!(err.contains("missing enc.fc.bias [2]"), "{err}");
        assert_eq!(before, s.checksum("").unwrap());
    }

    #[test]
    fn safetensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut a = ParamStore::new(Device::Cpu, DType::F32);
        Linear::new(&mut a, "x", 3, 3, &mut seeded(1)).unwrap();
        a.save_safetensors("", &path).unwrap();
        let mut b = ParamStore::new(Device::Cpu, DType::F32);
        Linear::new(&mut b, "x", 3, 3, &mut seeded(2)).unwrap();
        assert_ne!(a.checksum("").unwrap(), b.checksum("").unwrap());
        b.load_safetensors("", &path).unwrap();
        assert_eq!(a.checksum("").unwrap(), b.checksum("").unwrap());
    }
}
