//! Minimal layer toolkit on top of candle tensors.

mod conv;
mod norm;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use conv::conv2d;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
}

/// Named trainable parameters.
///
/// Each parameter is initialized from an RNG seeded by the store seed and
/// the parameter's name, so two networks that share a sub-structure get
/// identical weights for it regardless of construction order.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            seed,
            dtype,
            device,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), var));
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    /// Parameters in creation order.
    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrite a parameter's value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Copy every parameter whose name also exists in `other`; returns how
    /// many were copied.
    pub fn copy_matching(&self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, _) in &self.params {
            if let Some(src) = other.get(name) {
                self.set(name, src.as_tensor())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and raw values in creation order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel, N(0, 0.02) weights and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::Normal { std: 0.02 },
        )?;
        let bias = if bias {
            Some(store.var(&format!("{name}.bias"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Build from fixed tensors (no trainable state).
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, &self.weight, self.bias.as_ref())
    }

    /// Forward pass that does not propagate gradients into the weights.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(|b| b.detach());
        self.run(x, &self.weight.detach(), b.as_ref())
    }

    fn run(&self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let y = conv2d(x, w, self.stride, self.pad)?;
        match b {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    Ok(norm::instance_norm(x)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(1 + e^x)` computed stably as `max(x, 0) + log(1 + e^-|x|)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Scalar tensor to f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
