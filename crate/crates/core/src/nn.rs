//! Seeded parameter storage and the handful of layers the models need.
//!
//! Parameters live in candle `Var`s so the autograd graph can reach them.
//! Initialisation draws from a ChaCha stream owned by the store, so a model
//! built twice from the same seed is bit-identical regardless of thread count.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new parameter. Names must be unique.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let a = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            w: self.param(&format!("{name}.w"), &[d_in, d_out], Init::Uniform(a))?,
            b: self.param(&format!("{name}.b"), &[d_out], Init::Zeros)?,
        })
    }

    pub fn linear_with(&mut self, name: &str, d_in: usize, d_out: usize, w: Init, b: Init) -> Result<Linear> {
        Ok(Linear {
            w: self.param(&format!("{name}.w"), &[d_in, d_out], w)?,
            b: self.param(&format!("{name}.b"), &[d_out], b)?,
        })
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Conv2d> {
        let a = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Conv2d {
            w: self.param(&format!("{name}.w"), &[c_out, c_in, k, k], Init::Uniform(a))?,
            b: self.param(&format!("{name}.b"), &[c_out], Init::Zeros)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            g: self.param(&format!("{name}.g"), &[dim], Init::Const(1.0))?,
            b: self.param(&format!("{name}.b"), &[dim], Init::Zeros)?,
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites one parameter from f64 values (cast to the store dtype).
    pub fn set(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if values.len() != var.elem_count() {
            return Err(Error::dims(var.elem_count(), values.len()));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copies every parameter value from `other`; both stores must have the same layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::dims(self.params.len(), other.params.len()));
        }
        for (name, var) in &self.params {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
            if src.shape() != var.shape() {
                return Err(Error::dims(format!("{:?}", var.shape()), format!("{:?}", src.shape())));
            }
            var.set(&src.as_tensor().to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }

    /// All parameters flattened to f64, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((k.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Bit-exact snapshot of every parameter as f32, in name order.
    pub fn export_f32(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.params
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    pub fn import_f32(&self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if var.dims() != shape {
            return Err(Error::dims(format!("{:?}", var.dims()), format!("{shape:?}")));
        }
        let t = Tensor::from_slice(data, shape, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 2 { x.matmul(&self.w)? } else { x.broadcast_matmul(&self.w)? };
        Ok(y.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.w.dim(0)?;
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Logistic function written through `tanh`, which keeps both the value and
/// its derivative finite for arbitrarily large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

pub fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let s = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.to_string(), step: None })
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut s = ParamStore::new(9, DType::F32);
            s.linear("a", 3, 4).unwrap();
            s.conv("c", 2, 5, 3, 1).unwrap();
            s.export().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F32);
        s.param("x", &[2], Init::Zeros).unwrap();
        assert!(s.param("x", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn set_is_visible_through_handles() {
        let mut s = ParamStore::new(0, DType::F64);
        let l = s.linear("l", 2, 1).unwrap();
        s.set("l.w", &[1.0, 2.0]).unwrap();
        let x = Tensor::new(&[[3.0f64, 4.0]], &Device::Cpu).unwrap();
        let y = to_f64_vec(&l.forward(&x).unwrap()).unwrap();
        assert_eq!(y, vec![11.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_sigmoid_is_bounded() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -5.0], [1.0, 2.0, 3.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap();
        let sums = to_f64_vec(&p.sum(1).unwrap()).unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let s = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((s[4] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[1.0f32, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 2))
            .unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        let v = to_f64_vec(&y).unwrap();
        assert_eq!(&v[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let direct = to_f64_vec(&x.upsample_nearest2d(4, 4).unwrap()).unwrap();
        assert_eq!(v, direct);
    }
}
