//! Parameterized layers. Normalization layers keep their parameters and
//! statistics in f32 and compute in f32 even when activations are half
//! precision.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::flops;
use super::ops;
use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// Shared random stream for stochastic layers.
pub type NoiseRng = Arc<Mutex<ChaCha8Rng>>;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(pb, d_in, d_out, bias, Init::default_fan_in(d_in))
    }

    pub fn with_init(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = pb.get((d_out, d_in), "weight", init)?;
        let bias = if bias {
            let binit = match init {
                Init::Uniform { .. } => Init::default_fan_in(d_in),
                _ => Init::ZEROS,
            };
            Some(pb.get(d_out, "bias", binit)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input has a feature dim");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let (d_out, _) = self.weight.dims2()?;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        flops::record((rows * d_in * d_out) as u64);
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = d_out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvOpts {
    pub fn new(stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            stride,
            padding,
            bias,
        }
    }
}

/// Above this many im2col elements the backend kernel is used instead,
/// trading speed for memory on wide full-size decoders.
const IM2COL_MAX_ELEMS: usize = 1 << 24;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, opts: ConvOpts) -> Result<Self> {
        Self::with_init(pb, c_in, c_out, k, opts, Init::default_fan_in(c_in * k * k))
    }

    pub fn with_init(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        k: usize,
        opts: ConvOpts,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get((c_out, c_in, k, k), "weight", init)?;
        let bias = if opts.bias {
            let binit = match init {
                Init::Uniform { .. } => Init::default_fan_in(c_in * k * k),
                _ => Init::ZEROS,
            };
            Some(pb.get(c_out, "bias", binit)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: opts.stride,
            padding: opts.padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, k, _) = self.weight.dims4()?;
        let (b, _, h, w) = x.dims4()?;
        let cols = b * c_in * k * k * ((h + 2 * self.padding) / self.stride) * ((w + 2 * self.padding) / self.stride);
        let mut y = if (k == 1 && self.stride == 1 && self.padding == 0) || cols > IM2COL_MAX_ELEMS {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        } else {
            ops::conv2d_im2col(x, &self.weight, self.padding, self.stride)?
        };
        let (_, _, oh, ow) = y.dims4()?;
        flops::record((b * c_out * oh * ow * c_in * k * k) as u64);
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?;
        }
        Ok(y)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get_f32(dim, "weight", Init::ONES)?,
            bias: pb.get_f32(dim, "bias", Init::ZEROS)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let xf = x.to_dtype(DType::F32)?;
        let mean = xf.mean_keepdim(D::Minus1)?;
        let xc = xf.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.to_dtype(dt)?)
    }
}

/// Layer normalization over the channel axis of `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get_f32(dim, "weight", Init::ONES)?,
            bias: pb.get_f32(dim, "bias", Init::ZEROS)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dt = x.dtype();
        let c = x.dim(1)?;
        let xf = x.to_dtype(DType::F32)?;
        let mean = xf.mean_keepdim(1)?;
        let xc = xf.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = y
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        Ok(y.to_dtype(dt)?)
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get_f32(c, "weight", Init::ONES)?,
            bias: pb.get_f32(c, "bias", Init::ZEROS)?,
            running_mean: pb.buffer(c, "running_mean", Init::ZEROS)?,
            running_var: pb.buffer(c, "running_var", Init::ONES)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dt = x.dtype();
        let (b, c, h, w) = x.dims4()?;
        let xf = x.to_dtype(DType::F32)?;
        let (mean, var) = if train {
            let mean = xf.mean_keepdim((0, 2, 3))?;
            let var = xf.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let y = xf
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        Ok(y.to_dtype(dt)?)
    }
}

/// Conv (no bias) followed by batch norm and optionally ReLU.
#[derive(Debug, Clone)]
pub struct ConvModule {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
}

impl ConvModule {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, relu: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::with_init(
                &pb.pp("conv"),
                c_in,
                c_out,
                k,
                ConvOpts::new(1, k / 2, false),
                Init::kaiming_fan_out(c_out * k * k),
            )?,
            bn: BatchNorm2d::new(&pb.pp("bn"), c_out)?,
            relu,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

fn bernoulli_mask(rng: &NoiseRng, n: usize, keep: f64) -> Vec<f32> {
    let mut r = rng.lock().unwrap_or_else(|p| p.into_inner());
    let scale = (1.0 / keep) as f32;
    (0..n)
        .map(|_| if r.random_bool(keep) { scale } else { 0.0 })
        .collect()
}

/// Elementwise dropout with inverted scaling; identity outside training.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: NoiseRng,
}

impl Dropout {
    pub fn new(p: f64, rng: NoiseRng) -> Self {
        Self { p, rng }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train || self.p <= 0.0 {
            return Ok(x.clone());
        }
        let mask = bernoulli_mask(&self.rng, x.elem_count(), 1.0 - self.p);
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Stochastic depth: drops whole residual branches per sample.
#[derive(Debug, Clone)]
pub struct DropPath {
    p: f64,
    rng: NoiseRng,
}

impl DropPath {
    pub fn new(p: f64, rng: NoiseRng) -> Self {
        Self { p, rng }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train || self.p <= 0.0 {
            return Ok(x.clone());
        }
        let b = x.dim(0)?;
        let mut shape = vec![1usize; x.rank()];
        shape[0] = b;
        let mask = bernoulli_mask(&self.rng, b, 1.0 - self.p);
        let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_mul(&mask)?)
    }
}

/// Linearly increasing drop-path rates over `depth` blocks.
pub fn drop_path_schedule(rate: f64, depth: usize) -> Vec<f64> {
    if depth <= 1 {
        return vec![0.0; depth];
    }
    (0..depth).map(|i| rate * i as f64 / (depth - 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use approx::assert_abs_diff_eq;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn batchnorm_train_normalizes_and_updates_stats() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2).unwrap();
        let x = Tensor::from_vec((0..16).map(|v| v as f32).collect::<Vec<_>>(), (2, 2, 2, 2), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        let rm = store.get_tensor("bn.running_mean").unwrap().to_vec1::<f32>().unwrap();
        // channel 0 holds 0..4 and 8..12 -> mean 5.5
        assert_abs_diff_eq!(rm[0], 0.55, epsilon = 1e-5);
        let e = bn.forward(&x, false).unwrap();
        assert_eq!(e.dims(), x.dims());
    }

    #[test]
    fn layernorm_zero_mean_unit_var() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let ln = LayerNorm::new(&store.root(), 4, 1e-5).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_abs_diff_eq!(y[0].iter().sum::<f32>(), 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(y[0][3], 1.5 / 1.25f32.sqrt(), epsilon = 1e-3);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let rng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(0)));
        let d = Dropout::new(0.5, rng.clone());
        let x = Tensor::ones((4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x, false).unwrap().to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let y = d.forward(&x, true).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let dp = DropPath::new(0.5, rng);
        let y = dp.forward(&x, true).unwrap().to_vec2::<f32>().unwrap();
        for row in y {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn linear_counts_macs() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let l = Linear::new(&store.root(), 3, 5, true).unwrap();
        let x = Tensor::zeros((2, 7, 3), DType::F32, &Device::Cpu).unwrap();
        let (y, macs) = flops::count_macs(|| l.forward(&x).unwrap());
        assert_eq!(y.dims(), &[2, 7, 5]);
        assert_eq!(macs, 2 * 7 * 3 * 5);
    }
}
