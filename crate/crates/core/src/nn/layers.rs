use candle_core::{Tensor, Var, D};

use super::conv::{conv2d, ConvGeometry};
use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    geo: ConvGeometry,
    kernel: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Stride-1 convolution padded to preserve the spatial size (odd kernels).
    pub fn same(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new(b: &Builder<'_>, spec: Conv2dSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = b.param(
            "weight",
            &[spec.c_out, spec.c_in / spec.groups, k, k],
            Init::HeFanOut {
                fan_out: spec.c_out * k * k,
            },
            true,
        )?;
        let bias = if spec.bias {
            Some(b.param("bias", &[spec.c_out], Init::Zeros, false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geo: ConvGeometry {
                stride: spec.stride,
                padding: spec.padding,
                groups: spec.groups,
            },
            kernel: k,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.geo)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization over (N, H, W) per channel.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running buffers; evaluation mode uses the running buffers only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[channels], Init::Ones, false)?,
            beta: b.param("bias", &[channels], Init::Zeros, false)?,
            running_mean: b.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: b.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let count = (n * h * w) as f64;
            let mean = x.sum_keepdim((0, 2, 3))?.affine(1.0 / count, 0.0)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .sum_keepdim((0, 2, 3))?
                .affine(1.0 / count, 0.0)?;
            let unbiased = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let xhat = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(b, d_in, d_out, Init::UniformFanIn { fan_in: d_in })
    }

    /// Weight and bias both start at zero.
    pub fn zeros(b: &Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[d_out, d_in], Init::Zeros, true)?,
            bias: b.param("bias", &[d_out], Init::Zeros, false)?,
        })
    }

    /// Registered as buffers: carried in checkpoints but never optimized.
    pub fn frozen(b: &Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.buffer("weight", &[d_out, d_in], Init::Zeros)?,
            bias: b.buffer("bias", &[d_out], Init::Zeros)?,
        })
    }

    fn with_init(b: &Builder<'_>, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[d_out, d_in], init, true)?,
            bias: b.param("bias", &[d_out], init, false)?,
        })
    }

    /// `x` is (B, d_in); returns (B, d_out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

/// Rowwise L2 normalization with a small additive guard on the norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&store.root().pp("bn"), 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 4))
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y
            .mean_keepdim((0, 2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for m in mean {
            assert!(m.abs() < 1e-12);
        }
        let rm = store
            .get("bn.running_mean")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        // batch mean of channel 0 is 11.5, momentum 0.1
        assert!((rm[0] - 1.15).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let store = ParamStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&store.root(), 3).unwrap();
        let x = Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = bn.forward(&x, false).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(v.iter().all(|&a| (a - expect).abs() < 1e-12));
    }

    #[test]
    fn l2_rows_have_unit_norm() {
        let x = Tensor::new(&[[3f64, 4.0], [0.0, 2.0]], &Device::Cpu).unwrap();
        let y = l2_normalize(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((y[0][0] - 0.6).abs() < 1e-12 && (y[1][1] - 1.0).abs() < 1e-12);
    }
}
