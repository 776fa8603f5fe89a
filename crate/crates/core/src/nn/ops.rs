use candle_core::{Tensor, D};

use crate::error::{Result, SemcError};

/// Logistic sigmoid via `tanh`, which stays finite in both value and
/// gradient for large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Log-sum-exp along the last dimension (keepdim).
pub fn logsumexp(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    Ok((shifted.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_sub(&logsumexp(x)?)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Global average pool: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(2)?)
}

/// Global max pool: (B, C, H, W) -> (B, C).
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max(2)?)
}

/// Regroups channels: output channel `j*g + k` takes input channel
/// `k*(C/g) + j`. Equivalent to reshaping to (g, C/g), transposing and
/// flattening.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(SemcError::Shape(format!(
            "channel shuffle: {c} channels not divisible by {groups} groups"
        )));
    }
    Ok(x.reshape((b, groups, c / groups, h, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// `true` when every element is finite.
pub fn all_finite(x: &Tensor) -> Result<bool> {
    // x - x is 0 for finite values and NaN for inf/NaN.
    let probe = x
        .sub(x)?
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    Ok(probe == 0.0)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?)
}
