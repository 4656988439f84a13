//! Scalar training objectives. Every function returns a 0-d tensor so it can
//! be backpropagated.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{ModelError, Result};
use crate::nn::log_softmax;

/// `(N, C)` one-hot matrix for `targets`.
pub fn one_hot(targets: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(ModelError::Shape(format!("target {t} out of range for {classes} classes")));
        }
        data[i * classes + t] = 1.0;
    }
    Ok(Tensor::from_vec(data, (targets.len(), classes), device)?.to_dtype(dtype)?)
}

fn zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

/// Per-row `log p_target` for `(N, C)` logits.
fn target_log_prob(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if n != targets.len() {
        return Err(ModelError::Shape(format!("{n} logit rows but {} targets", targets.len())));
    }
    let mask = one_hot(targets, c, logits.dtype(), logits.device())?;
    Ok((log_softmax(logits)? * mask)?.sum(D::Minus1)?)
}

/// Mean softmax cross-entropy; 0 for an empty batch.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if targets.is_empty() {
        return zero(logits.dtype(), logits.device());
    }
    Ok(target_log_prob(logits, targets)?.mean_all()?.neg()?)
}

/// Softmax focal loss `-alpha (1 - p_t)^gamma log p_t`, averaged over rows.
pub fn focal_loss(logits: &Tensor, targets: &[usize], gamma: f64, alpha: f64) -> Result<Tensor> {
    if targets.is_empty() {
        return zero(logits.dtype(), logits.device());
    }
    let log_pt = target_log_prob(logits, targets)?;
    let per_row = if gamma == 0.0 {
        log_pt.clone()
    } else {
        let one_minus = log_pt.exp()?.affine(-1.0, 1.0)?.clamp(1e-12, 1.0)?;
        (one_minus.powf(gamma)? * &log_pt)?
    };
    Ok(per_row.mean_all()?.affine(-alpha, 0.0)?)
}

/// Smooth-L1 summed over the last axis and averaged over rows; 0 when empty.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    if pred.elem_count() == 0 {
        return zero(pred.dtype(), pred.device());
    }
    let diff = (pred - target)?;
    let abs = diff.abs()?;
    let quadratic = (diff.sqr()? * (0.5 / beta))?;
    let linear = (abs.clone() - 0.5 * beta)?;
    let beta_t = Tensor::full(beta, (), pred.device())?.to_dtype(pred.dtype())?;
    let small = abs.broadcast_lt(&beta_t)?;
    let elem = small.where_cond(&quadratic, &linear)?;
    let rows = pred.dims()[0] as f64;
    Ok((elem.sum_all()? / rows)?)
}

/// Mean squared error over every element.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(ModelError::Shape(format!(
            "mse operands {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
