//! Tensor loss kernels shared by the RPN and the box head.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Elementwise smooth-L1 with transition point `beta`.
pub fn smooth_l1(diff: &Tensor, beta: f64) -> Result<Tensor> {
    let a = diff.abs()?;
    let m = a.clamp(0.0, beta)?;
    Ok(((m.sqr()? * (0.5 / beta))? + (a - m)?)?)
}

/// Elementwise binary cross-entropy on logits, numerically stable form
/// `max(x, 0) - x y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - (logits * targets)?)? + softplus)?)
}

/// Mean cross-entropy of `logits [K, C]` against integer `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (k, c) = logits.dims2()?;
    if k == 0 {
        return zero_scalar(logits.device());
    }
    let mut onehot = vec![0f32; k * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (k, c), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    Ok(((logp * onehot)?.sum_all()? * (-1.0 / k as f64))?)
}

pub fn zero_scalar(device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), DType::F32, device)?)
}
