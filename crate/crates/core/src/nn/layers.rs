//! Pointwise nonlinearity, dense projection, losses and the sinusoidal
//! step embedding.

use crate::grid::LatentGrid;

use super::NnError;

/// SiLU: `x·sigmoid(x)`. Smooth everywhere, so finite differences never
/// straddle a kink.
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_forward(x: &LatentGrid) -> LatentGrid {
    x.map(silu)
}

/// Upstream gradient times `silu'(pre)`.
pub fn silu_backward(pre: &LatentGrid, grad_output: &LatentGrid) -> Result<LatentGrid, NnError> {
    Ok(pre.zip_map(grad_output, |x, g| g * silu_grad(x))?)
}

/// `y = W x + b`, `W` laid out `[out, in]`.
pub fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>, NnError> {
    let out = bias.len();
    if weights.len() != out * input.len() {
        return Err(NnError::ParamShape(format!(
            "dense layer expects {}x{} weights, got {}",
            out,
            input.len(),
            weights.len()
        )));
    }
    Ok((0..out)
        .map(|o| {
            let row = &weights[o * input.len()..(o + 1) * input.len()];
            bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect())
}

/// Returns `(dW, db)`; the input gradient is not needed by any caller.
pub fn dense_backward(input: &[f64], grad_output: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = Vec::with_capacity(grad_output.len() * input.len());
    for g in grad_output {
        gw.extend(input.iter().map(|x| g * x));
    }
    (gw, grad_output.to_vec())
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &LatentGrid, target: &LatentGrid) -> Result<(f64, LatentGrid), NnError> {
    let n = pred.len() as f64;
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let loss = diff.values().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Mean per-pixel softmax cross-entropy over `logits` (one channel per
/// class) against integer `labels`; returns the loss and the logit gradient.
pub fn softmax_cross_entropy(
    logits: &LatentGrid,
    labels: &[u8],
) -> Result<(f64, LatentGrid), NnError> {
    let classes = logits.channels();
    let n = logits.plane_len();
    if labels.len() != n {
        return Err(NnError::ParamShape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    let mut grad = LatentGrid::zeros(classes, logits.height(), logits.width());
    let mut loss = 0.0;
    let mut probs = vec![0.0; classes];
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let max = (0..classes)
            .map(|c| logits.values()[c * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, p) in probs.iter_mut().enumerate() {
            *p = (logits.values()[c * n + i] - max).exp();
            z += *p;
        }
        loss -= (probs[label] / z).ln();
        let g = grad.values_mut();
        for (c, p) in probs.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            g[c * n + i] = (p / z - target) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Cross-entropy with a weight per target class, normalised by the total
/// weight of the labels present. Unit weights give
/// [`softmax_cross_entropy`].
pub fn weighted_softmax_cross_entropy(
    logits: &LatentGrid,
    labels: &[u8],
    class_weights: &[f64],
) -> Result<(f64, LatentGrid), NnError> {
    let classes = logits.channels();
    if class_weights.len() != classes {
        return Err(NnError::ParamShape(format!(
            "{} class weights for {classes} classes",
            class_weights.len()
        )));
    }
    if class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(NnError::ParamShape("class weights must be positive".into()));
    }
    let n = logits.plane_len();
    if labels.len() != n {
        return Err(NnError::ParamShape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(NnError::LabelOutOfRange {
            label: bad as usize,
            classes,
        });
    }
    let total: f64 = labels.iter().map(|&l| class_weights[l as usize]).sum();
    let mut grad = LatentGrid::zeros(classes, logits.height(), logits.width());
    let mut loss = 0.0;
    let mut probs = vec![0.0; classes];
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        let w = class_weights[label];
        let max = (0..classes)
            .map(|c| logits.values()[c * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, p) in probs.iter_mut().enumerate() {
            *p = (logits.values()[c * n + i] - max).exp();
            z += *p;
        }
        loss -= w * (probs[label] / z).ln();
        let g = grad.values_mut();
        for (c, p) in probs.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            g[c * n + i] = w * (p / z - target) / total;
        }
    }
    Ok((loss / total, grad))
}

/// Interleaved `[sin(t·f_0), cos(t·f_0), sin(t·f_1), ...]` with
/// `f_k = 10000^(−k/(dim/2))`.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Vec<f64>, NnError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(NnError::OddEmbeddingDim(dim));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
