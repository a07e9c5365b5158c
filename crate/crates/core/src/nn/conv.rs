//! Stride-1 2-D cross-correlation with zero padding.
//!
//! Weights are laid out `[out_channels, in_channels, k, k]`.

use crate::grid::LatentGrid;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvShape {
    /// Odd kernel with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            padding: kernel / 2,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn validate(&self, input: &LatentGrid, weights: &[f64], bias: &[f64]) -> Result<(), NnError> {
        if self.kernel.is_multiple_of(2) {
            return Err(NnError::EvenKernel(self.kernel));
        }
        if input.channels() != self.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: self.in_channels,
                actual: input.channels(),
            });
        }
        if weights.len() != self.weight_len() || bias.len() != self.out_channels {
            return Err(NnError::ParamShape(format!(
                "conv expects {} weights and {} biases, got {} and {}",
                self.weight_len(),
                self.out_channels,
                weights.len(),
                bias.len()
            )));
        }
        if input.height() + 2 * self.padding < self.kernel
            || input.width() + 2 * self.padding < self.kernel
        {
            return Err(NnError::ParamShape(
                "kernel larger than padded input".into(),
            ));
        }
        Ok(())
    }

    fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            height + 2 * self.padding + 1 - self.kernel,
            width + 2 * self.padding + 1 - self.kernel,
        )
    }
}

/// Valid output index range `[lo, hi)` for a kernel tap at offset `k`:
/// output `o` reads input `o + k - pad`, which must lie in `[0, n_in)`.
#[inline]
fn tap_range(k: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n_in + pad).saturating_sub(k).min(n_out);
    (lo, hi.max(lo))
}

pub fn conv2d_forward(
    input: &LatentGrid,
    weights: &[f64],
    bias: &[f64],
    shape: ConvShape,
) -> Result<LatentGrid, NnError> {
    shape.validate(input, weights, bias)?;
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = shape.output_dims(h, w);
    let k = shape.kernel;
    let p = shape.padding;
    let mut out = LatentGrid::zeros(shape.out_channels, oh, ow);
    for oc in 0..shape.out_channels {
        let out_plane = out.plane_mut(oc);
        out_plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..shape.in_channels {
            let in_plane = input.plane(ic);
            let wbase = (oc * shape.in_channels + ic) * k * k;
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, p, h, oh);
                for kx in 0..k {
                    let wv = weights[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(kx, p, w, ow);
                    for oy in y0..y1 {
                        let iy = oy + ky - p;
                        let src = &in_plane[iy * w + x0 + kx - p..iy * w + x1 + kx - p];
                        let dst = &mut out_plane[oy * ow + x0..oy * ow + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient.
pub struct ConvGrads {
    pub input: LatentGrid,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &LatentGrid,
    weights: &[f64],
    grad_output: &LatentGrid,
    shape: ConvShape,
) -> Result<ConvGrads, NnError> {
    let zero_bias = vec![0.0; shape.out_channels];
    shape.validate(input, weights, &zero_bias)?;
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = shape.output_dims(h, w);
    if grad_output.shape() != (shape.out_channels, oh, ow) {
        return Err(NnError::ParamShape(format!(
            "upstream gradient shape {:?} does not match conv output {:?}",
            grad_output.shape(),
            (shape.out_channels, oh, ow)
        )));
    }
    let k = shape.kernel;
    let p = shape.padding;
    let mut grad_in = LatentGrid::zeros(shape.in_channels, h, w);
    let mut grad_w = vec![0.0; shape.weight_len()];
    let grad_b: Vec<f64> = (0..shape.out_channels)
        .map(|oc| grad_output.plane(oc).iter().sum())
        .collect();

    for oc in 0..shape.out_channels {
        let g_plane = grad_output.plane(oc);
        for ic in 0..shape.in_channels {
            let in_plane = input.plane(ic);
            let wbase = (oc * shape.in_channels + ic) * k * k;
            for ky in 0..k {
                let (y0, y1) = tap_range(ky, p, h, oh);
                for kx in 0..k {
                    let (x0, x1) = tap_range(kx, p, w, ow);
                    let wv = weights[wbase + ky * k + kx];
                    let mut acc = 0.0;
                    {
                        let gi_plane = grad_in.plane_mut(ic);
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            let range_in = iy * w + x0 + kx - p..iy * w + x1 + kx - p;
                            let g = &g_plane[oy * ow + x0..oy * ow + x1];
                            let src = &in_plane[range_in.clone()];
                            acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if wv != 0.0 {
                                for (d, gv) in gi_plane[range_in].iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                    grad_w[wbase + ky * k + kx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}
