//! Plain conv stack: `conv → SiLU → ... → conv`, with an optional
//! per-channel bias projected from a step embedding after the first conv.
//!
//! `forward` records activations on a [`Tape`]; `backward` replays them in
//! reverse and accumulates parameter gradients into the [`ParamStore`].

use rand::Rng;

use crate::grid::LatentGrid;

use super::conv::{conv2d_backward, conv2d_forward, ConvShape};
use super::layers::{dense_backward, dense_forward, silu_backward, silu_forward};
use super::{Init, NnError, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvNetConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    /// Number of conv layers, at least 1.
    pub depth: usize,
    pub kernel: usize,
    /// Length of the step embedding fed to the first-layer bias, if any.
    pub time_embed_dim: Option<usize>,
    pub zero_init_output: bool,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    shape: ConvShape,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct TimeProjection {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    config: ConvNetConfig,
    layers: Vec<ConvLayer>,
    time: Option<TimeProjection>,
}

/// Activations saved by a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    /// Input to each conv layer.
    inputs: Vec<LatentGrid>,
    /// Pre-activation output of every hidden layer.
    pre_activations: Vec<LatentGrid>,
    time_embedding: Option<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.pre_activations.clear();
        self.time_embedding = None;
    }
}

impl ConvNet {
    pub fn new<R: Rng + ?Sized>(
        config: ConvNetConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        assert!(config.depth >= 1, "conv net needs at least one layer");
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.hidden_channels
            };
            let last = i + 1 == config.depth;
            let cout = if last {
                config.out_channels
            } else {
                config.hidden_channels
            };
            let shape = ConvShape::same(cin, cout, config.kernel);
            let fan_in = cin * config.kernel * config.kernel;
            let init = if last && config.zero_init_output {
                Init::Zeros
            } else {
                Init::FanIn(fan_in)
            };
            let weight = store.add(
                format!("{prefix}conv{i}.weight"),
                &[cout, cin, config.kernel, config.kernel],
                init,
                rng,
            );
            let bias = store.add(format!("{prefix}conv{i}.bias"), &[cout], init, rng);
            layers.push(ConvLayer {
                shape,
                weight,
                bias,
            });
        }
        let time = config.time_embed_dim.map(|dim| {
            let first_out = layers[0].shape.out_channels;
            TimeProjection {
                weight: store.add(
                    format!("{prefix}time.weight"),
                    &[first_out, dim],
                    Init::FanIn(dim),
                    rng,
                ),
                bias: store.add(
                    format!("{prefix}time.bias"),
                    &[first_out],
                    Init::FanIn(dim),
                    rng,
                ),
            }
        });
        Self {
            config,
            layers,
            time,
        }
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    /// Parameter ids of conv layer `i`, as `(weight, bias)`.
    pub fn layer_params(&self, i: usize) -> (ParamId, ParamId) {
        (self.layers[i].weight, self.layers[i].bias)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &LatentGrid,
        time_embedding: Option<&[f64]>,
        tape: &mut Tape,
    ) -> Result<LatentGrid, NnError> {
        tape.clear();
        let time_bias = match (&self.time, time_embedding) {
            (Some(tp), Some(emb)) => Some(dense_forward(
                emb,
                store.value(tp.weight),
                store.value(tp.bias),
            )?),
            (None, None) => None,
            (Some(_), None) => {
                return Err(NnError::ParamShape(
                    "network expects a step embedding".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(NnError::ParamShape(
                    "network has no step-embedding input".into(),
                ))
            }
        };
        tape.time_embedding = time_embedding.map(<[f64]>::to_vec);

        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = conv2d_forward(
                &x,
                store.value(layer.weight),
                store.value(layer.bias),
                layer.shape,
            )?;
            if i == 0 {
                if let Some(tb) = &time_bias {
                    for (c, b) in tb.iter().enumerate() {
                        h.plane_mut(c).iter_mut().for_each(|v| *v += b);
                    }
                }
            }
            tape.inputs
                .push(std::mem::replace(&mut x, LatentGrid::zeros(1, 1, 1)));
            if i + 1 == self.layers.len() {
                x = h;
            } else {
                x = silu_forward(&h);
                tape.pre_activations.push(h);
            }
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for `grad_output = dL/d(output)` and
    /// returns `dL/d(input)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        tape: &Tape,
        grad_output: &LatentGrid,
    ) -> Result<LatentGrid, NnError> {
        if tape.is_empty() {
            return Err(NnError::BackwardBeforeForward);
        }
        let mut g = grad_output.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = silu_backward(&tape.pre_activations[i], &g)?;
            }
            let layer = &self.layers[i];
            if i == 0 {
                if let (Some(tp), Some(emb)) = (&self.time, &tape.time_embedding) {
                    let per_channel: Vec<f64> =
                        (0..g.channels()).map(|c| g.plane(c).iter().sum()).collect();
                    let (gw, gb) = dense_backward(emb, &per_channel);
                    accumulate(store.grad_mut(tp.weight), &gw);
                    accumulate(store.grad_mut(tp.bias), &gb);
                }
            }
            let grads =
                conv2d_backward(&tape.inputs[i], store.value(layer.weight), &g, layer.shape)?;
            accumulate(store.grad_mut(layer.weight), &grads.weights);
            accumulate(store.grad_mut(layer.bias), &grads.bias);
            g = grads.input;
        }
        Ok(g)
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
