//! Mask-conditioned noise predictors: a small trainable conv net and an
//! exact posterior oracle for class-Gaussian toy scenes.

use std::io::{Read, Write};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::{Palette, SemanticMask};
use crate::codec::{CodecError, LatentCodec};
use crate::diffusion::{sample_forward, DiffusionError, NoiseSchedule};
use crate::grid::{GridError, LatentGrid};
use crate::nn::{
    adamw_update, load_checkpoint, mse_loss, read_checkpoint, sinusoidal_time_embedding,
    write_checkpoint, ConvNet, ConvNetConfig, NnError, OptimizerConfig, ParamStore, Tape,
};

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("mask is {mask_w}x{mask_h} but latent is {latent_w}x{latent_h}")]
    MaskShape {
        mask_w: usize,
        mask_h: usize,
        latent_w: usize,
        latent_h: usize,
    },
    #[error("model expects {expected} {what}, got {actual}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("training needs at least one scene")]
    EmptySceneStream,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Class-Gaussian scene model: pixel `p` of class `c` is drawn from
/// `N(means[c], noise_scale²)` per channel, plus a shared sinusoidal texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySceneSpec {
    /// `means[class][channel]`
    pub means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub texture_amplitude: f64,
    pub texture_wavelength: f64,
}

impl ToySceneSpec {
    /// Means taken from palette colours mapped to `[-0.8, 0.8]` per channel.
    pub fn from_palette(palette: &Palette, noise_scale: f64) -> Self {
        let means = palette
            .entries()
            .iter()
            .map(|e| {
                e.rgb
                    .iter()
                    .map(|&v| v as f64 / 255.0 * 1.6 - 0.8)
                    .collect()
            })
            .collect();
        Self {
            means,
            noise_scale,
            texture_amplitude: 0.05,
            texture_wavelength: 16.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn channels(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn mean(&self, class_id: u8, channel: usize) -> f64 {
        self.means[class_id as usize][channel]
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |msg: String| Err(DenoiserError::InvalidSpec(msg));
        if self.means.is_empty() || self.channels() == 0 {
            return bad("no class means".into());
        }
        if self.means.iter().any(|m| m.len() != self.channels()) {
            return bad("class means differ in channel count".into());
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite class mean".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise scale {}", self.noise_scale));
        }
        if !self.texture_amplitude.is_finite() || !(self.texture_wavelength > 0.0) {
            return bad("texture needs finite amplitude and positive wavelength".into());
        }
        Ok(())
    }

    fn check_mask(&self, y: &SemanticMask) -> Result<(), DenoiserError> {
        if y.num_classes() != self.num_classes() {
            return Err(DenoiserError::Mismatch {
                what: "classes",
                expected: self.num_classes(),
                actual: y.num_classes(),
            });
        }
        Ok(())
    }
}

/// Renders one scene for mask `y`: class mean plus per-pixel noise plus a
/// plane wave of random direction and phase shared by all channels.
pub fn make_toy_scene<R: Rng + ?Sized>(
    spec: &ToySceneSpec,
    y: &SemanticMask,
    rng: &mut R,
) -> Result<LatentGrid, DenoiserError> {
    spec.validate()?;
    spec.check_mask(y)?;
    let (w, h, c) = (y.width(), y.height(), spec.channels());
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let k = std::f64::consts::TAU / spec.texture_wavelength;
    let (kx, ky) = (k * theta.cos(), k * theta.sin());
    let mut img = LatentGrid::zeros(c, h, w);
    for ch in 0..c {
        for py in 0..h {
            for px in 0..w {
                let z: f64 = StandardNormal.sample(rng);
                let texture =
                    spec.texture_amplitude * (kx * px as f64 + ky * py as f64 + phase).sin();
                let v = spec.mean(y.get(px, py), ch) + spec.noise_scale * z + texture;
                img.set(ch, py, px, v);
            }
        }
    }
    Ok(img)
}

/// One-hot planes, one per class.
pub fn one_hot(y: &SemanticMask) -> LatentGrid {
    let (w, h) = (y.width(), y.height());
    let mut out = LatentGrid::zeros(y.num_classes(), h, w);
    for (i, &c) in y.class_ids().iter().enumerate() {
        out.plane_mut(c as usize)[i] = 1.0;
    }
    out
}

/// Anything that predicts the injected noise of `x_t` given the step and a
/// mask at latent resolution.
pub trait EpsModel: Send + Sync {
    fn predict_eps(
        &self,
        xt: &LatentGrid,
        t: usize,
        y: &SemanticMask,
    ) -> Result<LatentGrid, DenoiserError>;

    fn latent_channels(&self) -> usize;

    fn num_classes(&self) -> usize;
}

fn check_inputs(
    model: &dyn EpsModel,
    xt: &LatentGrid,
    y: &SemanticMask,
) -> Result<(), DenoiserError> {
    if xt.channels() != model.latent_channels() {
        return Err(DenoiserError::Mismatch {
            what: "latent channels",
            expected: model.latent_channels(),
            actual: xt.channels(),
        });
    }
    if y.num_classes() != model.num_classes() {
        return Err(DenoiserError::Mismatch {
            what: "classes",
            expected: model.num_classes(),
            actual: y.num_classes(),
        });
    }
    if y.width() != xt.width() || y.height() != xt.height() {
        return Err(DenoiserError::MaskShape {
            mask_w: y.width(),
            mask_h: y.height(),
            latent_w: xt.width(),
            latent_h: xt.height(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub kernel: usize,
    pub time_embed_dim: usize,
}

impl DenoiserConfig {
    pub fn new(latent_channels: usize, num_classes: usize) -> Self {
        Self {
            latent_channels,
            num_classes,
            base_channels: 16,
            depth: 3,
            kernel: 3,
            time_embed_dim: 32,
        }
    }

    fn net_config(&self) -> ConvNetConfig {
        ConvNetConfig {
            in_channels: self.latent_channels + self.num_classes,
            hidden_channels: self.base_channels,
            out_channels: self.latent_channels,
            depth: self.depth,
            kernel: self.kernel,
            time_embed_dim: Some(self.time_embed_dim),
            zero_init_output: true,
        }
    }
}

const PREFIX: &str = "eps.";

/// Conv net on `concat(x_t, one_hot(y))` with a step-embedding bias.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    net: ConvNet,
    store: ParamStore,
}

impl DenoiserModel {
    /// Fresh model; the output layer starts at zero so the untrained model
    /// predicts zero noise.
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ConvNet::new(config.net_config(), &mut store, PREFIX, &mut rng);
        Self { config, net, store }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn save<W: Write>(&self, w: W) -> Result<(), DenoiserError> {
        Ok(write_checkpoint(&self.store, w)?)
    }

    /// Rebuilds a model from a checkpoint, reading the architecture off the
    /// stored parameter shapes.
    pub fn load<R: Read>(mut r: R, num_classes: usize) -> Result<Self, DenoiserError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(NnError::from)?;
        let stored = read_checkpoint(bytes.as_slice())?;
        let shape_of = |name: &str| {
            stored
                .iter()
                .find(|p| p.name == format!("{PREFIX}{name}"))
                .map(|p| p.shape.clone())
                .ok_or_else(|| NnError::ArchitectureMismatch(format!("missing {PREFIX}{name}")))
        };
        let w0 = shape_of("conv0.weight")?;
        let tw = shape_of("time.weight")?;
        let depth = stored
            .iter()
            .filter(|p| p.name.ends_with(".weight"))
            .count()
            - 1;
        let last = shape_of(&format!("conv{}.weight", depth - 1))?;
        if w0.len() != 4 || tw.len() != 2 || last.len() != 4 || w0[1] < num_classes {
            return Err(NnError::ArchitectureMismatch("unexpected parameter ranks".into()).into());
        }
        let config = DenoiserConfig {
            latent_channels: last[0],
            num_classes,
            base_channels: w0[0],
            depth,
            kernel: w0[2],
            time_embed_dim: tw[1],
        };
        if config.latent_channels + num_classes != w0[1] {
            return Err(DenoiserError::Mismatch {
                what: "input channels",
                expected: w0[1],
                actual: config.latent_channels + num_classes,
            });
        }
        let mut model = Self::new(config, 0);
        load_checkpoint(&mut model.store, bytes.as_slice())?;
        Ok(model)
    }

    fn forward(
        &self,
        xt: &LatentGrid,
        t: usize,
        y: &SemanticMask,
        tape: &mut Tape,
    ) -> Result<LatentGrid, DenoiserError> {
        check_inputs(self, xt, y)?;
        let input = xt.concat_channels(&one_hot(y))?;
        let emb = sinusoidal_time_embedding(t, self.config.time_embed_dim)?;
        Ok(self.net.forward(&self.store, &input, Some(&emb), tape)?)
    }

    /// MSE between the prediction and `eps`; adds the loss gradient to the
    /// parameter gradients and returns the loss.
    pub fn accumulate_loss_grad(
        &mut self,
        xt: &LatentGrid,
        t: usize,
        y: &SemanticMask,
        eps: &LatentGrid,
    ) -> Result<f64, DenoiserError> {
        let mut tape = Tape::new();
        let pred = self.forward(xt, t, y, &mut tape)?;
        let (loss, grad) = mse_loss(&pred, eps)?;
        self.net.backward(&mut self.store, &tape, &grad)?;
        Ok(loss)
    }
}

impl EpsModel for DenoiserModel {
    fn predict_eps(
        &self,
        xt: &LatentGrid,
        t: usize,
        y: &SemanticMask,
    ) -> Result<LatentGrid, DenoiserError> {
        self.forward(xt, t, y, &mut Tape::new())
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

/// Exact `E[eps | x_t]` when `x0 ~ N(m_{y(p)}, s²)` independently per pixel.
pub fn oracle_eps(
    xt: &LatentGrid,
    t: usize,
    y: &SemanticMask,
    spec: &ToySceneSpec,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid, DenoiserError> {
    if t == 0 || t > schedule.total_steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            min: 1,
            max: schedule.total_steps(),
        }
        .into());
    }
    spec.check_mask(y)?;
    if xt.channels() != spec.channels() || xt.width() != y.width() || xt.height() != y.height() {
        return Err(DenoiserError::MaskShape {
            mask_w: y.width(),
            mask_h: y.height(),
            latent_w: xt.width(),
            latent_h: xt.height(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let sab = ab.sqrt();
    let s2 = spec.noise_scale * spec.noise_scale;
    let gain = sab * s2 / (ab * s2 + 1.0 - ab);
    let inv_noise = 1.0 / (1.0 - ab).sqrt();
    let mut out = LatentGrid::zeros(xt.channels(), xt.height(), xt.width());
    let plane = xt.plane_len();
    for ch in 0..xt.channels() {
        let src = xt.plane(ch);
        let dst = out.plane_mut(ch);
        for i in 0..plane {
            let m = spec.mean(y.class_ids()[i], ch);
            let x0_mean = m + gain * (src[i] - sab * m);
            dst[i] = (src[i] - sab * x0_mean) * inv_noise;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub spec: ToySceneSpec,
    pub schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(spec: ToySceneSpec, schedule: NoiseSchedule) -> Self {
        Self { spec, schedule }
    }
}

impl EpsModel for OracleDenoiser {
    fn predict_eps(
        &self,
        xt: &LatentGrid,
        t: usize,
        y: &SemanticMask,
    ) -> Result<LatentGrid, DenoiserError> {
        oracle_eps(xt, t, y, &self.spec, &self.schedule)
    }

    fn latent_channels(&self) -> usize {
        self.spec.channels()
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

/// Per-step mean batch loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{:.9}\n", i + 1, l));
        }
        out
    }

    /// Mean of the first and last `n` losses.
    pub fn head_tail_means(&self, n: usize) -> Option<(f64, f64)> {
        let n = n.min(self.losses.len());
        if n == 0 {
            return None;
        }
        let head = self.losses[..n].iter().sum::<f64>() / n as f64;
        let tail = self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64;
        Some((head, tail))
    }
}

/// Trains on `(image, mask)` pairs at image resolution. Images are encoded
/// through `codec` and masks downsampled to the latent grid once up front.
/// Each step draws `batch_size` scenes, a step `t ~ U[1, T]` and fresh noise
/// per scene, and applies one AdamW update on the mean noise MSE.
pub fn train_denoiser<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    scenes: &[(LatentGrid, SemanticMask)],
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingLog, DenoiserError> {
    if scenes.is_empty() {
        return Err(DenoiserError::EmptySceneStream);
    }
    cfg.optimizer.validate()?;
    let batch = cfg.batch_size.max(1);
    let factor = codec.spatial_factor();
    let latents = scenes
        .iter()
        .map(|(img, y)| {
            let y_lat = y
                .downsample_nearest(factor)
                .map_err(|e| DenoiserError::InvalidSpec(e.to_string()))?;
            Ok((codec.encode(img)?, y_lat))
        })
        .collect::<Result<Vec<_>, DenoiserError>>()?;
    let mut log = TrainingLog::default();
    for step in 0..cfg.steps {
        model.store.zero_grad();
        let mut total = 0.0;
        for _ in 0..batch {
            let (x0, y) = &latents[rng.random_range(0..latents.len())];
            let t = rng.random_range(1..=schedule.total_steps());
            let (xt, eps) = sample_forward(x0, t, rng, schedule)?;
            total += model.accumulate_loss_grad(&xt, t, y, &eps)?;
        }
        model.store.scale_grads(1.0 / batch as f64);
        adamw_update(&mut model.store, &cfg.optimizer)?;
        let loss = total / batch as f64;
        if step % 100 == 0 {
            debug!("denoiser step {step}: loss {loss:.6}");
        }
        log.losses.push(loss);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SigmaMode;

    fn two_class_mask(w: usize, h: usize) -> SemanticMask {
        let mut y = SemanticMask::uniform(w, h, 2, 0);
        for py in 0..h {
            for px in w / 2..w {
                y.set(px, py, 1);
            }
        }
        y
    }

    fn spec2() -> ToySceneSpec {
        ToySceneSpec {
            means: vec![vec![-0.5, 0.2], vec![0.6, -0.3]],
            noise_scale: 0.2,
            texture_amplitude: 0.0,
            texture_wavelength: 8.0,
        }
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let model = DenoiserModel::new(DenoiserConfig::new(2, 2), 3);
        let y = two_class_mask(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = LatentGrid::standard_normal(2, 5, 6, &mut rng);
        let eps = model.predict_eps(&xt, 17, &y).unwrap();
        assert_eq!(eps.shape(), xt.shape());
        assert!(eps.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn predict_rejects_mismatched_mask() {
        let model = DenoiserModel::new(DenoiserConfig::new(2, 2), 3);
        let xt = LatentGrid::zeros(2, 4, 4);
        assert!(matches!(
            model.predict_eps(&xt, 1, &two_class_mask(8, 8)),
            Err(DenoiserError::MaskShape { .. })
        ));
        assert!(matches!(
            model.predict_eps(&xt, 1, &SemanticMask::uniform(4, 4, 3, 0)),
            Err(DenoiserError::Mismatch { .. })
        ));
    }

    #[test]
    fn zero_noise_scene_is_class_constant() {
        let spec = ToySceneSpec {
            noise_scale: 0.0,
            ..spec2()
        };
        let y = two_class_mask(8, 4);
        let img = make_toy_scene(&spec, &y, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for ch in 0..2 {
            for py in 0..4 {
                for px in 0..8 {
                    assert_eq!(img.get(ch, py, px), spec.mean(y.get(px, py), ch));
                }
            }
        }
    }

    #[test]
    fn oracle_degenerate_prior_and_mean_point() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02, SigmaMode::Standard).unwrap();
        let y = two_class_mask(4, 2);
        let spec = ToySceneSpec {
            noise_scale: 0.0,
            ..spec2()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = LatentGrid::standard_normal(2, 2, 4, &mut rng);
        let t = 40;
        let ab = sched.alpha_bar(t);
        let eps = oracle_eps(&xt, t, &y, &spec, &sched).unwrap();
        for ch in 0..2 {
            for py in 0..2 {
                for px in 0..4 {
                    let m = spec.mean(y.get(px, py), ch);
                    let want = (xt.get(ch, py, px) - ab.sqrt() * m) / (1.0 - ab).sqrt();
                    assert!((eps.get(ch, py, px) - want).abs() < 1e-12);
                }
            }
        }

        let spec = spec2();
        let mut at_mean = LatentGrid::zeros(2, 2, 4);
        for ch in 0..2 {
            for py in 0..2 {
                for px in 0..4 {
                    at_mean.set(ch, py, px, ab.sqrt() * spec.mean(y.get(px, py), ch));
                }
            }
        }
        let eps = oracle_eps(&at_mean, t, &y, &spec, &sched).unwrap();
        assert!(eps.values().iter().all(|v| v.abs() < 1e-12));
        assert!(oracle_eps(&at_mean, 0, &y, &spec, &sched).is_err());
        assert!(oracle_eps(&at_mean, 101, &y, &spec, &sched).is_err());
    }

    #[test]
    fn training_zero_steps_leaves_model_unchanged() {
        let mut model = DenoiserModel::new(DenoiserConfig::new(2, 2), 4);
        let before = model.params().clone();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.05, SigmaMode::Standard).unwrap();
        let y = two_class_mask(4, 4);
        let img = make_toy_scene(&spec2(), &y, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            batch_size: 2,
            optimizer: OptimizerConfig::new(1e-3, 0.0),
        };
        let codec = crate::codec::CodecSpec::identity(2);
        let log = train_denoiser(
            &mut model,
            &[(img, y)],
            &codec,
            &sched,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(model.params(), &before);
        assert_eq!(
            train_denoiser(
                &mut model,
                &[],
                &codec,
                &sched,
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(0)
            )
            .unwrap_err(),
            DenoiserError::EmptySceneStream
        );
    }

    #[test]
    fn one_hot_planes() {
        let y = two_class_mask(4, 1);
        let oh = one_hot(&y);
        assert_eq!(oh.plane(0), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(oh.plane(1), &[0.0, 0.0, 1.0, 1.0]);
    }
}
