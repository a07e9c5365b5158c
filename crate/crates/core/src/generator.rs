//! Bi-temporal pair sampling. The post-change image is generated under the
//! post-change mask while, for the first part of the reverse pass, every
//! latent cell outside the change mask is reset to a forward-diffused copy
//! of the pre-change latent. The remaining steps run unconstrained, which
//! leaves unchanged regions similar but not identical.

use log::warn;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::{
    derive_change_mask, downsample_change_mask, generate_toy_semantic_mask, simulate_event,
    ChangeError, ChangeEvent, ChangeMask, EventKind, EventParams, SemanticMask, ToyMaskParams,
};
use crate::codec::{CodecError, LatentCodec};
use crate::denoiser::{DenoiserError, EpsModel};
use crate::diffusion::{
    ddim_step, ddpm_step, make_substep_ladder, sample_forward, DiffusionError, NoiseSchedule,
};
use crate::grid::{GridError, LatentGrid};

#[derive(Debug, Error, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("change mask is not the XOR of the two semantic masks")]
    InconsistentChange,
    #[error("sample {index}: no usable mask after {attempts} draws")]
    NoUsableMask { index: usize, attempts: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Change(#[from] ChangeError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(format!("unknown sampler `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// First reverse step of the constrained phase.
    pub n_max: usize,
    /// Step at which constraining stops; later steps run free.
    pub n_min: usize,
    pub sampler: SamplerKind,
    pub ddim_substeps: usize,
    pub eta: f64,
    /// Copy the pre-change latent into unchanged cells after the last step.
    pub blend_at_zero: bool,
    /// Dilation applied to the change mask at latent resolution.
    pub dilate_radius: usize,
    pub seed: u64,
}

impl GenerationConfig {
    /// `n_max = T`, `n_min = T/4`, DDIM with up to 50 substeps, `eta = 0`.
    pub fn defaults_for(schedule: &NoiseSchedule, seed: u64) -> Self {
        let total = schedule.total_steps();
        Self {
            n_max: total,
            n_min: total / 4,
            sampler: SamplerKind::Ddim,
            ddim_substeps: 50.min(total),
            eta: 0.0,
            blend_at_zero: false,
            dilate_radius: 0,
            seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), GeneratorError> {
        let total = schedule.total_steps();
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        if self.n_max > total || self.n_min >= self.n_max {
            return bad(format!(
                "need 0 <= n_min < n_max <= {total}, got n_min={} n_max={}",
                self.n_min, self.n_max
            ));
        }
        if self.sampler == SamplerKind::Ddim && !(1..=total).contains(&self.ddim_substeps) {
            return bad(format!("ddim_substeps must be in 1..={total}"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        Ok(())
    }

    /// Reverse steps for an unconstrained pass from `T` to 0.
    pub fn full_ladder(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>, GeneratorError> {
        let total = schedule.total_steps();
        Ok(match self.sampler {
            SamplerKind::Ddpm => (0..=total).rev().collect(),
            SamplerKind::Ddim => make_substep_ladder(total, self.ddim_substeps)?,
        })
    }

    /// Reverse steps from `n_max` to 0, always containing `n_max` and `n_min`.
    pub fn pair_ladder(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>, GeneratorError> {
        let mut steps: Vec<usize> = self
            .full_ladder(schedule)?
            .into_iter()
            .filter(|&t| t <= self.n_max)
            .chain([self.n_max, self.n_min])
            .collect();
        steps.sort_unstable_by(|a, b| b.cmp(a));
        steps.dedup();
        Ok(steps)
    }
}

/// Choices the sampler makes that a reader of a generated pair may need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub config: GenerationConfig,
    pub blend_order: String,
    pub phase1_noise: String,
    /// `n_min = 0` without `blend_at_zero`: every step is constrained.
    pub unconstrained_phase_empty: bool,
}

impl PairMetadata {
    fn new(config: GenerationConfig) -> Self {
        Self {
            config,
            blend_order: "step_then_blend".into(),
            phase1_noise: "fresh_per_step".into(),
            unconstrained_phase_empty: config.n_min == 0 && !config.blend_at_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// Unique within a dataset; also names the sample's files.
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub x_t1: LatentGrid,
    pub x_t2: LatentGrid,
    pub y1: SemanticMask,
    pub y2: SemanticMask,
    pub change: ChangeMask,
    pub event: Option<ChangeEvent>,
    /// Sampler settings; absent for pairs not produced by the sampler.
    pub metadata: Option<PairMetadata>,
}

/// State after one constrained step, handed to an observer.
#[derive(Debug)]
pub struct BlendRecord<'a> {
    /// Step the latents now sit at.
    pub t: usize,
    pub x_t1: &'a LatentGrid,
    pub x_t2: &'a LatentGrid,
    pub mask: &'a ChangeMask,
}

/// `mask·xt2_hat + (1−mask)·xt1`, the mask broadcast over channels.
pub fn blend_latents(
    xt2_hat: &LatentGrid,
    xt1: &LatentGrid,
    mask: &ChangeMask,
) -> Result<LatentGrid, GeneratorError> {
    xt2_hat.ensure_same_shape(xt1)?;
    if mask.width() != xt1.width() || mask.height() != xt1.height() {
        return Err(GridError::ShapeMismatch {
            left: xt1.shape(),
            right: (1, mask.height(), mask.width()),
        }
        .into());
    }
    let mut out = xt1.clone();
    for ch in 0..out.channels() {
        let src = xt2_hat.plane(ch);
        for (i, v) in out.plane_mut(ch).iter_mut().enumerate() {
            if mask.values()[i] == 1 {
                *v = src[i];
            }
        }
    }
    Ok(out)
}

fn reverse_step<R: Rng + ?Sized>(
    xt: &LatentGrid,
    t: usize,
    t_prev: usize,
    y: &SemanticMask,
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<LatentGrid, GeneratorError> {
    let eps = model.predict_eps(xt, t, y)?;
    let (c, h, w) = xt.shape();
    Ok(match cfg.sampler {
        SamplerKind::Ddpm => {
            let z = if t > 1 {
                LatentGrid::standard_normal(c, h, w, rng)
            } else {
                LatentGrid::zeros(c, h, w)
            };
            ddpm_step(xt, t, &eps, &z, schedule)?
        }
        SamplerKind::Ddim => {
            let z = if cfg.eta > 0.0 {
                LatentGrid::standard_normal(c, h, w, rng)
            } else {
                LatentGrid::zeros(c, h, w)
            };
            ddim_step(xt, t, t_prev, &eps, schedule, cfg.eta, &z)?
        }
    })
}

fn latent_mask(y: &SemanticMask, codec: &dyn LatentCodec) -> Result<SemanticMask, GeneratorError> {
    Ok(y.downsample_nearest(codec.spatial_factor())?)
}

/// Samples an image for `y1` by a full reverse pass from standard-normal
/// latent noise at step `T`.
pub fn generate_t1<R: Rng + ?Sized>(
    y1: &SemanticMask,
    model: &dyn EpsModel,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &GenerationConfig,
    rng: &mut R,
) -> Result<LatentGrid, GeneratorError> {
    cfg.validate(schedule)?;
    let y_lat = latent_mask(y1, codec)?;
    let mut x =
        LatentGrid::standard_normal(codec.latent_channels(), y_lat.height(), y_lat.width(), rng);
    let ladder = cfg.full_ladder(schedule)?;
    for pair in ladder.windows(2) {
        x = reverse_step(&x, pair[0], pair[1], &y_lat, model, schedule, cfg, rng)?;
    }
    Ok(codec.decode(&x)?)
}

/// Samples the post-change image for a given pre-change image.
///
/// The latent at `n_max` is standard-normal noise inside the change mask
/// and a forward-diffused pre-change latent outside it. Each reverse step
/// that starts above `n_min` is followed by a blend with a freshly noised
/// pre-change latent at the step's target level. Steps from `n_min` down
/// run without blending.
#[allow(clippy::too_many_arguments)]
pub fn generate_pair<R: Rng + ?Sized>(
    x0_t1: &LatentGrid,
    y1: &SemanticMask,
    y2: &SemanticMask,
    change: &ChangeMask,
    model: &dyn EpsModel,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &GenerationConfig,
    rng: &mut R,
    mut observer: Option<&mut dyn FnMut(&BlendRecord)>,
) -> Result<(LatentGrid, PairMetadata), GeneratorError> {
    cfg.validate(schedule)?;
    if &derive_change_mask(y1, y2)? != change {
        return Err(GeneratorError::InconsistentChange);
    }
    let z0 = codec.encode(x0_t1)?;
    let y2_lat = latent_mask(y2, codec)?;
    let mask = downsample_change_mask(change, codec.spatial_factor(), cfg.dilate_radius)?;
    let ladder = cfg.pair_ladder(schedule)?;

    let (c, h, w) = z0.shape();
    let noise = LatentGrid::standard_normal(c, h, w, rng);
    let (start_t1, _) = sample_forward(&z0, cfg.n_max, rng, schedule)?;
    let mut x = blend_latents(&noise, &start_t1, &mask)?;
    for pair in ladder.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let proposal = reverse_step(&x, t, t_prev, &y2_lat, model, schedule, cfg, rng)?;
        if t > cfg.n_min {
            let xt1 = if t_prev == 0 {
                z0.clone()
            } else {
                sample_forward(&z0, t_prev, rng, schedule)?.0
            };
            x = blend_latents(&proposal, &xt1, &mask)?;
            if let Some(obs) = observer.as_mut() {
                obs(&BlendRecord {
                    t: t_prev,
                    x_t1: &xt1,
                    x_t2: &x,
                    mask: &mask,
                });
            }
        } else {
            x = proposal;
        }
    }
    if cfg.blend_at_zero {
        x = blend_latents(&x, &z0, &mask)?;
    }
    Ok((codec.decode(&x)?, PairMetadata::new(*cfg)))
}

/// Where pre-change masks come from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    Toy(ToyMaskParams),
    /// Masks are used round-robin starting at the sample index.
    Fixed(Vec<SemanticMask>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub generation: GenerationConfig,
    pub events: EventParams,
    /// Mask draws per sample before the sample fails.
    pub max_mask_draws: usize,
}

/// Per-sample seed: a SplitMix64 finalizer over `base + (i+1)·γ`. The map
/// is a bijection of `i` for a fixed base, so seeds never collide.
pub fn sample_seed(base_seed: u64, index: usize) -> u64 {
    let mut z = base_seed.wrapping_add(
        (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Event used for sample `index`: appearance on even, disappearance on odd.
pub fn event_kind_for(index: usize) -> EventKind {
    if index.is_multiple_of(2) {
        EventKind::Appearance
    } else {
        EventKind::Disappearance
    }
}

/// Generates one dataset sample. Masks on which the event cannot be
/// simulated are skipped with a warning and a new mask is drawn.
pub fn generate_sample(
    index: usize,
    source: &MaskSource,
    model: &dyn EpsModel,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &DatasetConfig,
    base_seed: u64,
) -> Result<SamplePair, GeneratorError> {
    let seed = sample_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = event_kind_for(index);
    for attempt in 0..cfg.max_mask_draws.max(1) {
        let y1 = match source {
            MaskSource::Toy(p) => generate_toy_semantic_mask(rng.next_u64(), p),
            MaskSource::Fixed(masks) => {
                if masks.is_empty() {
                    return Err(GeneratorError::InvalidConfig("no input masks".into()));
                }
                masks[(index + attempt) % masks.len()].clone()
            }
        };
        let (y2, event) = match simulate_event(kind, &y1, rng.next_u64(), &cfg.events) {
            Ok(r) => r,
            Err(e) => {
                warn!("sample {index}: skipping mask draw {attempt}: {e}");
                continue;
            }
        };
        let change = derive_change_mask(&y1, &y2)?;
        let x_t1 = generate_t1(&y1, model, codec, schedule, &cfg.generation, &mut rng)?;
        let (x_t2, metadata) = generate_pair(
            &x_t1,
            &y1,
            &y2,
            &change,
            model,
            codec,
            schedule,
            &cfg.generation,
            &mut rng,
            None,
        )?;
        return Ok(SamplePair {
            id: format!("syn-{index:06}"),
            index,
            seed,
            x_t1,
            x_t2,
            y1,
            y2,
            change,
            event: Some(event),
            metadata: Some(metadata),
        });
    }
    Err(GeneratorError::NoUsableMask {
        index,
        attempts: cfg.max_mask_draws.max(1),
    })
}

/// Generates `count` samples on `workers` threads. Output is ordered by
/// index and does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    source: &MaskSource,
    model: &dyn EpsModel,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &DatasetConfig,
    count: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<SamplePair>, GeneratorError> {
    if count == 0 {
        return Err(GeneratorError::InvalidConfig(
            "count must be at least 1".into(),
        ));
    }
    cfg.generation.validate(schedule)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| GeneratorError::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| generate_sample(i, source, model, codec, schedule, cfg, base_seed))
            .collect()
    })
}
