//! Flat `key = value` run configuration.
//!
//! Every tunable has an entry in [`KEYS`]; files and overrides may only
//! name those keys. `seed` has no default and must be supplied. The
//! resolved form lists every key in table order and is written next to
//! each command's outputs.

use std::collections::BTreeMap;
use std::str::FromStr;

use bitemporal_core::cd_eval::{CdTrainConfig, RealToyConfig, TransferConfig};
use bitemporal_core::change::{EventParams, Palette, ToyMaskParams};
use bitemporal_core::codec::{CodecKind, CodecSpec};
use bitemporal_core::denoiser::{DenoiserConfig, ToySceneSpec, TrainConfig};
use bitemporal_core::diffusion::{NoiseSchedule, SigmaMode};
use bitemporal_core::generator::{DatasetConfig, GenerationConfig, SamplerKind};
use bitemporal_core::nn::OptimizerConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Toy images are RGB.
pub const IMAGE_CHANNELS: usize = 3;

/// `(key, default)`. A `None` default marks a required key.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("seed", None),
    ("schedule.steps", Some("200")),
    ("schedule.beta_start", Some("0.0005")),
    ("schedule.beta_end", Some("0.05")),
    ("schedule.sigma", Some("standard")),
    ("codec.kind", Some("identity")),
    ("scene.size", Some("32")),
    ("scene.classes", Some("8")),
    ("scene.regions", Some("6")),
    ("scene.instances", Some("4")),
    ("scene.noise", Some("0.15")),
    ("scene.texture_amplitude", Some("0.05")),
    ("scene.texture_wavelength", Some("16")),
    ("denoiser.base_channels", Some("16")),
    ("denoiser.depth", Some("3")),
    ("denoiser.kernel", Some("3")),
    ("denoiser.time_embed_dim", Some("32")),
    ("train.scenes", Some("64")),
    ("train.steps", Some("1500")),
    ("train.batch_size", Some("4")),
    ("train.learning_rate", Some("0.002")),
    ("train.weight_decay", Some("0")),
    ("events.min_area", Some("16")),
    ("events.max_area_fraction", Some("0.05")),
    ("events.max_attempts", Some("100")),
    ("events.max_mask_draws", Some("16")),
    ("generate.count", Some("500")),
    ("generate.n_max", Some("auto")),
    ("generate.n_min", Some("auto")),
    ("generate.sampler", Some("ddim")),
    ("generate.ddim_substeps", Some("25")),
    ("generate.eta", Some("0")),
    ("generate.blend_at_zero", Some("false")),
    ("generate.dilate_radius", Some("0")),
    ("real.count", Some("200")),
    ("real.seasonal_shift", Some("0.05,0.1,-0.05")),
    ("eval.ratios", Some("0.05,1.0")),
    ("eval.seeds", Some("0,1,2,3,4")),
    ("eval.test_fraction", Some("0.5")),
    ("eval.hidden_channels", Some("16")),
    ("eval.batch_size", Some("4")),
    ("eval.pretrain_steps", Some("600")),
    ("eval.pretrain_learning_rate", Some("0.002")),
    ("eval.finetune_steps", Some("200")),
    ("eval.finetune_learning_rate", Some("0.001")),
    ("eval.weight_decay", Some("0.0001")),
    ("eval.change_weight", Some("1")),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

fn parse_pair(text: &str, origin: &str) -> Result<(String, String), CliError> {
    let (k, v) = text.split_once('=').ok_or_else(|| {
        CliError::Config(format!("{origin}: expected `key = value`, got `{text}`"))
    })?;
    let (k, v) = (k.trim(), v.trim());
    if !known(k) {
        return Err(CliError::Config(format!("{origin}: unknown key `{k}`")));
    }
    Ok((k.to_string(), v.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Resolves defaults, then the config file text, then overrides in
    /// order. Later sources win.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = KEYS
            .iter()
            .filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string())))
            .collect();
        if let Some(text) = file_text {
            let mut seen = BTreeMap::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = parse_pair(line, &format!("config line {}", n + 1))?;
                if seen.insert(k.clone(), ()).is_some() {
                    return Err(CliError::Config(format!(
                        "config line {}: duplicate key `{k}`",
                        n + 1
                    )));
                }
                values.insert(k, v);
            }
        }
        for o in overrides {
            let (k, v) = parse_pair(o, "override")?;
            values.insert(k, v);
        }
        for (k, d) in KEYS {
            if d.is_none() && !values.contains_key(*k) {
                return Err(CliError::Config(format!("missing required key `{k}`")));
            }
        }
        let cfg = Self { values };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds every typed view once so bad values fail before any work.
    fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        let schedule = self.schedule()?;
        self.codec()?;
        self.mask_params()?;
        self.scene_spec()?;
        self.denoiser_config()?;
        self.train_config()?;
        self.dataset_config(&schedule)?;
        self.real_config()?;
        self.transfer_config()?;
        self.get::<usize>("generate.count")?;
        self.get::<usize>("real.count")?;
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Config(format!("bad value `{raw}` for `{key}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        raw.split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Config(format!("bad list `{raw}` for `{key}`")))
    }

    /// `auto` or a step number.
    fn step_or_auto(&self, key: &str, auto: usize) -> Result<usize, CliError> {
        match self.raw(key) {
            "auto" => Ok(auto),
            _ => self.get(key),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !known(key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        self.validate()
    }

    /// Every key in table order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.values[*k]))
            .collect()
    }

    /// SHA-256 of the resolved text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let sigma = match self.raw("schedule.sigma") {
            "standard" => SigmaMode::Standard,
            "marginal" => SigmaMode::Marginal,
            other => {
                return Err(CliError::Config(format!(
                    "bad value `{other}` for `schedule.sigma` (standard|marginal)"
                )))
            }
        };
        NoiseSchedule::linear(
            self.get("schedule.steps")?,
            self.get("schedule.beta_start")?,
            self.get("schedule.beta_end")?,
            sigma,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn codec(&self) -> Result<CodecSpec, CliError> {
        let kind: CodecKind = self.raw("codec.kind").parse().map_err(CliError::Config)?;
        let spec = CodecSpec::new(kind, IMAGE_CHANNELS);
        let size: usize = self.get("scene.size")?;
        if !size.is_multiple_of(spec.spatial_factor) {
            return Err(CliError::Config(format!(
                "scene.size {size} is not divisible by the codec factor {}",
                spec.spatial_factor
            )));
        }
        Ok(spec)
    }

    pub fn mask_params(&self) -> Result<ToyMaskParams, CliError> {
        let p = ToyMaskParams {
            size: self.get("scene.size")?,
            num_classes: self.get("scene.classes")?,
            num_regions: self.get("scene.regions")?,
            num_instances: self.get("scene.instances")?,
        };
        if !(2..=256).contains(&p.num_classes) {
            return Err(CliError::Config("scene.classes must be in 2..=256".into()));
        }
        if p.size == 0 || p.num_regions == 0 {
            return Err(CliError::Config(
                "scene.size and scene.regions must be positive".into(),
            ));
        }
        Ok(p)
    }

    pub fn palette(&self) -> Result<Palette, CliError> {
        Ok(Palette::land_cover(self.mask_params()?.num_classes))
    }

    pub fn scene_spec(&self) -> Result<ToySceneSpec, CliError> {
        let spec = ToySceneSpec {
            texture_amplitude: self.get("scene.texture_amplitude")?,
            texture_wavelength: self.get("scene.texture_wavelength")?,
            ..ToySceneSpec::from_palette(&self.palette()?, self.get("scene.noise")?)
        };
        spec.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig, CliError> {
        let codec = self.codec()?;
        Ok(DenoiserConfig {
            latent_channels: codec.latent_channels,
            num_classes: self.mask_params()?.num_classes,
            base_channels: self.get("denoiser.base_channels")?,
            depth: self.get("denoiser.depth")?,
            kernel: self.get("denoiser.kernel")?,
            time_embed_dim: self.get("denoiser.time_embed_dim")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let optimizer = OptimizerConfig::new(
            self.get("train.learning_rate")?,
            self.get("train.weight_decay")?,
        );
        optimizer
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(TrainConfig {
            steps: self.get("train.steps")?,
            batch_size: self.get("train.batch_size")?,
            optimizer,
        })
    }

    pub fn event_params(&self) -> Result<EventParams, CliError> {
        Ok(EventParams {
            min_area: self.get("events.min_area")?,
            max_area_fraction: self.get("events.max_area_fraction")?,
            max_attempts: self.get("events.max_attempts")?,
        })
    }

    pub fn dataset_config(&self, schedule: &NoiseSchedule) -> Result<DatasetConfig, CliError> {
        let total = schedule.total_steps();
        let sampler: SamplerKind = self
            .raw("generate.sampler")
            .parse()
            .map_err(|e: String| CliError::Config(e))?;
        let generation = GenerationConfig {
            n_max: self.step_or_auto("generate.n_max", total)?,
            n_min: self.step_or_auto("generate.n_min", total / 4)?,
            sampler,
            ddim_substeps: self.get("generate.ddim_substeps")?,
            eta: self.get("generate.eta")?,
            blend_at_zero: self.get("generate.blend_at_zero")?,
            dilate_radius: self.get("generate.dilate_radius")?,
            seed: self.seed()?,
        };
        generation
            .validate(schedule)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(DatasetConfig {
            generation,
            events: self.event_params()?,
            max_mask_draws: self.get("events.max_mask_draws")?,
        })
    }

    pub fn real_config(&self) -> Result<RealToyConfig, CliError> {
        let seasonal_shift: Vec<f64> = self.list("real.seasonal_shift")?;
        if seasonal_shift.len() != IMAGE_CHANNELS {
            return Err(CliError::Config(format!(
                "real.seasonal_shift needs {IMAGE_CHANNELS} values"
            )));
        }
        Ok(RealToyConfig {
            masks: self.mask_params()?,
            scene: self.scene_spec()?,
            seasonal_shift,
            events: self.event_params()?,
            max_mask_draws: self.get("events.max_mask_draws")?,
        })
    }

    pub fn transfer_config(&self) -> Result<TransferConfig, CliError> {
        let wd: f64 = self.get("eval.weight_decay")?;
        let batch_size = self.get("eval.batch_size")?;
        let change_weight = self.get("eval.change_weight")?;
        let stage = |steps: &str, lr: &str| -> Result<CdTrainConfig, CliError> {
            Ok(CdTrainConfig {
                steps: self.get(steps)?,
                batch_size,
                optimizer: OptimizerConfig::new(self.get(lr)?, wd),
                change_weight,
            })
        };
        Ok(TransferConfig {
            ratios: self.list("eval.ratios")?,
            seeds: self.list("eval.seeds")?,
            test_fraction: self.get("eval.test_fraction")?,
            hidden_channels: self.get("eval.hidden_channels")?,
            pretrain: stage("eval.pretrain_steps", "eval.pretrain_learning_rate")?,
            finetune: stage("eval.finetune_steps", "eval.finetune_learning_rate")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_a_seed() {
        let cfg = RunConfig::resolve(Some("seed = 3\n"), &[]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 3);
        assert_eq!(cfg.schedule().unwrap().total_steps(), 200);
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::resolve(Some(&text), &[]).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let err = RunConfig::resolve(Some("train.steps = 3"), &[]).unwrap_err();
        assert!(err.to_string().contains("`seed`"), "{err}");
        let err = RunConfig::resolve(Some("seed = 1\nbogus = 2"), &[]).unwrap_err();
        assert!(err.to_string().contains("`bogus`"), "{err}");
        let err = RunConfig::resolve(Some("seed = 1"), &["nope=1".into()]).unwrap_err();
        assert!(err.to_string().contains("`nope`"), "{err}");
    }

    #[test]
    fn overrides_win_and_change_the_hash() {
        let base = RunConfig::resolve(Some("seed = 1\ntrain.steps = 10 # short"), &[]).unwrap();
        assert_eq!(base.get::<usize>("train.steps").unwrap(), 10);
        let o = RunConfig::resolve(
            Some("seed = 1\ntrain.steps = 10"),
            &["train.steps=20".into()],
        )
        .unwrap();
        assert_eq!(o.get::<usize>("train.steps").unwrap(), 20);
        assert_ne!(base.hash(), o.hash());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn bad_values_fail_early() {
        for bad in [
            "schedule.beta_end = 2",
            "codec.kind = jpeg",
            "generate.sampler = euler",
            "generate.n_min = 500",
            "real.seasonal_shift = 1,2",
            "scene.size = 30\ncodec.kind = pool4",
            "seed = -1",
        ] {
            let text = format!("seed = 1\n{bad}");
            let text = text.replacen("seed = 1\nseed = -1", "seed = -1", 1);
            assert!(RunConfig::resolve(Some(&text), &[]).is_err(), "{bad}");
        }
        assert!(RunConfig::resolve(Some("seed = 1\nseed = 2"), &[]).is_err());
    }
}
