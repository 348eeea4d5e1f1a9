//! Training configuration. Files are flat `key = value` TOML; every key is optional and
//! unknown keys are rejected. The optional `profile` key (`desk` or `full`) selects the
//! base values that the remaining keys override.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, DEFAULT_LAMBDA_GP};
use crate::channel::{parse_channel_list, ChannelSpec};
use crate::error::{CisError, Result};
use crate::extractor::ExtractorConfig;
use crate::generator::{GeneratorConfig, Upsample};
use crate::message::MappingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Narrow networks and short runs for CPU-scale experiments.
    #[default]
    Desk,
    /// Full-width networks (512-wide latents and mapping layers) and long runs.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = CisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(CisError::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub n_bits: usize,
    pub expression: bool,
    /// Loss weights; `None` picks the mode default (see [`TrainConfig::lambdas`]).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda5: Option<f64>,
    pub lambda_gp: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub critic_steps: usize,
    /// Training channel set, sampled uniformly once per mini-batch.
    pub channels: Vec<String>,
    /// `lambda4` is switched off once the moving average of the attribute loss drops below this.
    pub att_threshold: f64,
    pub att_ema_decay: f64,
    pub upsample: Upsample,
    pub noise: bool,
    /// `sprites` or a directory of images.
    pub dataset: String,
    pub dataset_size: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub mapping_width: usize,
    pub fusion_layers: usize,
    pub gen_channels: [usize; 4],
    pub disc_channels: [usize; 4],
    pub ext_channels: [usize; 4],
    pub ext_hidden: usize,
    pub log_every: u64,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub adv_d: f64,
    pub att_d: f64,
    pub adv_g: f64,
    pub att_g: f64,
    pub ext: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            n_bits: 8,
            expression: false,
            lambda1: None,
            lambda2: None,
            lambda3: None,
            lambda4: None,
            lambda5: None,
            lambda_gp: DEFAULT_LAMBDA_GP,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_steps: 5000,
            critic_steps: 1,
            channels: ["identity", "jpeg:90", "jpeg:80", "jpeg:70", "jpeg:60", "jpeg:50"]
                .map(String::from)
                .to_vec(),
            att_threshold: 0.4,
            att_ema_decay: 0.99,
            upsample: Upsample::Nearest,
            noise: true,
            dataset: "sprites".into(),
            dataset_size: 5000,
            latent_dim: 64,
            mapping_layers: 4,
            mapping_width: 64,
            fusion_layers: 2,
            gen_channels: [32, 32, 16, 8],
            disc_channels: [16, 32, 32, 64],
            ext_channels: [16, 32, 64, 64],
            ext_hidden: 128,
            log_every: 50,
            checkpoint_every: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            n_bits: 16,
            max_steps: 200_000,
            dataset_size: 50_000,
            latent_dim: 512,
            mapping_width: 512,
            gen_channels: [512, 256, 128, 64],
            disc_channels: [64, 128, 256, 512],
            ext_channels: [64, 128, 256, 512],
            ext_hidden: 512,
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| CisError::Config(format!("{e}")))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(CisError::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| CisError::Config(format!("{e}")))?;
        merged.extend(user);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CisError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CisError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolved loss weights: `(1, 0, 1, 0, 10)` without expression control and
    /// `(1, 1, 2, 0.1, 10)` with it, each overridable.
    pub fn lambdas(&self) -> Lambdas {
        let (d2, d3, d4) = if self.expression { (1.0, 2.0, 0.1) } else { (0.0, 1.0, 0.0) };
        Lambdas {
            adv_d: self.lambda1.unwrap_or(1.0),
            att_d: self.lambda2.unwrap_or(d2),
            adv_g: self.lambda3.unwrap_or(d3),
            att_g: self.lambda4.unwrap_or(d4),
            ext: self.lambda5.unwrap_or(10.0),
        }
    }

    pub fn channel_specs(&self) -> Result<Vec<ChannelSpec>> {
        let specs = self
            .channels
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<ChannelSpec>>>()?;
        if specs.is_empty() {
            return Err(CisError::Config("channel set is empty".into()));
        }
        Ok(specs)
    }

    pub fn set_channels(&mut self, list: &str) -> Result<()> {
        self.channels = parse_channel_list(list)?.iter().map(ToString::to_string).collect();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CisError::Config(m));
        if !(1..=64).contains(&self.n_bits) {
            return err(format!("n_bits {} outside 1..=64", self.n_bits));
        }
        let l = self.lambdas();
        for (name, v) in [
            ("lambda1", l.adv_d),
            ("lambda2", l.att_d),
            ("lambda3", l.adv_g),
            ("lambda4", l.att_g),
            ("lambda5", l.ext),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1".into());
        }
        if self.critic_steps < 1 {
            return err("critic_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.att_ema_decay) {
            return err("att_ema_decay must lie in [0, 1)".into());
        }
        if self.latent_dim < 1 || self.mapping_layers < 1 || self.fusion_layers < 1 || self.mapping_width < 1 {
            return err("mapping sizes must be positive".into());
        }
        let widths = self.gen_channels.iter().chain(&self.disc_channels).chain(&self.ext_channels);
        if widths.chain(std::iter::once(&self.ext_hidden)).any(|&c| c == 0) {
            return err("channel widths must be positive".into());
        }
        self.channel_specs()?;
        Ok(())
    }

    pub fn mapping_config(&self) -> MappingConfig {
        MappingConfig {
            n_bits: self.n_bits,
            latent_dim: self.latent_dim,
            layers: self.mapping_layers,
            width: self.mapping_width,
            fusion_layers: self.fusion_layers,
            expression: self.expression,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            channels: self.gen_channels,
            upsample: self.upsample,
            noise: self.noise,
        }
    }

    pub fn adversary_config(&self) -> AdversaryConfig {
        AdversaryConfig {
            channels: self.disc_channels,
            attribute_head: self.expression,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            n_bits: self.n_bits,
            channels: self.ext_channels,
            hidden: self.ext_hidden,
        }
    }
}
