//! Flat `key = value` configuration with `spectral.*`, `encoder.*`, `gan.*`,
//! `loss.*`, `sim.*` and `adapt.*` sections.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::discriminator::DiscriminatorConfig;
use crate::encoders::StandinConfig;
use crate::error::{Error, Result};
use crate::generator::{FusionStrategy, GeneratorConfig};
use crate::objectives::{L1Reduction, LossWeights};
use crate::spectral::DEFAULT_LOG_FLOOR;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncoderSettings {
    pub standin: StandinConfig,
    pub lr: f64,
    pub head_lr_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub held_out_channels: Vec<String>,
    pub noise_cmd: Option<String>,
    pub channel_cmd: Option<String>,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            standin: StandinConfig::default(),
            lr: 1e-4,
            head_lr_ratio: 10.0,
            epochs: 30,
            batch_size: 8,
            val_fraction: 0.25,
            held_out_channels: Vec::new(),
            noise_cmd: None,
            channel_cmd: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Write a checkpoint every this many epochs (the last epoch always).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            n_source: 40,
            n_target: 40,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("gan.epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("gan.lr must be positive, got {}", self.lr)));
        }
        if self.n_source != self.n_target {
            return Err(Error::InvalidConfig(format!(
                "balanced sampling needs n_source == n_target ({} vs {})",
                self.n_source, self.n_target
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("gan.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub sigma: f64,
    pub perturb_noise: bool,
    pub perturb_channel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            perturb_noise: true,
            perturb_channel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub base_channels: usize,
    pub metric_cmd: Option<String>,
    pub asr_cmd: Option<String>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            base_channels: 24,
            metric_cmd: None,
            asr_cmd: None,
        }
    }
}

/// Everything the pipeline verbs read.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Config {
    pub log_floor: f64,
    pub encoder: EncoderSettings,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Feed the generator zeros instead of the noise embedding.
    pub use_noise_embedding: bool,
    /// Feed the generator zeros instead of the channel embedding.
    pub use_channel_embedding: bool,
    pub sim: SimConfig,
    pub adapt: AdaptConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            log_floor: DEFAULT_LOG_FLOOR,
            encoder: EncoderSettings::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            use_noise_embedding: true,
            use_channel_embedding: true,
            sim: SimConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn opt_string(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

impl Config {
    /// Small networks that train in minutes on one CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.encoder.standin = StandinConfig {
            channels: vec![8, 16, 16, 16],
            projected_dim: 32,
            ..StandinConfig::default()
        };
        c.encoder.lr = 1e-3;
        c.generator = GeneratorConfig {
            base_channels: 4,
            n_resblocks: 2,
            embedding_dim: 32,
            global_skip: true,
            ..GeneratorConfig::default()
        };
        c.discriminator.base_channels = 4;
        c.loss.n_queries = 64;
        c.loss.n_layers = 4;
        c.loss.non_saturating = true;
        c.train.epochs = 10;
        c.train.checkpoint_every = 5;
        c.train.lr = 1e-3;
        c.adapt.base_channels = 8;
        c.adapt.epochs = 8;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.sim.sigma < 0.0 {
            return Err(Error::NegativeSigma(self.sim.sigma));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("spectral.log_floor must be positive".into()));
        }
        if self.encoder.standin.projected_dim != self.generator.embedding_dim
            && self.encoder.noise_cmd.is_none()
            && self.encoder.channel_cmd.is_none()
        {
            return Err(Error::EncoderDimMismatch {
                expected: self.generator.embedding_dim,
                found: self.encoder.standin.projected_dim,
            });
        }
        Ok(())
    }

    /// Set one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "spectral.log_floor" => self.log_floor = parse(key, v)?,

            "encoder.channels" => self.encoder.standin.channels = parse_list(key, v)?,
            "encoder.dim" => {
                let d = parse(key, v)?;
                self.encoder.standin.projected_dim = d;
                self.generator.embedding_dim = d;
            }
            "encoder.input_shift" => self.encoder.standin.input_shift = parse(key, v)?,
            "encoder.input_scale" => self.encoder.standin.input_scale = parse(key, v)?,
            "encoder.lr" => self.encoder.lr = parse(key, v)?,
            "encoder.head_lr_ratio" => self.encoder.head_lr_ratio = parse(key, v)?,
            "encoder.epochs" => self.encoder.epochs = parse(key, v)?,
            "encoder.batch_size" => self.encoder.batch_size = parse(key, v)?,
            "encoder.val_fraction" => self.encoder.val_fraction = parse(key, v)?,
            "encoder.held_out_channels" => self.encoder.held_out_channels = parse_list(key, v)?,
            "encoder.external_cmd" => {
                self.encoder.noise_cmd = opt_string(v);
                self.encoder.channel_cmd = opt_string(v);
            }
            "encoder.noise_cmd" => self.encoder.noise_cmd = opt_string(v),
            "encoder.channel_cmd" => self.encoder.channel_cmd = opt_string(v),

            "gan.base_channels" => self.generator.base_channels = parse(key, v)?,
            "gan.n_resblocks" => self.generator.n_resblocks = parse(key, v)?,
            "gan.dropout_rate" => self.generator.dropout_rate = parse(key, v)?,
            "gan.fusion_strategy" => self.generator.fusion_strategy = FusionStrategy::parse(v)?,
            "gan.global_skip" => self.generator.global_skip = parse_bool(key, v)?,
            "gan.d_base_channels" => self.discriminator.base_channels = parse(key, v)?,
            "gan.spectral_norm" => self.discriminator.use_spectral_norm = parse_bool(key, v)?,
            "gan.leaky_slope" => self.discriminator.leaky_slope = parse(key, v)?,
            "gan.epochs" => self.train.epochs = parse(key, v)?,
            "gan.lr" => self.train.lr = parse(key, v)?,
            "gan.adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "gan.adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "gan.batch_size" => self.train.batch_size = parse(key, v)?,
            "gan.n_source" => self.train.n_source = parse(key, v)?,
            "gan.n_target" => self.train.n_target = parse(key, v)?,
            "gan.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "gan.use_noise_embedding" => self.use_noise_embedding = parse_bool(key, v)?,
            "gan.use_channel_embedding" => self.use_channel_embedding = parse_bool(key, v)?,

            "loss.lambda_nr" => self.loss.lambda_nr = parse(key, v)?,
            "loss.lambda_cc" => self.loss.lambda_cc = parse(key, v)?,
            "loss.gp_gamma" => self.loss.gp_gamma = parse(key, v)?,
            "loss.tau" => self.loss.tau = parse(key, v)?,
            "loss.n_queries" => self.loss.n_queries = parse(key, v)?,
            "loss.n_layers" => self.loss.n_layers = parse(key, v)?,
            "loss.l1_reduction" => {
                self.loss.l1_reduction = match v {
                    "mean" => L1Reduction::Mean,
                    "sum" => L1Reduction::Sum,
                    _ => return Err(Error::InvalidConfig(format!("{key}: expected mean|sum, got `{v}`"))),
                }
            }
            "loss.non_saturating" => self.loss.non_saturating = parse_bool(key, v)?,

            "sim.sigma" => self.sim.sigma = parse(key, v)?,
            "sim.perturb_noise" => self.sim.perturb_noise = parse_bool(key, v)?,
            "sim.perturb_channel" => self.sim.perturb_channel = parse_bool(key, v)?,

            "adapt.epochs" => self.adapt.epochs = parse(key, v)?,
            "adapt.lr" => self.adapt.lr = parse(key, v)?,
            "adapt.base_channels" => self.adapt.base_channels = parse(key, v)?,
            "adapt.metric_cmd" => self.adapt.metric_cmd = opt_string(v),
            "adapt.asr_cmd" => self.adapt.asr_cmd = opt_string(v),

            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment;
    /// a `preset = desk` line resets to [`Config::desk`] first.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if k == "preset" {
                *self = match v.trim() {
                    "desk" => Self::desk(),
                    "default" => Self::default(),
                    other => return Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
                };
                continue;
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_str_kv(&text)
    }
}
