//! Training configuration in a flat `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::losses::LossWeights;
use crate::models::{DiscriminatorConfig, GeneratorConfig, SCALE};

/// Largest supported worker count.
pub const MAX_WORKERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Generator-only training on the content loss.
    Resnet,
    /// Adversarial fine-tuning.
    Gan,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Resnet => "resnet",
            Phase::Gan => "gan",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Phase::Resnet),
            "gan" => Ok(Phase::Gan),
            other => Err(Error::Config(format!("unknown phase `{other}` (expected resnet or gan)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Global steps to run in one invocation.
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// LR crop side; HR crops are `4 × crop_size`.
    pub crop_size: usize,
    pub pool_size: usize,
    pub workers: usize,
    pub seed: u64,
    pub lambda_adv: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub generator: GeneratorConfig,
    pub disc_features: usize,
    pub disc_dense: usize,
    pub disc_attention: bool,
    pub disc_spectral_norm: bool,
    pub batch_norm: BnMode,
    pub content_weight: f64,
    pub vgg_factor: f64,
    pub barrier_timeout_ms: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Resnet,
            steps: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            crop_size: 24,
            pool_size: 1,
            workers: 1,
            seed: 0,
            lambda_adv: 1e-3,
            checkpoint_interval: 0,
            generator: GeneratorConfig {
                residual_blocks: 4,
                features: 32,
                ..GeneratorConfig::default()
            },
            disc_features: 32,
            disc_dense: 256,
            disc_attention: true,
            disc_spectral_norm: true,
            batch_norm: BnMode::Train,
            content_weight: 1.0,
            vgg_factor: 0.0061,
            barrier_timeout_ms: 600_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        match key {
            "phase" => self.phase = value.parse()?,
            "steps" => self.steps = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop_size" => self.crop_size = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lambda_adv" => self.lambda_adv = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "residual_blocks" => g.residual_blocks = parse(key, value)?,
            "features" => g.features = parse(key, value)?,
            "use_attention" => g.use_attention = parse(key, value)?,
            "attention_position" => {
                g.attention_position = match value {
                    "end" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "use_spectral_norm" => g.use_spectral_norm = parse(key, value)?,
            "disc_features" => self.disc_features = parse(key, value)?,
            "disc_dense" => self.disc_dense = parse(key, value)?,
            "disc_attention" => self.disc_attention = parse(key, value)?,
            "disc_spectral_norm" => self.disc_spectral_norm = parse(key, value)?,
            "batch_norm" => {
                self.batch_norm = match value {
                    "train" => BnMode::Train,
                    "eval" => BnMode::Eval,
                    _ => return Err(Error::Config(format!("batch_norm must be train or eval, got `{value}`"))),
                }
            }
            "content_weight" => self.content_weight = parse(key, value)?,
            "vgg_factor" => self.vgg_factor = parse(key, value)?,
            "barrier_timeout_ms" => self.barrier_timeout_ms = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.workers == 0 || self.workers > MAX_WORKERS {
            return Err(Error::Config(format!("workers must be in 1..={MAX_WORKERS}")));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.workers) {
            return Err(Error::Config(format!(
                "batch size {} is not divisible by {} workers",
                self.batch_size, self.workers
            )));
        }
        if self.crop_size == 0 || self.pool_size == 0 {
            return Err(Error::Config("crop and pool sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config("lambda_adv must be finite and non-negative".into()));
        }
        if self.barrier_timeout_ms == 0 {
            return Err(Error::Config("barrier_timeout_ms must be positive".into()));
        }
        self.loss_weights().validate()?;
        self.generator.validate()?;
        if self.generator.use_attention && !self.generator.features.is_multiple_of(crate::attention::REDUCTION) {
            return Err(Error::Config(format!(
                "features {} must be divisible by {} for attention",
                self.generator.features,
                crate::attention::REDUCTION
            )));
        }
        if self.phase == Phase::Gan {
            self.discriminator().validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            features: self.disc_features,
            dense_features: self.disc_dense,
            input_size: SCALE * self.crop_size,
            use_attention: self.disc_attention,
            use_spectral_norm: self.disc_spectral_norm,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            content_weight: self.content_weight,
            adversarial_weight: self.lambda_adv,
            vgg_factor: self.vgg_factor,
        }
    }

    /// Resolved configuration; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("phase", self.phase.as_str().into());
        kv("steps", self.steps.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("pool_size", self.pool_size.to_string());
        kv("workers", self.workers.to_string());
        kv("seed", self.seed.to_string());
        kv("lambda_adv", format!("{:?}", self.lambda_adv));
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("residual_blocks", g.residual_blocks.to_string());
        kv("features", g.features.to_string());
        kv("use_attention", g.use_attention.to_string());
        kv(
            "attention_position",
            g.attention_position.map_or("end".into(), |p| p.to_string()),
        );
        kv("use_spectral_norm", g.use_spectral_norm.to_string());
        kv("disc_features", self.disc_features.to_string());
        kv("disc_dense", self.disc_dense.to_string());
        kv("disc_attention", self.disc_attention.to_string());
        kv("disc_spectral_norm", self.disc_spectral_norm.to_string());
        kv(
            "batch_norm",
            match self.batch_norm {
                BnMode::Train => "train".into(),
                BnMode::Eval => "eval".into(),
            },
        );
        kv("content_weight", format!("{:?}", self.content_weight));
        kv("vgg_factor", format!("{:?}", self.vgg_factor));
        kv("barrier_timeout_ms", self.barrier_timeout_ms.to_string());
        s
    }
}
