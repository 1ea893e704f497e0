//! Run configuration: a plain-text `key = value` format with dotted
//! sections. Parsing starts from the defaults and applies overrides; unknown
//! keys are rejected with their full path. Serialization is canonical (every
//! key, fixed order), so a config embedded in a checkpoint is bit-stable.

use crate::data_eval::SyntheticSpec;
use crate::diffusion::DiffusionSchedule;
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::posenc::{PEConfig, Strategy};
use crate::rpe2d::RpeVariant;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub pe_strategy: Strategy,
    pub pe_base: f64,

    pub rpe_variant: RpeVariant,
    pub rpe_max_h: usize,
    pub rpe_max_w: usize,

    pub aug_enabled: bool,
    pub aug_p_resize: f64,
    pub aug_min_crop_frac: f64,

    pub cond_dim_per_scalar: usize,

    pub model_patch: usize,
    pub model_channels: usize,
    pub model_dim: usize,
    pub model_heads: usize,
    pub model_depth: usize,
    pub model_classes: usize,
    pub model_cond_width: usize,

    pub diffusion_timesteps: usize,
    pub diffusion_beta_start: f64,
    pub diffusion_beta_end: f64,

    pub train_steps: u64,
    pub train_batch_size: usize,
    pub train_image_size: usize,
    pub train_lr: f64,
    pub train_cfg_drop: f64,
    pub train_checkpoint_interval: u64,

    pub data_class_count: usize,
    pub data_source_size: usize,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a 4-block, 64-dim model on 16x16 images with an
    /// 8x randomization range.
    fn default() -> Self {
        RunConfig {
            seed: 42,
            pe_strategy: Strategy::Rpe2d,
            pe_base: 10000.0,
            rpe_variant: RpeVariant::Grid,
            rpe_max_h: 64,
            rpe_max_w: 64,
            aug_enabled: true,
            aug_p_resize: 0.5,
            aug_min_crop_frac: 0.5,
            cond_dim_per_scalar: 32,
            model_patch: 2,
            model_channels: 1,
            model_dim: 64,
            model_heads: 4,
            model_depth: 4,
            model_classes: 8,
            model_cond_width: 256,
            diffusion_timesteps: 1000,
            diffusion_beta_start: 1e-4,
            diffusion_beta_end: 2e-2,
            train_steps: 2000,
            train_batch_size: 16,
            train_image_size: 16,
            train_lr: 1e-4,
            train_cfg_drop: 0.1,
            train_checkpoint_interval: 1000,
            data_class_count: 8,
            data_source_size: 32,
        }
    }
}

impl RunConfig {
    /// Parse overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CoreError::Config(format!("{key}: invalid value '{v}'")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(CoreError::Config(format!(
                    "{key}: expected true|false, got '{v}'"
                ))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "pe.strategy" => self.pe_strategy = Strategy::parse(value)?,
            "pe.base" => self.pe_base = num(key, value)?,
            "rpe.variant" => self.rpe_variant = RpeVariant::parse(value)?,
            "rpe.max_h" => self.rpe_max_h = num(key, value)?,
            "rpe.max_w" => self.rpe_max_w = num(key, value)?,
            "aug.enabled" => self.aug_enabled = boolean(key, value)?,
            "aug.p_resize" => self.aug_p_resize = num(key, value)?,
            "aug.min_crop_frac" => self.aug_min_crop_frac = num(key, value)?,
            "cond.dim_per_scalar" => self.cond_dim_per_scalar = num(key, value)?,
            "model.patch" => self.model_patch = num(key, value)?,
            "model.channels" => self.model_channels = num(key, value)?,
            "model.dim" => self.model_dim = num(key, value)?,
            "model.heads" => self.model_heads = num(key, value)?,
            "model.depth" => self.model_depth = num(key, value)?,
            "model.classes" => self.model_classes = num(key, value)?,
            "model.cond_width" => self.model_cond_width = num(key, value)?,
            "diffusion.timesteps" => self.diffusion_timesteps = num(key, value)?,
            "diffusion.beta_start" => self.diffusion_beta_start = num(key, value)?,
            "diffusion.beta_end" => self.diffusion_beta_end = num(key, value)?,
            "train.steps" => self.train_steps = num(key, value)?,
            "train.batch_size" => self.train_batch_size = num(key, value)?,
            "train.image_size" => self.train_image_size = num(key, value)?,
            "train.lr" => self.train_lr = num(key, value)?,
            "train.cfg_drop" => self.train_cfg_drop = num(key, value)?,
            "train.checkpoint_interval" => self.train_checkpoint_interval = num(key, value)?,
            "data.class_count" => self.data_class_count = num(key, value)?,
            "data.source_size" => self.data_source_size = num(key, value)?,
            other => {
                return Err(CoreError::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\n\
             pe.strategy = {}\n\
             pe.base = {}\n\
             rpe.variant = {}\n\
             rpe.max_h = {}\n\
             rpe.max_w = {}\n\
             aug.enabled = {}\n\
             aug.p_resize = {}\n\
             aug.min_crop_frac = {}\n\
             cond.dim_per_scalar = {}\n\
             model.patch = {}\n\
             model.channels = {}\n\
             model.dim = {}\n\
             model.heads = {}\n\
             model.depth = {}\n\
             model.classes = {}\n\
             model.cond_width = {}\n\
             diffusion.timesteps = {}\n\
             diffusion.beta_start = {}\n\
             diffusion.beta_end = {}\n\
             train.steps = {}\n\
             train.batch_size = {}\n\
             train.image_size = {}\n\
             train.lr = {}\n\
             train.cfg_drop = {}\n\
             train.checkpoint_interval = {}\n\
             data.class_count = {}\n\
             data.source_size = {}\n",
            self.seed,
            self.pe_strategy.as_str(),
            self.pe_base,
            self.rpe_variant.as_str(),
            self.rpe_max_h,
            self.rpe_max_w,
            self.aug_enabled,
            self.aug_p_resize,
            self.aug_min_crop_frac,
            self.cond_dim_per_scalar,
            self.model_patch,
            self.model_channels,
            self.model_dim,
            self.model_heads,
            self.model_depth,
            self.model_classes,
            self.model_cond_width,
            self.diffusion_timesteps,
            self.diffusion_beta_start,
            self.diffusion_beta_end,
            self.train_steps,
            self.train_batch_size,
            self.train_image_size,
            self.train_lr,
            self.train_cfg_drop,
            self.train_checkpoint_interval,
            self.data_class_count,
            self.data_source_size,
        )
    }

    /// Patch-grid extent at the training resolution.
    pub fn train_grid(&self) -> usize {
        self.train_image_size / self.model_patch
    }

    pub fn pe_config(&self) -> PEConfig {
        let g = self.train_grid();
        PEConfig {
            d: self.model_dim / self.model_heads.max(1),
            base: self.pe_base,
            max_h: self.rpe_max_h,
            max_w: self.rpe_max_w,
            strategy: self.pe_strategy,
            h_train: g,
            w_train: g,
            h_test: g,
            w_test: g,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch: self.model_patch,
            channels: self.model_channels,
            dim: self.model_dim,
            heads: self.model_heads,
            depth: self.model_depth,
            classes: self.model_classes,
            pe: self.pe_config(),
            cond_width: self.model_cond_width,
            dim_per_scalar: self.cond_dim_per_scalar,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(
            self.diffusion_timesteps,
            self.diffusion_beta_start,
            self.diffusion_beta_end,
        )
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        SyntheticSpec::new(self.data_class_count, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_patch == 0 || !self.train_image_size.is_multiple_of(self.model_patch) {
            return Err(CoreError::Config(format!(
                "train.image_size {} must be divisible by model.patch {}",
                self.train_image_size, self.model_patch
            )));
        }
        if self.train_image_size < 2 {
            return Err(CoreError::Config("train.image_size must be >= 2".into()));
        }
        if self.data_source_size < self.train_image_size {
            return Err(CoreError::Config(format!(
                "data.source_size {} must cover train.image_size {}",
                self.data_source_size, self.train_image_size
            )));
        }
        if self.train_batch_size == 0 {
            return Err(CoreError::Config("train.batch_size must be >= 1".into()));
        }
        if self.train_checkpoint_interval == 0 {
            return Err(CoreError::Config(
                "train.checkpoint_interval must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.aug_p_resize) {
            return Err(CoreError::Config(format!(
                "aug.p_resize {} must lie in [0, 1]",
                self.aug_p_resize
            )));
        }
        if !(self.aug_min_crop_frac > 0.0 && self.aug_min_crop_frac <= 1.0) {
            return Err(CoreError::Config(format!(
                "aug.min_crop_frac {} must lie in (0, 1]",
                self.aug_min_crop_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.train_cfg_drop) {
            return Err(CoreError::Config(format!(
                "train.cfg_drop {} must lie in [0, 1]",
                self.train_cfg_drop
            )));
        }
        if self.train_lr.is_nan() || self.train_lr <= 0.0 {
            return Err(CoreError::Config("train.lr must be positive".into()));
        }
        if self.data_class_count > self.model_classes {
            return Err(CoreError::Config(format!(
                "data.class_count {} exceeds model.classes {}",
                self.data_class_count, self.model_classes
            )));
        }
        self.synthetic_spec()?;
        self.model_config().validate()?;
        self.schedule()?;
        Ok(())
    }
}
