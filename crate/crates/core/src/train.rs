//! The training loop: per-sample data synthesis, augmentation, position
//! randomization, diffusion noising, and AdamW updates.
//!
//! All per-sample randomness derives from `(seed, step, slot)`, so a batch
//! is reproducible regardless of batch size splits or thread count, and
//! resuming from a checkpoint continues the exact same stream.

use crate::checkpoint::Checkpoint;
use crate::conditioning::{self, MicroCondition};
use crate::config::RunConfig;
use crate::data_eval;
use crate::diffusion::DiffusionSchedule;
use crate::error::{CoreError, Result};
use crate::model::{train_positions, BatchItem, DiffusionTransformer, ScaleMode};
use crate::numerics::{AdamW, Tensor};
use crate::rng::SeededRng;

/// Assemble the batch for one step. Draw order per slot: class, source
/// image, augmentation, positions, timestep, noise, guidance drop.
pub fn build_batch(run: &RunConfig, step: u64) -> Result<(Vec<BatchItem>, Vec<Tensor<f32>>)> {
    let spec = run.synthetic_spec()?;
    let schedule = run.schedule()?;
    let pe = run.pe_config();
    let grid = run.train_grid();
    let target = run.train_image_size;
    let mut items = Vec::with_capacity(run.train_batch_size);
    let mut targets = Vec::with_capacity(run.train_batch_size);

    for slot in 0..run.train_batch_size {
        let mut rng = SeededRng::derive(run.seed, step, slot as u64);
        let class = rng.gen_below(run.data_class_count as u64) as usize;
        let source = data_eval::generate(&spec, class, run.data_source_size, &mut rng)?;

        let (image, cond) = if run.aug_enabled {
            let aug = conditioning::augment(
                &source,
                class,
                target * target,
                run.aug_p_resize,
                run.aug_min_crop_frac,
                &mut rng,
            )?;
            (aug.image, aug.cond)
        } else {
            let resized = conditioning::bilinear_resize(&source, target, target)?;
            let s = run.data_source_size as u32;
            let cond = MicroCondition {
                original: (s, s),
                crop: (0, 0, s, s),
                resize: (target as u32, target as u32),
            };
            (resized, cond)
        };

        let positions = train_positions(&pe, run.rpe_variant, grid, grid, &mut rng)?;
        let t = rng.gen_below(schedule.timesteps as u64) as usize;
        let noise = Tensor::new(
            image.shape().to_vec(),
            (0..image.numel())
                .map(|_| rng.next_standard_normal())
                .collect(),
        )?;
        let x_t = schedule.q_sample(&image, t, &noise)?;
        let label = if rng.next_f64() < run.train_cfg_drop {
            None
        } else {
            Some(class)
        };

        items.push(BatchItem {
            image: x_t,
            t,
            label,
            cond,
            positions,
        });
        targets.push(noise);
    }
    Ok((items, targets))
}

/// Owns the model, optimizer, and step counter for one run.
pub struct Trainer {
    pub run: RunConfig,
    pub model: DiffusionTransformer,
    pub opt: AdamW,
    pub schedule: DiffusionSchedule,
    pub global_step: u64,
    param_names: Vec<String>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = DiffusionTransformer::init(run.model_config(), run.seed)?;
        let opt = AdamW::new(run.train_lr as f32, &model.params.param_lens());
        let schedule = run.schedule()?;
        let param_names = model.params.names().to_vec();
        Ok(Trainer {
            run,
            model,
            opt,
            schedule,
            global_step: 0,
            param_names,
        })
    }

    /// One optimization step; returns the batch loss.
    pub fn step_once(&mut self) -> Result<f32> {
        let (items, targets) = build_batch(&self.run, self.global_step)?;
        let (loss, grads) = self
            .model
            .loss_and_grads(&items, &targets, ScaleMode::Train)?;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "loss at step {}",
                self.global_step
            )));
        }
        self.opt
            .step(&self.param_names, self.model.params.values_mut(), &grads)?;
        self.global_step += 1;
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.run.to_text(),
            params: self.model.params.clone(),
            opt: self.opt.clone(),
            global_step: self.global_step,
            base_seed: self.run.seed,
            // stream position marker: where (seed, step) derivation stands
            rng_state: SeededRng::derive(self.run.seed, self.global_step, 0).state(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let run = RunConfig::parse(&ck.config_text)?;
        let mut trainer = Self::new(run)?;
        // stored parameters must match the architecture the config builds
        if trainer.model.params.names() != ck.params.names() {
            return Err(CoreError::Persistence(
                "checkpoint parameters do not match the config architecture".into(),
            ));
        }
        for i in 0..ck.params.len() {
            if trainer.model.params.shape(i) != ck.params.shape(i) {
                return Err(CoreError::Persistence(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    ck.params.name(i),
                    ck.params.shape(i),
                    trainer.model.params.shape(i)
                )));
            }
        }
        trainer.model.params = ck.params.clone();
        trainer.opt = ck.opt.clone();
        trainer.global_step = ck.global_step;
        Ok(trainer)
    }
}
