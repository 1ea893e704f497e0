//! Command implementations behind the `rpe2d` binary: train, sample, eval,
//! posviz, sweep. Everything here is a thin orchestration layer over
//! `rpe2d-core`; tests drive these functions directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use rpe2d_core::checkpoint::Checkpoint;
use rpe2d_core::config::RunConfig;
use rpe2d_core::data_eval::{self, EvalReport, ManifestEntry, SyntheticSpec};
use rpe2d_core::diffusion::{self, SampleOptions};
use rpe2d_core::model::{test_token_positions, TokenPositions};
use rpe2d_core::numerics::Tensor;
use rpe2d_core::rng::SeededRng;
use rpe2d_core::rpe2d::{self, RpeVariant};
use rpe2d_core::train::Trainer;

/// Exclusive ownership of a checkpoint directory while training runs.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "training lock {} already exists; another process owns this directory \
                 (delete the file if that process is gone)",
                path.display()
            )),
            Err(e) => Err(e).context("creating training lock"),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Train a model per the config file. Writes interval checkpoints, a final
/// checkpoint, and a `step<TAB>loss` log into `out_dir`.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let run = RunConfig::parse(&text)?;
    train_with_config(run, out_dir)
}

/// [`cmd_train`] with an already-parsed config; returns the final
/// checkpoint path.
pub fn train_with_config(run: RunConfig, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let _lock = DirLock::acquire(out_dir)?;
    let mut trainer = Trainer::new(run.clone())?;

    let ckpt_path = |step: u64| out_dir.join(format!("checkpoint-{step}.ckpt"));
    trainer.to_checkpoint().save(&ckpt_path(0))?;

    let log_path = out_dir.join("loss_log.tsv");
    let mut log = fs::File::create(&log_path)?;
    for _ in 0..run.train_steps {
        let step = trainer.global_step;
        match trainer.step_once() {
            Ok(loss) => {
                writeln!(log, "{step}\t{loss}")?;
                if trainer.global_step % run.train_checkpoint_interval == 0 {
                    trainer
                        .to_checkpoint()
                        .save(&ckpt_path(trainer.global_step))?;
                }
            }
            Err(e) => {
                let emergency = out_dir.join("emergency.ckpt");
                trainer.to_checkpoint().save(&emergency)?;
                bail!(
                    "training aborted at step {step}: {e}; emergency checkpoint at {}",
                    emergency.display()
                );
            }
        }
    }
    let final_path = out_dir.join("final.ckpt");
    trainer.to_checkpoint().save(&final_path)?;
    Ok(final_path)
}

/// Sampling controls for [`cmd_sample`].
#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub resolution: usize,
    pub count: usize,
    /// Sample only this class; otherwise cycle through the data classes.
    pub class: Option<usize>,
    pub steps: usize,
    pub cfg_scale: f32,
    pub shift: bool,
    pub attn_scale: bool,
    pub seed: u64,
}

impl Default for SampleArgs {
    fn default() -> Self {
        SampleArgs {
            resolution: 16,
            count: 8,
            class: None,
            steps: 250,
            cfg_scale: 4.0,
            shift: true,
            attn_scale: true,
            seed: 0,
        }
    }
}

/// Sample images from a checkpoint into `out_dir`: P6 files named by seed
/// and index, a manifest, and a sidecar listing the exact positions used.
pub fn cmd_sample(checkpoint: &Path, out_dir: &Path, args: &SampleArgs) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let run = RunConfig::parse(&ck.config_text)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let mut model = trainer.model;
    let schedule = trainer.schedule;

    if !args.resolution.is_multiple_of(run.model_patch) {
        bail!(
            "resolution {} not divisible by patch {}",
            args.resolution,
            run.model_patch
        );
    }
    let grid_extent = args.resolution / run.model_patch;
    model.cfg.pe.h_test = grid_extent;
    model.cfg.pe.w_test = grid_extent;
    model.cfg.pe.validate()?;
    let positions = test_token_positions(&model.cfg.pe, run.rpe_variant)?;

    fs::create_dir_all(out_dir)?;
    write_positions_sidecar(&out_dir.join("positions.txt"), &positions)?;

    let classes: Vec<usize> = match args.class {
        Some(c) => {
            if c >= run.data_class_count {
                bail!("class {c} outside data classes 0..{}", run.data_class_count);
            }
            vec![c]
        }
        None => (0..run.data_class_count).collect(),
    };

    let opts = SampleOptions {
        steps: args.steps,
        guidance_scale: args.cfg_scale,
        use_shift: args.shift,
        use_attn_scale: args.attn_scale,
        chunk_images: 16,
    };

    let mut written = Vec::new();
    let mut entries = Vec::new();
    for &class in &classes {
        let labels = vec![class; args.count];
        let mut rng = SeededRng::derive(args.seed, 0x5A4D, class as u64);
        let images = diffusion::sample(
            &model,
            &schedule,
            &labels,
            &positions,
            (args.resolution, args.resolution),
            &opts,
            &mut rng,
        )?;
        for (idx, img) in images.iter().enumerate() {
            let name = format!("seed{}_class{class}_{idx:04}.ppm", args.seed);
            let path = out_dir.join(&name);
            data_eval::write_image(&path, &replicate_to_rgb(img)?)?;
            entries.push(ManifestEntry {
                path: name,
                class_id: class,
                seed: args.seed,
            });
            written.push(path);
        }
    }
    data_eval::write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(written)
}

fn replicate_to_rgb(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    match img.shape() {
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Ok(Tensor::new(vec![3, *h, *w], data)?)
        }
        [3, _, _] => Ok(img.clone()),
        other => bail!("cannot write {other:?} image as P6"),
    }
}

fn write_positions_sidecar(path: &Path, positions: &TokenPositions) -> Result<()> {
    let mut out = String::new();
    match positions {
        TokenPositions::Planar(v) => {
            out.push_str("planar\n");
            for (x, y) in v {
                out.push_str(&format!("{x}\t{y}\n"));
            }
        }
        TokenPositions::Flat(v) => {
            out.push_str("flat\n");
            for m in v {
                out.push_str(&format!("{m}\n"));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Evaluation controls for [`cmd_eval`].
#[derive(Clone, Debug)]
pub struct EvalArgs {
    /// Classes in the synthetic spec; defaults to max manifest class + 1.
    pub class_count: Option<usize>,
    /// Seed namespace for the reference corpus.
    pub seed: u64,
    pub reference_per_class: usize,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            class_count: None,
            seed: 42,
            reference_per_class: 64,
        }
    }
}

/// Evaluate a sample directory against analytic statistics; writes and
/// returns the report.
pub fn cmd_eval(sample_dir: &Path, report_path: &Path, args: &EvalArgs) -> Result<EvalReport> {
    let manifest = data_eval::read_manifest(&sample_dir.join("manifest.tsv"))?;
    if manifest.is_empty() {
        bail!("manifest in {} lists no images", sample_dir.display());
    }
    let max_class = manifest.iter().map(|e| e.class_id).max().unwrap();
    let class_count = args.class_count.unwrap_or(max_class + 1);
    let spec = SyntheticSpec::new(class_count, args.seed)?;

    let mut groups: Vec<(usize, Vec<Tensor<f32>>)> = Vec::new();
    let mut resolution = None;
    for entry in &manifest {
        let img = data_eval::read_image(&sample_dir.join(&entry.path))?;
        let res = img.shape()[1];
        if img.shape()[1] != img.shape()[2] {
            bail!("{}: evaluation expects square images", entry.path);
        }
        match resolution {
            None => resolution = Some(res),
            Some(r) if r != res => bail!("mixed resolutions in sample dir ({r} vs {res})"),
            _ => {}
        }
        match groups.iter_mut().find(|(c, _)| *c == entry.class_id) {
            Some((_, v)) => v.push(img),
            None => groups.push((entry.class_id, vec![img])),
        }
    }
    groups.sort_by_key(|(c, _)| *c);
    let resolution = resolution.unwrap();
    let report = data_eval::evaluate(&groups, &spec, resolution, args.reference_per_class)?;
    fs::write(report_path, report.to_tsv())?;
    Ok(report)
}

/// Render a position-sampler draw as a text dot grid (and optionally a PGM)
/// for visual inspection of the three variants.
pub fn cmd_posviz(
    variant: RpeVariant,
    h: usize,
    w: usize,
    max_h: usize,
    max_w: usize,
    seed: u64,
    pgm_out: Option<&Path>,
) -> Result<String> {
    let mut rng = SeededRng::new(seed);
    let cells: Vec<(u32, u32)> = match variant {
        RpeVariant::Grid => {
            rpe2d::sample_grid_positions(h, w, max_h, max_w, &mut rng)?.token_positions()
        }
        RpeVariant::Equispaced => {
            rpe2d::sample_equispaced_positions(h, w, max_h, max_w, &mut rng)?.token_positions()
        }
        RpeVariant::Naive => rpe2d::sample_naive_positions(h, w, max_h, max_w, &mut rng)?
            .into_iter()
            .map(|p| {
                let k = (p - 1) as usize;
                ((k / max_w + 1) as u32, (k % max_w + 1) as u32)
            })
            .collect(),
    };
    let mut canvas = vec![b'.'; max_h * max_w];
    for &(x, y) in &cells {
        canvas[(x as usize - 1) * max_w + (y as usize - 1)] = b'o';
    }
    let mut text = String::with_capacity(max_h * (max_w + 1));
    for row in canvas.chunks(max_w) {
        text.push_str(std::str::from_utf8(row).unwrap());
        text.push('\n');
    }
    if let Some(path) = pgm_out {
        let data: Vec<f32> = canvas
            .iter()
            .map(|&b| if b == b'o' { 1.0 } else { -1.0 })
            .collect();
        data_eval::write_image(path, &Tensor::new(vec![1, max_h, max_w], data)?)?;
    }
    Ok(text)
}

/// One sweep setting's outcome.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub max_position: usize,
    pub report_path: PathBuf,
    pub combined_metric: f64,
}

/// Train + sample + eval once per maximum-position setting; one report per
/// setting plus a summary table.
pub fn cmd_sweep(
    base: RunConfig,
    max_positions: &[usize],
    sample_resolution: usize,
    sample_count: usize,
    sample_steps: usize,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if max_positions.is_empty() {
        bail!("sweep needs at least one max-position setting");
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &hp in max_positions {
        let mut run = base.clone();
        run.rpe_max_h = hp;
        run.rpe_max_w = hp;
        run.validate()
            .with_context(|| format!("sweep setting H=W={hp}"))?;
        let setting_dir = out_dir.join(format!("maxpos-{hp}"));
        let final_ckpt = train_with_config(run.clone(), &setting_dir)?;
        let sample_dir = setting_dir.join("samples");
        let args = SampleArgs {
            resolution: sample_resolution,
            count: sample_count,
            class: None,
            steps: sample_steps,
            cfg_scale: 4.0,
            shift: true,
            attn_scale: true,
            seed: run.seed,
        };
        cmd_sample(&final_ckpt, &sample_dir, &args)?;
        let report_path = setting_dir.join("report.tsv");
        let report = cmd_eval(
            &sample_dir,
            &report_path,
            &EvalArgs {
                class_count: Some(run.data_class_count),
                seed: run.seed,
                reference_per_class: 32,
            },
        )?;
        rows.push(SweepRow {
            max_position: hp,
            report_path,
            combined_metric: report.combined_metric(),
        });
    }
    let mut summary = String::from("max_position\tcombined_metric\treport\n");
    for r in &rows {
        summary.push_str(&format!(
            "{}\t{:.6}\t{}\n",
            r.max_position,
            r.combined_metric,
            r.report_path.display()
        ));
    }
    fs::write(out_dir.join("summary.tsv"), summary)?;
    Ok(rows)
}
