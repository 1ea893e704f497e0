use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpe2d_cli::{cmd_eval, cmd_posviz, cmd_sample, cmd_sweep, cmd_train, EvalArgs, SampleArgs};
use rpe2d_core::config::RunConfig;
use rpe2d_core::rpe2d::RpeVariant;

#[derive(Parser)]
#[command(
    name = "rpe2d",
    about = "Train, sample, and evaluate diffusion transformers with randomized 2D positional encodings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file
    Train {
        /// Path to the key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and the loss log
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sample images from a checkpoint
    Sample(SampleCmd),
    /// Evaluate a sample directory against analytic statistics
    Eval {
        /// Directory containing images and manifest.tsv
        #[arg(long)]
        samples: PathBuf,
        /// Where to write the TSV report
        #[arg(long)]
        report: Option<PathBuf>,
        /// Classes in the synthetic spec (default: max manifest class + 1)
        #[arg(long)]
        class_count: Option<usize>,
        /// Seed namespace for the reference corpus
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Render a position-sampler draw as a dot grid
    Posviz {
        #[arg(long, default_value = "grid")]
        variant: String,
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 8)]
        w: usize,
        #[arg(long, default_value_t = 64)]
        max_h: usize,
        #[arg(long, default_value_t = 64)]
        max_w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the grid as a PGM image
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Train/sample/eval once per maximum-position setting
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated H=W settings, e.g. 32,64,128,256
        #[arg(long, value_delimiter = ',', default_values_t = vec![32usize, 64, 128, 256])]
        max_positions: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// Images per class at each setting
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Sampler steps per image
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

#[derive(Args)]
struct SampleCmd {
    /// Checkpoint to sample from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for images, manifest, and the positions sidecar
    #[arg(long)]
    out_dir: PathBuf,
    /// Square output resolution in pixels
    #[arg(long)]
    resolution: usize,
    /// Images per class
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Sample a single class instead of all data classes
    #[arg(long)]
    class: Option<usize>,
    /// Base sampler steps
    #[arg(long, default_value_t = 250)]
    steps: usize,
    /// Classifier-free guidance scale
    #[arg(long, default_value_t = 4.0)]
    cfg_scale: f32,
    /// Timestep shift at non-train resolutions (default on)
    #[arg(long, overrides_with = "no_shift")]
    shift: bool,
    #[arg(long, hide_short_help = true)]
    no_shift: bool,
    /// Attention logit rescaling at non-train resolutions (default on)
    #[arg(long, overrides_with = "no_attn_scale")]
    attn_scale: bool,
    #[arg(long, hide_short_help = true)]
    no_attn_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SampleCmd {
    fn shift_enabled(&self) -> bool {
        !self.no_shift
    }

    fn attn_scale_enabled(&self) -> bool {
        !self.no_attn_scale
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train { config, out_dir } => {
            let final_ckpt = cmd_train(&config, &out_dir)?;
            println!("final checkpoint: {}", final_ckpt.display());
        }
        Command::Sample(s) => {
            let args = SampleArgs {
                resolution: s.resolution,
                count: s.count,
                class: s.class,
                steps: s.steps,
                cfg_scale: s.cfg_scale,
                shift: s.shift_enabled(),
                attn_scale: s.attn_scale_enabled(),
                seed: s.seed,
            };
            let written = cmd_sample(&s.checkpoint, &s.out_dir, &args)?;
            println!("wrote {} images to {}", written.len(), s.out_dir.display());
        }
        Command::Eval {
            samples,
            report,
            class_count,
            seed,
        } => {
            let report_path = report.unwrap_or_else(|| samples.join("eval_report.tsv"));
            let rep = cmd_eval(
                &samples,
                &report_path,
                &EvalArgs {
                    class_count,
                    seed,
                    reference_per_class: 64,
                },
            )?;
            print!("{}", rep.to_tsv());
            println!("report written to {}", report_path.display());
        }
        Command::Posviz {
            variant,
            h,
            w,
            max_h,
            max_w,
            seed,
            pgm,
        } => {
            let variant = RpeVariant::parse(&variant)?;
            let text = cmd_posviz(variant, h, w, max_h, max_w, seed, pgm.as_deref())?;
            print!("{text}");
        }
        Command::Sweep {
            config,
            out_dir,
            max_positions,
            resolution,
            count,
            steps,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let run = RunConfig::parse(&text)?;
            let rows = cmd_sweep(run, &max_positions, resolution, count, steps, &out_dir)?;
            for r in &rows {
                println!(
                    "H=W={}\tcombined={:.6}\t{}",
                    r.max_position,
                    r.combined_metric,
                    r.report_path.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
