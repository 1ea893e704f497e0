//! Acceptance suite: one test per acceptance criterion, each printing a
//! PASS line with the measured values. Criteria 8 and 9 share one trained
//! experiment (two 2000-step training runs plus four sampling arms), built
//! lazily behind a `OnceLock`; expect roughly an hour on two cores for the
//! full suite. Run with `--nocapture` to watch the lines appear.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rpe2d_cli::{cmd_eval, cmd_sample, train_with_config, EvalArgs, SampleArgs};
use rpe2d_core::checkpoint::Checkpoint;
use rpe2d_core::conditioning::MicroCondition;
use rpe2d_core::config::RunConfig;
use rpe2d_core::data_eval::EvalReport;
use rpe2d_core::diffusion::timestep_shift;
use rpe2d_core::model::{
    attn_logit_multiplier, extract_patches, unpatchify, BatchItem, DiffusionTransformer,
    ModelConfig, ScaleMode, TokenPositions,
};
use rpe2d_core::numerics::graph::{Graph, Var};
use rpe2d_core::numerics::{kernels, Tensor};
use rpe2d_core::posenc::{rope_apply, PEConfig, Strategy};
use rpe2d_core::rng::SeededRng;
use rpe2d_core::rpe2d::{
    sample_equispaced_positions, sample_grid_positions, sample_naive_positions, test_positions,
};

fn tmp_root() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rpe2d_acceptance_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ── C1: RoPE relative-shift invariance ───────────────────────────────

#[test]
fn c01_rope_relative_shift_invariance() {
    let started = Instant::now();
    let cfg = PEConfig {
        d: 16,
        base: 10000.0,
        max_h: 64,
        max_w: 64,
        strategy: Strategy::Ext,
        h_train: 8,
        w_train: 8,
        h_test: 8,
        w_test: 8,
    };
    let mut rng = SeededRng::new(1001);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q: Vec<f32> = (0..16).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
        let k: Vec<f32> = (0..16).map(|_| rng.next_f32() * 2.0 - 1.0).collect();
        let m = rng.gen_below(512) as f64;
        let n = rng.gen_below(512) as f64;
        let s = rng.gen_below(256) as f64;
        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
        };
        let f0 = dot(
            &rope_apply(&q, m, &cfg).unwrap(),
            &rope_apply(&k, n, &cfg).unwrap(),
        );
        let f1 = dot(
            &rope_apply(&q, m + s, &cfg).unwrap(),
            &rope_apply(&k, n + s, &cfg).unwrap(),
        );
        let err = (f0 - f1).abs() / (1.0 + f0.abs());
        worst = worst.max(err);
        assert!(
            (f0 - f1).abs() < 1e-5 * (1.0 + f0.abs()),
            "shift invariance violated: {f0} vs {f1}"
        );
    }
    let dt = started.elapsed();
    assert!(
        dt.as_secs_f64() < 1.0,
        "criterion 1 must run in < 1 s, took {dt:?}"
    );
    println!(
        "ACCEPTANCE C1 PASS: 1000 rope shift checks, worst normalized error {worst:.2e}, {dt:?}"
    );
}

// ── C2: sampler distribution and bounds ──────────────────────────────

#[test]
fn c02_sampler_distributions_and_bounds() {
    let started = Instant::now();

    // exact uniform over C(3,2) subsets: df = 2, p = 0.01 cutoff 9.21034
    let mut rng = SeededRng::new(1002);
    let mut counts = [0usize; 3];
    for _ in 0..30000 {
        let g = sample_grid_positions(2, 1, 3, 1, &mut rng).unwrap();
        let key = match (g.xs[0], g.xs[1]) {
            (1, 2) => 0,
            (1, 3) => 1,
            (2, 3) => 2,
            other => panic!("impossible subset {other:?}"),
        };
        counts[key] += 1;
    }
    let expected = 10000.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    assert!(
        chi2 < 9.21034,
        "chi-square {chi2} exceeds the p=0.01 cutoff"
    );

    // 10000 seeded draws per sampler: strict order and range bounds
    for draw in 0..10000u64 {
        let mut rng = SeededRng::new(draw);
        let g = sample_grid_positions(8, 8, 64, 64, &mut rng).unwrap();
        assert!(g.xs.windows(2).all(|p| p[0] < p[1]));
        assert!(g.xs[0] >= 1 && *g.xs.last().unwrap() <= 64);
        assert!(g.ys.windows(2).all(|p| p[0] < p[1]));
        assert!(g.ys[0] >= 1 && *g.ys.last().unwrap() <= 64);

        let e = sample_equispaced_positions(8, 8, 64, 64, &mut rng).unwrap();
        let r = e.xs[1] - e.xs[0];
        assert!(e.xs.windows(2).all(|p| p[1] - p[0] == r));
        assert!(e.ys.windows(2).all(|p| p[1] - p[0] == r));
        assert!(*e.xs.last().unwrap() <= 64 && *e.ys.last().unwrap() <= 64);

        let nv = sample_naive_positions(8, 8, 64, 64, &mut rng).unwrap();
        assert!(nv.windows(2).all(|p| p[0] < p[1]));
        assert!(nv[0] >= 1 && *nv.last().unwrap() <= 64 * 64);
    }

    let dt = started.elapsed();
    assert!(
        dt.as_secs_f64() < 10.0,
        "criterion 2 must run in < 10 s, took {dt:?}"
    );
    println!(
        "ACCEPTANCE C2 PASS: chi2 {chi2:.3} over C(3,2), 10000 bounded draws x3 samplers, {dt:?}"
    );
}

// ── C3: deterministic test positions, exhaustive ─────────────────────

#[test]
fn c03_test_positions_exhaustive() {
    let started = Instant::now();
    let mut cases = 0usize;
    for max in 1..=64usize {
        for h in 1..=max {
            let g = test_positions(h, 1, max, 1).unwrap();
            assert!(g.xs.windows(2).all(|p| p[0] < p[1]), "H={max} h={h}");
            if h >= 2 {
                assert_eq!(g.xs[0], 1, "H={max} h={h}");
                assert_eq!(*g.xs.last().unwrap() as usize, max, "H={max} h={h}");
                let gaps: Vec<u32> = g.xs.windows(2).map(|p| p[1] - p[0]).collect();
                let lo = gaps.iter().min().unwrap();
                let hi = gaps.iter().max().unwrap();
                assert!(hi - lo <= 1, "H={max} h={h}: gaps {gaps:?}");
            }
            cases += 1;
        }
    }
    let dt = started.elapsed();
    assert!(
        dt.as_secs_f64() < 5.0,
        "criterion 3 must run in < 5 s, took {dt:?}"
    );
    println!("ACCEPTANCE C3 PASS: {cases} (H, h_test) cases exhaustively checked, {dt:?}");
}

// ── C4: attention logit scale ────────────────────────────────────────

#[test]
fn c04_attention_scale_values() {
    let d = 16usize;
    let base = 1.0 / (d as f64).sqrt();
    let same = attn_logit_multiplier(
        d,
        ScaleMode::Extrapolate {
            m_test: 256,
            n_train: 256,
        },
    )
    .unwrap();
    assert_eq!(same, base);
    assert_eq!(attn_logit_multiplier(d, ScaleMode::Train).unwrap(), base);
    let quad = attn_logit_multiplier(
        d,
        ScaleMode::Extrapolate {
            m_test: 1024,
            n_train: 256,
        },
    )
    .unwrap();
    assert!((quad - 1.25 * base).abs() < 1e-12);
    println!("ACCEPTANCE C4 PASS: multiplier 1/sqrt(d) at m=n, 1.25/sqrt(d) for 256->1024 patches");
}

// ── C5: timestep shift map ───────────────────────────────────────────

#[test]
fn c05_timestep_shift_map() {
    let started = Instant::now();
    for t in 0..=1000 {
        assert_eq!(timestep_shift(t, 64, 64, 1000), t, "identity at m=n");
    }
    for (m, n) in [(1024usize, 256usize), (256, 1024), (400, 100)] {
        assert_eq!(timestep_shift(0, m, n, 1000), 0);
        assert_eq!(timestep_shift(1000, m, n, 1000), 1000);
        let mut prev = 0;
        for t in 0..=1000 {
            let v = timestep_shift(t, m, n, 1000);
            assert!(v >= prev, "monotonicity at t={t}, m={m}, n={n}");
            if m > n {
                assert!(v >= t, "upward shift at t={t}");
            }
            prev = v;
        }
    }
    assert_eq!(timestep_shift(500, 4, 1, 1000), 666);
    let dt = started.elapsed();
    assert!(
        dt.as_secs_f64() < 1.0,
        "criterion 5 must run in < 1 s, took {dt:?}"
    );
    println!(
        "ACCEPTANCE C5 PASS: identity/endpoints/monotone exhaustive, t_m(500, x4) = 666, {dt:?}"
    );
}

// ── C6: full-model gradient audit ────────────────────────────────────

fn audit_model_config() -> ModelConfig {
    ModelConfig {
        patch: 2,
        channels: 1,
        dim: 32,
        heads: 2,
        depth: 2,
        classes: 4,
        pe: PEConfig {
            d: 16,
            base: 10000.0,
            max_h: 32,
            max_w: 32,
            strategy: Strategy::Rpe2d,
            h_train: 4,
            w_train: 4,
            h_test: 4,
            w_test: 4,
        },
        cond_width: 64,
        dim_per_scalar: 8,
    }
}

#[test]
fn c06_full_model_gradient_audit() {
    let started = Instant::now();
    let mut model = DiffusionTransformer::init(audit_model_config(), 1006).unwrap();
    model.randomize_all(1007, 0.15);

    let mut rng = SeededRng::new(1008);
    let image = Tensor::<f32>::new(
        vec![1, 8, 8],
        (0..64).map(|_| rng.next_f32() * 2.0 - 1.0).collect(),
    )
    .unwrap();
    let noise32 = Tensor::<f32>::new(
        vec![1, 8, 8],
        (0..64).map(|_| rng.next_f32() * 2.0 - 1.0).collect(),
    )
    .unwrap();
    let positions = TokenPositions::Planar(
        (1..=4)
            .flat_map(|i| (1..=4).map(move |j| (3.0 * i as f64, 5.0 * j as f64)))
            .collect(),
    );
    let item = BatchItem {
        image,
        t: 250,
        label: Some(1),
        cond: MicroCondition {
            original: (16, 16),
            crop: (1, 2, 13, 14),
            resize: (8, 8),
        },
        positions,
    };
    let target_tokens = extract_patches(&noise32, 2).unwrap().cast::<f64>();

    let params64: Vec<Tensor<f64>> = (0..model.params.len())
        .map(|i| {
            Tensor::<f32>::new(
                model.params.shape(i).to_vec(),
                model.params.value(i).to_vec(),
            )
            .unwrap()
            .cast::<f64>()
        })
        .collect();

    let eval = |perturb: Option<(usize, usize, f64)>, want_grads: bool| {
        let g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = params64
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if let Some((pi, pj, d)) = perturb {
                    if pi == i {
                        t.data_mut()[pj] += d;
                    }
                }
                g.leaf(t, want_grads)
            })
            .collect();
        let pred = model
            .forward_graph(&g, &vars, std::slice::from_ref(&item), ScaleMode::Train)
            .unwrap();
        let loss = g.mse(pred, g.constant(target_tokens.clone())).unwrap();
        if want_grads {
            g.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| g.grad(v).unwrap_or_default())
                .collect();
            (g.scalar_value(loss), Some(grads))
        } else {
            (g.scalar_value(loss), None)
        }
    };

    let (_, grads) = eval(None, true);
    let grads = grads.unwrap();
    let total: usize = params64.iter().map(|p| p.numel()).sum();
    let h = 1e-3;
    let mut audit_rng = SeededRng::new(1009);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let mut flat = audit_rng.gen_below(total as u64) as usize;
        let mut pi = 0;
        while flat >= params64[pi].numel() {
            flat -= params64[pi].numel();
            pi += 1;
        }
        let (fp, _) = eval(Some((pi, flat, h)), false);
        let (fm, _) = eval(Some((pi, flat, -h)), false);
        let fd = (fp - fm) / (2.0 * h);
        let an = grads[pi][flat];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "{} coord {flat}: analytic {an:.6e} vs fd {fd:.6e} (rel {rel:.3e})",
            model.params.name(pi)
        );
    }
    let dt = started.elapsed();
    assert!(
        dt.as_secs_f64() < 120.0,
        "criterion 6 must run in < 2 min, took {dt:?}"
    );
    println!("ACCEPTANCE C6 PASS: 200 parameters audited, worst rel err {worst:.2e}, {dt:?}");
}

// ── C7: adaLN-Zero identity at initialization ────────────────────────

#[test]
fn c07_adaln_zero_identity() {
    // untrained blocks must be identity: the deep model's output equals the
    // block-free path final_linear(LN(patch_embed(x)))
    let cfg = RunConfig::default().model_config();
    let model = DiffusionTransformer::init(cfg.clone(), 1010).unwrap();
    let mut rng = SeededRng::new(1011);
    let image = Tensor::<f32>::new(
        vec![1, 16, 16],
        (0..256).map(|_| rng.next_f32() * 2.0 - 1.0).collect(),
    )
    .unwrap();
    let positions = TokenPositions::Planar(
        (1..=8)
            .flat_map(|i| (1..=8).map(move |j| (i as f64, j as f64)))
            .collect(),
    );
    let out = model
        .forward(
            &image,
            77,
            Some(3),
            &MicroCondition::full_frame(16, 16),
            &positions,
            ScaleMode::Train,
        )
        .unwrap();

    let patches = extract_patches(&image, 2).unwrap();
    let wi = model.params.index("patch_embed.weight").unwrap();
    let tokens = kernels::matmul_nn(patches.data(), model.params.value(wi), 64, 4, cfg.dim);
    let (normed, _, _) = kernels::layernorm_rows(&tokens, 64, cfg.dim, 1e-6f32);
    let fi = model.params.index("final.linear.weight").unwrap();
    let manual = kernels::matmul_nn(&normed, model.params.value(fi), 64, cfg.dim, 4);
    let manual_img = unpatchify(&Tensor::new(vec![64, 4], manual).unwrap(), 1, 2, 8, 8).unwrap();

    let mut worst = 0.0f32;
    for (a, b) in out.data().iter().zip(manual_img.data()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-6, "blocks are not identity at init: {worst}");
    println!(
        "ACCEPTANCE C7 PASS: depth-{} untrained model equals the block-free path (max dev {worst:.2e})",
        cfg.depth
    );
}

// ── C8 + C9: the resolution-generalization experiment ────────────────

struct Experiment {
    rpe_ckpt: PathBuf,
    ext_report: EvalReport,
    rpe_plain_report: EvalReport,
    rpe_scale_report: EvalReport,
    rpe_full_report: EvalReport,
    ext_losses: Vec<f32>,
    rpe_losses: Vec<f32>,
}

static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();

const EXP_SEED: u64 = 42;
const EXP_TRAIN_STEPS: u64 = 2000;
const EXP_SAMPLE_STEPS: usize = 32;
// guidance calibrated on the first baseline run: 4.0 overdrives this
// desk-size model (gradient classes collapse); 1.5 keeps every class intact
const EXP_CFG_SCALE: f32 = 1.5;
const EXP_CLASSES: usize = 6; // checkerboards + gradients

fn experiment_config(strategy: &str) -> RunConfig {
    let mut run = RunConfig {
        seed: EXP_SEED,
        train_steps: EXP_TRAIN_STEPS,
        train_checkpoint_interval: EXP_TRAIN_STEPS,
        data_class_count: EXP_CLASSES,
        ..RunConfig::default()
    };
    match strategy {
        "ext" => {
            run.pe_strategy = Strategy::Ext;
            run.aug_enabled = false;
        }
        "rpe2d" => {
            run.pe_strategy = Strategy::Rpe2d;
            run.aug_enabled = true;
        }
        other => panic!("unknown arm {other}"),
    }
    run.validate().unwrap();
    run
}

fn read_losses(dir: &Path) -> Vec<f32> {
    fs::read_to_string(dir.join("loss_log.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split_once('\t').unwrap().1.parse().unwrap())
        .collect()
}

fn sample_and_eval(
    ckpt: &Path,
    dir: &Path,
    count: usize,
    attn_scale: bool,
    shift: bool,
) -> EvalReport {
    let args = SampleArgs {
        resolution: 32,
        count,
        class: None,
        steps: EXP_SAMPLE_STEPS,
        cfg_scale: EXP_CFG_SCALE,
        shift,
        attn_scale,
        seed: EXP_SEED,
    };
    cmd_sample(ckpt, dir, &args).unwrap();
    cmd_eval(
        dir,
        &dir.join("report.tsv"),
        &EvalArgs {
            class_count: Some(EXP_CLASSES),
            seed: EXP_SEED,
            reference_per_class: 64,
        },
    )
    .unwrap()
}

fn experiment() -> &'static Experiment {
    EXPERIMENT.get_or_init(|| {
        let root = tmp_root().join("experiment");
        let ext_dir = root.join("train-ext");
        let rpe_dir = root.join("train-rpe2d");
        eprintln!("[experiment] training ext arm ({EXP_TRAIN_STEPS} steps)...");
        let ext_ckpt = train_with_config(experiment_config("ext"), &ext_dir).unwrap();
        eprintln!("[experiment] training rpe2d arm ({EXP_TRAIN_STEPS} steps)...");
        let rpe_ckpt = train_with_config(experiment_config("rpe2d"), &rpe_dir).unwrap();

        eprintln!("[experiment] sampling arm E (ext, plain, 64/class at 32x32)...");
        let ext_report = sample_and_eval(&ext_ckpt, &root.join("arm-ext"), 64, false, false);
        eprintln!("[experiment] sampling arm R1 (rpe2d, plain, 32/class)...");
        let rpe_plain_report =
            sample_and_eval(&rpe_ckpt, &root.join("arm-rpe-plain"), 32, false, false);
        eprintln!("[experiment] sampling arm R2 (rpe2d + attention scale, 32/class)...");
        let rpe_scale_report =
            sample_and_eval(&rpe_ckpt, &root.join("arm-rpe-scale"), 32, true, false);
        eprintln!("[experiment] sampling arm R3 (rpe2d + scale + shift, 64/class)...");
        let rpe_full_report =
            sample_and_eval(&rpe_ckpt, &root.join("arm-rpe-full"), 64, true, true);

        Experiment {
            rpe_ckpt,
            ext_report,
            rpe_plain_report,
            rpe_scale_report,
            rpe_full_report,
            ext_losses: read_losses(&ext_dir),
            rpe_losses: read_losses(&rpe_dir),
        }
    })
}

fn mean_spectral(r: &EvalReport) -> f64 {
    r.rows.iter().map(|x| x.spectral_peak_error).sum::<f64>() / r.rows.len() as f64
}

fn mean_w1(r: &EvalReport) -> f64 {
    r.rows.iter().map(|x| x.histogram_w1).sum::<f64>() / r.rows.len() as f64
}

#[test]
fn c08_resolution_generalization_experiment() {
    let exp = experiment();

    // training made progress: last logged loss under half the early mean
    for (name, losses) in [("ext", &exp.ext_losses), ("rpe2d", &exp.rpe_losses)] {
        let first50 = losses[..50].iter().map(|&x| x as f64).sum::<f64>() / 50.0;
        let last = *losses.last().unwrap() as f64;
        assert!(
            last < 0.5 * first50,
            "{name}: loss at step {} = {last:.4} not below half the first-50 mean {first50:.4}",
            losses.len()
        );
    }

    let e = (&exp.ext_report, "E   ext  plain");
    let r1 = (&exp.rpe_plain_report, "R1  rpe2d plain");
    let r2 = (&exp.rpe_scale_report, "R2  rpe2d +scale");
    let r3 = (&exp.rpe_full_report, "R3  rpe2d +scale+shift");
    println!("arm                     spectral      W1   combined");
    for (rep, name) in [e, r1, r2, r3] {
        println!(
            "{name:<22} {:>9.4} {:>7.4} {:>10.4}",
            mean_spectral(rep),
            mean_w1(rep),
            rep.combined_metric()
        );
    }

    // headline comparison: the corrected rpe2d run beats plain ext on both
    // metrics at 2x resolution
    assert!(
        mean_spectral(&exp.rpe_full_report) < mean_spectral(&exp.ext_report),
        "spectral-peak error must improve: rpe2d {:.4} vs ext {:.4}",
        mean_spectral(&exp.rpe_full_report),
        mean_spectral(&exp.ext_report)
    );
    assert!(
        mean_w1(&exp.rpe_full_report) < mean_w1(&exp.ext_report),
        "histogram W1 must improve: rpe2d {:.4} vs ext {:.4}",
        mean_w1(&exp.rpe_full_report),
        mean_w1(&exp.ext_report)
    );

    // component ablation: base -> +randomization/cond-aug -> +attention
    // scale -> +timestep shift; at least 2 of the 3 added components must
    // improve the combined metric
    let combined = [
        exp.ext_report.combined_metric(),
        exp.rpe_plain_report.combined_metric(),
        exp.rpe_scale_report.combined_metric(),
        exp.rpe_full_report.combined_metric(),
    ];
    let improvements = combined.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        improvements >= 2,
        "only {improvements}/3 components improved the combined metric: {combined:?}"
    );
    println!(
        "ACCEPTANCE C8 PASS: rpe2d beats ext on both metrics at 32x32; {improvements}/3 ablation steps improve"
    );
}

#[test]
fn c09_low_resolution_generalization() {
    let exp = experiment();
    let root = tmp_root().join("lowres");

    // class 0 (lowest frequency) at the training resolution and below it
    let mut args = SampleArgs {
        resolution: 16,
        count: 32,
        class: Some(0),
        steps: EXP_SAMPLE_STEPS,
        cfg_scale: EXP_CFG_SCALE,
        shift: true,
        attn_scale: true,
        seed: EXP_SEED + 1,
    };
    let dir16 = root.join("res16");
    cmd_sample(&exp.rpe_ckpt, &dir16, &args).unwrap();
    let rep16 = cmd_eval(
        &dir16,
        &dir16.join("report.tsv"),
        &EvalArgs {
            class_count: Some(EXP_CLASSES),
            seed: EXP_SEED,
            reference_per_class: 32,
        },
    )
    .unwrap();

    args.resolution = 8;
    let dir8 = root.join("res8");
    cmd_sample(&exp.rpe_ckpt, &dir8, &args).expect("8x8 sampling must not hit capacity errors");
    let rep8 = cmd_eval(
        &dir8,
        &dir8.join("report.tsv"),
        &EvalArgs {
            class_count: Some(EXP_CLASSES),
            seed: EXP_SEED,
            reference_per_class: 32,
        },
    )
    .unwrap();

    let e16 = rep16.rows[0].spectral_peak_error;
    let e8 = rep8.rows[0].spectral_peak_error;
    assert!(
        (e8 - e16).abs() <= 1.0,
        "class-0 spectral error at 8x8 ({e8:.3}) must be within 1 cycle/width of 16x16 ({e16:.3})"
    );
    println!(
        "ACCEPTANCE C9 PASS: 8x8 sampling runs; class-0 spectral error {e8:.3} vs {e16:.3} at 16x16"
    );
}

// ── C10: determinism and persistence ─────────────────────────────────

#[test]
fn c10_determinism_and_persistence() {
    let root = tmp_root().join("determinism");
    let run = RunConfig {
        model_dim: 32,
        model_heads: 2,
        model_depth: 2,
        train_image_size: 8,
        data_source_size: 16,
        rpe_max_h: 32,
        rpe_max_w: 32,
        train_batch_size: 2,
        data_class_count: 4,
        train_steps: 3,
        train_checkpoint_interval: 2,
        ..RunConfig::default()
    };

    // identical configs -> bit-identical checkpoints
    let f1 = train_with_config(run.clone(), &root.join("a")).unwrap();
    let f2 = train_with_config(run.clone(), &root.join("b")).unwrap();
    let bytes1 = fs::read(&f1).unwrap();
    assert_eq!(
        bytes1,
        fs::read(&f2).unwrap(),
        "checkpoints must be bit-identical"
    );

    // -> bit-identical sample bytes
    let args = SampleArgs {
        resolution: 16,
        count: 2,
        class: Some(0),
        steps: 6,
        cfg_scale: 4.0,
        shift: true,
        attn_scale: true,
        seed: 5,
    };
    let s1 = cmd_sample(&f1, &root.join("s1"), &args).unwrap();
    let s2 = cmd_sample(&f2, &root.join("s2"), &args).unwrap();
    for (a, b) in s1.iter().zip(&s2) {
        assert_eq!(
            fs::read(a).unwrap(),
            fs::read(b).unwrap(),
            "sample bytes must match"
        );
    }

    // checkpoint roundtrip is bit-exact
    let ck = Checkpoint::load(&f1).unwrap();
    assert_eq!(ck.to_bytes(), bytes1);

    // single-byte corruption is rejected wherever it lands
    for &pos in &[0usize, 3, 40, bytes1.len() / 2, bytes1.len() - 1] {
        let mut bad = bytes1.clone();
        bad[pos] ^= 0x10;
        assert!(
            Checkpoint::from_bytes(&bad).is_err(),
            "corruption at byte {pos} must be rejected"
        );
    }
    println!(
        "ACCEPTANCE C10 PASS: bit-identical checkpoints and samples; roundtrip exact; corruption rejected"
    );
}

// ── C11: maximum-position sweep harness ──────────────────────────────

#[test]
fn c11_max_position_sweep() {
    let root = tmp_root().join("sweep");
    let run = RunConfig {
        model_dim: 32,
        model_heads: 2,
        model_depth: 2,
        train_image_size: 8,
        data_source_size: 16,
        train_batch_size: 4,
        data_class_count: 4,
        train_steps: 40,
        train_checkpoint_interval: 40,
        ..RunConfig::default()
    };

    let settings = [32usize, 64, 128, 256];
    let rows = rpe2d_cli::cmd_sweep(run, &settings, 16, 4, 8, &root).unwrap();
    assert_eq!(rows.len(), settings.len());
    println!("max_position  combined_metric");
    for (row, &want) in rows.iter().zip(&settings) {
        assert_eq!(row.max_position, want);
        let text = fs::read_to_string(&row.report_path).unwrap();
        let report = EvalReport::parse_tsv(&text).unwrap();
        assert_eq!(report.rows.len(), 4, "one row per class at H={want}");
        for r in &report.rows {
            assert!(r.spectral_peak_error.is_finite() && r.spectral_peak_error >= 0.0);
            assert!(r.histogram_w1.is_finite() && r.histogram_w1 >= 0.0);
            assert_eq!(r.resolution, 16);
        }
        println!("{:>12}  {:.4}", row.max_position, row.combined_metric);
    }
    assert!(root.join("summary.tsv").exists());
    println!(
        "ACCEPTANCE C11 PASS: sweep over H=W in {settings:?} completed with well-formed reports"
    );
}
