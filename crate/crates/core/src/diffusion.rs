//! DDPM schedule, training loss, and the ancestral sampler with
//! classifier-free guidance, inference-time attention scaling, and timestep
//! shifting for cross-resolution sampling.

use crate::conditioning::MicroCondition;
use crate::error::{CoreError, Result};
use crate::model::{
    attn_logit_multiplier, BatchItem, DiffusionTransformer, ScaleMode, TokenPositions,
};
use crate::numerics::Tensor;
use crate::rng::SeededRng;

/// Noise schedule: betas plus derived alphas and their cumulative products.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alphas_bar: Vec<f32>,
}

impl DiffusionSchedule {
    /// Linear beta schedule. Validates 0 < beta < 1, strictly decreasing
    /// cumulative products, and alphas_bar[0] close to 1.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(CoreError::Config("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::Config(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let mut betas = Vec::with_capacity(timesteps);
        let mut alphas = Vec::with_capacity(timesteps);
        let mut alphas_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0f64;
        for i in 0..timesteps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64;
            let alpha = 1.0 - beta;
            prod *= alpha;
            betas.push(beta as f32);
            alphas.push(alpha as f32);
            alphas_bar.push(prod as f32);
        }
        let sched = DiffusionSchedule {
            timesteps,
            betas,
            alphas,
            alphas_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(CoreError::Config("betas must lie in (0, 1)".into()));
        }
        if self.alphas_bar.windows(2).any(|p| p[1] >= p[0]) {
            return Err(CoreError::Config(
                "alphas_bar must be strictly decreasing".into(),
            ));
        }
        if self.alphas_bar[0] < 0.99 {
            return Err(CoreError::Config(format!(
                "alphas_bar[0] = {} should be close to 1",
                self.alphas_bar[0]
            )));
        }
        Ok(())
    }

    /// Forward diffusion: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn q_sample(&self, x0: &Tensor<f32>, t: usize, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        if t >= self.timesteps {
            return Err(CoreError::Input(format!(
                "timestep {t} out of range 0..{}",
                self.timesteps
            )));
        }
        q_sample_with(self.alphas_bar[t], x0, noise)
    }
}

/// [`DiffusionSchedule::q_sample`] with an explicit cumulative product.
pub fn q_sample_with(alpha_bar: f32, x0: &Tensor<f32>, noise: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x0.shape() != noise.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| a * x + b * n)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Remap a train-resolution timestep to the test resolution so the sampler
/// sees a comparable signal-to-noise ratio: with `s = sqrt(m/n)` and
/// `u = t_n/T`,  `t_m = floor(T * s*u / (1 + (s-1)*u))`. The floor is applied
/// after multiplying by `T`.
pub fn timestep_shift(t_n: usize, m: usize, n: usize, timesteps: usize) -> usize {
    debug_assert!(m >= 1 && n >= 1 && t_n <= timesteps);
    let s = (m as f64 / n as f64).sqrt();
    let t = timesteps as f64;
    let tn = t_n as f64;
    // equivalent to T * (s*u)/(1+(s-1)u) with u = t_n/T, kept in integer-exact
    // form for the s = 1 case
    ((t * s * tn) / (t + (s - 1.0) * tn)).floor() as usize
}

/// Descending base timestep sequence: `steps` values spread uniformly over
/// `0..T`, visited from high noise to low.
pub fn base_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, timesteps);
    let mut ts: Vec<usize> = if steps == 1 {
        vec![timesteps - 1]
    } else {
        (0..steps)
            .map(|i| ((timesteps - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    ts.dedup();
    ts.reverse();
    ts
}

/// The visited sequence after the optional shift: each base step is mapped
/// through [`timestep_shift`], then deduplicated.
pub fn visited_timesteps(
    timesteps: usize,
    steps: usize,
    use_shift: bool,
    m: usize,
    n: usize,
) -> Vec<usize> {
    let base = base_timesteps(timesteps, steps);
    if !use_shift || m == n {
        return base;
    }
    let mut mapped: Vec<usize> = base
        .into_iter()
        .map(|t| timestep_shift(t, m, n, timesteps).min(timesteps - 1))
        .collect();
    mapped.dedup();
    mapped
}

/// Epsilon-MSE training loss for one sample at timestep `t`.
#[allow(clippy::too_many_arguments)]
pub fn loss(
    model: &DiffusionTransformer,
    schedule: &DiffusionSchedule,
    x0: &Tensor<f32>,
    t: usize,
    label: Option<usize>,
    cond: &MicroCondition,
    positions: &TokenPositions,
    noise: &Tensor<f32>,
) -> Result<f32> {
    let x_t = schedule.q_sample(x0, t, noise)?;
    let pred = model.forward(&x_t, t, label, cond, positions, ScaleMode::Train)?;
    Ok(mse_image(&pred, noise))
}

/// Mean squared error over all elements of two same-shaped images.
pub fn mse_image(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    debug_assert_eq!(a.shape(), b.shape());
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    (sum / a.numel() as f64) as f32
}

/// Sampling controls. Defaults: 250 base steps, guidance 4.0, both
/// inference-time corrections on.
#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance_scale: f32,
    pub use_shift: bool,
    pub use_attn_scale: bool,
    /// Images per internal forward chunk (memory/speed knob; no effect on
    /// values).
    pub chunk_images: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            steps: 250,
            guidance_scale: 4.0,
            use_shift: true,
            use_attn_scale: true,
            chunk_images: 16,
        }
    }
}

/// Ancestral DDPM sampling of one batch of images sharing a resolution and
/// position assignment. Returns one `[C, h_px, w_px]` tensor per label.
///
/// The micro-condition is the full-frame encoding of the target size. With
/// guidance scale `g`, the prediction is `eps_u + g (eps_c - eps_u)`;
/// `g = 1` skips the unconditional pass entirely.
pub fn sample(
    model: &DiffusionTransformer,
    schedule: &DiffusionSchedule,
    labels: &[usize],
    positions: &TokenPositions,
    resolution: (usize, usize),
    opts: &SampleOptions,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor<f32>>> {
    let cfg = &model.cfg;
    let (h_px, w_px) = resolution;
    if h_px % cfg.patch != 0 || w_px % cfg.patch != 0 {
        return Err(CoreError::Input(format!(
            "resolution {h_px}x{w_px} not divisible by patch {}",
            cfg.patch
        )));
    }
    let (h, w) = (h_px / cfg.patch, w_px / cfg.patch);
    if positions.len() != h * w {
        return Err(CoreError::Input(format!(
            "positions cover {} tokens, resolution needs {}",
            positions.len(),
            h * w
        )));
    }
    let m = h * w;
    let n = cfg.pe.h_train * cfg.pe.w_train;
    let scale_mode = if opts.use_attn_scale && m != n {
        ScaleMode::Extrapolate {
            m_test: m,
            n_train: n,
        }
    } else {
        ScaleMode::Train
    };
    // fail early if the scale is undefined for these patch counts
    attn_logit_multiplier(cfg.head_dim(), scale_mode)?;
    let cond = MicroCondition::full_frame(h_px as u32, w_px as u32);
    let visited = visited_timesteps(schedule.timesteps, opts.steps, opts.use_shift, m, n);

    let count = labels.len();
    let numel = cfg.channels * h_px * w_px;
    let mut xs: Vec<Tensor<f32>> = (0..count)
        .map(|_| {
            Tensor::new(
                vec![cfg.channels, h_px, w_px],
                (0..numel).map(|_| rng.next_standard_normal()).collect(),
            )
        })
        .collect::<Result<_>>()?;

    let guided = opts.guidance_scale != 1.0;
    let chunk = opts.chunk_images.max(1);
    for (step_idx, win) in visited.windows(1).enumerate() {
        let t = win[0];
        let t_prev = visited.get(step_idx + 1).copied();

        // predicted noise for every image
        let mut eps_all: Vec<Vec<f32>> = Vec::with_capacity(count);
        for chunk_start in (0..count).step_by(chunk) {
            let chunk_end = (chunk_start + chunk).min(count);
            let mut items = Vec::with_capacity((chunk_end - chunk_start) * 2);
            for i in chunk_start..chunk_end {
                items.push(BatchItem {
                    image: xs[i].clone(),
                    t,
                    label: Some(labels[i]),
                    cond,
                    positions: positions.clone(),
                });
                if guided {
                    items.push(BatchItem {
                        image: xs[i].clone(),
                        t,
                        label: None,
                        cond,
                        positions: positions.clone(),
                    });
                }
            }
            let preds = model.forward_batch(&items, scale_mode)?;
            let g = opts.guidance_scale;
            for (k, i) in (chunk_start..chunk_end).enumerate() {
                let eps = if guided {
                    let eps_c = preds[2 * k].data();
                    let eps_u = preds[2 * k + 1].data();
                    eps_u
                        .iter()
                        .zip(eps_c)
                        .map(|(&u, &c)| u + g * (c - u))
                        .collect()
                } else {
                    preds[k].data().to_vec()
                };
                debug_assert_eq!(i, eps_all.len());
                eps_all.push(eps);
            }
        }

        // ancestral update toward t_prev (or x0 when this is the last step)
        let ab_t = schedule.alphas_bar[t] as f64;
        let ab_prev = t_prev.map_or(1.0, |tp| schedule.alphas_bar[tp] as f64);
        let alpha_eff = ab_t / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        let x0_coef = ab_prev.sqrt() * beta_eff / (1.0 - ab_t);
        let xt_coef = alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
        let sigma = var.max(0.0).sqrt() as f32;
        let inv_sqrt_ab = 1.0 / ab_t.sqrt() as f32;
        let noise_coef = (1.0 - ab_t).sqrt() as f32;

        for (i, x) in xs.iter_mut().enumerate() {
            let eps = &eps_all[i];
            let data = x.data_mut();
            for (v, &e) in data.iter_mut().zip(eps) {
                let x0 = ((*v - noise_coef * e) * inv_sqrt_ab).clamp(-1.0, 1.0);
                *v = (x0_coef * x0 as f64 + xt_coef * *v as f64) as f32;
            }
            if t_prev.is_some() && sigma > 0.0 {
                for v in data.iter_mut() {
                    *v += sigma * rng.next_standard_normal();
                }
            }
            if !x.all_finite() {
                return Err(CoreError::NonFinite(format!(
                    "sampling diverged at step {step_idx} (t = {t})"
                )));
            }
        }
    }
    Ok(xs)
}
