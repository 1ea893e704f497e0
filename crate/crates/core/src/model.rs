//! A small diffusion transformer: patchify, adaLN-Zero blocks with
//! RoPE-rotated attention over explicit position assignments, unpatchify.
//!
//! Geometry lives entirely in the per-token position list, never in token
//! order: jointly permuting tokens and their positions permutes outputs
//! identically. Conditioning (timestep + micro-condition + class) enters
//! through adaLN; gates are zero-initialized so untrained blocks are
//! identity maps.

use std::sync::Arc;

use crate::conditioning::{self, MicroCondition};
use crate::error::{CoreError, Result};
use crate::numerics::graph::{Graph, RotationTable, Var};
use crate::numerics::kernels;
use crate::numerics::Tensor;
use crate::posenc::{self, PEConfig};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::rpe2d::{self, PositionGrid, RpeVariant};

/// Model architecture configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Patch size p.
    pub patch: usize,
    /// Image channels C.
    pub channels: usize,
    /// Hidden dim D.
    pub dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Transformer depth L.
    pub depth: usize,
    /// Class count K (a learned null row is appended for guidance).
    pub classes: usize,
    pub pe: PEConfig,
    /// Conditioning width (= timestep-embedding width = 8 * dim_per_scalar).
    pub cond_width: usize,
    pub dim_per_scalar: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Index of the learned null-class embedding used by guidance.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.depth == 0 || self.classes == 0 {
            return Err(CoreError::Config(
                "patch, channels, depth, and classes must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "hidden dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(CoreError::Config(format!(
                "head dim {} must be divisible by 4 for RoPE-2D",
                self.head_dim()
            )));
        }
        if self.pe.d != self.head_dim() {
            return Err(CoreError::Config(format!(
                "pe dim {} must equal head dim {}",
                self.pe.d,
                self.head_dim()
            )));
        }
        if self.cond_width != 8 * self.dim_per_scalar {
            return Err(CoreError::Config(format!(
                "cond_width {} must equal 8 * dim_per_scalar ({})",
                self.cond_width,
                8 * self.dim_per_scalar
            )));
        }
        self.pe.validate()
    }
}

/// Attention logit scaling: `1/sqrt(d)` while training, `log_n(m)/sqrt(d)`
/// when extrapolating from `n` to `m` patches (the two coincide at `m = n`).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    Train,
    Extrapolate { m_test: usize, n_train: usize },
}

pub fn attn_logit_multiplier(d_head: usize, mode: ScaleMode) -> Result<f64> {
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    match mode {
        ScaleMode::Train => Ok(inv_sqrt),
        ScaleMode::Extrapolate { m_test, n_train } => {
            if m_test <= 1 || n_train <= 1 {
                return Err(CoreError::Config(format!(
                    "attention scale needs patch counts > 1, got m={m_test}, n={n_train}"
                )));
            }
            Ok((m_test as f64).ln() / (n_train as f64).ln() * inv_sqrt)
        }
    }
}

/// Per-token effective positions feeding the rotary rotation.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenPositions {
    /// 2-D positions; each head half rotates with one axis.
    Planar(Vec<(f64, f64)>),
    /// Flattened 1-D positions (naive variant); the whole head rotates.
    Flat(Vec<f64>),
}

impl TokenPositions {
    pub fn len(&self) -> usize {
        match self {
            TokenPositions::Planar(v) => v.len(),
            TokenPositions::Flat(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_grid(grid: &PositionGrid) -> Self {
        TokenPositions::Planar(
            grid.token_positions()
                .into_iter()
                .map(|(x, y)| (x as f64, y as f64))
                .collect(),
        )
    }
}

/// Positions for one training sample under the configured strategy.
pub fn train_positions(
    pe: &PEConfig,
    variant: RpeVariant,
    h: usize,
    w: usize,
    rng: &mut SeededRng,
) -> Result<TokenPositions> {
    if pe.strategy != posenc::Strategy::Rpe2d {
        // plain row/column indices
        let mut v = Vec::with_capacity(h * w);
        for i in 1..=h {
            for j in 1..=w {
                v.push((i as f64, j as f64));
            }
        }
        return Ok(TokenPositions::Planar(v));
    }
    match variant {
        RpeVariant::Grid => Ok(TokenPositions::from_grid(&rpe2d::sample_grid_positions(
            h, w, pe.max_h, pe.max_w, rng,
        )?)),
        RpeVariant::Equispaced => Ok(TokenPositions::from_grid(
            &rpe2d::sample_equispaced_positions(h, w, pe.max_h, pe.max_w, rng)?,
        )),
        RpeVariant::Naive => Ok(TokenPositions::Flat(
            rpe2d::sample_naive_positions(h, w, pe.max_h, pe.max_w, rng)?
                .into_iter()
                .map(|p| p as f64)
                .collect(),
        )),
    }
}

/// Deterministic positions for sampling at `pe.h_test x pe.w_test`.
pub fn test_token_positions(pe: &PEConfig, variant: RpeVariant) -> Result<TokenPositions> {
    match pe.strategy {
        posenc::Strategy::Rpe2d => match variant {
            RpeVariant::Naive => Ok(TokenPositions::Flat(
                rpe2d::test_positions_flat(pe.h_test * pe.w_test, pe.max_h * pe.max_w)?
                    .into_iter()
                    .map(|p| p as f64)
                    .collect(),
            )),
            _ => Ok(TokenPositions::from_grid(&rpe2d::test_positions(
                pe.h_test, pe.w_test, pe.max_h, pe.max_w,
            )?)),
        },
        _ => {
            let mut v = Vec::with_capacity(pe.h_test * pe.w_test);
            for i in 1..=pe.h_test {
                for j in 1..=pe.w_test {
                    v.push(posenc::strategy_positions(i, j, pe)?);
                }
            }
            Ok(TokenPositions::Planar(v))
        }
    }
}

/// Build the per-token rotation table for one sample.
fn rotation_table<R: Real>(
    positions: &TokenPositions,
    d_head: usize,
    base_x: f64,
    base_y: f64,
) -> Arc<RotationTable<R>> {
    let rows = positions.len();
    let pairs = d_head / 2;
    let mut cos = Vec::with_capacity(rows * pairs);
    let mut sin = Vec::with_capacity(rows * pairs);
    let mut push_angles = |angles: Vec<f64>| {
        for a in angles {
            let (s, c) = a.sin_cos();
            cos.push(R::from_f64(c));
            sin.push(R::from_f64(s));
        }
    };
    match positions {
        TokenPositions::Planar(v) => {
            for &(x, y) in v {
                push_angles(posenc::pair_angles_2d(x, y, d_head, base_x, base_y));
            }
        }
        TokenPositions::Flat(v) => {
            for &m in v {
                push_angles(posenc::pair_angles_1d(m, d_head, base_x));
            }
        }
    }
    Arc::new(RotationTable {
        cos,
        sin,
        rows,
        pairs,
    })
}

// ── Patch helpers ────────────────────────────────────────────────────

/// A patchified image: one token row per patch, with the grid extents and
/// (once assigned) the positions that carry its geometry.
#[derive(Clone, Debug)]
pub struct PatchSequence {
    /// `[h*w, D]` after projection (or `[h*w, C*p*p]` raw).
    pub tokens: Tensor<f32>,
    pub h: usize,
    pub w: usize,
    pub positions: Option<TokenPositions>,
}

impl PatchSequence {
    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.tokens.dims2()?;
        if rows != self.h * self.w {
            return Err(CoreError::ShapeMismatch {
                op: "PatchSequence",
                lhs: vec![rows],
                rhs: vec![self.h, self.w],
            });
        }
        if let Some(p) = &self.positions {
            if p.len() != rows {
                return Err(CoreError::Input(format!(
                    "positions cover {} tokens, sequence has {rows}",
                    p.len()
                )));
            }
        }
        Ok(())
    }
}

/// Patchify an image and project each flattened patch to the hidden dim;
/// the position grid is left unassigned.
pub fn patchify(
    image: &Tensor<f32>,
    patch: usize,
    weight: &Tensor<f32>,
    bias: &[f32],
) -> Result<PatchSequence> {
    let raw = extract_patches(image, patch)?;
    let (n, in_dim) = raw.dims2()?;
    let (w_in, d) = weight.dims2()?;
    if w_in != in_dim || bias.len() != d {
        return Err(CoreError::ShapeMismatch {
            op: "patchify",
            lhs: vec![in_dim],
            rhs: vec![w_in, bias.len()],
        });
    }
    let mut tokens = kernels::matmul_nn(raw.data(), weight.data(), n, in_dim, d);
    for row in tokens.chunks_mut(d) {
        for (t, &b) in row.iter_mut().zip(bias) {
            *t += b;
        }
    }
    let (ih, iw) = match image.shape() {
        [_, h, w] => (*h, *w),
        _ => unreachable!("extract_patches validated"),
    };
    let seq = PatchSequence {
        tokens: Tensor::new(vec![n, d], tokens)?,
        h: ih / patch,
        w: iw / patch,
        positions: None,
    };
    seq.validate()?;
    Ok(seq)
}

/// Row-major patch extraction: token `i*w + j` is the flattened `C*p*p`
/// block at patch coordinates `(i, j)`.
pub fn extract_patches(image: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let (c, ph, pw) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(CoreError::ShapeMismatch {
                op: "extract_patches",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if ph % patch != 0 || pw % patch != 0 {
        return Err(CoreError::ShapeMismatch {
            op: "extract_patches",
            lhs: vec![ph, pw],
            rhs: vec![patch, patch],
        });
    }
    let (h, w) = (ph / patch, pw / patch);
    let data = image.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = i * patch + dy;
                        let x = j * patch + dx;
                        out.push(data[ch * ph * pw + y * pw + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h * w, c * patch * patch], out)
}

/// Inverse of [`extract_patches`]: reassemble `[h*w, C*p*p]` tokens into a
/// `[C, h*p, w*p]` image.
pub fn unpatchify(
    tokens: &Tensor<f32>,
    channels: usize,
    patch: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<f32>> {
    let (rows, cols) = tokens.dims2()?;
    if rows != h * w || cols != channels * patch * patch {
        return Err(CoreError::ShapeMismatch {
            op: "unpatchify",
            lhs: vec![rows, cols],
            rhs: vec![h * w, channels * patch * patch],
        });
    }
    let (ph, pw) = (h * patch, w * patch);
    let data = tokens.data();
    let mut out = vec![0.0f32; channels * ph * pw];
    for i in 0..h {
        for j in 0..w {
            let tok = &data[(i * w + j) * cols..(i * w + j + 1) * cols];
            let mut k = 0;
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = i * patch + dy;
                        let x = j * patch + dx;
                        out[ch * ph * pw + y * pw + x] = tok[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, ph, pw], out)
}

// ── Parameters ───────────────────────────────────────────────────────

/// Named, ordered parameter tensors; the order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate {name}");
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.values.push(values);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i]
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.values
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.len()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// One batch element for a forward pass. The image is the (noisy) input in
/// `[C, p*h, p*w]` layout; `positions` must cover `h*w` tokens.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub image: Tensor<f32>,
    pub t: usize,
    /// `None` selects the learned null embedding (guidance).
    pub label: Option<usize>,
    pub cond: MicroCondition,
    pub positions: TokenPositions,
}

/// The diffusion transformer: configuration plus learned parameters.
#[derive(Clone, Debug)]
pub struct DiffusionTransformer {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl DiffusionTransformer {
    /// Initialize with small-normal weights, zero biases, and zero adaLN
    /// projections (adaLN-Zero: every block starts as the identity).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut normal = |shape: Vec<usize>, std: f32| -> (Vec<usize>, Vec<f32>) {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.next_standard_normal() * std).collect();
            (shape, v)
        };
        let mut p = ParamStore::new();
        let (d, cw) = (cfg.dim, cfg.cond_width);
        let in_dim = cfg.channels * cfg.patch * cfg.patch;

        let (s, v) = normal(vec![in_dim, d], 0.02);
        p.add("patch_embed.weight", s, v);
        p.add("patch_embed.bias", vec![d], vec![0.0; d]);

        let (s, v) = normal(vec![cfg.classes + 1, cw], 0.02);
        p.add("class_embed.table", s, v);

        for b in 0..cfg.depth {
            let pre = format!("block{b}");
            p.add(
                &format!("{pre}.adaln.weight"),
                vec![cw, 6 * d],
                vec![0.0; cw * 6 * d],
            );
            p.add(&format!("{pre}.adaln.bias"), vec![6 * d], vec![0.0; 6 * d]);
            let (s, v) = normal(vec![d, 3 * d], 0.02);
            p.add(&format!("{pre}.qkv.weight"), s, v);
            p.add(&format!("{pre}.qkv.bias"), vec![3 * d], vec![0.0; 3 * d]);
            let (s, v) = normal(vec![d, d], 0.02);
            p.add(&format!("{pre}.proj.weight"), s, v);
            p.add(&format!("{pre}.proj.bias"), vec![d], vec![0.0; d]);
            let (s, v) = normal(vec![d, 4 * d], 0.02);
            p.add(&format!("{pre}.mlp.fc1.weight"), s, v);
            p.add(
                &format!("{pre}.mlp.fc1.bias"),
                vec![4 * d],
                vec![0.0; 4 * d],
            );
            let (s, v) = normal(vec![4 * d, d], 0.02);
            p.add(&format!("{pre}.mlp.fc2.weight"), s, v);
            p.add(&format!("{pre}.mlp.fc2.bias"), vec![d], vec![0.0; d]);
        }

        p.add("final.adaln.weight", vec![cw, 2 * d], vec![0.0; cw * 2 * d]);
        p.add("final.adaln.bias", vec![2 * d], vec![0.0; 2 * d]);
        let (s, v) = normal(vec![d, in_dim], 0.02);
        p.add("final.linear.weight", s, v);
        p.add("final.linear.bias", vec![in_dim], vec![0.0; in_dim]);

        Ok(DiffusionTransformer { cfg, params: p })
    }

    /// Overwrite every parameter with small uniform noise. Diagnostics only:
    /// puts the model at a generic point where no gradient is structurally
    /// zero (adaLN-Zero zeroes them at init).
    pub fn randomize_all(&mut self, seed: u64, scale: f32) {
        let mut rng = SeededRng::new(seed);
        for v in self.params.values_mut() {
            for x in v.iter_mut() {
                *x = (rng.next_f32() * 2.0 - 1.0) * scale;
            }
        }
    }

    /// Register all parameters as graph leaves, in store order.
    pub fn register_params<R: Real>(&self, g: &Graph<R>, trainable: bool) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| {
                let t = Tensor::<f32>::new(
                    self.params.shape(i).to_vec(),
                    self.params.value(i).to_vec(),
                )
                .expect("store invariant")
                .cast::<R>();
                g.leaf(t, trainable)
            })
            .collect()
    }

    /// Build the forward graph for a batch; returns the prediction tokens
    /// node of shape `[B*N, C*p*p]`. All items must share one patch-grid
    /// extent.
    pub fn forward_graph<R: Real>(
        &self,
        g: &Graph<R>,
        vars: &[Var],
        items: &[BatchItem],
        scale_mode: ScaleMode,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if items.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        let p = cfg.patch;
        let (c0, ih, iw) = match items[0].image.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(CoreError::ShapeMismatch {
                    op: "forward",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if c0 != cfg.channels {
            return Err(CoreError::ShapeMismatch {
                op: "forward",
                lhs: vec![c0],
                rhs: vec![cfg.channels],
            });
        }
        let (h, w) = (ih / p, iw / p);
        let n_tokens = h * w;
        let batch = items.len();
        let d = cfg.dim;
        let d_head = cfg.head_dim();
        let mult = R::from_f64(attn_logit_multiplier(d_head, scale_mode)?);
        let (base_x, base_y) = posenc::strategy_bases(&cfg.pe);

        // constant inputs: patches, conditioning embeddings, rotations
        let mut patch_rows = Vec::with_capacity(batch * n_tokens * c0 * p * p);
        let mut cond_rows = Vec::with_capacity(batch * cfg.cond_width);
        let mut labels = Vec::with_capacity(batch);
        let mut tables = Vec::with_capacity(batch);
        for item in items {
            if item.image.shape() != items[0].image.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "forward",
                    lhs: item.image.shape().to_vec(),
                    rhs: items[0].image.shape().to_vec(),
                });
            }
            if item.positions.len() != n_tokens {
                return Err(CoreError::Input(format!(
                    "positions cover {} tokens, grid has {}",
                    item.positions.len(),
                    n_tokens
                )));
            }
            match item.label {
                Some(l) if l >= cfg.classes => {
                    return Err(CoreError::Input(format!(
                        "label {l} >= class count {}",
                        cfg.classes
                    )))
                }
                Some(l) => labels.push(l),
                None => labels.push(cfg.null_class()),
            }
            let patches = extract_patches(&item.image, p)?;
            patch_rows.extend(patches.data().iter().copied());

            let t_emb = conditioning::fourier_embed(item.t as f64, cfg.cond_width)?;
            let m_emb =
                conditioning::embed_microcondition(&item.cond, cfg.dim_per_scalar, cfg.cond_width)?;
            cond_rows.extend(t_emb.iter().zip(&m_emb).map(|(a, b)| a + b));

            tables.push(rotation_table::<R>(&item.positions, d_head, base_x, base_y));
        }

        let x0 = Tensor::<f32>::new(vec![batch * n_tokens, c0 * p * p], patch_rows)?.cast::<R>();
        let x0 = g.constant(x0);
        let cond_const = Tensor::<f32>::new(vec![batch, cfg.cond_width], cond_rows)?.cast::<R>();
        let cond_const = g.constant(cond_const);

        let pv = |name: &str| -> Var { vars[self.params.index(name).expect("known param")] };

        // conditioning vector: timestep + micro + class, then one SiLU
        let class_rows = g.gather_rows(pv("class_embed.table"), &labels)?;
        let cond = g.add(cond_const, class_rows)?;
        let cond_act = g.silu(cond);

        // patch embedding
        let mut tokens = g.add_bias(
            g.matmul(x0, pv("patch_embed.weight"))?,
            pv("patch_embed.bias"),
        )?;

        let eps = R::from_f64(1e-6);
        for b in 0..cfg.depth {
            let pre = format!("block{b}");
            let mod6 = g.add_bias(
                g.matmul(cond_act, pv(&format!("{pre}.adaln.weight")))?,
                pv(&format!("{pre}.adaln.bias")),
            )?;
            let shift1 = g.col_slice(mod6, 0, d)?;
            let scale1 = g.col_slice(mod6, d, d)?;
            let gate1 = g.col_slice(mod6, 2 * d, d)?;
            let shift2 = g.col_slice(mod6, 3 * d, d)?;
            let scale2 = g.col_slice(mod6, 4 * d, d)?;
            let gate2 = g.col_slice(mod6, 5 * d, d)?;

            // attention branch
            let normed = g.layer_norm_lastdim(tokens, eps);
            let modulated = g.add_rowgroups(
                g.mul_rowgroups(normed, g.add_const(scale1, R::ONE))?,
                shift1,
            )?;
            let qkv = g.add_bias(
                g.matmul(modulated, pv(&format!("{pre}.qkv.weight")))?,
                pv(&format!("{pre}.qkv.bias")),
            )?;
            let attn = g.rope_attention(qkv, &tables, cfg.heads, mult)?;
            let attn = g.add_bias(
                g.matmul(attn, pv(&format!("{pre}.proj.weight")))?,
                pv(&format!("{pre}.proj.bias")),
            )?;
            tokens = g.add(tokens, g.mul_rowgroups(attn, gate1)?)?;

            // MLP branch
            let normed2 = g.layer_norm_lastdim(tokens, eps);
            let modulated2 = g.add_rowgroups(
                g.mul_rowgroups(normed2, g.add_const(scale2, R::ONE))?,
                shift2,
            )?;
            let hidden = g.gelu(g.add_bias(
                g.matmul(modulated2, pv(&format!("{pre}.mlp.fc1.weight")))?,
                pv(&format!("{pre}.mlp.fc1.bias")),
            )?);
            let mlp = g.add_bias(
                g.matmul(hidden, pv(&format!("{pre}.mlp.fc2.weight")))?,
                pv(&format!("{pre}.mlp.fc2.bias")),
            )?;
            tokens = g.add(tokens, g.mul_rowgroups(mlp, gate2)?)?;
        }

        // final adaLN + linear
        let fmod = g.add_bias(
            g.matmul(cond_act, pv("final.adaln.weight"))?,
            pv("final.adaln.bias"),
        )?;
        let fshift = g.col_slice(fmod, 0, d)?;
        let fscale = g.col_slice(fmod, d, d)?;
        let fnormed = g.layer_norm_lastdim(tokens, eps);
        let fmodulated = g.add_rowgroups(
            g.mul_rowgroups(fnormed, g.add_const(fscale, R::ONE))?,
            fshift,
        )?;
        let out = g.add_bias(
            g.matmul(fmodulated, pv("final.linear.weight"))?,
            pv("final.linear.bias"),
        )?;
        Ok(out)
    }

    /// Predicted noise for a batch; one `[C, p*h, p*w]` tensor per item.
    pub fn forward_batch(
        &self,
        items: &[BatchItem],
        scale_mode: ScaleMode,
    ) -> Result<Vec<Tensor<f32>>> {
        let g: Graph<f32> = Graph::new();
        let vars = self.register_params(&g, false);
        let out = self.forward_graph(&g, &vars, items, scale_mode)?;
        let tokens = g.value_tensor(out);
        let p = self.cfg.patch;
        let (ih, iw) = match items[0].image.shape() {
            [_, h, w] => (*h, *w),
            _ => unreachable!("validated in forward_graph"),
        };
        let (h, w) = (ih / p, iw / p);
        let n = h * w;
        let cols = self.cfg.channels * p * p;
        let data = tokens.data();
        let mut outs = Vec::with_capacity(items.len());
        for s in 0..items.len() {
            let rows = Tensor::new(
                vec![n, cols],
                data[s * n * cols..(s + 1) * n * cols].to_vec(),
            )?;
            outs.push(unpatchify(&rows, self.cfg.channels, p, h, w)?);
        }
        Ok(outs)
    }

    /// Single-sample convenience wrapper around [`Self::forward_batch`].
    pub fn forward(
        &self,
        noisy_image: &Tensor<f32>,
        t: usize,
        label: Option<usize>,
        cond: &MicroCondition,
        positions: &TokenPositions,
        scale_mode: ScaleMode,
    ) -> Result<Tensor<f32>> {
        let item = BatchItem {
            image: noisy_image.clone(),
            t,
            label,
            cond: *cond,
            positions: positions.clone(),
        };
        Ok(self
            .forward_batch(std::slice::from_ref(&item), scale_mode)?
            .remove(0))
    }

    /// MSE loss against target noise plus parameter gradients, in store
    /// order.
    pub fn loss_and_grads(
        &self,
        items: &[BatchItem],
        target_noise: &[Tensor<f32>],
        scale_mode: ScaleMode,
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        if items.len() != target_noise.len() {
            return Err(CoreError::Input("batch and target counts differ".into()));
        }
        let g: Graph<f32> = Graph::new();
        let vars = self.register_params(&g, true);
        let pred = self.forward_graph(&g, &vars, items, scale_mode)?;

        let p = self.cfg.patch;
        let cols = self.cfg.channels * p * p;
        let mut target_rows = Vec::new();
        for noise in target_noise {
            let patches = extract_patches(noise, p)?;
            target_rows.extend_from_slice(patches.data());
        }
        let n_rows = target_rows.len() / cols;
        let target = g.constant(Tensor::new(vec![n_rows, cols], target_rows)?);
        let loss = g.mse(pred, target)?;
        g.backward(loss)?;

        let grads = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                g.grad(v)
                    .unwrap_or_else(|| vec![0.0; self.params.value(i).len()])
            })
            .collect();
        Ok((g.scalar_value(loss), grads))
    }
}

/// Single-head rotary attention over an explicit position grid; the
/// standalone form of what each block computes per head.
pub fn attention_head(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    grid: &PositionGrid,
    scale_mode: ScaleMode,
    base: f64,
) -> Result<Tensor<f32>> {
    let (n, d_head) = q.dims2()?;
    if k.shape() != q.shape() || v.dims2()?.0 != n {
        return Err(CoreError::ShapeMismatch {
            op: "attention_head",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let positions = TokenPositions::from_grid(grid);
    if positions.len() != n {
        return Err(CoreError::Input(format!(
            "grid covers {} tokens, q has {n}",
            positions.len()
        )));
    }
    let g: Graph<f32> = Graph::new();
    let table = rotation_table::<f32>(&positions, d_head, base, base);
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let vv = g.constant(v.clone());
    let mult = attn_logit_multiplier(d_head, scale_mode)? as f32;
    let qr = g.rotate_pairs(qv, Arc::clone(&table))?;
    let kr = g.rotate_pairs(kv, table)?;
    let probs = g.softmax_lastdim(g.scale(g.matmul(qr, g.transpose(kr)?)?, mult));
    let out = g.matmul(probs, vv)?;
    Ok(g.value_tensor(out))
}
