//! Procedural synthetic datasets with analytically known statistics, and the
//! resolution-independent metrics used to evaluate generated samples.
//!
//! Classes are defined in continuous coordinates, so any resolution renders
//! the same underlying function. The canonical class list:
//!
//! | class | family            | analytic dominant frequency (cycles/width) |
//! |-------|-------------------|---------------------------------------------|
//! | 0..3  | checkerboard      | class + 1                                   |
//! | 4     | radial gradient   | 1                                           |
//! | 5     | linear ramp       | 1                                           |
//! | 6     | gaussian blobs x3 | 1                                           |
//! | 7     | gaussian blobs x5 | 1                                           |
//!
//! The dominant frequency of an image is measured on the mean-removed image
//! as the Chebyshev radius `max(|fx|, |fy|)` of the highest-power non-DC DFT
//! bin, with frequencies wrapped to `[-N/2, N/2]`. A separable O(N^3) DFT is
//! plenty at desk scale.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::numerics::Tensor;
use crate::rng::SeededRng;

/// Image family of one class.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Family {
    Checkerboard { cycles: u32 },
    RadialGradient,
    LinearRamp,
    GaussianBlobs { count: u32 },
}

/// Dataset identity: how many of the canonical classes exist, plus the seed
/// namespace for reference corpora.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub seed: u64,
}

pub const MAX_CLASSES: usize = 8;

impl SyntheticSpec {
    pub fn new(class_count: usize, seed: u64) -> Result<Self> {
        if class_count == 0 || class_count > MAX_CLASSES {
            return Err(CoreError::Config(format!(
                "class_count must be in 1..={MAX_CLASSES}, got {class_count}"
            )));
        }
        Ok(SyntheticSpec { class_count, seed })
    }

    pub fn family(&self, class_id: usize) -> Result<Family> {
        if class_id >= self.class_count {
            return Err(CoreError::Input(format!(
                "class {class_id} outside 0..{}",
                self.class_count
            )));
        }
        Ok(match class_id {
            0..=3 => Family::Checkerboard {
                cycles: class_id as u32 + 1,
            },
            4 => Family::RadialGradient,
            5 => Family::LinearRamp,
            6 => Family::GaussianBlobs { count: 3 },
            7 => Family::GaussianBlobs { count: 5 },
            _ => unreachable!(),
        })
    }

    /// Dominant spatial frequency of the class in cycles per image width.
    pub fn analytic_frequency(&self, class_id: usize) -> Result<f64> {
        Ok(match self.family(class_id)? {
            Family::Checkerboard { cycles } => cycles as f64,
            _ => 1.0,
        })
    }

    pub fn expected_blobs(&self, class_id: usize) -> Result<Option<u32>> {
        Ok(match self.family(class_id)? {
            Family::GaussianBlobs { count } => Some(count),
            _ => None,
        })
    }
}

/// Square wave with unit period: +1 on the first half of each period.
fn square_wave(z: f64) -> f32 {
    if z.rem_euclid(1.0) < 0.5 {
        1.0
    } else {
        -1.0
    }
}

// sigma is sized so a blob survives the 3x3 detection smoothing at 16x16;
// the amplitude stays below the clip so peaks never flatten into plateaus
const BLOB_SIGMA: f64 = 0.12;
const BLOB_AMPLITUDE: f64 = 1.9;
const BLOB_MIN_SEP: f64 = 0.35;
const BLOB_MARGIN: f64 = 0.13;

/// Render one image of a class at the given resolution. Values lie in
/// `[-1, 1]`; pixel centers sample the continuous field at
/// `((x+0.5)/res, (y+0.5)/res)`.
pub fn generate(
    spec: &SyntheticSpec,
    class_id: usize,
    resolution: usize,
    rng: &mut SeededRng,
) -> Result<Tensor<f32>> {
    if resolution == 0 {
        return Err(CoreError::Input("resolution must be positive".into()));
    }
    let family = spec.family(class_id)?;
    let n = resolution;
    let mut data = vec![0.0f32; n * n];
    match family {
        Family::Checkerboard { cycles } => {
            let f = cycles as f64;
            let (pu, pv) = (rng.next_f64(), rng.next_f64());
            for y in 0..n {
                let v = (y as f64 + 0.5) / n as f64;
                for x in 0..n {
                    let u = (x as f64 + 0.5) / n as f64;
                    data[y * n + x] = square_wave(f * u + pu) * square_wave(f * v + pv);
                }
            }
        }
        Family::RadialGradient => {
            // corner pixel center is exactly -1; the continuous center is +1
            let c = 0.5;
            let corner = (c - 0.5 / n as f64).hypot(c - 0.5 / n as f64);
            for y in 0..n {
                let v = (y as f64 + 0.5) / n as f64;
                for x in 0..n {
                    let u = (x as f64 + 0.5) / n as f64;
                    let d = (u - c).hypot(v - c);
                    data[y * n + x] = (1.0 - 2.0 * d / corner) as f32;
                }
            }
        }
        Family::LinearRamp => {
            let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
            for y in 0..n {
                for x in 0..n {
                    let u = (x as f64 + 0.5) / n as f64;
                    data[y * n + x] = (sign * (2.0 * u - 1.0)) as f32;
                }
            }
        }
        Family::GaussianBlobs { count } => {
            let centers = place_blobs(count as usize, rng)?;
            let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
            for y in 0..n {
                let v = (y as f64 + 0.5) / n as f64;
                for x in 0..n {
                    let u = (x as f64 + 0.5) / n as f64;
                    let mut acc = 0.0f64;
                    for &(cx, cy) in &centers {
                        let d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                        acc += (-d2 * inv).exp();
                    }
                    data[y * n + x] = ((-1.0 + BLOB_AMPLITUDE * acc).clamp(-1.0, 1.0)) as f32;
                }
            }
        }
    }
    Tensor::new(vec![1, n, n], data)
}

/// Rejection-sample blob centers with a minimum separation. A greedy
/// sequence can paint itself into a corner, so whole layouts restart.
fn place_blobs(count: usize, rng: &mut SeededRng) -> Result<Vec<(f64, f64)>> {
    for _layout in 0..1000 {
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
        'blob: for _ in 0..count {
            for _try in 0..60 {
                let c = (
                    BLOB_MARGIN + (1.0 - 2.0 * BLOB_MARGIN) * rng.next_f64(),
                    BLOB_MARGIN + (1.0 - 2.0 * BLOB_MARGIN) * rng.next_f64(),
                );
                if centers
                    .iter()
                    .all(|&(x, y)| (x - c.0).hypot(y - c.1) >= BLOB_MIN_SEP)
                {
                    centers.push(c);
                    continue 'blob;
                }
            }
            break 'blob;
        }
        if centers.len() == count {
            return Ok(centers);
        }
    }
    Err(CoreError::Input(format!(
        "could not place {count} blobs with separation {BLOB_MIN_SEP}"
    )))
}

// ── Spectral metrics ─────────────────────────────────────────────────

fn channel_mean_plane(image: &Tensor<f32>) -> Result<(usize, Vec<f64>)> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(CoreError::ShapeMismatch {
                op: "spectrum",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if h != w {
        return Err(CoreError::Input(format!(
            "spectral metrics need square images, got {h}x{w}"
        )));
    }
    let data = image.data();
    let mut plane = vec![0.0f64; h * w];
    for ch in 0..c {
        for (p, &v) in plane.iter_mut().zip(&data[ch * h * w..(ch + 1) * h * w]) {
            *p += v as f64;
        }
    }
    for p in plane.iter_mut() {
        *p /= c as f64;
    }
    Ok((h, plane))
}

/// 2-D power spectrum of the mean-removed, channel-averaged image.
pub fn power_spectrum(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let (n, mut plane) = channel_mean_plane(image)?;
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    for p in plane.iter_mut() {
        *p -= mean;
    }

    // separable DFT: rows, then columns
    let mut re = vec![0.0f64; n * n];
    let mut im = vec![0.0f64; n * n];
    let tau = std::f64::consts::TAU;
    for row in 0..n {
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for x in 0..n {
                let ang = tau * (k * x) as f64 / n as f64;
                let v = plane[row * n + x];
                sr += v * ang.cos();
                si -= v * ang.sin();
            }
            re[row * n + k] = sr;
            im[row * n + k] = si;
        }
    }
    let mut power = vec![0.0f64; n * n];
    for k_col in 0..n {
        for k_row in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..n {
                let ang = tau * (k_row * y) as f64 / n as f64;
                let (c, s) = (ang.cos(), -ang.sin());
                let (vr, vi) = (re[y * n + k_col], im[y * n + k_col]);
                sr += vr * c - vi * s;
                si += vr * s + vi * c;
            }
            power[k_row * n + k_col] = sr * sr + si * si;
        }
    }
    Ok(power)
}

/// Dominant frequency in cycles/width: Chebyshev radius of the strongest
/// non-DC bin.
pub fn dominant_frequency(image: &Tensor<f32>) -> Result<f64> {
    let power = power_spectrum(image)?;
    let n = (power.len() as f64).sqrt() as usize;
    let wrap = |k: usize| -> usize { k.min(n - k) };
    let mut best = (0usize, f64::MIN);
    for ky in 0..n {
        for kx in 0..n {
            if kx == 0 && ky == 0 {
                continue;
            }
            let p = power[ky * n + kx];
            if p > best.1 {
                best = (wrap(kx).max(wrap(ky)), p);
            }
        }
    }
    Ok(best.0 as f64)
}

/// |median dominant frequency - analytic class frequency|, cycles/width.
pub fn spectral_peak_error(
    samples: &[Tensor<f32>],
    class_id: usize,
    spec: &SyntheticSpec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::Input("empty sample set".into()));
    }
    let mut freqs = samples
        .iter()
        .map(dominant_frequency)
        .collect::<Result<Vec<f64>>>()?;
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if freqs.len() % 2 == 1 {
        freqs[freqs.len() / 2]
    } else {
        0.5 * (freqs[freqs.len() / 2 - 1] + freqs[freqs.len() / 2])
    };
    Ok((median - spec.analytic_frequency(class_id)?).abs())
}

// ── Histogram distance ───────────────────────────────────────────────

pub const HIST_BINS: usize = 64;

fn intensity_histogram(samples: &[Tensor<f32>]) -> [f64; HIST_BINS] {
    let mut counts = [0.0f64; HIST_BINS];
    let mut total = 0.0;
    for s in samples {
        for &v in s.data() {
            let idx = (((v as f64 + 1.0) / 2.0 * HIST_BINS as f64).floor() as isize)
                .clamp(0, HIST_BINS as isize - 1) as usize;
            counts[idx] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

/// 1-Wasserstein distance between pixel-intensity histograms over 64 bins
/// spanning `[-1, 1]`. Bin positions are the inclusive linspace
/// `-1 + 2i/63`, so two point masses at the range ends are distance 2 apart.
pub fn histogram_w1(samples: &[Tensor<f32>], reference: &[Tensor<f32>]) -> Result<f64> {
    if samples.is_empty() || reference.is_empty() {
        return Err(CoreError::Input(
            "histogram_w1 needs nonempty inputs".into(),
        ));
    }
    let ha = intensity_histogram(samples);
    let hb = intensity_histogram(reference);
    let gap = 2.0 / (HIST_BINS as f64 - 1.0);
    let (mut cdf_a, mut cdf_b, mut w1) = (0.0, 0.0, 0.0);
    for i in 0..HIST_BINS - 1 {
        cdf_a += ha[i];
        cdf_b += hb[i];
        w1 += (cdf_a - cdf_b).abs() * gap;
    }
    Ok(w1)
}

// ── Blob counting ────────────────────────────────────────────────────

/// Count strict local maxima above 0.5 after a 3x3 box smoothing.
pub fn count_blobs(image: &Tensor<f32>) -> Result<usize> {
    let (n, plane) = channel_mean_plane(image)?;
    let mut smooth = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (mut acc, mut cnt) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < n as i64 && xx >= 0 && xx < n as i64 {
                        acc += plane[yy as usize * n + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            smooth[y * n + x] = acc / cnt;
        }
    }
    let mut count = 0;
    for y in 0..n {
        for x in 0..n {
            let v = smooth[y * n + x];
            if v <= 0.5 {
                continue;
            }
            let mut is_max = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0
                        && yy < n as i64
                        && xx >= 0
                        && xx < n as i64
                        && smooth[yy as usize * n + xx as usize] >= v
                    {
                        is_max = false;
                    }
                }
            }
            if is_max {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Fraction of samples whose detected blob count matches `expected`.
pub fn blob_count_accuracy(samples: &[Tensor<f32>], expected: u32) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::Input("empty sample set".into()));
    }
    let hit = samples
        .iter()
        .map(count_blobs)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&c| c == expected as usize)
        .count();
    Ok(hit as f64 / samples.len() as f64)
}

// ── Report ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub class_id: usize,
    pub count: usize,
    pub resolution: usize,
    pub spectral_peak_error: f64,
    pub histogram_w1: f64,
    pub blob_accuracy: Option<f64>,
}

/// Per-class metric table, serialized as TSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "class\tcount\tresolution\tspectral_peak_error\thistogram_w1\tblob_accuracy\n",
        );
        for r in &self.rows {
            let blob = r
                .blob_accuracy
                .map_or("na".to_string(), |b| format!("{b:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\n",
                r.class_id, r.count, r.resolution, r.spectral_peak_error, r.histogram_w1, blob
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if !line.starts_with("class\t") {
                    return Err(CoreError::Persistence("missing report header".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(CoreError::Persistence(format!(
                    "report line {} has {} fields",
                    i + 1,
                    f.len()
                )));
            }
            let parse_err =
                |what: &str| CoreError::Persistence(format!("bad {what} on line {}", i + 1));
            rows.push(EvalRow {
                class_id: f[0].parse().map_err(|_| parse_err("class"))?,
                count: f[1].parse().map_err(|_| parse_err("count"))?,
                resolution: f[2].parse().map_err(|_| parse_err("resolution"))?,
                spectral_peak_error: f[3].parse().map_err(|_| parse_err("spectral error"))?,
                histogram_w1: f[4].parse().map_err(|_| parse_err("w1"))?,
                blob_accuracy: if f[5] == "na" {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| parse_err("blob accuracy"))?)
                },
            });
        }
        Ok(EvalReport { rows })
    }

    /// Combined scalar used for directional comparisons: mean over classes
    /// of (spectral error + W1).
    pub fn combined_metric(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows
            .iter()
            .map(|r| r.spectral_peak_error + r.histogram_w1)
            .sum::<f64>()
            / self.rows.len() as f64
    }
}

/// Evaluate per-class sample sets against fresh reference corpora of the
/// same spec and resolution.
pub fn evaluate(
    groups: &[(usize, Vec<Tensor<f32>>)],
    spec: &SyntheticSpec,
    resolution: usize,
    reference_per_class: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(groups.len());
    for (class_id, samples) in groups {
        if samples.is_empty() {
            return Err(CoreError::Input(format!("class {class_id} has no samples")));
        }
        let mut rng = SeededRng::derive(spec.seed, 0xE7A1, *class_id as u64);
        let reference: Vec<Tensor<f32>> = (0..reference_per_class)
            .map(|_| generate(spec, *class_id, resolution, &mut rng))
            .collect::<Result<_>>()?;
        let blob_accuracy = match spec.expected_blobs(*class_id)? {
            Some(k) => Some(blob_count_accuracy(samples, k)?),
            None => None,
        };
        rows.push(EvalRow {
            class_id: *class_id,
            count: samples.len(),
            resolution,
            spectral_peak_error: spectral_peak_error(samples, *class_id, spec)?,
            histogram_w1: histogram_w1(samples, &reference)?,
            blob_accuracy,
        });
    }
    Ok(EvalReport { rows })
}

// ── Image and corpus IO ──────────────────────────────────────────────

fn to_byte(v: f32) -> u8 {
    (((v as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

/// Write a CHW image as binary PGM (1 channel, P5) or PPM (3 channels, P6),
/// mapping `[-1, 1]` to `[0, 255]`.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(CoreError::ShapeMismatch {
                op: "write_image",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let mut bytes: Vec<u8>;
    let header: String;
    match c {
        1 => {
            header = format!("P5\n{w} {h}\n255\n");
            bytes = Vec::with_capacity(h * w);
            for &v in image.data() {
                bytes.push(to_byte(v));
            }
        }
        3 => {
            header = format!("P6\n{w} {h}\n255\n");
            bytes = Vec::with_capacity(3 * h * w);
            let d = image.data();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        bytes.push(to_byte(d[ch * h * w + y * w + x]));
                    }
                }
            }
        }
        other => {
            return Err(CoreError::Input(format!(
                "image IO supports 1 or 3 channels, got {other}"
            )))
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM/PPM written by [`write_image`] back into `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let header_err = || CoreError::Persistence(format!("bad netpbm header in {}", path.display()));

    // parse "P5|P6 <w> <h> <max>\n" allowing arbitrary whitespace
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    if fields.len() != 4 {
        return Err(header_err());
    }
    pos += 1; // single whitespace after maxval
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(header_err()),
    };
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    if fields[3] != "255" {
        return Err(header_err());
    }
    let need = channels * h * w;
    if raw.len() < pos + need {
        return Err(CoreError::Persistence(format!(
            "truncated image data in {}",
            path.display()
        )));
    }
    let body = &raw[pos..pos + need];
    let mut data = vec![0.0f32; need];
    if channels == 1 {
        for (d, &b) in data.iter_mut().zip(body) {
            *d = from_byte(b);
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = from_byte(body[(y * w + x) * 3 + ch]);
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// One corpus entry: image path (relative to the manifest), class, seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub class_id: usize,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.path, e.class_id, e.seed));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CoreError::Persistence(format!("missing manifest {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(CoreError::Persistence(format!(
                "manifest line {} has {} fields, want 3",
                i + 1,
                f.len()
            )));
        }
        let bad =
            |what: &str| CoreError::Persistence(format!("bad {what} on manifest line {}", i + 1));
        entries.push(ManifestEntry {
            path: f[0].to_string(),
            class_id: f[1].parse().map_err(|_| bad("class"))?,
            seed: f[2].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(entries)
}

/// Generate a corpus directory: one image file per (class, index) plus a
/// `manifest.tsv`. Returns the manifest path.
pub fn write_corpus(
    dir: &Path,
    spec: &SyntheticSpec,
    per_class: usize,
    resolution: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for class_id in 0..spec.class_count {
        for idx in 0..per_class {
            let seed = spec
                .seed
                .wrapping_add((class_id as u64) << 32)
                .wrapping_add(idx as u64);
            let mut rng = SeededRng::new(seed);
            let img = generate(spec, class_id, resolution, &mut rng)?;
            let name = format!("class{class_id}_{idx:05}.pgm");
            write_image(&dir.join(&name), &img)?;
            entries.push(ManifestEntry {
                path: name,
                class_id,
                seed,
            });
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
