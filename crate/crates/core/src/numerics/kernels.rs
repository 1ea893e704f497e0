//! Raw compute kernels shared by the autodiff graph and the no-grad
//! inference path. All kernels are deterministic: every output element is
//! produced by one thread with a fixed summation order, so results do not
//! depend on the rayon thread count.

use crate::real::Real;
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

fn nn_row<'a, R: Real>(
    a: &'a [R],
    b: &'a [R],
    k: usize,
    n: usize,
) -> impl Fn((usize, &mut [R])) + Send + Sync + 'a {
    move |(i, out_row): (usize, &mut [R])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![R::ZERO; m * n];
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(nn_row(a, b, k, n));
    } else {
        out.chunks_mut(n).enumerate().for_each(nn_row(a, b, k, n));
    }
    out
}

/// Single-threaded [`matmul_nn`]; for callers already inside a parallel job.
pub fn matmul_nn_serial<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    out.chunks_mut(n).enumerate().for_each(nn_row(a, b, k, n));
    out
}

fn nt_row<'a, R: Real>(
    a: &'a [R],
    b: &'a [R],
    k: usize,
) -> impl Fn((usize, &mut [R])) + Send + Sync + 'a {
    move |(i, out_row): (usize, &mut [R])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![R::ZERO; m * n];
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(nt_row(a, b, k));
    } else {
        out.chunks_mut(n).enumerate().for_each(nt_row(a, b, k));
    }
    out
}

/// Single-threaded [`matmul_nt`].
pub fn matmul_nt_serial<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![R::ZERO; m * n];
    out.chunks_mut(n).enumerate().for_each(nt_row(a, b, k));
    out
}

fn tn_row<'a, R: Real>(
    a: &'a [R],
    b: &'a [R],
    m: usize,
    k: usize,
    n: usize,
) -> impl Fn((usize, &mut [R])) + Send + Sync + 'a {
    move |(p, out_row): (usize, &mut [R])| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![R::ZERO; k * n];
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(tn_row(a, b, m, k, n));
    } else {
        out.chunks_mut(n)
            .enumerate()
            .for_each(tn_row(a, b, m, k, n));
    }
    out
}

/// Single-threaded [`matmul_tn`].
pub fn matmul_tn_serial<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![R::ZERO; k * n];
    out.chunks_mut(n)
        .enumerate()
        .for_each(tn_row(a, b, m, k, n));
    out
}

/// Row-wise softmax into an existing buffer, single-threaded.
pub fn softmax_rows_inplace<R: Real>(x: &mut [R], cols: usize) {
    for row in x.chunks_mut(cols) {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = R::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = R::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise numerically stabilized softmax.
pub fn softmax_rows<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![R::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maximum(v);
        }
        let mut sum = R::ZERO;
        for (ov, &v) in o.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *ov = e;
            sum += e;
        }
        let inv = R::ONE / sum;
        for ov in o.iter_mut() {
            *ov *= inv;
        }
    }
    out
}

/// Row-wise layer norm without a learned affine. Returns (out, mean, rstd)
/// per row; mean/rstd are saved for the backward pass.
pub fn layernorm_rows<R: Real>(
    x: &[R],
    rows: usize,
    cols: usize,
    eps: R,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![R::ZERO; x.len()];
    let mut means = vec![R::ZERO; rows];
    let mut rstds = vec![R::ZERO; rows];
    let inv_n = R::ONE / R::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = R::ZERO;
        for &v in row.iter() {
            mean += v;
        }
        mean *= inv_n;
        let mut var = R::ZERO;
        for &v in row.iter() {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let rstd = R::ONE / (var + eps).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for (ov, &v) in o.iter_mut().zip(row.iter()) {
            *ov = (v - mean) * rstd;
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (out, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximate GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (R::ONE + u.tanh())
}

pub fn gelu_deriv<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = R::ONE - t * t;
    half * (R::ONE + t) + half * x * sech2 * c * (R::ONE + three * a * x * x)
}

pub fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

pub fn silu_deriv<R: Real>(x: R) -> R {
    let s = sigmoid(x);
    s * (R::ONE + x * (R::ONE - s))
}

pub fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force triple-loop product, the independent oracle.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn arb(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::SeededRng::new(seed);
        (0..len).map(|_| rng.next_f64() * 2.0 - 1.0).collect()
    }

    #[test]
    fn matmul_variants_match_oracle() {
        let (m, k, n) = (5, 7, 4);
        let a = arb(m * k, 1);
        let b = arb(k * n, 2);
        let want = matmul_oracle(&a, &b, m, k, n);
        let got = matmul_nn(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // a * b^T with b stored [n,k]
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let got_nt = matmul_nt(&a, &bt, m, k, n);
        for (g, w) in got_nt.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // a^T * b with a stored [m,k] interpreted transposed: (k x m) * (m x ?) — use fresh shapes
        let c = arb(m * n, 3);
        let want_tn = {
            // a^T [k,m] * c [m,n]
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            matmul_oracle(&at, &c, k, m, n)
        };
        let got_tn = matmul_tn(&a, &c, m, k, n);
        for (g, w) in got_tn.iter().zip(&want_tn) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_parallel_path_matches_serial() {
        // Big enough to cross PAR_THRESHOLD.
        let (m, k, n) = (64, 48, 32);
        let a = arb(m * k, 10);
        let b = arb(k * n, 11);
        let par = matmul_nn(&a, &b, m, k, n);
        let want = matmul_oracle(&a, &b, m, k, n);
        for (g, w) in par.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_inputs() {
        let x = vec![1000.0f32, 1000.0, 0.0, (3.0f32).ln()];
        let s = softmax_rows(&x, 2, 2);
        assert!((s[0] - 0.5).abs() < 1e-6);
        assert!((s[1] - 0.5).abs() < 1e-6);
        assert!((s[2] - 0.25).abs() < 1e-6);
        assert!((s[3] - 0.75).abs() < 1e-6);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layernorm_rows_zero_mean_unit_var() {
        let x = arb(4 * 16, 9).iter().map(|&v| v as f32).collect::<Vec<_>>();
        let (out, _, _) = layernorm_rows(&x, 4, 16, 1e-6f32);
        for r in 0..4 {
            let row = &out[r * 16..(r + 1) * 16];
            let mean: f32 = row.iter().sum::<f32>() / 16.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-5f64;
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let fd_gelu = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd_gelu).abs() < 1e-8, "gelu at {x}");
            let fd_silu = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_deriv(x) - fd_silu).abs() < 1e-8, "silu at {x}");
        }
    }
}
