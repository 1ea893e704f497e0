use rpe2d_core::numerics::kernels::matmul_nn;
use std::time::Instant;

fn main() {
    let cases = [
        (1024usize, 64usize, 192usize),
        (1024, 64, 256),
        (1024, 256, 64),
        (64, 16, 64),
    ];
    for (m, k, n) in cases {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        // warmup
        let _ = matmul_nn(&a, &b, m, k, n);
        let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
        let t0 = Instant::now();
        for _ in 0..reps {
            let out = matmul_nn(&a, &b, m, k, n);
            std::hint::black_box(&out);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("{m}x{k}x{n}: {gflops:.2} GFLOP/s ({reps} reps)");
    }
}
