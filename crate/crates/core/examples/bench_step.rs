use rpe2d_core::config::RunConfig;
use rpe2d_core::model::ScaleMode;
use rpe2d_core::train::{build_batch, Trainer};
use std::time::Instant;

fn main() {
    let run = RunConfig {
        data_class_count: 6,
        ..RunConfig::default()
    };
    let mut t = Trainer::new(run.clone()).unwrap();

    let t0 = Instant::now();
    for s in 0..10 {
        let _ = build_batch(&run, s).unwrap();
    }
    println!(
        "build_batch: {:.1} ms/step",
        t0.elapsed().as_secs_f64() * 100.0
    );

    let (items, targets) = build_batch(&run, 0).unwrap();
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = t
            .model
            .loss_and_grads(&items, &targets, ScaleMode::Train)
            .unwrap();
    }
    println!(
        "loss_and_grads: {:.1} ms/step",
        t0.elapsed().as_secs_f64() * 100.0
    );

    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = t.model.forward_batch(&items, ScaleMode::Train).unwrap();
    }
    println!(
        "forward only: {:.1} ms/step",
        t0.elapsed().as_secs_f64() * 100.0
    );

    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = t.step_once().unwrap();
    }
    println!(
        "full step: {:.1} ms/step",
        t0.elapsed().as_secs_f64() * 100.0
    );
}
