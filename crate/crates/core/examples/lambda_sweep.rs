//! Trains one tiny model per λ on the same clips and prints consistency
//! error and smoothness on the training clips' key frames.
//!
//! `cargo run --release --example lambda_sweep -- 1000` matches the
//! acceptance run.

use dancegen::io::{synth_clips, SynthSpec};
use dancegen::model::{
    lambda_sweep, spearman, DanceModelConfig, KeySampling, Preset, SweepSettings, TrainSample,
    TrainSchedule,
};

fn main() -> dancegen::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let data: Vec<TrainSample> = synth_clips(&SynthSpec {
        clips: 6,
        seed: 1,
        ..Default::default()
    })?
    .into_iter()
    .map(|c| TrainSample::new(c.music, c.motion, vec![75, 135, 195]))
    .collect::<dancegen::Result<_>>()?;
    let settings = SweepSettings {
        lambdas: vec![0.0, 1.0, 3.0, 5.0],
        sigma: 0.1,
        config: DanceModelConfig::preset(Preset::Tiny),
        schedule: TrainSchedule::scaled(steps, 1e-3, 2),
        seed: 0,
        key_sampling: KeySampling::Fixed,
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rows = lambda_sweep(&data, &data, &settings, jobs)?;
    println!("lambda,consistency_error,smoothness_cv,final_train_loss");
    for r in &rows {
        println!(
            "{},{:.5},{:.5},{:.5}",
            r.lambda, r.consistency_error, r.smoothness_cv, r.final_train_loss
        );
    }
    let l: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let cv: Vec<f64> = rows.iter().map(|r| r.smoothness_cv).collect();
    println!("spearman(λ, S_cv) = {:.3}", spearman(&l, &cv));
    Ok(())
}
