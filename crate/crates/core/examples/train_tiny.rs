//! Overfits the tiny preset on two synthetic clips and saves a checkpoint.
//!
//! `cargo run --release --example train_tiny -- 2000` runs the full length.

use dancegen::io::{save_checkpoint, synth_clips, CheckpointManifest, SynthSpec};
use dancegen::model::{
    dataset_loss, train_new, DanceModelConfig, LossParams, Preset, TrainOptions, TrainSample,
    TrainSchedule,
};

fn main() -> dancegen::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let data: Vec<TrainSample> = synth_clips(&SynthSpec {
        clips: 2,
        ..Default::default()
    })?
    .into_iter()
    .map(|c| TrainSample::new(c.music, c.motion, vec![75, 135, 195]))
    .collect::<dancegen::Result<_>>()?;
    let config = DanceModelConfig::preset(Preset::Tiny);
    let loss = LossParams::default();
    let opts = TrainOptions::new(loss, TrainSchedule::scaled(steps, 1e-3, 2), 0);
    let (model, log) = train_new(config, &data, &[], &opts)?;
    for e in log.entries.iter().step_by((steps as usize / 10).max(1)) {
        println!("step {:>5}  lr {:.0e}  loss {:.4}", e.step, e.lr, e.loss);
    }
    println!(
        "final dataset loss {:.4}",
        dataset_loss(&model, &data, &loss)?
    );

    let dir = std::env::temp_dir().join("dancegen-tiny-checkpoint");
    let manifest = CheckpointManifest {
        config,
        loss_params: loss,
        train: Some(opts),
        seed: 0,
        step: steps,
    };
    save_checkpoint(&dir, &model, &manifest)?;
    println!("checkpoint in {}", dir.display());
    Ok(())
}
