//! Trains briefly, then generates one clip with and without key poses and
//! reports how closely the output meets the keys.

use dancegen::eval::consistency_error;
use dancegen::io::{synth_clips, SynthSpec};
use dancegen::model::{
    generate, generate_strict, train_new, DanceModelConfig, LossParams, Preset, TrainOptions,
    TrainSample, TrainSchedule,
};
use dancegen::motion::{extract_key_poses, KeyPoseSet};

fn main() -> dancegen::Result<()> {
    let data: Vec<TrainSample> = synth_clips(&SynthSpec {
        clips: 2,
        ..Default::default()
    })?
    .into_iter()
    .map(|c| TrainSample::new(c.music, c.motion, vec![75, 135, 195]))
    .collect::<dancegen::Result<_>>()?;
    let opts = TrainOptions::new(
        LossParams::default(),
        TrainSchedule::scaled(300, 1e-3, 2),
        0,
    );
    let (model, _) = train_new(DanceModelConfig::preset(Preset::Tiny), &data, &[], &opts)?;

    let clip = &data[0];
    let seed = clip.seed(model.config().seed_len)?;
    let keys = extract_key_poses(&clip.motion, &clip.key_frames)?;
    let with = generate_strict(&model, &clip.music, &seed, &keys)?;
    let without = generate(&model, &clip.music, &seed, &KeyPoseSet::empty())?;
    println!(
        "generated {} frames; the first {} repeat the seed",
        with.len(),
        seed.len()
    );
    println!(
        "consistency error with keys:    {:?}",
        consistency_error(&with, &keys)?
    );
    println!(
        "consistency error without keys: {:?}",
        consistency_error(&without, &keys)?
    );

    // keys inside the seed span are refused unless explicitly allowed
    let early = extract_key_poses(&clip.motion, &[10])?;
    println!(
        "strict generation with a seed-span key: {}",
        generate_strict(&model, &clip.music, &seed, &early).unwrap_err()
    );
    Ok(())
}
