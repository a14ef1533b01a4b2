//! Scores ground truth against itself and a frozen copy, printing the JSON
//! report and the per-delta CSV.

use dancegen::eval::{evaluate, DEFAULT_DELTAS};
use dancegen::io::{synth_clips, SynthSpec};
use dancegen::motion::{extract_key_poses, MotionSequence};
use dancegen::numeric::Tensor;

fn main() -> dancegen::Result<()> {
    let clip = synth_clips(&SynthSpec {
        frames: 480,
        clips: 1,
        ..Default::default()
    })?
    .remove(0);
    let keys = extract_key_poses(&clip.motion, &[100, 250, 400])?;
    let report = evaluate(
        &clip.motion,
        &keys,
        &clip.beats.beat_frames,
        &DEFAULT_DELTAS,
        clip.motion.fps(),
    )?;
    println!("{}", report.to_json()?);
    print!("{}", report.to_csv());

    // every frame equal to the first: smoothness is undefined, not zero
    let first = clip.motion.frame(0).to_vec();
    let frozen = MotionSequence::new(
        Tensor::new(
            &[clip.motion.len(), first.len()],
            first.repeat(clip.motion.len()),
        )?,
        clip.motion.fps(),
    )?;
    let r = evaluate(&frozen, &keys, &clip.beats.beat_frames, &[2], frozen.fps())?;
    println!(
        "frozen motion: E_c {:?}, S_cv {:?}",
        r.consistency_error, r.smoothness_cv
    );
    Ok(())
}
