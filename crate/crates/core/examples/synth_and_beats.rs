//! Generates synthetic clips and compares detected motion beats with the
//! musical beats they were built on, with and without a half-period lag.

use dancegen::eval::{beat_hit_rate, detect_motion_beats};
use dancegen::io::{synth_clips, synth_dataset, SynthSpec};

fn main() -> dancegen::Result<()> {
    let spec = SynthSpec {
        frames: 480,
        clips: 2,
        ..Default::default()
    };
    for (label, spec) in [
        ("aligned", spec.clone()),
        (
            "half-period lag",
            SynthSpec {
                phase_shift: 15,
                ..spec
            },
        ),
    ] {
        for clip in synth_clips(&spec)? {
            let beats = detect_motion_beats(&clip.motion)?;
            let rates: Vec<String> = (1..=5)
                .map(|d| {
                    Ok(format!(
                        "{:.3}",
                        beat_hit_rate(&beats, &clip.beats.beat_frames, d, spec.fps)?
                            .value()
                            .unwrap_or(0.0)
                    ))
                })
                .collect::<dancegen::Result<_>>()?;
            println!("{label:>16} {}: motion beats {:?}", clip.name, &beats[..4]);
            println!("{:>16} hit rate δ=1..5 {}", "", rates.join(" "));
        }
    }

    let dir = std::env::temp_dir().join("dancegen-synth-example");
    let manifest = synth_dataset(
        &SynthSpec {
            clips: 3,
            test_clips: 1,
            ..Default::default()
        },
        &dir,
    )?;
    println!(
        "wrote {} clips to {}",
        manifest.samples.len(),
        dir.display()
    );
    Ok(())
}
