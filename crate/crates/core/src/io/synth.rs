//! Synthetic paired music and motion with beats known by construction.
//!
//! Every joint turns about its own axis by `amp · (ωs − sin ωs)` with
//! `ω = 2π/P`, which advances monotonically and stalls once per period. The
//! stall sits half a frame after each beat frame, so the frame-to-frame pose
//! change is smallest exactly at the beat.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_motion, write_music, DatasetManifest, SampleEntry, Split};
use crate::error::{Error, Result};
use crate::motion::{
    axis_angle, mat3_mul, random_rotation, rotmat_to_6d, Mat3, MotionSequence, FRAME_DIM,
    NUM_JOINTS,
};
use crate::music::{
    BeatAnnotation, MusicFeatureSequence, BEAT_CHANNEL, CHROMA_DIM, DOWNBEAT_CHANNEL, MUSIC_DIM,
    ONSET_CHANNEL,
};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub frames: usize,
    pub fps: f64,
    pub beat_period: usize,
    pub clips: usize,
    pub seed: u64,
    /// Joint rotation per beat period, in radians.
    pub amplitude: f64,
    /// Motion lag behind the music, in frames.
    #[serde(default)]
    pub phase_shift: usize,
    /// The last `test_clips` clips go to the test split.
    #[serde(default)]
    pub test_clips: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 240,
            fps: 30.0,
            beat_period: 30,
            clips: 4,
            seed: 0,
            amplitude: 1.0,
            phase_shift: 0,
            test_clips: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beat_period < 2 {
            return Err(Error::invalid("beat period must be at least 2 frames"));
        }
        if self.frames < 2 * self.beat_period {
            return Err(Error::invalid("clips must span at least two beat periods"));
        }
        if self.clips == 0 || self.test_clips > self.clips {
            return Err(Error::invalid(
                "need at least one clip and no more test clips than clips",
            ));
        }
        if !(self.fps > 0.0) || !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid("fps and amplitude must be positive"));
        }
        Ok(())
    }

    /// Musical beat frames `0, P, 2P, …`.
    pub fn beat_frames(&self) -> Vec<usize> {
        (0..self.frames).step_by(self.beat_period).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub name: String,
    pub music: MusicFeatureSequence,
    pub motion: MotionSequence,
    pub beats: BeatAnnotation,
}

fn music_features(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<MusicFeatureSequence> {
    let (len, p) = (spec.frames, spec.beat_period);
    let step = Normal::new(0.0, 0.05).expect("valid normal");
    let mut chroma: [f64; CHROMA_DIM] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let mut t = Tensor::zeros(&[len, MUSIC_DIM]);
    for f in 0..len {
        for (c, v) in chroma.iter_mut().enumerate() {
            *v = (*v + step.sample(rng)).clamp(0.0, 1.0);
            t.set(f, c, *v);
        }
        if f % p == 0 {
            t.set(f, BEAT_CHANNEL, 1.0);
        }
        if f % (4 * p) == 0 {
            t.set(f, DOWNBEAT_CHANNEL, 1.0);
        }
        let onset: f64 = (0..len)
            .step_by(p)
            .map(|b| {
                let d = f as f64 - b as f64;
                (-d * d / (2.0 * 1.5 * 1.5)).exp()
            })
            .sum();
        t.set(f, ONSET_CHANNEL, onset);
    }
    MusicFeatureSequence::new(t, spec.fps)
}

fn motion(spec: &SynthSpec, base: &[Mat3], rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let (len, p) = (spec.frames, spec.beat_period as f64);
    let omega = std::f64::consts::TAU / p;
    let joints: Vec<(Mat3, [f64; 3], f64)> = base
        .iter()
        .map(|b| {
            let tweak = axis_angle(
                std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                rng.gen_range(0.0..0.3),
            );
            let axis: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let amp = spec.amplitude * rng.gen_range(0.5..1.0) / std::f64::consts::TAU;
            (mat3_mul(b, &tweak), axis, amp)
        })
        .collect();
    let drift: [f64; 2] = std::array::from_fn(|_| rng.gen_range(-0.01..0.01));
    let mut data = Vec::with_capacity(len * FRAME_DIM);
    for f in 0..len {
        let s = f as f64 - 0.5 - spec.phase_shift as f64;
        let phase = omega * s - (omega * s).sin();
        for (b, axis, amp) in &joints {
            let r = mat3_mul(b, &axis_angle(*axis, amp * phase));
            data.extend_from_slice(&rotmat_to_6d(&r)?);
        }
        data.extend_from_slice(&[drift[0] * f as f64, 0.9, drift[1] * f as f64]);
    }
    MotionSequence::new(Tensor::new(&[len, FRAME_DIM], data)?, spec.fps)
}

/// Generates the clips in memory. Clip `i` depends only on `(seed, i)`.
pub fn synth_clips(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut base_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base: Vec<Mat3> = (0..NUM_JOINTS)
        .map(|_| random_rotation(&mut base_rng))
        .collect();
    (0..spec.clips)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(i as u64 + 1),
            );
            let music = music_features(spec, &mut rng)?;
            let motion = motion(spec, &base, &mut rng)?;
            let beats = BeatAnnotation::new(spec.beat_frames(), spec.frames)?;
            Ok(SynthClip {
                name: format!("clip{i:03}"),
                music,
                motion,
                beats,
            })
        })
        .collect()
}

/// Writes clips and `manifest.json` into `dir`.
pub fn synth_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let clips = synth_clips(spec)?;
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let music_file = format!("{}.music.mdrt", c.name);
        let motion_file = format!("{}.motion.mdrt", c.name);
        write_music(dir.join(&music_file), &c.music, &c.beats)?;
        write_motion(dir.join(&motion_file), &c.motion, &c.name)?;
        samples.push(SampleEntry {
            name: c.name.clone(),
            music_file,
            motion_file,
            fps: spec.fps,
            beat_frames: c.beats.beat_frames.clone(),
            key_frames: Vec::new(),
            split: if i >= spec.clips - spec.test_clips {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    let manifest = DatasetManifest { samples };
    manifest.save(dir.join("manifest.json"))?;
    fs::write(
        dir.join("synth.json"),
        serde_json::to_string_pretty(spec)? + "\n",
    )?;
    Ok(manifest)
}
