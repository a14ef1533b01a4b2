//! Motion and music files with JSON sidecars, and the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::model::TrainSample;
use crate::motion::MotionSequence;
use crate::music::{BeatAnnotation, MusicFeatureSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSidecar {
    pub fps: f64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MusicSidecar {
    pub fps: f64,
    pub beat_frames: Vec<usize>,
}

/// `clip.mdrt` → `clip.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_motion(path: impl AsRef<Path>, motion: &MotionSequence, name: &str) -> Result<()> {
    let path = path.as_ref();
    write_tensor(path, motion.tensor())?;
    let side = MotionSidecar {
        fps: motion.fps(),
        name: name.to_string(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&side)? + "\n",
    )?;
    Ok(())
}

/// Reads a motion file; the frame rate comes from the sidecar when present.
pub fn read_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let side = sidecar_path(path);
    let fps = if side.exists() {
        serde_json::from_str::<MotionSidecar>(&fs::read_to_string(side)?)?.fps
    } else {
        crate::motion::DEFAULT_FPS
    };
    MotionSequence::new(t, fps)
}

pub fn write_music(
    path: impl AsRef<Path>,
    music: &MusicFeatureSequence,
    beats: &BeatAnnotation,
) -> Result<()> {
    let path = path.as_ref();
    write_tensor(path, music.tensor())?;
    let side = MusicSidecar {
        fps: music.fps(),
        beat_frames: beats.beat_frames.clone(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&side)? + "\n",
    )?;
    Ok(())
}

/// Reads music features and their beat list. Without a sidecar the beats
/// come from the beat channel.
pub fn read_music(path: impl AsRef<Path>) -> Result<(MusicFeatureSequence, BeatAnnotation)> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let side = sidecar_path(path);
    if side.exists() {
        let s: MusicSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
        let music = MusicFeatureSequence::new(t, s.fps)?;
        let beats = BeatAnnotation::new(s.beat_frames, music.len())?;
        Ok((music, beats))
    } else {
        let music = MusicFeatureSequence::new(t, crate::motion::DEFAULT_FPS)?;
        let beats = crate::music::musical_beats(&music, crate::music::DEFAULT_BEAT_THRESHOLD);
        Ok((music, beats))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub name: String,
    /// Paths relative to the manifest's directory.
    pub music_file: String,
    pub motion_file: String,
    pub fps: f64,
    pub beat_frames: Vec<usize>,
    #[serde(default)]
    pub key_frames: Vec<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
}

/// A sample read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub entry: SampleEntry,
    pub music: MusicFeatureSequence,
    pub motion: MotionSequence,
}

impl LoadedSample {
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        TrainSample::new(
            self.music.clone(),
            self.motion.clone(),
            self.entry.key_frames.clone(),
        )
    }
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every sample of `split` (all samples when `None`), checking that
    /// files exist and frame rates agree.
    pub fn load_samples(
        &self,
        root: impl AsRef<Path>,
        split: Option<Split>,
    ) -> Result<Vec<LoadedSample>> {
        let root = root.as_ref();
        self.samples
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| {
                let (music, _) = read_music(root.join(&e.music_file))?;
                let motion = read_motion(root.join(&e.motion_file))?;
                if music.fps() != e.fps || motion.fps() != e.fps {
                    return Err(Error::invalid(format!(
                        "sample {} has inconsistent frame rates",
                        e.name
                    )));
                }
                BeatAnnotation::new(e.beat_frames.clone(), music.len())?;
                Ok(LoadedSample {
                    entry: e.clone(),
                    music,
                    motion,
                })
            })
            .collect()
    }
}
