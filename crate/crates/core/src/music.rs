//! Per-frame music features and beat annotations.
//!
//! Column layout: chroma `0..12`, beat flag `12`, downbeat flag `13`,
//! onset strength `14`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const CHROMA_DIM: usize = 12;
pub const BEAT_CHANNEL: usize = 12;
pub const DOWNBEAT_CHANNEL: usize = 13;
pub const ONSET_CHANNEL: usize = 14;
pub const MUSIC_DIM: usize = 15;
pub const DEFAULT_BEAT_THRESHOLD: f64 = 0.5;

/// One frame of features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MusicFeatureFrame {
    pub chroma: [f64; CHROMA_DIM],
    pub downbeat: [f64; 2],
    pub onset: f64,
}

impl MusicFeatureFrame {
    pub fn to_array(&self) -> [f64; MUSIC_DIM] {
        let mut out = [0.0; MUSIC_DIM];
        out[..CHROMA_DIM].copy_from_slice(&self.chroma);
        out[BEAT_CHANNEL] = self.downbeat[0];
        out[DOWNBEAT_CHANNEL] = self.downbeat[1];
        out[ONSET_CHANNEL] = self.onset;
        out
    }
}

/// `T × 15` feature matrix at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicFeatureSequence {
    features: Tensor,
    fps: f64,
}

impl MusicFeatureSequence {
    /// Wraps a `T × 15` tensor, clamping chroma into `[0, 1]`.
    pub fn new(mut features: Tensor, fps: f64) -> Result<Self> {
        if features.ndim() != 2 || features.cols() != MUSIC_DIM {
            return Err(Error::dim(format!(
                "music features must be [T x {MUSIC_DIM}], got {:?}",
                features.shape()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::invalid("music has no frames"));
        }
        if !features.is_finite() {
            return Err(Error::invalid("music features contain non-finite values"));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        for t in 0..features.rows() {
            for c in &mut features.row_mut(t)[..CHROMA_DIM] {
                *c = c.clamp(0.0, 1.0);
            }
        }
        Ok(Self { features, fps })
    }

    pub fn from_frames(frames: &[MusicFeatureFrame], fps: f64) -> Result<Self> {
        let rows: Vec<[f64; MUSIC_DIM]> = frames.iter().map(MusicFeatureFrame::to_array).collect();
        if rows.is_empty() {
            return Err(Error::invalid("music has no frames"));
        }
        Self::new(Tensor::from_rows(&rows)?, fps)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }

    fn columns(&self, start: usize, width: usize) -> Tensor {
        let data = (0..self.len())
            .flat_map(|t| self.features.row(t)[start..start + width].to_vec())
            .collect();
        Tensor::new(&[self.len(), width], data).expect("column slice shape")
    }

    pub fn chroma(&self) -> Tensor {
        self.columns(0, CHROMA_DIM)
    }

    pub fn downbeat(&self) -> Tensor {
        self.columns(BEAT_CHANNEL, 2)
    }

    pub fn onset(&self) -> Tensor {
        self.columns(ONSET_CHANNEL, 1)
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} of {}",
                self.len()
            )));
        }
        let data = self.features.data()[start * MUSIC_DIM..end * MUSIC_DIM].to_vec();
        Self::new(Tensor::new(&[end - start, MUSIC_DIM], data)?, self.fps)
    }
}

/// Concatenates chroma `[T×12]`, downbeat `[T×2]` and onset `[T×1]`.
pub fn assemble_features(
    chroma: &Tensor,
    downbeat: &Tensor,
    onset: &Tensor,
    fps: f64,
) -> Result<MusicFeatureSequence> {
    let parts = [
        (chroma, CHROMA_DIM, "chroma"),
        (downbeat, 2, "downbeat"),
        (onset, 1, "onset"),
    ];
    for (t, width, name) in parts {
        if t.ndim() != 2 || t.cols() != width {
            return Err(Error::dim(format!(
                "{name} must be [T x {width}], got {:?}",
                t.shape()
            )));
        }
    }
    let len = chroma.rows();
    if downbeat.rows() != len || onset.rows() != len {
        return Err(Error::invalid(format!(
            "feature lengths differ: chroma {len}, downbeat {}, onset {}",
            downbeat.rows(),
            onset.rows()
        )));
    }
    let mut data = Vec::with_capacity(len * MUSIC_DIM);
    for t in 0..len {
        data.extend_from_slice(chroma.row(t));
        data.extend_from_slice(downbeat.row(t));
        data.extend_from_slice(onset.row(t));
    }
    MusicFeatureSequence::new(Tensor::new(&[len, MUSIC_DIM], data)?, fps)
}

/// Sorted musical beat frames.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatAnnotation {
    pub beat_frames: Vec<usize>,
}

impl BeatAnnotation {
    pub fn new(beat_frames: Vec<usize>, len: usize) -> Result<Self> {
        if beat_frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("beat frames must be strictly increasing"));
        }
        if let Some(&b) = beat_frames.iter().find(|&&b| b >= len) {
            return Err(Error::invalid(format!("beat frame {b} outside 0..{len}")));
        }
        Ok(Self { beat_frames })
    }

    pub fn len(&self) -> usize {
        self.beat_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beat_frames.is_empty()
    }
}

/// Frames whose beat flag exceeds `threshold`.
pub fn musical_beats(features: &MusicFeatureSequence, threshold: f64) -> BeatAnnotation {
    BeatAnnotation {
        beat_frames: (0..features.len())
            .filter(|&t| features.frame(t)[BEAT_CHANNEL] > threshold)
            .collect(),
    }
}
