//! Quantitative metrics: key-pose consistency, smoothness and beat alignment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{kinetic_velocity, KeyPoseSet, MotionSequence};

pub const DEFAULT_DELTAS: [usize; 5] = [1, 2, 3, 4, 5];

/// Why a metric has no value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    NoKeys,
    FrozenMotion,
    NoMusicalBeats,
}

/// A metric value or the reason it is undefined. Serializes as a number or
/// as a snake_case string.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Value(f64),
    Undefined(Undefined),
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::Undefined(_) => None,
        }
    }

    fn csv(self) -> String {
        match self {
            MetricValue::Value(v) => format!("{v}"),
            MetricValue::Undefined(u) => serde_json::to_value(u)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
        }
    }
}

/// Mean squared pose error at the key frames (rotation part only).
pub fn consistency_error(generated: &MotionSequence, keys: &KeyPoseSet) -> Result<MetricValue> {
    if keys.is_empty() {
        return Ok(MetricValue::Undefined(Undefined::NoKeys));
    }
    let mut total = 0.0;
    for k in keys.iter() {
        if k.frame >= generated.len() {
            return Err(Error::invalid(format!(
                "key pose at frame {} outside the generated 0..{}",
                k.frame,
                generated.len()
            )));
        }
        total += generated
            .pose(k.frame)
            .iter()
            .zip(k.pose.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(MetricValue::Value(total / keys.len() as f64))
}

/// Coefficient of variation (population sd over |mean|) of the per-frame
/// difference norms over all 147 values.
pub fn smoothness_cv(motion: &MotionSequence) -> Result<MetricValue> {
    if motion.len() < 3 {
        return Err(Error::invalid("smoothness needs at least three frames"));
    }
    let d: Vec<f64> = (0..motion.len() - 1)
        .map(|t| {
            motion
                .frame(t + 1)
                .iter()
                .zip(motion.frame(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(coefficient_of_variation(&d))
}

pub(crate) fn coefficient_of_variation(d: &[f64]) -> MetricValue {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return MetricValue::Undefined(Undefined::FrozenMotion);
    }
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MetricValue::Value(var.sqrt() / mean.abs())
}

/// Strict local minima of a series; a flat-bottomed minimum reports its first index.
pub fn local_minima(v: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < v.len() {
        if v[i - 1] > v[i] {
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[i] {
                j += 1;
            }
            if j + 1 < v.len() && v[j + 1] > v[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Motion beats: local minima of the kinetic velocity.
pub fn detect_motion_beats(motion: &MotionSequence) -> Result<Vec<usize>> {
    if motion.len() < 3 {
        return Err(Error::invalid("beat detection needs at least three frames"));
    }
    Ok(local_minima(&kinetic_velocity(motion)?))
}

/// Number of musical beats with a motion beat within `delta` frames.
pub fn beat_hits(motion_beats: &[usize], music_beats: &[usize], delta: usize) -> usize {
    music_beats
        .iter()
        .filter(|&&m| motion_beats.iter().any(|&b| b.abs_diff(m) <= delta))
        .count()
}

/// Fraction of musical beats hit within `delta` frames (`delta / fps` seconds).
pub fn beat_hit_rate(
    motion_beats: &[usize],
    music_beats: &[usize],
    delta: usize,
    fps: f64,
) -> Result<MetricValue> {
    if !(fps > 0.0) {
        return Err(Error::invalid("fps must be positive"));
    }
    if music_beats.is_empty() {
        return Ok(MetricValue::Undefined(Undefined::NoMusicalBeats));
    }
    Ok(MetricValue::Value(
        beat_hits(motion_beats, music_beats, delta) as f64 / music_beats.len() as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub consistency_error: MetricValue,
    pub smoothness_cv: MetricValue,
    pub beat_hit_rate: BTreeMap<usize, MetricValue>,
    pub beat_hits: BTreeMap<usize, usize>,
    pub num_musical_beats: usize,
    pub num_motion_beats: usize,
    pub fps: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str =
        "delta,beat_hit_rate,beat_hits,musical_beats,motion_beats,consistency_error,smoothness_cv";

    /// One row per delta.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (delta, rate) in &self.beat_hit_rate {
            let _ = writeln!(
                s,
                "{delta},{},{},{},{},{},{}",
                rate.csv(),
                self.beat_hits[delta],
                self.num_musical_beats,
                self.num_motion_beats,
                self.consistency_error.csv(),
                self.smoothness_cv.csv()
            );
        }
        s
    }
}

/// All metrics for one generated clip.
pub fn evaluate(
    generated: &MotionSequence,
    keys: &KeyPoseSet,
    music_beats: &[usize],
    deltas: &[usize],
    fps: f64,
) -> Result<EvalReport> {
    let motion_beats = detect_motion_beats(generated)?;
    let mut rates = BTreeMap::new();
    let mut hits = BTreeMap::new();
    for &d in deltas {
        rates.insert(d, beat_hit_rate(&motion_beats, music_beats, d, fps)?);
        hits.insert(d, beat_hits(&motion_beats, music_beats, d));
    }
    Ok(EvalReport {
        consistency_error: consistency_error(generated, keys)?,
        smoothness_cv: smoothness_cv(generated)?,
        beat_hit_rate: rates,
        beat_hits: hits,
        num_musical_beats: music_beats.len(),
        num_motion_beats: motion_beats.len(),
        fps,
    })
}
