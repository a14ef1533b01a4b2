//! Pose and motion representations.
//!
//! A frame is 147 values: 24 joints × 6-D rotation (the first two columns of
//! each joint's rotation matrix) followed by the 3-D root translation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const NUM_JOINTS: usize = 24;
pub const ROT6D_DIM: usize = 6;
/// Rotation part of a frame.
pub const POSE_DIM: usize = NUM_JOINTS * ROT6D_DIM;
/// Full frame: pose followed by root translation.
pub const FRAME_DIM: usize = POSE_DIM + 3;
pub const DEFAULT_FPS: f64 = 30.0;

/// Row-major 3×3 matrix, `m[row][col]`.
pub type Mat3 = [[f64; 3]; 3];

const ROT_TOL: f64 = 1e-6;

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn det3(m: &Mat3) -> f64 {
    let c0 = [m[0][0], m[1][0], m[2][0]];
    let c1 = [m[0][1], m[1][1], m[2][1]];
    let c2 = [m[0][2], m[1][2], m[2][2]];
    dot3(c0, cross3(c1, c2))
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Largest deviation of `RᵀR` from the identity.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let s: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
    }
    worst
}

/// Rodrigues rotation about a (not necessarily unit) axis.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = norm3(axis);
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Uniformly distributed rotation (via a normalized Gaussian quaternion).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        return [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
    }
}

/// First two columns of a rotation, column-major: `[c0; c1]`.
pub fn rotmat_to_6d(r: &Mat3) -> Result<[f64; 6]> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("rotation matrix has non-finite entries"));
    }
    let ortho = orthonormality_error(r);
    let det = det3(r);
    if ortho > ROT_TOL || (det - 1.0).abs() > ROT_TOL {
        return Err(Error::invalid(format!(
            "not a rotation (orthonormality error {ortho:.3e}, det {det:.6})"
        )));
    }
    Ok([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
}

/// Gram-Schmidt decoding of a 6-D rotation.
pub fn sixd_to_rotmat(v: &[f64]) -> Result<Mat3> {
    if v.len() != ROT6D_DIM {
        return Err(Error::dim(format!(
            "6-D rotation needs 6 values, got {}",
            v.len()
        )));
    }
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let (n1, n2) = (norm3(a1), norm3(a2));
    if !(n1 > 1e-8 && n2 > 1e-8) {
        return Err(Error::invalid("6-D rotation has a near-zero column"));
    }
    let cos = dot3(a1, a2) / (n1 * n2);
    if cos.abs() >= 1.0 - 1e-8 {
        return Err(Error::invalid("6-D rotation columns are collinear"));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let p = dot3(b1, a2);
    let u = [a2[0] - p * b1[0], a2[1] - p * b1[1], a2[2] - p * b1[2]];
    let nu = norm3(u);
    let b2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let b3 = cross3(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// 144 rotation coordinates of one body pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseVector(Vec<f64>);

impl PoseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::dim(format!(
                "pose needs {POSE_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose has non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn from_rotations(rots: &[Mat3]) -> Result<Self> {
        if rots.len() != NUM_JOINTS {
            return Err(Error::dim(format!(
                "expected {NUM_JOINTS} joint rotations, got {}",
                rots.len()
            )));
        }
        let mut v = Vec::with_capacity(POSE_DIM);
        for r in rots {
            v.extend_from_slice(&rotmat_to_6d(r)?);
        }
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        &self.0[j * ROT6D_DIM..(j + 1) * ROT6D_DIM]
    }

    /// Decodes every joint; fails if any joint's columns are degenerate.
    pub fn to_rotations(&self) -> Result<Vec<Mat3>> {
        (0..NUM_JOINTS)
            .map(|j| sixd_to_rotmat(self.joint(j)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    pub pose: PoseVector,
    pub translation: [f64; 3],
}

/// `T × 147` motion clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if frames.ndim() != 2 || frames.cols() != FRAME_DIM {
            return Err(Error::dim(format!(
                "motion must be [T x {FRAME_DIM}], got {:?}",
                frames.shape()
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::invalid("motion has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("motion has non-finite values"));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(Self { frames, fps })
    }

    pub fn from_frames(frames: &[MotionFrame], fps: f64) -> Result<Self> {
        let rows: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| {
                let mut r = f.pose.values().to_vec();
                r.extend_from_slice(&f.translation);
                r
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::invalid("motion has no frames"));
        }
        Self::new(Tensor::from_rows(&rows)?, fps)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn pose(&self, t: usize) -> &[f64] {
        &self.frames.row(t)[..POSE_DIM]
    }

    pub fn translation(&self, t: usize) -> [f64; 3] {
        let r = self.frames.row(t);
        [r[POSE_DIM], r[POSE_DIM + 1], r[POSE_DIM + 2]]
    }

    pub fn motion_frame(&self, t: usize) -> MotionFrame {
        MotionFrame {
            pose: PoseVector(self.pose(t).to_vec()),
            translation: self.translation(t),
        }
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "frame range {start}..{end} of {}",
                self.len()
            )));
        }
        let data = self.frames.data()[start * FRAME_DIM..end * FRAME_DIM].to_vec();
        Self::new(Tensor::new(&[end - start, FRAME_DIM], data)?, self.fps)
    }

    /// Adds a constant offset to every root translation.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut frames = self.frames.clone();
        for t in 0..frames.rows() {
            let r = frames.row_mut(t);
            for k in 0..3 {
                r[POSE_DIM + k] += offset[k];
            }
        }
        Self {
            frames,
            fps: self.fps,
        }
    }
}

/// One pose constraint: the body pose (no translation) expected at `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPose {
    pub frame: usize,
    pub pose: PoseVector,
}

/// Key poses sorted by strictly increasing frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyPoseSet {
    keys: Vec<KeyPose>,
}

impl KeyPoseSet {
    pub fn new(keys: Vec<KeyPose>) -> Result<Self> {
        if keys.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(Error::invalid(
                "key pose frames must be strictly increasing",
            ));
        }
        Ok(Self { keys })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KeyPose> {
        self.keys.iter()
    }

    pub fn keys(&self) -> &[KeyPose] {
        &self.keys
    }

    pub fn frames(&self) -> Vec<usize> {
        self.keys.iter().map(|k| k.frame).collect()
    }

    /// Checks every index against a timeline of `len` frames whose first
    /// `seed_len` frames are the seed. Seed-span keys are rejected unless
    /// `allow_seed_span` is set.
    pub fn validate(&self, len: usize, seed_len: usize, allow_seed_span: bool) -> Result<()> {
        for k in &self.keys {
            if k.frame >= len {
                return Err(Error::invalid(format!(
                    "key pose at frame {} outside 0..{len}",
                    k.frame
                )));
            }
            if !allow_seed_span && k.frame < seed_len {
                return Err(Error::invalid(format!(
                    "key pose at frame {} lies in the seed span 0..{seed_len}",
                    k.frame
                )));
            }
        }
        Ok(())
    }

    /// Copy with one key's pose replaced.
    pub fn with_pose(&self, index: usize, pose: PoseVector) -> Self {
        let mut keys = self.keys.clone();
        keys[index].pose = pose;
        Self { keys }
    }
}

/// Copies the pose part of `motion` at each position.
pub fn extract_key_poses(motion: &MotionSequence, positions: &[usize]) -> Result<KeyPoseSet> {
    let keys = positions
        .iter()
        .map(|&t| {
            if t >= motion.len() {
                return Err(Error::invalid(format!(
                    "key position {t} outside 0..{}",
                    motion.len()
                )));
            }
            Ok(KeyPose {
                frame: t,
                pose: PoseVector(motion.pose(t).to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    KeyPoseSet::new(keys)
}

/// How key positions are chosen inside the generated span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStrategy {
    Uniform,
    Random,
    BeatAligned(Vec<usize>),
}

/// `count` strictly increasing frame indices in `seed_len..len`.
pub fn sample_key_positions(
    len: usize,
    seed_len: usize,
    count: usize,
    strategy: &KeyStrategy,
    seed: u64,
) -> Result<Vec<usize>> {
    let span = len.saturating_sub(seed_len);
    if count > span {
        return Err(Error::invalid(format!(
            "cannot place {count} key poses in a span of {span} frames"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let positions = match strategy {
        KeyStrategy::Uniform => (0..count).map(|k| seed_len + k * span / count).collect(),
        KeyStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<usize> = sample(&mut rng, span, count)
                .into_iter()
                .map(|i| seed_len + i)
                .collect();
            v.sort_unstable();
            v
        }
        KeyStrategy::BeatAligned(beats) => {
            let mut inside: Vec<usize> = beats
                .iter()
                .copied()
                .filter(|&b| b >= seed_len && b < len)
                .collect();
            inside.sort_unstable();
            inside.dedup();
            if inside.len() < count {
                return Err(Error::invalid(format!(
                    "only {} beats inside the generated span, {count} requested",
                    inside.len()
                )));
            }
            (0..count)
                .map(|k| inside[k * inside.len() / count])
                .collect()
        }
    };
    Ok(positions)
}

/// `v_t = ‖pose_{t+1} − pose_t‖₂` over the rotation part; length `T − 1`.
pub fn kinetic_velocity(motion: &MotionSequence) -> Result<Vec<f64>> {
    if motion.len() < 2 {
        return Err(Error::invalid("kinetic velocity needs at least two frames"));
    }
    Ok((0..motion.len() - 1)
        .map(|t| {
            motion
                .pose(t + 1)
                .iter()
                .zip(motion.pose(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}
