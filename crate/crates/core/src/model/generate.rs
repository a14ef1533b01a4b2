use crate::error::Result;
use crate::motion::{KeyPoseSet, MotionSequence};
use crate::music::MusicFeatureSequence;
use crate::numeric::Tensor;

use super::net::DanceModel;

/// One-shot generation. The result covers all `T` music frames: the first
/// `T′` rows repeat the seed and the rest are predicted.
pub fn generate(
    model: &DanceModel,
    music: &MusicFeatureSequence,
    seed: &MotionSequence,
    keys: &KeyPoseSet,
) -> Result<MotionSequence> {
    keys.validate(music.len(), seed.len(), true)?;
    let pred = model.forward(music, seed, keys)?;
    let mut data = seed.tensor().data().to_vec();
    let cols = seed.tensor().cols();
    data.extend_from_slice(&pred.tensor().data()[seed.len() * cols..]);
    MotionSequence::new(Tensor::new(&[music.len(), cols], data)?, music.fps())
}

/// Like [`generate`] but rejects key poses inside the seed span.
pub fn generate_strict(
    model: &DanceModel,
    music: &MusicFeatureSequence,
    seed: &MotionSequence,
    keys: &KeyPoseSet,
) -> Result<MotionSequence> {
    keys.validate(music.len(), seed.len(), false)?;
    generate(model, music, seed, keys)
}
