use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::motion::{
    extract_key_poses, sample_key_positions, KeyStrategy, MotionSequence, FRAME_DIM,
};
use crate::music::MUSIC_DIM;
use crate::numeric::{grad_check, Coords, GradCheckReport, Tensor};

use super::config::{DanceModelConfig, LossParams};
use super::loss::{weight_series, weighted_loss_var};
use super::net::DanceModel;

/// Finite-difference check of the weighted loss through the whole network.
///
/// Music, motion and `key_count` key positions are random but fixed by
/// `seed`. Coordinates are sampled from every parameter tensor.
pub fn gradcheck_model(
    config: DanceModelConfig,
    key_count: usize,
    seed: u64,
    coords: usize,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut model = DanceModel::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e);
    let len = config.music_len;
    let music = Tensor::new(
        &[len, MUSIC_DIM],
        (0..len * MUSIC_DIM)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    )?;
    let motion = MotionSequence::new(
        Tensor::new(
            &[len, FRAME_DIM],
            (0..len * FRAME_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?,
        crate::motion::DEFAULT_FPS,
    )?;
    let frames = sample_key_positions(
        len,
        config.seed_len,
        key_count,
        &KeyStrategy::Random,
        rng.gen(),
    )?;
    let keys = extract_key_poses(&motion, &frames)?;
    let seed_motion = motion.slice(0, config.seed_len)?;
    let weights = weight_series(&frames, len, &LossParams::default());
    let net = model.net.clone();
    grad_check(
        &mut model.params,
        |tape, store| {
            let pred = net.forward(tape, store, &music, seed_motion.tensor(), &keys)?;
            let gt = tape.constant(motion.tensor().clone())?;
            weighted_loss_var(tape, pred, gt, &weights)
        },
        eps,
        Coords::Sample {
            count: coords,
            seed,
        },
    )
}
