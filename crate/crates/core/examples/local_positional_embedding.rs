//! Shows the two halves of the local positional embedding between keys and
//! the sparse key-pose embedding on the cross-modal timeline.

use dancegen::conditioning::{embed_key_poses, local_positional_embedding};
use dancegen::motion::{KeyPose, KeyPoseSet, PoseVector, POSE_DIM};
use dancegen::numeric::{LinearLayer, ParamStore};
use dancegen::transformer::sinusoidal_pe;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dancegen::Result<()> {
    let (seed_len, len) = (4, 24);
    let frames = [6, 12];
    let half = sinusoidal_pe(64, 4)?;
    let pe = local_positional_embedding(&frames, seed_len + len, seed_len, &half)?;
    println!("pos  left[0..2]          right[0..2]");
    for pos in 0..seed_len + len {
        let (l, r) = (pe.left(pos), pe.right(pos));
        println!(
            "{pos:>3}  {:>8.4} {:>8.4}   {:>8.4} {:>8.4}",
            l[0], l[1], r[0], r[1]
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let phi = LinearLayer::new(&mut store, &mut rng, "phi", POSE_DIM, 8, true)?;
    let keys = KeyPoseSet::new(
        frames
            .iter()
            .map(|&frame| {
                Ok(KeyPose {
                    frame,
                    pose: PoseVector::new(vec![0.1 * frame as f64; POSE_DIM])?,
                })
            })
            .collect::<dancegen::Result<_>>()?,
    )?;
    let e = embed_key_poses(&store, &keys, seed_len + len, seed_len, &phi)?;
    println!(
        "key embedding rows at {:?}, {} nonzero rows",
        e.active_positions,
        e.nonzero_rows()
    );
    Ok(())
}
