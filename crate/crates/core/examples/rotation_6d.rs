//! Round-trips random rotations through the 6-D representation and decodes
//! an arbitrary 6-D vector into a proper rotation.

use dancegen::motion::{det3, orthonormality_error, random_rotation, rotmat_to_6d, sixd_to_rotmat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dancegen::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let r = random_rotation(&mut rng);
        let back = sixd_to_rotmat(&rotmat_to_6d(&r)?)?;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((r[i][j] - back[i][j]).abs());
            }
        }
    }
    println!("1000 round trips, max elementwise error {worst:.3e}");

    // not orthonormal on input; Gram-Schmidt repairs it
    let m = sixd_to_rotmat(&[2.0, 0.1, 0.0, 0.3, 1.0, 0.5])?;
    println!("decoded: {m:.4?}");
    println!(
        "orthonormality error {:.2e}, det {:.12}",
        orthonormality_error(&m),
        det3(&m)
    );
    Ok(())
}
