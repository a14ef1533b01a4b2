//! Key-pose conditioning signals: the zero-padded key-pose embedding and the
//! local positional embedding built from distances to neighbouring keys.
//!
//! Both live on the cross-modal timeline of length `L`. Motion frame `t`
//! sits at sequence position `offset + t`.

use crate::error::{Error, Result};
use crate::motion::{KeyPoseSet, POSE_DIM};
use crate::numeric::{LinearLayer, ParamStore, Tape, Tensor, Var};
use crate::transformer::PositionalTable;

/// `L × d` embedding with nonzero rows only at key positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoseEmbedding {
    pub matrix: Tensor,
    pub active_positions: Vec<usize>,
}

impl KeyPoseEmbedding {
    pub fn nonzero_rows(&self) -> usize {
        (0..self.matrix.rows())
            .filter(|&r| self.matrix.row(r).iter().any(|&v| v != 0.0))
            .count()
    }
}

fn key_rows(keys: &KeyPoseSet, len: usize, offset: usize) -> Result<Vec<usize>> {
    keys.iter()
        .map(|k| {
            let p = offset + k.frame;
            if p >= len {
                return Err(Error::invalid(format!(
                    "key pose at frame {} maps to position {p}, outside 0..{len}",
                    k.frame
                )));
            }
            Ok(p)
        })
        .collect()
}

/// Records `φ(ŷ_i)` at row `offset + t_i` and zeros elsewhere.
pub fn embed_key_poses_var(
    tape: &Tape,
    store: &ParamStore,
    keys: &KeyPoseSet,
    len: usize,
    offset: usize,
    phi: &LinearLayer,
) -> Result<Var> {
    if phi.in_dim != POSE_DIM {
        return Err(Error::dim(format!(
            "key projection takes {} inputs, poses have {POSE_DIM}",
            phi.in_dim
        )));
    }
    let d = phi.out_dim;
    let rows = key_rows(keys, len, offset)?;
    if rows.is_empty() {
        return tape.constant(Tensor::zeros(&[len, d]));
    }
    let poses: Vec<&[f64]> = keys.iter().map(|k| k.pose.values()).collect();
    let projected = phi.forward(tape, store, tape.constant(Tensor::from_rows(&poses)?)?)?;

    let mut parts = Vec::with_capacity(2 * rows.len() + 1);
    let mut next = 0;
    for (i, &p) in rows.iter().enumerate() {
        if p > next {
            parts.push(tape.constant(Tensor::zeros(&[p - next, d]))?);
        }
        parts.push(tape.slice_rows(projected, i, 1)?);
        next = p + 1;
    }
    if next < len {
        parts.push(tape.constant(Tensor::zeros(&[len - next, d]))?);
    }
    tape.concat_rows(&parts)
}

/// Inference-time key-pose embedding.
pub fn embed_key_poses(
    store: &ParamStore,
    keys: &KeyPoseSet,
    len: usize,
    offset: usize,
    phi: &LinearLayer,
) -> Result<KeyPoseEmbedding> {
    let tape = Tape::inference();
    let v = embed_key_poses_var(&tape, store, keys, len, offset, phi)?;
    Ok(KeyPoseEmbedding {
        matrix: tape.value(v),
        active_positions: key_rows(keys, len, offset)?,
    })
}

/// `L × d` matrix: left half encodes the distance back to the nearest key at
/// or before each frame, right half the distance forward to the nearest key at
/// or after it.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPositionalEmbedding {
    pub matrix: Tensor,
}

impl LocalPositionalEmbedding {
    pub fn left(&self, pos: usize) -> &[f64] {
        let h = self.matrix.cols() / 2;
        &self.matrix.row(pos)[..h]
    }

    pub fn right(&self, pos: usize) -> &[f64] {
        let h = self.matrix.cols() / 2;
        &self.matrix.row(pos)[h..]
    }
}

/// Builds the local positional embedding from sorted key frames using a
/// half-width sinusoidal table. Missing neighbours give a zero half and
/// distances beyond the table are clamped to its last row. Rows before
/// `offset` carry no motion frame and stay zero.
pub fn local_positional_embedding(
    key_frames: &[usize],
    len: usize,
    offset: usize,
    half_table: &PositionalTable,
) -> Result<LocalPositionalEmbedding> {
    if key_frames.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("key positions must be strictly increasing"));
    }
    if let Some(&t) = key_frames.iter().find(|&&t| offset + t >= len) {
        return Err(Error::invalid(format!(
            "key frame {t} outside the sequence of length {len}"
        )));
    }
    let h = half_table.width();
    let last = half_table.len() - 1;
    let mut m = Tensor::zeros(&[len, 2 * h]);
    if key_frames.is_empty() {
        return Ok(LocalPositionalEmbedding { matrix: m });
    }
    // idx = number of keys at or before t
    let mut idx = 0;
    for p in offset..len {
        let t = p - offset;
        while idx < key_frames.len() && key_frames[idx] <= t {
            idx += 1;
        }
        let row = m.row_mut(p);
        if idx > 0 {
            let dist = (t - key_frames[idx - 1]).min(last);
            row[..h].copy_from_slice(half_table.row(dist));
        }
        let right = if idx > 0 && key_frames[idx - 1] == t {
            Some(t)
        } else {
            key_frames.get(idx).copied()
        };
        if let Some(tr) = right {
            let dist = (tr - t).min(last);
            row[h..].copy_from_slice(half_table.row(dist));
        }
    }
    Ok(LocalPositionalEmbedding { matrix: m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{KeyPose, PoseVector};
    use crate::transformer::sinusoidal_pe;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(rng: &mut ChaCha8Rng) -> PoseVector {
        PoseVector::new((0..POSE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn keyset(frames: &[usize], rng: &mut ChaCha8Rng) -> KeyPoseSet {
        KeyPoseSet::new(
            frames
                .iter()
                .map(|&frame| KeyPose {
                    frame,
                    pose: pose(rng),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn key_embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let phi = LinearLayer::new(&mut store, &mut rng, "key", POSE_DIM, 8, true).unwrap();
        let e = embed_key_poses(&store, &KeyPoseSet::empty(), 20, 4, &phi).unwrap();
        assert_eq!(e.matrix, Tensor::zeros(&[20, 8]));

        // identity projection reproduces the pose on its row
        let mut store = ParamStore::new();
        let id = LinearLayer::new(&mut store, &mut rng, "id", POSE_DIM, POSE_DIM, true).unwrap();
        *store.value_mut(id.weight) = Tensor::identity(POSE_DIM);
        store.fill(id.bias.unwrap(), 0.0);
        let keys = keyset(&[5], &mut rng);
        let e = embed_key_poses(&store, &keys, 12, 3, &id).unwrap();
        assert_eq!(e.nonzero_rows(), 1);
        assert_eq!(e.matrix.row(8), keys.keys()[0].pose.values());

        let keys = keyset(&[2, 3], &mut rng);
        let e = embed_key_poses(&store, &keys, 12, 3, &id).unwrap();
        assert_eq!(e.active_positions, vec![5, 6]);
        assert_eq!(e.nonzero_rows(), 2);
        assert_eq!(e.matrix.row(5), keys.keys()[0].pose.values());
        assert_eq!(e.matrix.row(6), keys.keys()[1].pose.values());

        assert!(matches!(
            embed_key_poses(&store, &keys, 5, 3, &id),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn local_pe_examples() {
        let half = sinusoidal_pe(64, 8).unwrap();
        let none = local_positional_embedding(&[], 30, 0, &half).unwrap();
        assert_eq!(none.matrix, Tensor::zeros(&[30, 16]));

        let pe = local_positional_embedding(&[10, 20], 30, 0, &half).unwrap();
        assert_eq!(pe.left(10), half.row(0));
        assert_eq!(pe.right(10), half.row(0));
        assert_eq!(pe.left(10), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pe.left(13), half.row(3));
        assert_eq!(pe.right(13), half.row(7));
        assert_eq!(pe.left(5), &[0.0; 8]);
        assert_eq!(pe.right(5), half.row(5));
        assert_eq!(pe.left(25), half.row(5));
        assert_eq!(pe.right(25), &[0.0; 8]);

        let shifted = local_positional_embedding(&[10, 20], 34, 4, &half).unwrap();
        for p in 0..4 {
            assert!(shifted.matrix.row(p).iter().all(|&v| v == 0.0));
        }
        assert_eq!(shifted.matrix.row(17), pe.matrix.row(13));

        // distances past the table clamp to the last row
        let short = sinusoidal_pe(4, 8).unwrap();
        let c = local_positional_embedding(&[0], 10, 0, &short).unwrap();
        assert_eq!(c.left(9), short.row(3));

        assert!(local_positional_embedding(&[20, 10], 30, 0, &half).is_err());
    }

    proptest! {
        #[test]
        fn traversal_and_reflection(a in 0usize..40, gap in 1usize..30, pad in 0usize..10) {
            let b = a + gap;
            let len = b + 1 + pad;
            let half = sinusoidal_pe(128, 6).unwrap();
            let pe = local_positional_embedding(&[a, b], len, 0, &half).unwrap();
            for k in 0..gap {
                prop_assert_eq!(pe.left(a + k), half.row(k));
                prop_assert_eq!(pe.right(b - k), half.row(k));
            }
            for k in 0..=gap {
                prop_assert_eq!(pe.left(a + k), pe.right(b - k));
            }
        }

        #[test]
        fn translation_invariance(
            frames in proptest::collection::btree_set(0usize..50, 0..6),
            shift in 0usize..20,
        ) {
            let frames: Vec<usize> = frames.into_iter().collect();
            let moved: Vec<usize> = frames.iter().map(|f| f + shift).collect();
            let half = sinusoidal_pe(128, 4).unwrap();
            let pe = local_positional_embedding(&frames, 60, 0, &half).unwrap();
            let pe2 = local_positional_embedding(&moved, 80, 0, &half).unwrap();
            for t in 0..60 {
                prop_assert_eq!(pe.matrix.row(t), pe2.matrix.row(t + shift));
            }
        }

        #[test]
        fn embedding_sparsity(frames in proptest::collection::btree_set(0usize..30, 0..10), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let phi = LinearLayer::new(&mut store, &mut rng, "k", POSE_DIM, 4, true).unwrap();
            let frames: Vec<usize> = frames.into_iter().collect();
            let keys = keyset(&frames, &mut rng);
            let e = embed_key_poses(&store, &keys, 40, 5, &phi).unwrap();
            prop_assert_eq!(e.nonzero_rows(), frames.len());
        }
    }
}
