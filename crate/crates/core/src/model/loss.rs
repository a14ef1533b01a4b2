use crate::error::{Error, Result};
use crate::motion::FRAME_DIM;
use crate::numeric::{Tape, Tensor, Var};

use super::config::LossParams;

/// `ω(τ) = 1 + λ Σᵢ exp(−(τ − τᵢ)² / 2σ²)` on normalized time.
pub fn omega(tau: f64, key_taus: &[f64], lambda: f64, sigma: f64) -> f64 {
    let bumps: f64 = key_taus
        .iter()
        .map(|&k| {
            let d = tau - k;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    1.0 + lambda * bumps
}

/// [`omega`] at frame `t` of a clip of `len` frames, with `τ = t / len`.
pub fn weight_curve(t: usize, key_frames: &[usize], len: usize, lambda: f64, sigma: f64) -> f64 {
    let taus: Vec<f64> = key_frames.iter().map(|&k| k as f64 / len as f64).collect();
    omega(t as f64 / len as f64, &taus, lambda, sigma)
}

/// `ω(t)` for every frame of a clip of `len` frames.
pub fn weight_series(key_frames: &[usize], len: usize, params: &LossParams) -> Vec<f64> {
    (0..len)
        .map(|t| weight_curve(t, key_frames, len, params.lambda, params.sigma))
        .collect()
}

/// `(1/T) Σₜ ω(t) ‖gt_t − pred_t‖²` recorded on the tape.
pub fn weighted_loss_var(tape: &Tape, pred: Var, gt: Var, weights: &[f64]) -> Result<Var> {
    let (ps, gs) = (tape.shape(pred), tape.shape(gt));
    if ps != gs || ps.len() != 2 {
        return Err(Error::dim(format!(
            "prediction {ps:?} and ground truth {gs:?} differ"
        )));
    }
    let d = tape.sub(gt, pred)?;
    let sq = tape.mul(d, d)?;
    let weighted = tape.scale_rows(sq, weights)?;
    tape.scale(tape.sum(weighted)?, 1.0 / ps[0] as f64)
}

/// Plain evaluation of the weighted loss.
pub fn weighted_loss(
    pred: &Tensor,
    gt: &Tensor,
    key_frames: &[usize],
    params: &LossParams,
) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.ndim() != 2 {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.cols() != FRAME_DIM {
        return Err(Error::dim(format!(
            "frames must have {FRAME_DIM} values, got {}",
            pred.cols()
        )));
    }
    params.validate()?;
    let len = pred.rows();
    let w = weight_series(key_frames, len, params);
    let total: f64 = (0..len)
        .map(|t| {
            let sq: f64 = pred
                .row(t)
                .iter()
                .zip(gt.row(t))
                .map(|(p, g)| (g - p) * (g - p))
                .sum();
            w[t] * sq
        })
        .sum();
    Ok(total / len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check_inputs;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize) -> Tensor {
        Tensor::new(
            &[rows, FRAME_DIM],
            (0..rows * FRAME_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn curve_examples() {
        for t in 0..100 {
            assert_eq!(weight_curve(t, &[10, 50], 100, 0.0, 0.1), 1.0);
        }
        assert_eq!(weight_curve(50, &[50], 100, 2.5, 0.1), 3.5);
        let w = weight_curve(30, &[20], 100, 3.0, 0.1);
        assert!((w - (1.0 + 3.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((w - 2.8196).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn curve_properties(
            keys in proptest::collection::btree_set(0usize..200, 1..5),
            l1 in 0.0f64..5.0,
            dl in 0.0f64..5.0,
            sigma in 0.01f64..0.5,
            t in 0usize..200,
        ) {
            let keys: Vec<usize> = keys.into_iter().collect();
            let a = weight_curve(t, &keys, 200, l1, sigma);
            let b = weight_curve(t, &keys, 200, l1 + dl, sigma);
            prop_assert!(a >= 1.0);
            prop_assert!(b >= a);
        }

        #[test]
        fn isolated_key_is_the_peak(k in 0usize..300, lambda in 0.1f64..5.0, sigma in 0.01f64..0.3) {
            let peak = weight_curve(k, &[k], 300, lambda, sigma);
            prop_assert!((peak - (1.0 + lambda)).abs() < 1e-12);
            for t in 0..300 {
                if t != k {
                    prop_assert!(weight_curve(t, &[k], 300, lambda, sigma) < peak);
                }
            }
        }
    }

    #[test]
    fn narrow_sigma_collapses_to_one_off_key() {
        for t in 0..100 {
            let w = weight_curve(t, &[40], 100, 3.0, 1e-4);
            if t == 40 {
                assert_eq!(w, 4.0);
            } else {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = random(&mut rng, 20);
        let p = LossParams::new(3.0, 0.1).unwrap();
        assert_eq!(weighted_loss(&gt, &gt, &[5], &p).unwrap(), 0.0);

        let pred = random(&mut rng, 20);
        let plain: f64 = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 20.0;
        let zero = LossParams::new(0.0, 0.1).unwrap();
        assert!((weighted_loss(&pred, &gt, &[5, 9], &zero).unwrap() - plain).abs() < 1e-12);

        let mut off = gt.clone();
        off.set(7, 3, off.get(7, 3) + 0.4);
        let l = weighted_loss(&off, &gt, &[7], &p).unwrap();
        assert!((l - 4.0 * 0.16 / 20.0).abs() < 1e-12);

        assert!(matches!(
            weighted_loss(&pred, &random(&mut rng, 19), &[], &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn extra_weight_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gt, pred) = (random(&mut rng, 30), random(&mut rng, 30));
        let keys = [4, 17, 25];
        let l0 = weighted_loss(&pred, &gt, &keys, &LossParams::new(0.0, 0.1).unwrap()).unwrap();
        let l1 = weighted_loss(&pred, &gt, &keys, &LossParams::new(1.0, 0.1).unwrap()).unwrap();
        for lambda in [0.5, 2.0, 3.0, 5.0] {
            let l =
                weighted_loss(&pred, &gt, &keys, &LossParams::new(lambda, 0.1).unwrap()).unwrap();
            assert!(((l - l0) - lambda * (l1 - l0)).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_loss_matches_and_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gt, pred) = (random(&mut rng, 6), random(&mut rng, 6));
        let p = LossParams::new(3.0, 0.1).unwrap();
        let w = weight_series(&[2], 6, &p);
        let tape = Tape::inference();
        let v = weighted_loss_var(
            &tape,
            tape.constant(pred.clone()).unwrap(),
            tape.constant(gt.clone()).unwrap(),
            &w,
        )
        .unwrap();
        assert!(
            (tape.value(v).item() - weighted_loss(&pred, &gt, &[2], &p).unwrap()).abs() < 1e-12
        );

        let r = grad_check_inputs(
            &[pred, gt],
            |t, v| weighted_loss_var(t, v[0], v[1], &w),
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
