use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{consistency_error, smoothness_cv};

use super::config::{DanceModelConfig, LossParams, TrainSchedule};
use super::generate::generate;
use super::net::DanceModel;
use super::train::{dataset_loss, train_new, KeySampling, TrainOptions, TrainSample};

/// Everything shared by the runs of a λ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub sigma: f64,
    pub config: DanceModelConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub key_sampling: KeySampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Mean key-pose consistency error over the test clips.
    pub consistency_error: f64,
    /// Mean smoothness coefficient over the generated spans.
    pub smoothness_cv: f64,
    pub final_train_loss: f64,
}

/// Consistency and smoothness of `model` on clips with their own key frames.
pub fn evaluate_on(model: &DanceModel, test: &[TrainSample]) -> Result<(f64, f64)> {
    let seed_len = model.config().seed_len;
    let (mut ec, mut cv, mut n_ec, mut n_cv) = (0.0, 0.0, 0usize, 0usize);
    for s in test {
        let keys = s.keys()?;
        let out = generate(model, &s.music, &s.seed(seed_len)?, &keys)?;
        if let Some(v) = consistency_error(&out, &keys)?.value() {
            ec += v;
            n_ec += 1;
        }
        if let Some(v) = smoothness_cv(&out.slice(seed_len, out.len())?)?.value() {
            cv += v;
            n_cv += 1;
        }
    }
    if n_ec == 0 || n_cv == 0 {
        return Err(Error::invalid(
            "test clips need key frames and non-frozen generated motion",
        ));
    }
    Ok((ec / n_ec as f64, cv / n_cv as f64))
}

fn run_one(
    lambda: f64,
    train: &[TrainSample],
    test: &[TrainSample],
    s: &SweepSettings,
) -> Result<SweepRow> {
    let loss = LossParams::new(lambda, s.sigma)?;
    let mut opts = TrainOptions::new(loss, s.schedule.clone(), s.seed);
    opts.key_sampling = s.key_sampling.clone();
    let (model, _) = train_new(s.config, train, &[], &opts)?;
    let (consistency_error, smoothness_cv) = evaluate_on(&model, test)?;
    Ok(SweepRow {
        lambda,
        consistency_error,
        smoothness_cv,
        final_train_loss: dataset_loss(&model, train, &loss)?,
    })
}

/// Trains one model per λ with identical data, seed and schedule. Runs are
/// spread over `jobs` threads; the result order follows `settings.lambdas`.
pub fn lambda_sweep(
    train: &[TrainSample],
    test: &[TrainSample],
    settings: &SweepSettings,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    crate::par::parallel_map(&settings.lambdas, jobs, |&l| {
        run_one(l, train, test, settings)
    })
    .into_iter()
    .collect()
}

/// Number of adjacent pairs where the series goes up.
pub fn count_increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}
