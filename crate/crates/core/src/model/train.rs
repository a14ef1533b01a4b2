use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::consistency_error;
use crate::motion::{
    extract_key_poses, sample_key_positions, KeyPoseSet, KeyStrategy, MotionSequence,
};
use crate::music::MusicFeatureSequence;
use crate::numeric::{AdamConfig, AdamState, Tape};

use super::config::{DanceModelConfig, LossParams, TrainSchedule};
use super::loss::{weight_series, weighted_loss_var};
use super::net::DanceModel;

/// One music clip with its ground-truth motion and key-frame positions.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub music: MusicFeatureSequence,
    pub motion: MotionSequence,
    pub key_frames: Vec<usize>,
}

impl TrainSample {
    pub fn new(
        music: MusicFeatureSequence,
        motion: MotionSequence,
        key_frames: Vec<usize>,
    ) -> Result<Self> {
        if music.len() != motion.len() {
            return Err(Error::invalid(format!(
                "music has {} frames but motion has {}",
                music.len(),
                motion.len()
            )));
        }
        if key_frames.windows(2).any(|w| w[0] >= w[1])
            || key_frames.iter().any(|&k| k >= motion.len())
        {
            return Err(Error::invalid(
                "key frames must be increasing and inside the clip",
            ));
        }
        Ok(Self {
            music,
            motion,
            key_frames,
        })
    }

    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }

    pub fn seed(&self, seed_len: usize) -> Result<MotionSequence> {
        self.motion.slice(0, seed_len)
    }

    pub fn keys(&self) -> Result<KeyPoseSet> {
        extract_key_poses(&self.motion, &self.key_frames)
    }
}

/// Where the key poses of a training step come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySampling {
    /// Use each sample's own `key_frames`.
    Fixed,
    /// Draw fresh positions inside the generated span every step.
    Resample { count: usize, strategy: KeyStrategy },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: LossParams,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub key_sampling: KeySampling,
    /// Probe consistency error every this many steps (0 disables).
    pub probe_every: u64,
    pub adam: AdamConfig,
}

impl TrainOptions {
    pub fn new(loss: LossParams, schedule: TrainSchedule, seed: u64) -> Self {
        Self {
            loss,
            schedule,
            seed,
            key_sampling: KeySampling::Fixed,
            probe_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    /// Batch-mean weighted loss before this step's update.
    pub loss: f64,
    pub probe_consistency: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,probe_consistency\n");
        for e in &self.entries {
            let probe = e
                .probe_consistency
                .map(|v| v.to_string())
                .unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", e.step, e.lr, e.loss, probe);
        }
        s
    }
}

/// Weighted loss of one sample plus parameter gradients scaled by `scale`
/// accumulated into the model's store.
fn sample_step(
    model: &mut DanceModel,
    sample: &TrainSample,
    key_frames: &[usize],
    loss: &LossParams,
    scale: f64,
) -> Result<f64> {
    let seed_len = model.config().seed_len;
    let seed = sample.seed(seed_len)?;
    let keys = extract_key_poses(&sample.motion, key_frames)?;
    let weights = weight_series(key_frames, sample.len(), loss);
    let tape = Tape::new();
    let pred = model.net.forward(
        &tape,
        &model.params,
        sample.music.tensor(),
        seed.tensor(),
        &keys,
    )?;
    let gt = tape.constant(sample.motion.tensor().clone())?;
    let l = weighted_loss_var(&tape, pred, gt, &weights)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    model.params.accumulate(&grads, scale)?;
    Ok(value)
}

/// Weighted loss of one sample without gradients.
pub fn sample_loss(model: &DanceModel, sample: &TrainSample, loss: &LossParams) -> Result<f64> {
    let seed = sample.seed(model.config().seed_len)?;
    let keys = sample.keys()?;
    let pred = model.forward(&sample.music, &seed, &keys)?;
    super::loss::weighted_loss(
        pred.tensor(),
        sample.motion.tensor(),
        &sample.key_frames,
        loss,
    )
}

/// Mean weighted loss over a dataset, using each sample's own key frames.
pub fn dataset_loss(model: &DanceModel, data: &[TrainSample], loss: &LossParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let total = data
        .iter()
        .map(|s| sample_loss(model, s, loss))
        .sum::<Result<f64>>()?;
    Ok(total / data.len() as f64)
}

/// Mean consistency error of predictions on `probe` at each sample's key frames.
pub fn probe_consistency(model: &DanceModel, probe: &[TrainSample]) -> Result<Option<f64>> {
    let mut values = Vec::new();
    for s in probe {
        let keys = s.keys()?;
        let pred = model.forward(&s.music, &s.seed(model.config().seed_len)?, &keys)?;
        if let Some(v) = consistency_error(&pred, &keys)?.value() {
            values.push(v);
        }
    }
    Ok((!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64))
}

fn check_data(config: &DanceModelConfig, data: &[TrainSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in data {
        if s.len() <= config.seed_len {
            return Err(Error::invalid(format!(
                "clip of {} frames is not longer than the {}-frame seed",
                s.len(),
                config.seed_len
            )));
        }
    }
    Ok(())
}

/// Runs `schedule.total_steps` Adam steps on `model`.
pub fn train(
    model: &mut DanceModel,
    data: &[TrainSample],
    probe: &[TrainSample],
    opts: &TrainOptions,
) -> Result<TrainLog> {
    opts.loss.validate()?;
    opts.schedule.validate()?;
    check_data(model.config(), data)?;
    let seed_len = model.config().seed_len;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let mut adam = AdamState::new(&model.params, opts.adam);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let batch = opts.schedule.batch_size;

    for step in 0..opts.schedule.total_steps {
        let lr = opts.schedule.lr_at(step);
        adam.set_lr(lr);
        model.params.zero_grad();
        let mut total = 0.0;
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &data[order.pop().expect("refilled above")];
            let frames = match &opts.key_sampling {
                KeySampling::Fixed => sample.key_frames.clone(),
                KeySampling::Resample { count, strategy } => {
                    sample_key_positions(sample.len(), seed_len, *count, strategy, rng.gen())?
                }
            };
            total += sample_step(model, sample, &frames, &opts.loss, 1.0 / batch as f64).map_err(
                |e| match e {
                    Error::Numeric(m) => {
                        Error::numeric(format!("training diverged at step {step}: {m}"))
                    }
                    other => other,
                },
            )?;
        }
        let probe_consistency =
            if opts.probe_every > 0 && step % opts.probe_every == 0 && !probe.is_empty() {
                probe_consistency(model, probe)?
            } else {
                None
            };
        log.entries.push(LogEntry {
            step,
            lr,
            loss: total / batch as f64,
            probe_consistency,
        });
        adam.step(&mut model.params)?;
    }
    model.params.clear_grad();
    Ok(log)
}

/// Builds a model from `config` seeded by `opts.seed` and trains it.
pub fn train_new(
    config: DanceModelConfig,
    data: &[TrainSample],
    probe: &[TrainSample],
    opts: &TrainOptions,
) -> Result<(DanceModel, TrainLog)> {
    let mut model = DanceModel::new(config, opts.seed)?;
    let log = train(&mut model, data, probe, opts)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Preset;
    use crate::motion::{MotionSequence, FRAME_DIM};
    use crate::music::MUSIC_DIM;
    use crate::numeric::Tensor;

    fn sample(rng: &mut ChaCha8Rng, len: usize, keys: Vec<usize>) -> TrainSample {
        let music = Tensor::new(
            &[len, MUSIC_DIM],
            (0..len * MUSIC_DIM)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap();
        let motion = Tensor::new(
            &[len, FRAME_DIM],
            (0..len * FRAME_DIM)
                .map(|i| ((i % 97) as f64 * 0.1).sin() * 0.5)
                .collect(),
        )
        .unwrap();
        TrainSample::new(
            MusicFeatureSequence::new(music, 30.0).unwrap(),
            MotionSequence::new(motion, 30.0).unwrap(),
            keys,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_keep_initial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DanceModelConfig::with_lengths(Preset::Tiny, 4, 12).unwrap();
        let data = vec![sample(&mut rng, 12, vec![6])];
        let opts = TrainOptions::new(LossParams::default(), TrainSchedule::scaled(0, 1e-3, 1), 3);
        let (model, log) = train_new(cfg, &data, &[], &opts).unwrap();
        let fresh = DanceModel::new(cfg, 3).unwrap();
        assert!(log.entries.is_empty());
        for (a, b) in model.params.iter().zip(fresh.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DanceModelConfig::with_lengths(Preset::Tiny, 4, 12).unwrap();
        let data = vec![
            sample(&mut rng, 12, vec![5, 9]),
            sample(&mut rng, 12, vec![7]),
        ];
        let mut opts = TrainOptions::new(
            LossParams::default(),
            TrainSchedule::scaled(40, 3e-3, 2),
            11,
        );
        opts.probe_every = 10;
        let (m1, log1) = train_new(cfg, &data, &data, &opts).unwrap();
        let (m2, log2) = train_new(cfg, &data, &data, &opts).unwrap();
        assert_eq!(log1, log2);
        for (a, b) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        let initial = dataset_loss(&DanceModel::new(cfg, 11).unwrap(), &data, &opts.loss).unwrap();
        let last = dataset_loss(&m1, &data, &opts.loss).unwrap();
        assert!(last < 0.5 * initial, "{initial} -> {last}");
        assert!((log1.entries[0].loss - initial).abs() < 1e-9);
        assert!(log1.entries[0].probe_consistency.is_some());
        assert!(log1.entries[1].probe_consistency.is_none());
        assert_eq!(log1.to_csv().lines().count(), 41);
    }

    #[test]
    fn resampled_keys_stay_in_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DanceModelConfig::with_lengths(Preset::Tiny, 4, 12).unwrap();
        let data = vec![sample(&mut rng, 12, vec![])];
        let mut opts =
            TrainOptions::new(LossParams::default(), TrainSchedule::scaled(3, 1e-3, 1), 0);
        opts.key_sampling = KeySampling::Resample {
            count: 3,
            strategy: KeyStrategy::Random,
        };
        train_new(cfg, &data, &[], &opts).unwrap();
        opts.key_sampling = KeySampling::Resample {
            count: 20,
            strategy: KeyStrategy::Random,
        };
        assert!(matches!(
            train_new(cfg, &data, &[], &opts),
            Err(Error::Validation(_))
        ));
    }
}
