use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Large,
    Light,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(Preset::Large),
            "light" => Ok(Preset::Light),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::usage(format!(
                "unknown preset {other:?} (large, light, tiny)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Large => "large",
            Preset::Light => "light",
            Preset::Tiny => "tiny",
        })
    }
}

/// Sizes of every part of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanceModelConfig {
    pub preset: Preset,
    /// Cross-modal transformer; `max_len` bounds `seed_len + music_len`.
    pub cross: TransformerConfig,
    pub encoder_layers: usize,
    pub d_model: usize,
    pub seed_len: usize,
    pub music_len: usize,
}

impl DanceModelConfig {
    /// Preset sizes with a 30-frame seed and 240-frame music window.
    pub fn preset(preset: Preset) -> Self {
        Self::with_lengths(preset, 30, 240).expect("preset lengths are valid")
    }

    pub fn with_lengths(preset: Preset, seed_len: usize, music_len: usize) -> Result<Self> {
        let (layers, heads, d, enc) = match preset {
            Preset::Large => (12, 10, 800, 4),
            Preset::Light => (8, 4, 256, 4),
            Preset::Tiny => (2, 2, 32, 1),
        };
        let cfg = Self {
            preset,
            cross: TransformerConfig::new(layers, heads, d, seed_len + music_len)?,
            encoder_layers: enc,
            d_model: d,
            seed_len,
            music_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cross.validate()?;
        if self.cross.d_model != self.d_model {
            return Err(Error::invalid(
                "cross transformer width differs from d_model",
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::invalid(
                "d_model must be divisible by 4 for the half-width position tables",
            ));
        }
        if self.seed_len == 0 {
            return Err(Error::invalid("seed length must be positive"));
        }
        if self.seed_len >= self.music_len {
            return Err(Error::invalid(format!(
                "seed length {} must be shorter than the music window {}",
                self.seed_len, self.music_len
            )));
        }
        if self.seq_len() > self.cross.max_len {
            return Err(Error::invalid(
                "seed plus music exceeds the cross transformer max length",
            ));
        }
        Ok(())
    }

    /// Cross-modal sequence length `T′ + T`.
    pub fn seq_len(&self) -> usize {
        self.seed_len + self.music_len
    }

    pub fn encoder_config(&self) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.encoder_layers,
            ..self.cross
        }
    }
}

/// Weighting of the reconstruction loss around key frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub lambda: f64,
    /// Gaussian width in normalized time (frame index divided by clip length).
    pub sigma: f64,
}

impl LossParams {
    pub fn new(lambda: f64, sigma: f64) -> Result<Self> {
        let p = Self { lambda, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            sigma: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub start_step: u64,
    pub lr: f64,
}

/// Piecewise-constant learning rate plus batch size and run length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<LrStage>,
    pub batch_size: usize,
    pub total_steps: u64,
}

impl TrainSchedule {
    /// Full-scale schedule: 1e-4, then 1e-5 from 100k and 1e-6 from 250k steps.
    pub fn full_scale(total_steps: u64) -> Self {
        Self {
            stages: vec![
                LrStage {
                    start_step: 0,
                    lr: 1e-4,
                },
                LrStage {
                    start_step: 100_000,
                    lr: 1e-5,
                },
                LrStage {
                    start_step: 250_000,
                    lr: 1e-6,
                },
            ],
            batch_size: 20,
            total_steps,
        }
    }

    /// Same three-stage shape compressed to a short run: drops by 10× at 40%
    /// and again at 80% of `total_steps`.
    pub fn scaled(total_steps: u64, base_lr: f64, batch_size: usize) -> Self {
        let at = |f: f64| ((total_steps as f64 * f).round() as u64).max(1);
        let mut stages = vec![LrStage {
            start_step: 0,
            lr: base_lr,
        }];
        for (frac, lr) in [(0.4, base_lr / 10.0), (0.8, base_lr / 100.0)] {
            let s = at(frac);
            if s > stages.last().unwrap().start_step {
                stages.push(LrStage { start_step: s, lr });
            }
        }
        Self {
            stages,
            batch_size,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.first().map(|s| s.start_step) != Some(0) {
            return Err(Error::invalid("schedule must start with a stage at step 0"));
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[0].start_step >= w[1].start_step)
        {
            return Err(Error::invalid("schedule stage thresholds must increase"));
        }
        if self
            .stages
            .iter()
            .any(|s| !(s.lr > 0.0 && s.lr.is_finite()))
        {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.stages
            .iter()
            .take_while(|s| s.start_step <= step)
            .last()
            .map_or(self.stages[0].lr, |s| s.lr)
    }
}
