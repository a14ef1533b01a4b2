use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{embed_key_poses_var, local_positional_embedding};
use crate::error::{Error, Result};
use crate::motion::{KeyPoseSet, MotionSequence, FRAME_DIM, POSE_DIM};
use crate::music::{MusicFeatureSequence, MUSIC_DIM};
use crate::numeric::{LinearLayer, ParamStore, Tape, Tensor, Var};
use crate::transformer::{sinusoidal_pe, Encoder, Mask, PositionalTable};

use super::config::DanceModelConfig;

/// Layer handles and fixed tables; the trainable values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DanceNet {
    pub config: DanceModelConfig,
    pub music_proj: LinearLayer,
    pub motion_proj: LinearLayer,
    pub key_proj: LinearLayer,
    pub music_encoder: Encoder,
    pub motion_encoder: Encoder,
    pub cross: Encoder,
    pub out_proj: LinearLayer,
    pub pe: PositionalTable,
    pub half_pe: PositionalTable,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct DanceModel {
    pub net: DanceNet,
    pub params: ParamStore,
}

impl DanceModel {
    /// Fresh model with weights drawn from a seeded generator.
    pub fn new(config: DanceModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let p = &mut params;
        let d = config.d_model;
        let n = config.cross.max_len;
        let net = DanceNet {
            config,
            music_proj: LinearLayer::new(p, &mut rng, "music_proj", MUSIC_DIM, d, true)?,
            motion_proj: LinearLayer::new(p, &mut rng, "motion_proj", FRAME_DIM, d, true)?,
            key_proj: LinearLayer::new(p, &mut rng, "key_proj", POSE_DIM, d, true)?,
            music_encoder: Encoder::new(p, &mut rng, "music_encoder", config.encoder_config())?,
            motion_encoder: Encoder::new(p, &mut rng, "motion_encoder", config.encoder_config())?,
            cross: Encoder::new(p, &mut rng, "cross", config.cross)?,
            out_proj: LinearLayer::new(p, &mut rng, "out_proj", d, FRAME_DIM, true)?,
            pe: sinusoidal_pe(n, d)?,
            half_pe: sinusoidal_pe(n, d / 2)?,
        };
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DanceModelConfig {
        &self.net.config
    }

    /// Predicted frames for every music-aligned position, `[T × 147]`.
    pub fn forward(
        &self,
        music: &MusicFeatureSequence,
        seed: &MotionSequence,
        keys: &KeyPoseSet,
    ) -> Result<MotionSequence> {
        let tape = Tape::inference();
        let out = self
            .net
            .forward(&tape, &self.params, music.tensor(), seed.tensor(), keys)?;
        MotionSequence::new(tape.value(out), music.fps()).map_err(|e| match e {
            Error::Validation(m) if m.contains("non-finite") => Error::numeric(m),
            other => other,
        })
    }
}

/// Pieces of the cross-modal input, kept separate for inspection.
#[derive(Clone, Debug)]
pub struct CrossInputParts {
    pub joint: Tensor,
    pub key_embedding: Tensor,
    pub local_pe: Tensor,
    pub pe: Tensor,
}

/// `concat(E^M, E^A) + E^P + PE^L + PE[0..L)` as a plain sum.
pub fn assemble_cross_input(
    motion_emb: &Tensor,
    music_emb: &Tensor,
    key_emb: &Tensor,
    local_pe: &Tensor,
    pe: &Tensor,
) -> Result<Tensor> {
    if motion_emb.ndim() != 2 || music_emb.ndim() != 2 || motion_emb.cols() != music_emb.cols() {
        return Err(Error::dim(
            "motion and music embeddings must be matrices of equal width",
        ));
    }
    let len = motion_emb.rows() + music_emb.rows();
    let d = motion_emb.cols();
    for (t, name) in [
        (key_emb, "key-pose embedding"),
        (local_pe, "local positional embedding"),
        (pe, "positional table"),
    ] {
        if t.shape() != [len, d] {
            return Err(Error::dim(format!(
                "{name} is {:?}, expected [{len} x {d}]",
                t.shape()
            )));
        }
    }
    let mut out = motion_emb.data().to_vec();
    out.extend_from_slice(music_emb.data());
    for (i, v) in out.iter_mut().enumerate() {
        *v = (*v + key_emb.data()[i]) + (pe.data()[i] + local_pe.data()[i]);
    }
    Tensor::new(&[len, d], out)
}

impl DanceNet {
    fn check_inputs(&self, music: &Tensor, seed: &Tensor, keys: &KeyPoseSet) -> Result<()> {
        if music.ndim() != 2 || music.cols() != MUSIC_DIM {
            return Err(Error::dim(format!(
                "music must be [T x {MUSIC_DIM}], got {:?}",
                music.shape()
            )));
        }
        if seed.ndim() != 2 || seed.cols() != FRAME_DIM {
            return Err(Error::dim(format!(
                "seed motion must be [T' x {FRAME_DIM}], got {:?}",
                seed.shape()
            )));
        }
        if seed.rows() == 0 {
            return Err(Error::invalid("seed motion is empty"));
        }
        if seed.rows() >= music.rows() {
            return Err(Error::invalid(format!(
                "seed length {} must be shorter than the music length {}",
                seed.rows(),
                music.rows()
            )));
        }
        let len = seed.rows() + music.rows();
        if len > self.config.cross.max_len {
            return Err(Error::invalid(format!(
                "seed plus music is {len} frames, the model supports {}",
                self.config.cross.max_len
            )));
        }
        if let Some(k) = keys.iter().find(|k| k.frame >= music.rows()) {
            return Err(Error::invalid(format!(
                "key pose at frame {} outside 0..{}",
                k.frame,
                music.rows()
            )));
        }
        Ok(())
    }

    /// Joint embedding, key-pose embedding and the two fixed tables, with
    /// the first two recorded on the tape.
    fn cross_input(
        &self,
        tape: &Tape,
        store: &ParamStore,
        music: &Tensor,
        seed: &Tensor,
        keys: &KeyPoseSet,
    ) -> Result<(Var, Var, Tensor)> {
        let (seed_len, len) = (seed.rows(), seed.rows() + music.rows());
        let a = self
            .music_proj
            .forward(tape, store, tape.constant(music.clone())?)?;
        let ea = self
            .music_encoder
            .forward(tape, store, a, &Mask::full(music.rows()))?;
        let p = self
            .motion_proj
            .forward(tape, store, tape.constant(seed.clone())?)?;
        let em = self
            .motion_encoder
            .forward(tape, store, p, &Mask::full(seed_len))?;
        let joint = tape.concat_rows(&[em, ea])?;
        let key_emb = embed_key_poses_var(tape, store, keys, len, seed_len, &self.key_proj)?;
        let local = local_positional_embedding(&keys.frames(), len, seed_len, &self.half_pe)?;
        let mut fixed = self.pe.prefix(len)?;
        fixed
            .data_mut()
            .iter_mut()
            .zip(local.matrix.data())
            .for_each(|(a, b)| *a += b);
        Ok((joint, key_emb, fixed))
    }

    /// Records the full forward pass; returns the `[T × 147]` prediction.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        music: &Tensor,
        seed: &Tensor,
        keys: &KeyPoseSet,
    ) -> Result<Var> {
        self.check_inputs(music, seed, keys)?;
        let (joint, key_emb, fixed) = self.cross_input(tape, store, music, seed, keys)?;
        let x = tape.add(tape.add(joint, key_emb)?, tape.constant(fixed)?)?;
        let len = seed.rows() + music.rows();
        let h = self.cross.forward(tape, store, x, &Mask::full(len))?;
        let h = tape.slice_rows(h, seed.rows(), music.rows())?;
        self.out_proj.forward(tape, store, h)
    }

    /// Inputs to the cross-modal transformer as separate plain tensors.
    pub fn cross_input_parts(
        &self,
        store: &ParamStore,
        music: &Tensor,
        seed: &Tensor,
        keys: &KeyPoseSet,
    ) -> Result<CrossInputParts> {
        self.check_inputs(music, seed, keys)?;
        let tape = Tape::inference();
        let (joint, key_emb, _) = self.cross_input(&tape, store, music, seed, keys)?;
        let len = seed.rows() + music.rows();
        Ok(CrossInputParts {
            joint: tape.value(joint),
            key_embedding: tape.value(key_emb),
            local_pe: local_positional_embedding(&keys.frames(), len, seed.rows(), &self.half_pe)?
                .matrix,
            pe: self.pe.prefix(len)?,
        })
    }
}
