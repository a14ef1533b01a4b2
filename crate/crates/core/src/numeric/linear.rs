use rand::Rng;

use super::param::{init_uniform, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `y = x·Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            init_uniform(rng, &[out_dim, in_dim], in_dim),
        )?;
        let bias = if with_bias {
            Some(store.register(
                format!("{name}.bias"),
                init_uniform(rng, &[out_dim], in_dim),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = self.bias.map(|b| tape.param(store, b)).transpose()?;
        tape.linear(x, w, b)
    }

    /// Applies the layer to a plain tensor without recording anything.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&tape, store, xv)?;
        let out = tape.value(y).clone();
        Ok(out)
    }
}

/// Gain and bias of a layer norm.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b, super::tape::LAYER_NORM_EPS)
    }
}
