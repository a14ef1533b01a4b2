//! Attention, masks, sinusoidal position tables and encoder stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LayerNormParams, LinearLayer, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl TransformerConfig {
    /// Config with the usual `4 · d_model` feed-forward width.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        d_model: usize,
        max_len: usize,
    ) -> Result<Self> {
        let cfg = Self {
            num_layers,
            num_heads,
            d_model,
            ff_dim: 4 * d_model,
            max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::invalid(format!(
                "transformer sizes must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Square attention mask; `true` means the query row may attend to the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(len: usize, allowed: Vec<bool>) -> Result<Self> {
        if len == 0 || allowed.len() != len * len {
            return Err(Error::dim(format!(
                "mask of {} entries for length {len}",
                allowed.len()
            )));
        }
        if let Some(i) = (0..len).find(|&i| !allowed[i * len..(i + 1) * len].iter().any(|&a| a)) {
            return Err(Error::invalid(format!("mask row {i} allows nothing")));
        }
        Ok(Self { len, allowed })
    }

    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
        Self { len, allowed }
    }

    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// `N × d` sinusoidal table.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    table: Tensor,
}

impl PositionalTable {
    /// All-zero table, useful for switching a positional signal off.
    pub fn zeros(len: usize, width: usize) -> Self {
        Self {
            table: Tensor::zeros(&[len, width]),
        }
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        self.table.row(pos)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    /// First `len` rows as a tensor.
    pub fn prefix(&self, len: usize) -> Result<Tensor> {
        if len > self.len() {
            return Err(Error::dim(format!(
                "position table has {} rows, {len} requested",
                self.len()
            )));
        }
        Tensor::new(
            &[len, self.width()],
            self.table.data()[..len * self.width()].to_vec(),
        )
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_pe(len: usize, d: usize) -> Result<PositionalTable> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional width must be even and positive, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::invalid("positional table needs at least one row"));
    }
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(PositionalTable {
        table: Tensor::new(&[len, d], data)?,
    })
}

/// Masked `softmax(q·kᵀ / √D)` for already-projected `q [Tq×D]`, `k [Tk×D]`.
pub fn attention_weights(tape: &Tape, q: Var, k: Var, mask: &Mask) -> Result<Var> {
    let d = tape.shape(q)[1];
    let (tq, tk) = (tape.shape(q)[0], tape.shape(k)[0]);
    if tq != mask.len() || tk != mask.len() {
        return Err(Error::dim(format!(
            "mask of length {} for attention {tq}x{tk}",
            mask.len()
        )));
    }
    let logits = tape.scale(tape.matmul_nt(q, k)?, 1.0 / (d as f64).sqrt())?;
    tape.masked_softmax_rows(logits, mask.as_slice())
}

/// Attention output `W · v` for already-projected queries, keys and values.
pub fn scaled_dot_attention(tape: &Tape, q: Var, k: Var, v: Var, mask: &Mask) -> Result<Var> {
    let w = attention_weights(tape, q, k, mask)?;
    tape.matmul(w, v)
}

/// Multi-head attention. The key projection carries no bias: a key bias
/// adds the same amount to every logit in a row and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        num_heads: usize,
    ) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            query: LinearLayer::new(store, rng, &format!("{name}.query"), d_model, d_model, true)?,
            key: LinearLayer::new(store, rng, &format!("{name}.key"), d_model, d_model, false)?,
            value: LinearLayer::new(store, rng, &format!("{name}.value"), d_model, d_model, true)?,
            output: LinearLayer::new(
                store,
                rng,
                &format!("{name}.output"),
                d_model,
                d_model,
                true,
            )?,
            num_heads,
        })
    }

    /// Concatenated head outputs before the output projection.
    pub fn heads(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let d = self.query.out_dim;
        for (x, what) in [(x_q, "query"), (x_kv, "key/value")] {
            let s = tape.shape(x);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim(format!(
                    "attention {what} input {s:?}, expected [T x {d}]"
                )));
            }
        }
        let q = self.query.forward(tape, store, x_q)?;
        let k = self.key.forward(tape, store, x_kv)?;
        let v = self.value.forward(tape, store, x_kv)?;
        if self.num_heads == 1 {
            return scaled_dot_attention(tape, q, k, v, mask);
        }
        let dh = d / self.num_heads;
        let outs = (0..self.num_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                scaled_dot_attention(tape, qh, kh, vh, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&outs)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let h = self.heads(tape, store, x_q, x_kv, mask)?;
        self.output.forward(tape, store, h)
    }
}

/// Post-norm layer: `h = LN(x + MHA(x))`, `y = LN(h + W₂·gelu(W₁·h))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNormParams,
    pub ff_in: LinearLayer,
    pub ff_out: LinearLayer,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &TransformerConfig,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                cfg.d_model,
                cfg.num_heads,
            )?,
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            ff_in: LinearLayer::new(
                store,
                rng,
                &format!("{name}.ff_in"),
                cfg.d_model,
                cfg.ff_dim,
                true,
            )?,
            ff_out: LinearLayer::new(
                store,
                rng,
                &format!("{name}.ff_out"),
                cfg.ff_dim,
                cfg.d_model,
                true,
            )?,
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), cfg.d_model)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, mask: &Mask) -> Result<Var> {
        let a = self.attention.forward(tape, store, x, x, mask)?;
        let h = self.norm1.forward(tape, store, tape.add(x, a)?)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = self.ff_out.forward(tape, store, tape.gelu(f)?)?;
        self.norm2.forward(tape, store, tape.add(h, f)?)
    }
}

/// A stack of encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        config: TransformerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var, mask: &Mask) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.d_model {
            return Err(Error::dim(format!(
                "encoder input {s:?}, expected [T x {}]",
                self.config.d_model
            )));
        }
        if s[0] > self.config.max_len {
            return Err(Error::dim(format!(
                "sequence of {} exceeds max length {}",
                s[0], self.config.max_len
            )));
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, store, h, mask))
    }
}
