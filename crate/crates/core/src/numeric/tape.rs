//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] computes its output eagerly, records the
//! inputs it read and whatever it needs for the adjoint, and returns a
//! lightweight [`Var`] handle. [`Tape::backward`] then walks the records in
//! reverse insertion order, which is a valid topological order because an
//! op can only consume handles that already exist.
//!
//! A tape is single use: once `backward` has run, both further recording
//! and a second backward pass are rejected.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Gelu(usize),
    Ln(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    Sum(usize),
    ScaleRows {
        a: usize,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Linear { .. } => "linear",
            Op::Gelu(..) => "gelu",
            Op::Ln(..) => "ln",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(..) => "sum",
            Op::ScaleRows { .. } => "scale_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass and replays them backward once.
pub struct Tape {
    id: u64,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<(u64, usize), usize>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape whose parameters never require gradients; for inference.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Copy of the value behind a handle.
    pub fn value(&self, v: Var) -> Tensor {
        self.with_value(v, Tensor::clone)
    }

    /// Runs `f` on a borrowed value. `f` must not record on this tape.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Free leaf that receives a gradient on backward.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf { param: None }, true)
    }

    /// Leaf bound to a stored parameter. Binding the same parameter twice
    /// returns the same handle.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let key = (store.store_id(), id.index());
        if let Some(&node) = self.bound.borrow().get(&key) {
            return Ok(Var {
                tape: self.id,
                id: node,
            });
        }
        let value = store.value(id).clone();
        let v = self.push(value, Op::Leaf { param: Some(id) }, self.grad_enabled)?;
        self.bound.borrow_mut().insert(key, v.id);
        Ok(v)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::usage("variable belongs to another tape"));
        }
        Ok(v.id)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed.get() {
            return Err(Error::usage("tape already consumed by backward"));
        }
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            id: nodes.len() - 1,
        })
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn matrix_dims(&self, id: usize, what: &str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let t = &nodes[id].value;
        if t.ndim() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul [{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm_nn(
                nodes[a].value.data(),
                nodes[b].value.data(),
                &mut out,
                m,
                k,
                n,
            );
        }
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt [{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm_nt(
                nodes[a].value.data(),
                nodes[b].value.data(),
                &mut out,
                m,
                k,
                n,
            );
        }
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), g)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.matrix_dims(a, "transpose")?;
        let t = self.nodes.borrow()[a].value.transpose();
        let g = self.any_grad(&[a]);
        self.push(t, Op::Transpose(a), g)
    }

    fn zip_same(
        &self,
        a: usize,
        b: usize,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a].value, &nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Add(a, b), g)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Sub(a, b), g)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        self.push(t, Op::Mul(a, b), g)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let a = self.check(a)?;
        let t = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a].value;
            Tensor::new(ta.shape(), ta.data().iter().map(|x| x * c).collect())?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), g)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (a, r) = (self.check(a)?, self.check(row)?);
        let (m, n) = self.matrix_dims(a, "add_row")?;
        let t = {
            let nodes = self.nodes.borrow();
            let rv = &nodes[r].value;
            if rv.len() != n {
                return Err(Error::dim(format!(
                    "add_row: row of {} for width {n}",
                    rv.len()
                )));
            }
            let mut data = nodes[a].value.data().to_vec();
            for i in 0..m {
                for (d, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                    *d += b;
                }
            }
            Tensor::new(&[m, n], data)?
        };
        let g = self.any_grad(&[a, r]);
        self.push(t, Op::AddRow(a, r), g)
    }

    /// `x · wᵀ + b` with `w` stored as `[out × in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let (m, din) = self.matrix_dims(xi, "linear input")?;
        let (dout, din2) = self.matrix_dims(wi, "linear weight")?;
        if din != din2 {
            return Err(Error::dim(format!(
                "linear: input width {din}, weight [{dout}x{din2}]"
            )));
        }
        let mut out = vec![0.0; m * dout];
        {
            let nodes = self.nodes.borrow();
            if let Some(bi) = bi {
                let bv = &nodes[bi].value;
                if bv.len() != dout {
                    return Err(Error::dim(format!(
                        "linear: bias of {} for {dout} outputs",
                        bv.len()
                    )));
                }
                for i in 0..m {
                    out[i * dout..(i + 1) * dout].copy_from_slice(bv.data());
                }
            }
            gemm_nt(
                nodes[xi].value.data(),
                nodes[wi].value.data(),
                &mut out,
                m,
                din,
                dout,
            );
        }
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let g = self.any_grad(&ids);
        self.push(
            Tensor::new(&[m, dout], out)?,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
            g,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let t = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a].value;
            let data = ta
                .data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
                .collect();
            Tensor::new(ta.shape(), data)?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::Gelu(a), g)
    }

    /// Elementwise natural logarithm; non-positive inputs are a numeric error.
    pub fn ln(&self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let t = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a].value;
            if ta.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::numeric("ln of a non-positive value"));
            }
            Tensor::new(ta.shape(), ta.data().iter().map(|x| x.ln()).collect())?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::Ln(a), g)
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax where disallowed entries (`allowed[i*n+j] == false`)
    /// get exactly zero weight, as if their logits were −∞.
    pub fn masked_softmax_rows(&self, a: Var, allowed: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let a = self.check(a)?;
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        if n == 0 {
            return Err(Error::dim("softmax_rows: empty row"));
        }
        if let Some(mask) = allowed {
            if mask.len() != m * n {
                return Err(Error::dim(format!(
                    "softmax mask of {} for [{m}x{n}]",
                    mask.len()
                )));
            }
        }
        let t = {
            let nodes = self.nodes.borrow();
            let x = nodes[a].value.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let ok = |j: usize| allowed.is_none_or(|mask| mask[i * n + j]);
                let mut max = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if ok(j) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::invalid(format!(
                        "softmax_rows: row {i} is fully masked"
                    )));
                }
                let o = &mut out[i * n..(i + 1) * n];
                let mut z = 0.0;
                for j in 0..n {
                    if ok(j) {
                        o[j] = (row[j] - max).exp();
                        z += o[j];
                    }
                }
                for v in o.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(&[m, n], out)?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::Softmax(a), g)
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (m, d) = self.matrix_dims(xi, "layer_norm")?;
        if d < 2 {
            return Err(Error::dim("layer_norm needs at least two features"));
        }
        let (t, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (gv, bv) = (&nodes[gi].value, &nodes[bi].value);
            if gv.len() != d || bv.len() != d {
                return Err(Error::dim(format!(
                    "layer_norm affine params must have {d} entries"
                )));
            }
            let x = nodes[xi].value.data();
            let mut xhat = vec![0.0; m * d];
            let mut inv_std = vec![0.0; m];
            let mut out = vec![0.0; m * d];
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[i] = s;
                for j in 0..d {
                    let h = (row[j] - mean) * s;
                    xhat[i * d + j] = h;
                    out[i * d + j] = gv.data()[j] * h + bv.data()[j];
                }
            }
            (Tensor::new(&[m, d], out)?, xhat, inv_std)
        };
        let g = self.any_grad(&[xi, gi, bi]);
        let (xhat, inv_std) = if g {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            t,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            g,
        )
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let n = nodes[ids[0]].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                if v.ndim() != 2 || v.cols() != n {
                    return Err(Error::dim(format!(
                        "concat_rows: shape {:?} vs width {n}",
                        v.shape()
                    )));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, n], data)?
        };
        let g = self.any_grad(&ids);
        self.push(t, Op::ConcatRows(ids), g)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let a = self.check(a)?;
        let (m, n) = self.matrix_dims(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {m} rows",
                start + len
            )));
        }
        let t = {
            let nodes = self.nodes.borrow();
            Tensor::new(
                &[len, n],
                nodes[a].value.data()[start * n..(start + len) * n].to_vec(),
            )?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::SliceRows { a, start }, g)
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let m = nodes[ids[0]].value.rows();
            let widths: Vec<usize> = ids.iter().map(|&i| nodes[i].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; m * total];
            let mut off = 0;
            for (&i, &w) in ids.iter().zip(&widths) {
                let v = &nodes[i].value;
                if v.ndim() != 2 || v.rows() != m {
                    return Err(Error::dim(format!(
                        "concat_cols: shape {:?} vs {m} rows",
                        v.shape()
                    )));
                }
                for r in 0..m {
                    data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
                }
                off += w;
            }
            Tensor::new(&[m, total], data)?
        };
        let g = self.any_grad(&ids);
        self.push(t, Op::ConcatCols(ids), g)
    }

    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let a = self.check(a)?;
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + width > n {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {n} columns",
                start + width
            )));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a].value;
            let mut data = Vec::with_capacity(m * width);
            for r in 0..m {
                data.extend_from_slice(&v.row(r)[start..start + width]);
            }
            Tensor::new(&[m, width], data)?
        };
        let g = self.any_grad(&[a]);
        self.push(t, Op::SliceCols { a, start }, g)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        let s = self.nodes.borrow()[a].value.data().iter().sum();
        let g = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    /// Multiplies row `r` by the constant `weights[r]`.
    pub fn scale_rows(&self, a: Var, weights: &[f64]) -> Result<Var> {
        let a = self.check(a)?;
        let (m, n) = self.matrix_dims(a, "scale_rows")?;
        if weights.len() != m {
            return Err(Error::dim(format!(
                "scale_rows: {} weights for {m} rows",
                weights.len()
            )));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let mut data = nodes[a].value.data().to_vec();
            for (r, &w) in weights.iter().enumerate() {
                for v in &mut data[r * n..(r + 1) * n] {
                    *v *= w;
                }
            }
            Tensor::new(&[m, n], data)?
        };
        let g = self.any_grad(&[a]);
        self.push(
            t,
            Op::ScaleRows {
                a,
                weights: weights.to_vec(),
            },
            g,
        )
    }

    /// Propagates the derivative of a scalar `loss` back to every leaf that
    /// requires a gradient. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss = self.check(loss)?;
        if self.consumed.get() {
            return Err(Error::usage("backward already ran on this tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss].value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss].value.shape()
            )));
        }
        if !nodes[loss].needs_grad {
            return Err(Error::usage(
                "loss does not depend on any value requiring a gradient",
            ));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(nodes.len());
        let mut params = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { param } if node.needs_grad => {
                    let data = grads[id]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    let t = Tensor::new(node.value.shape(), data)?;
                    if let Some(p) = param {
                        params.push((p, id));
                    }
                    out.push(Some(t));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
            params,
        })
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        &Op::MatMul(a, b) => {
            let (m, k, n) = (nodes[a].value.rows(), nodes[a].value.cols(), out.cols());
            accumulate(grads, nodes, a, |da| {
                gemm_nt(g, nodes[b].value.data(), da, m, n, k)
            });
            accumulate(grads, nodes, b, |db| {
                gemm_tn(nodes[a].value.data(), g, db, k, m, n)
            });
        }
        &Op::MatMulNt(a, b) => {
            let (m, k, n) = (nodes[a].value.rows(), nodes[a].value.cols(), out.cols());
            accumulate(grads, nodes, a, |da| {
                gemm_nn(g, nodes[b].value.data(), da, m, n, k)
            });
            accumulate(grads, nodes, b, |db| {
                gemm_tn(g, nodes[a].value.data(), db, n, m, k)
            });
        }
        &Op::Transpose(a) => {
            let (m, n) = (out.rows(), out.cols());
            accumulate(grads, nodes, a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] += g[i * n + j];
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |da| add_into(da, g));
            accumulate(grads, nodes, b, |db| add_into(db, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |da| add_into(da, g));
            accumulate(grads, nodes, b, |db| {
                for (d, &v) in db.iter_mut().zip(g) {
                    *d -= v;
                }
            });
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(grads, nodes, a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, b, |db| {
                for i in 0..db.len() {
                    db[i] += g[i] * va[i];
                }
            });
        }
        &Op::Scale(a, c) => {
            accumulate(grads, nodes, a, |da| {
                for (d, &v) in da.iter_mut().zip(g) {
                    *d += c * v;
                }
            });
        }
        &Op::AddRow(a, r) => {
            let n = out.cols();
            accumulate(grads, nodes, a, |da| add_into(da, g));
            accumulate(grads, nodes, r, |dr| col_sum_into(dr, g, n));
        }
        &Op::Linear { x, w, b } => {
            let (m, din) = (nodes[x].value.rows(), nodes[x].value.cols());
            let dout = out.cols();
            accumulate(grads, nodes, x, |dx| {
                gemm_nn(g, nodes[w].value.data(), dx, m, dout, din)
            });
            accumulate(grads, nodes, w, |dw| {
                gemm_tn(g, nodes[x].value.data(), dw, dout, m, din)
            });
            if let Some(b) = b {
                accumulate(grads, nodes, b, |db| col_sum_into(db, g, dout));
            }
        }
        &Op::Gelu(a) => {
            let x = nodes[a].value.data();
            accumulate(grads, nodes, a, |da| {
                for i in 0..da.len() {
                    let xi = x[i];
                    let t = (GELU_C * (xi + GELU_A * xi * xi * xi)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    da[i] += g[i] * d;
                }
            });
        }
        &Op::Ln(a) => {
            let x = nodes[a].value.data();
            accumulate(grads, nodes, a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] / x[i];
                }
            });
        }
        &Op::Softmax(a) => {
            let (m, n) = (out.rows(), out.cols());
            let y = out.data();
            accumulate(grads, nodes, a, |da| {
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (m, d) = (out.rows(), out.cols());
            let gv = nodes[*gain].value.data();
            accumulate(grads, nodes, *gain, |dg| {
                for i in 0..m {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |db| col_sum_into(db, g, d));
            accumulate(grads, nodes, *x, |dx| {
                let mut dxhat = vec![0.0; d];
                for i in 0..m {
                    let xh = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dxhat[j] = g[i * d + j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(grads, nodes, p, |dp| add_into(dp, &g[off..off + len]));
                off += len;
            }
        }
        &Op::SliceRows { a, start } => {
            let n = out.cols();
            accumulate(grads, nodes, a, |da| {
                add_into(&mut da[start * n..start * n + g.len()], g)
            });
        }
        Op::ConcatCols(parts) => {
            let (m, total) = (out.rows(), out.cols());
            let mut off = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accumulate(grads, nodes, p, |dp| {
                    for r in 0..m {
                        add_into(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                });
                off += w;
            }
        }
        &Op::SliceCols { a, start } => {
            let (m, w) = (out.rows(), out.cols());
            let n = nodes[a].value.cols();
            accumulate(grads, nodes, a, |da| {
                for r in 0..m {
                    add_into(
                        &mut da[r * n + start..r * n + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            });
        }
        &Op::Sum(a) => {
            let s = g[0];
            accumulate(grads, nodes, a, |da| da.iter_mut().for_each(|d| *d += s));
        }
        Op::ScaleRows { a, weights } => {
            let n = out.cols();
            accumulate(grads, nodes, *a, |da| {
                for (r, &w) in weights.iter().enumerate() {
                    for j in 0..n {
                        da[r * n + j] += w * g[r * n + j];
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn col_sum_into(dst: &mut [f64], g: &[f64], n: usize) {
    for row in g.chunks_exact(n) {
        add_into(dst, row);
    }
}

/// Result of a backward pass: gradients for every leaf that required one.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of parameters bound through [`Tape::param`].
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(p, id)| self.grads[id].as_ref().map(|g| (p, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i3 = tape.constant(Tensor::identity(3)).unwrap();
        let a_t = t(&[3, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, 2.0, -1.0, 0.5, 7.0]);
        let a = tape.constant(a_t.clone()).unwrap();
        let c = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(c), a_t);
        let one = tape.constant(t(&[1, 1], &[1.0])).unwrap();
        let zero = tape.constant(t(&[1, 1], &[0.0])).unwrap();
        assert_eq!(tape.value(tape.matmul(one, zero).unwrap()).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape
            .constant(t(&[3, 2], &[0.0, 2f64.ln(), 5.0, 5.0, -1.0, -1.0]))
            .unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y);
        assert!((y.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(y.get(1, 0), 0.5);
        assert_eq!(y.get(2, 1), 0.5);

        let single = tape.constant(t(&[1, 1], &[-42.0])).unwrap();
        assert_eq!(
            tape.value(tape.softmax_rows(single).unwrap()).data(),
            &[1.0]
        );
    }

    #[test]
    fn softmax_rejects_empty_and_fully_masked_rows() {
        let tape = Tape::new();
        let empty = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        assert!(matches!(tape.softmax_rows(empty), Err(Error::Dimension(_))));
        let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let r = tape.masked_softmax_rows(x, &[true, false, false, false]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0])).unwrap();
        let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        let y = tape.value(y);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        // population std of [1,-1] is 1; epsilon shifts the result by ~5e-6
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.get(1, 0) - expected).abs() < 1e-15);
        assert!((y.get(1, 1) + expected).abs() < 1e-15);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1])).unwrap();
        let g = tape.constant(Tensor::zeros(&[1])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(tape.layer_norm(x, g, b, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape
            .leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]))
            .unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_self_dot_is_twice_x() {
        let tape = Tape::new();
        let xs = [0.5, -1.5, 2.0];
        let x = tape.leaf(t(&[1, 3], &xs)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(x).unwrap();
        for (gi, xi) in g.data().iter().zip(xs) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_runs_once() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
        assert!(matches!(tape.sum(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_detached_value_is_a_usage_error() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

        let other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[f64::MAX])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numeric(_))));
        assert!(matches!(
            tape.constant(Tensor::scalar(f64::NAN)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let unused = tape.leaf(Tensor::zeros(&[2])).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
