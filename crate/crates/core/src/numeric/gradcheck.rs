//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor for the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Which coordinates to compare.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// `count` coordinates drawn without replacement from all parameters.
    Sample {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences with step
/// `eps` on the selected parameter coordinates.
///
/// `f` must build a scalar from the parameters of `store` on the tape it is
/// given and must be deterministic.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    eps: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        analytic[id.index()] = Some(g.clone());
    }

    let mut all: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    if let Coords::Sample { count, seed } = coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(count);
    }

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let v = f(&tape, store)?;
        let out = tape.value(v).item();
        if !out.is_finite() {
            return Err(Error::numeric("function value is not finite"));
        }
        Ok(out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (id, i) in all {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((store.get(id).name.clone(), i));
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Gradient check over free input tensors instead of a parameter store.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("input{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    grad_check(
        &mut store,
        |tape, store| {
            let vars = ids
                .iter()
                .map(|&id| tape.param(store, id))
                .collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        eps,
        Coords::All,
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Checks one op on random inputs. The output is contracted with a fixed
/// random weight so every entry reaches the scalar.
fn check_op(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let r = grad_check_inputs(
        &inputs,
        |t, v| {
            let y = f(t, v)?;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let w = t.constant(random_tensor(&mut rng, &t.shape(y)))?;
            t.sum(t.mul(y, w)?)
        },
        1e-5,
    )?;
    Ok(r.max_rel_error)
}

/// Largest relative error of every differentiable tape op on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| random_tensor(&mut rng, s);
    let mask = [true, false, false, true, true, false, true, true, true];
    Ok(vec![
        (
            "matmul",
            check_op(vec![r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1]))?,
        ),
        (
            "matmul_nt",
            check_op(vec![r(&[3, 4]), r(&[5, 4])], |t, v| t.matmul_nt(v[0], v[1]))?,
        ),
        (
            "transpose",
            check_op(vec![r(&[3, 4])], |t, v| t.transpose(v[0]))?,
        ),
        (
            "add",
            check_op(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.add(v[0], v[1]))?,
        ),
        (
            "sub",
            check_op(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.sub(v[0], v[1]))?,
        ),
        (
            "mul",
            check_op(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1]))?,
        ),
        (
            "scale",
            check_op(vec![r(&[3, 4])], |t, v| t.scale(v[0], -1.7))?,
        ),
        (
            "add_row",
            check_op(vec![r(&[3, 4]), r(&[4])], |t, v| t.add_row(v[0], v[1]))?,
        ),
        (
            "linear",
            check_op(vec![r(&[3, 4]), r(&[2, 4]), r(&[2])], |t, v| {
                t.linear(v[0], v[1], Some(v[2]))
            })?,
        ),
        (
            "gelu",
            check_op(vec![r(&[3, 4])], |t, v| t.gelu(t.scale(v[0], 2.5)?))?,
        ),
        (
            "ln",
            check_op(vec![r(&[3, 4])], |t, v| t.ln(t.softmax_rows(v[0])?))?,
        ),
        (
            "softmax_rows",
            check_op(vec![r(&[3, 4])], |t, v| t.softmax_rows(v[0]))?,
        ),
        (
            "masked_softmax_rows",
            check_op(vec![r(&[3, 3])], |t, v| t.masked_softmax_rows(v[0], &mask))?,
        ),
        (
            "layer_norm",
            check_op(vec![r(&[3, 5]), r(&[5]), r(&[5])], |t, v| {
                t.layer_norm(v[0], v[1], v[2], super::tape::LAYER_NORM_EPS)
            })?,
        ),
        (
            "concat_rows",
            check_op(vec![r(&[2, 3]), r(&[1, 3])], |t, v| {
                t.concat_rows(&[v[0], v[1]])
            })?,
        ),
        (
            "slice_rows",
            check_op(vec![r(&[4, 3])], |t, v| t.slice_rows(v[0], 1, 2))?,
        ),
        (
            "concat_cols",
            check_op(vec![r(&[2, 3]), r(&[2, 2])], |t, v| {
                t.concat_cols(&[v[0], v[1]])
            })?,
        ),
        (
            "slice_cols",
            check_op(vec![r(&[2, 5])], |t, v| t.slice_cols(v[0], 1, 3))?,
        ),
        (
            "scale_rows",
            check_op(vec![r(&[3, 2])], |t, v| {
                t.scale_rows(v[0], &[0.5, -2.0, 3.0])
            })?,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const EPS: f64 = 1e-5;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with known gradient (A + Aᵀ) x
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[4, 4]);
        let x = rand_tensor(&mut rng, &[4, 1]);
        let r = grad_check_inputs(
            std::slice::from_ref(&x),
            |t, v| {
                let at = t.constant(a.clone())?;
                let ax = t.matmul(at, v[0])?;
                let xax = t.mul(v[0], ax)?;
                t.sum(xax)
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");

        let tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let at = tape.constant(a.clone()).unwrap();
        let ax = tape.matmul(at, xv).unwrap();
        let s = tape.mul(xv, ax).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        let exact = a.matmul(&x).unwrap();
        let exact_t = a.transpose().matmul(&x).unwrap();
        for i in 0..4 {
            let e = exact.data()[i] + exact_t.data()[i];
            assert!((g.get(xv).unwrap().data()[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = rand_tensor(&mut rng, &[3, 5]);
        let mut onehot = Tensor::zeros(&[3, 5]);
        onehot.set(0, 1, 1.0);
        onehot.set(1, 4, 1.0);
        onehot.set(2, 0, 1.0);
        let r = grad_check_inputs(
            &[logits],
            |t, v| {
                let p = t.softmax_rows(v[0])?;
                let logp = t.ln(p)?;
                let oh = t.constant(onehot.clone())?;
                let picked = t.mul(logp, oh)?;
                let s = t.sum(picked)?;
                t.scale(s, -1.0)
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let results = op_suite(7).unwrap();
        assert_eq!(results.len(), 19);
        for (name, e) in results {
            assert!(e < 1e-6, "{name} {e}");
        }
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[5, 3]);
        let target = rand_tensor(&mut rng, &[5, 2]);
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[2, 4]),
            rand_tensor(&mut rng, &[2]),
        ];
        let r = grad_check_inputs(
            &inputs,
            |t, v| {
                let xv = t.constant(x.clone())?;
                let h = t.linear(xv, v[0], Some(v[1]))?;
                let h = t.gelu(h)?;
                let y = t.linear(h, v[2], Some(v[3]))?;
                let tv = t.constant(target.clone())?;
                let d = t.sub(y, tv)?;
                let sq = t.mul(d, d)?;
                t.sum(sq)
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 12 + 4 + 8 + 2);
    }

    #[test]
    fn non_finite_function_is_numeric_error() {
        let mut store = ParamStore::new();
        let id = store
            .register("x", Tensor::new(&[1], vec![1.0]).unwrap())
            .unwrap();
        let mut calls = 0;
        let r = grad_check(
            &mut store,
            |t, s| {
                calls += 1;
                let x = t.param(s, id)?;
                if calls > 1 {
                    // any op on a non-finite constant fails
                    t.constant(Tensor::scalar(f64::INFINITY))?;
                }
                t.sum(x)
            },
            EPS,
            Coords::All,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
