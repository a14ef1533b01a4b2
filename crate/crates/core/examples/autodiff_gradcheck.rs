//! Builds a small expression on the tape, prints its gradient and checks
//! every op plus the tiny network against central differences.

use dancegen::model::{gradcheck_model, DanceModelConfig, Preset};
use dancegen::numeric::{op_suite, Tape, Tensor};

fn main() -> dancegen::Result<()> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0])?)?;
    let w = tape.leaf(Tensor::new(&[2, 2], vec![0.1, 0.2, -0.3, 0.4])?)?;
    let y = tape.sum(tape.gelu(tape.matmul(x, w)?)?)?;
    println!("y = {}", tape.value(y).item());
    let grads = tape.backward(y)?;
    println!("dy/dw = {:?}", grads.get(w).map(|g| g.data().to_vec()));

    for (name, err) in op_suite(0)? {
        println!("{name:<20} {err:.2e}");
    }
    let cfg = DanceModelConfig::with_lengths(Preset::Tiny, 4, 16)?;
    let r = gradcheck_model(cfg, 2, 0, 200, 1e-4)?;
    println!(
        "tiny model: max rel error {:.2e} over {} coordinates",
        r.max_rel_error, r.checked
    );
    Ok(())
}
