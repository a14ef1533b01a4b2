//! Prints the loss weight ω over a clip for a few (λ, σ) pairs as CSV.

use dancegen::model::weight_curve;

fn main() {
    let len = 240;
    let keys = [60, 120, 180];
    let pairs = [(0.0, 0.1), (1.0, 0.1), (3.0, 0.05), (3.0, 0.1), (5.0, 0.2)];
    let header: Vec<String> = pairs.iter().map(|(l, s)| format!("l{l}_s{s}")).collect();
    println!("frame,{}", header.join(","));
    for t in (0..len).step_by(4) {
        let row: Vec<String> = pairs
            .iter()
            .map(|&(l, s)| format!("{:.6}", weight_curve(t, &keys, len, l, s)))
            .collect();
        println!("{t},{}", row.join(","));
    }
}
