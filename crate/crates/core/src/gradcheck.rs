//! Finite-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error over all entries of `x`.
///
/// `build` must construct the function on the given tape starting from the
/// provided input leaf, returning the scalar root. `h` is the perturbation
/// step. The relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator so entries with tiny gradients do not dominate.
pub fn grad_check(build: impl Fn(&Tape, Var) -> Var, x: &Tensor, h: f64) -> f64 {
    let eval = |t: &Tensor| -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(t.clone());
        let root = build(&tape, v);
        tape.item(root)
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let root = build(&tape, v);
    let analytic = tape.backward(root).get(v);

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
