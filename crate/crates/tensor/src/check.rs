//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so the
//! closure must be a pure function of the leaf values it is given.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error between analytic and numeric derivative, guarded against
/// division by tiny magnitudes: |a - n| / max(1, |a|, |n|).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Check every coordinate of every input against central differences.
///
/// `build` receives a fresh tape plus leaves created from `inputs` (in
/// order) and must return the scalar loss node. Returns the maximum
/// relative error over all coordinates.
pub fn grad_check(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.data.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(inputs, &coords, h, build)
}

/// Like [`grad_check`] but probes only the listed `(input, coordinate)`
/// pairs — the affordable option for losses with thousands of parameters.
pub fn grad_check_at(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.from_tensor(t, true)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    // One analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.from_tensor(t, true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();

    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = probe[i].data[j];
        probe[i].data[j] = orig + h;
        let up = eval(&probe)?;
        probe[i].data[j] = orig - h;
        let down = eval(&probe)?;
        probe[i].data[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i][j], numeric));
    }
    Ok(worst)
}
