//! Central finite-difference checking of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing backpropagated and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over every
    /// input entry.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Evaluates `f` on `inputs` registered as trainable leaves, backpropagates
/// the scalar it returns, and compares every input gradient with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", v.shape())));
        }
        Ok(v.item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(GradCheck {
        relative_error: if scale > 0.0 { norm(&diff) / scale } else { 0.0 },
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        entries: analytic.len(),
    })
}
