//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]: below it the comparison is absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, input: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    Ok(tape.scalar(y))
}

/// Compares the tape gradient of scalar `f` at `input` with central differences of step `h`.
pub fn gradcheck<F>(f: F, input: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x0 = input.clone().with_grad();

    let first = eval(&f, &x0)?;
    let second = eval(&f, &x0)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut tape = Tape::new();
    let x = tape.leaf(&x0);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x0.numel()]);

    let mut numeric = Vec::with_capacity(x0.numel());
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = x0.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| {
                if e.is_nan() || e > best.1 {
                    (i, e)
                } else {
                    best
                }
            },
        );

    Ok(GradcheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error < tol,
    })
}
