use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks the gradient of the scalar program `f` at `x` over every element.
///
/// `f` receives a fresh tape and the leaf bound to `x`, and must return a
/// one-element value.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, None).map(|r| r.max_rel_error)
}

/// Like [`grad_check`], optionally restricted to a subset of flat indices.
pub fn grad_check_with<F>(mut f: F, x: &Tensor, eps: f64, subset: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut eval = |input: Tensor, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let v = tape.variable(input);
        let loss = f(&mut tape, v)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::NonFinite { op });
        }
        if tape.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
        }
        let value = tape.value(loss).item();
        let grad = if want_grad {
            Some(tape.backward(loss)?.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        } else {
            None
        };
        Ok((value, grad))
    };

    let (_, analytic) = eval(x.clone(), true)?;
    let analytic = analytic.expect("requested gradient");
    let all: Vec<usize>;
    let indices = match subset {
        Some(s) => s,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
