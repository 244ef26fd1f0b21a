use crate::error::{arg_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error
/// `|autodiff − fd| / (|fd| + 1e-8)` over all coordinates of `x`.
///
/// `f` receives a fresh tape and the leaf holding `x`; it must be
/// deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(arg_err("grad_check", format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, leaf)?;
    check_finite(tape.value(loss).item())?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        check_finite(t.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { op: "grad_check" })
    }
}
