use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `max_i |a_i − n_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `h`, returning the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::contract(format!(
            "finite-difference step {h} outside [1e-5, 1e-2]"
        )));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&tape, v)?;
        let val = tape.value(out);
        if val.numel() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        Ok(val.data()[0])
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
