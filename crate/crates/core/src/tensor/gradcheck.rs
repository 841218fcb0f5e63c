use super::{Dims, Tape, Tensor4D, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error over all elements.
pub fn grad_check<F>(f: F, x: &Tensor4D, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; every element of every input
/// is perturbed in turn.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor4D], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor4D]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let y = f(&mut tape, &vars)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, y: Var) -> Result<f64> {
    if tape.dims(y) != Dims::SCALAR {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got dims {}",
            tape.dims(y)
        )));
    }
    Ok(tape.value(y).data()[0])
}
