//! Tensors, reverse-mode differentiation and a central-difference oracle.

mod kernels;
mod serialize;
mod tape;
mod tensor;

pub use serialize::{read_tensor, read_tensors, write_tensor, write_tensors};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Value and gradients of a scalar function of several tensors.
pub fn value_and_grad<F>(loss_fn: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    let value = loss.value();
    if value.len() != 1 {
        return Err(Error::Shape(format!(
            "loss must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    let grads = tape.backward(loss, &vars)?;
    Ok((value.data()[0], grads))
}

/// `d loss / d input` for each input.
pub fn grad<F>(loss_fn: F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    value_and_grad(loss_fn, inputs).map(|(_, g)| g)
}

/// Evaluates a scalar loss without recording gradients.
pub fn evaluate<F>(loss_fn: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    loss_fn(&tape, &vars)?.value().item()
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff<F>(loss_fn: F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut grad = vec![0.0; input.len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[i] += delta;
                let mut shifted = inputs.to_vec();
                shifted[which] = Tensor::new(input.shape().to_vec(), data)?;
                evaluate(&loss_fn, &shifted)
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            *slot = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(input.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)` over a list of tensors.
/// Two all-zero lists compare as 0.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
