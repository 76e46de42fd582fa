//! Dense `f64` tensors, reverse-mode differentiation and optimisation.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, AdamW, LinearSchedule};
pub use params::{Bound, ParamStore};
pub use tape::{
    cosine, gelu, log_softmax, sigmoid, softmax_in_place, Activation, Gradients, LossKind, Tape, Var, LAYER_NORM_EPS,
    LEAKY_RELU_SLOPE,
};
pub(crate) use tensor::read_u64;
pub use tensor::{Tensor, TENSOR_MAGIC};

use crate::error::{Error, Result};

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (a, b) = (tape.leaf(a), tape.leaf(b));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

/// Softmax of `z / temperature` along the last axis.
pub fn softmax_with_temperature(z: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = z.clone();
    out.grad = None;
    let c = out.last_dim();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row, 1.0 / temperature);
    }
    Ok(out)
}

/// Elementwise activation without gradient tracking.
pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    let mut tape = Tape::no_grad();
    let v = tape.leaf(x);
    let y = tape.activation(v, kind).expect("elementwise op cannot fail");
    tape.value(y).clone()
}

#[cfg(test)]
mod tests;
