//! Reverse-mode autodiff on the tape, checked against central differences.
//!
//! `cargo run --example numerics_gradcheck`

use kdlab::numerics::{Activation, Tape, Tensor};

/// `cross_entropy(gelu(x · w), [0, 2])` without gradient tracking.
fn loss(x: &Tensor, w: &Tensor) -> kdlab::Result<f64> {
    let mut tape = Tape::no_grad();
    let (xv, wv) = (tape.leaf(x), tape.leaf(w));
    let h = tape.matmul(xv, wv)?;
    let h = tape.activation(h, Activation::Gelu)?;
    let l = tape.cross_entropy(h, &[0, 2])?;
    Ok(tape.value(l).item())
}

fn main() -> kdlab::Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new(&[3, 3], vec![0.2, -0.4, 0.1, 0.9, 0.05, -0.3, -0.6, 0.8, 0.4])?;

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let wv = tape.param(&w);
    let h = tape.matmul(xv, wv)?;
    let h = tape.activation(h, Activation::Gelu)?;
    let l = tape.cross_entropy(h, &[0, 2])?;
    println!("loss = {:.6}", tape.value(l).item());
    let grads = tape.backward(l)?;
    let analytic = grads.get(wv).expect("w is trainable").to_vec();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut up = w.clone();
        up.data_mut()[k] += eps;
        let mut down = w.clone();
        down.data_mut()[k] -= eps;
        let numeric = (loss(&x, &up)? - loss(&x, &down)?) / (2.0 * eps);
        worst = worst.max((numeric - a).abs());
        println!("dL/dw[{k}]  tape {a:+.8}  finite difference {numeric:+.8}");
    }
    println!("largest absolute difference {worst:.2e}");
    Ok(())
}
