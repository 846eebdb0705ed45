//! Reverse-mode gradients of a small logistic-regression loss, checked
//! against central differences.

use argmaxgrad::tensor::{Tape, Tensor};

fn loss(w: &[f64]) -> argmaxgrad::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 2.0, 0.8, -1.1])?);
    let y = tape.constant(Tensor::matrix(3, 1, vec![1.0, 0.0, 1.0])?);
    let wn = tape.param(Tensor::matrix(2, 1, w.to_vec())?);
    let logits = tape.matmul(x, wn)?;
    let l = tape.bce_loss(logits, y)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).data()[0], g.wrt(wn).data().to_vec()))
}

fn main() -> argmaxgrad::Result<()> {
    let w = [0.4, -0.7];
    let (value, grad) = loss(&w)?;
    println!("loss {value:.6}");
    for i in 0..2 {
        let h = 1e-6;
        let (mut up, mut dn) = (w, w);
        up[i] += h;
        dn[i] -= h;
        let fd = (loss(&up)?.0 - loss(&dn)?.0) / (2.0 * h);
        println!("dL/dw{i}: tape {:+.9}  finite difference {fd:+.9}", grad[i]);
    }
    Ok(())
}
