//! Reverse-mode gradients on the tape, checked against a central difference.

use layerdistill::{Tape, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> layerdistill::Result<(Tape, layerdistill::Var, layerdistill::Var)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let h = tape.matmul(xv, wv)?;
    let p = tape.softmax_rows(h)?;
    let target = tape.constant(Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])?);
    let l = tape.mse(p, target)?;
    Ok((tape, wv, l))
}

fn main() -> layerdistill::Result<()> {
    let x = Tensor::new([2, 2], vec![0.5, -1.0, 2.0, 0.25])?;
    let w = Tensor::new([2, 3], vec![0.1, -0.3, 0.7, 0.4, 0.2, -0.5])?;
    let (tape, wv, l) = loss(&x, &w)?;
    let grads = tape.backward(l)?;
    let g = grads.wrt(wv);
    println!("loss {:.6}", tape.value(l).item());

    let h = 1e-6;
    for i in 0..w.numel() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += h;
        down.data_mut()[i] -= h;
        let f = |w: &Tensor| {
            let (t, _, l) = loss(&x, w).unwrap();
            t.value(l).item()
        };
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        println!("dL/dw[{i}]  tape {:+.8}  numeric {:+.8}", g.data()[i], numeric);
    }
    Ok(())
}
