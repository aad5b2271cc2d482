//! Reverse-mode gradients of a small graph-convolution expression,
//! compared against central finite differences.

use std::sync::Arc;

use cmbclean::autodiff::{gradient_check_many, Tape, Tensor};
use cmbclean::graph::scaled_laplacian;
use cmbclean::healpix::Resolution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmbclean::Result<()> {
    let lhat = scaled_laplacian(Resolution::new(2)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |shape| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let x = draw([2, 3, 48]);
    let theta = draw([4, 3, 5]);
    let bias = draw([1, 5, 1]);

    let loss = |t: &mut Tape, v: &[cmbclean::autodiff::Var]| {
        let y = t.cheb_conv(v[0], v[1], Some(v[2]), Arc::clone(&lhat))?;
        let y = t.sigmoid(y);
        let y = t.square(y);
        Ok(t.mean(y))
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &theta, &bias].iter().map(|v| tape.leaf((*v).clone())).collect();
    let out = loss(&mut tape, &vars)?;
    tape.backward(out)?;
    println!("loss {:.6}", tape.value(out).item()?);
    println!("|d loss / d theta| = {:.3e}", tape.grad(vars[1]).unwrap().sum_squares().sqrt());

    let report = gradient_check_many(loss, &[x, theta, bias], 1e-5)?;
    println!("finite-difference check: {report:?}");
    Ok(())
}
