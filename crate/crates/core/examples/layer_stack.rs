//! One encoder block by hand: Chebyshev convolution, batch normalization,
//! ReLU, concrete dropout and pooling, plus the dropout prior term.

use cmbclean::autodiff::Tape;
use cmbclean::autodiff::Tensor;
use cmbclean::graph::scaled_laplacian;
use cmbclean::healpix::Resolution;
use cmbclean::layers::{
    dropout_regularizer, BatchNormLayer, ChebConvLayer, ConcreteDropoutLayer, MaskMode, NormMode, ParamStore,
    PoolingMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cmbclean::Result<()> {
    let res = Resolution::new(8)?;
    let lhat = scaled_laplacian(res)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let conv = ChebConvLayer::new(&mut store, "conv", 9, 16, 5, false, &mut rng);
    let bn = BatchNormLayer::new(&mut store, "bn", 16);
    let drop = ConcreteDropoutLayer::new(&mut store, "drop", 0.1);
    let pool = PoolingMap::new(res)?;
    println!("{} parameter tensors, {} scalars", store.len(), store.n_scalars());

    let x = Tensor::from_fn([4, 9, res.n_pixels()], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let xv = tape.constant(x);
    let h = conv.forward(&mut tape, &vars, &lhat, xv)?;
    let (h, stats) = bn.forward(&mut tape, &vars, h, NormMode::Train)?;
    let h = tape.relu(h);
    let h = drop.forward(&mut tape, &vars, h, &mut MaskMode::Sample(&mut rng))?;
    let h = pool.max_pool(&mut tape, h)?;
    println!("block output shape {:?}", tape.shape(h));
    if let Some(s) = stats {
        println!("batch mean of channel 0: {:.4}", s.mean[0]);
    }
    let reg = dropout_regularizer(&mut tape, &vars, &drop, &conv, 1e-4, 200)?;
    println!("dropout rate {:.3}, prior term {:.5}", drop.p(&store), tape.value(reg).item()?);
    Ok(())
}
