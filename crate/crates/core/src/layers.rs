//! Network building blocks: Chebyshev graph convolutions, batch norm, spatial
//! concrete dropout and HEALPix pooling.
//!
//! Layers hold indices into a [`ParamStore`]. A forward pass binds the store
//! to a tape once and every layer reads its variables from that binding.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, DropoutNoise, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::LaplacianOperator;
use crate::healpix::Resolution;

pub type ParamId = usize;

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Gradients of a bound store after `tape.backward`; unreached
    /// parameters get zeros.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.values)
            .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: [usize; 3], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `Σ_k Σ_i θ[k,i,o]·T_k(L̂) x_i + bias[o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub order: usize,
    pub theta: ParamId,
    pub bias: Option<ParamId>,
}

impl ChebConvLayer {
    /// He-style initialization, `std = sqrt(2 / ((K+1)·Cin))`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        order: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / ((order + 1) * in_channels) as f64).sqrt();
        let theta = store.add(format!("{name}.theta"), normal_tensor([order + 1, in_channels, out_channels], std, rng));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1])));
        ChebConvLayer { in_channels, out_channels, order, theta, bias }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], lhat: &Arc<LaplacianOperator>, x: Var) -> Result<Var> {
        tape.cheb_conv(x, vars[self.theta], self.bias.map(|b| vars[b]), Arc::clone(lhat))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running averages updated by the caller.
    Train,
    /// Running statistics.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([1, channels, 1], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1]));
        BatchNormLayer { channels, gamma, beta, running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }

    /// Returns the output and, in training mode, the batch statistics to feed
    /// [`BatchNormLayer::update_running`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: NormMode) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            NormMode::Train => {
                let (y, stats) = tape.batch_norm_train(x, vars[self.gamma], vars[self.beta], BN_EPS)?;
                Ok((y, Some(stats)))
            }
            NormMode::Eval => {
                let c = self.channels;
                let inv = tape.constant(Tensor::new(
                    [1, c, 1],
                    self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                )?);
                let mean = tape.constant(Tensor::new([1, c, 1], self.running_mean.clone())?);
                let scale = tape.mul(vars[self.gamma], inv)?;
                let offset = tape.mul(scale, mean)?;
                let shift = tape.sub(vars[self.beta], offset)?;
                Ok((tape.affine(x, scale, shift)?, None))
            }
        }
    }

    /// Exponential moving average with momentum 0.1; the variance uses the
    /// unbiased `count/(count-1)` correction.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
        }
    }
}

pub const CONCRETE_TEMPERATURE: f64 = 0.1;

/// Bounds on the dropout probability kept by [`ConcreteDropoutLayer::clamp`].
pub const P_MIN: f64 = 1e-6;
pub const P_MAX: f64 = 1.0 - 1e-6;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How dropout masks are produced in a forward pass.
pub enum MaskMode<'a> {
    /// Fresh uniform noise per (sample, channel) from the generator.
    Sample(&'a mut dyn RngCore),
    /// Soft mask forced to zero: units kept, scaled by `1/(1-p)`.
    KeepAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteDropoutLayer {
    pub p_logit: ParamId,
    pub temperature: f64,
}

impl ConcreteDropoutLayer {
    pub fn new(store: &mut ParamStore, name: &str, p_init: f64) -> Self {
        let p_logit = store.add(format!("{name}.p_logit"), Tensor::scalar(logit(p_init)));
        ConcreteDropoutLayer { p_logit, temperature: CONCRETE_TEMPERATURE }
    }

    pub fn p(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.p_logit).data()[0])
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: &mut MaskMode) -> Result<Var> {
        let [b, c, _] = tape.shape(x);
        let noise = match mode {
            MaskMode::KeepAll => DropoutNoise::KeepAll,
            MaskMode::Sample(rng) => {
                DropoutNoise::Uniform((0..b * c).map(|_| rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12)).collect())
            }
        };
        tape.concrete_dropout(x, vars[self.p_logit], &noise, self.temperature)
    }

    /// Keeps `p` inside `[P_MIN, P_MAX]` after an optimizer step.
    pub fn clamp(&self, store: &mut ParamStore) {
        let v = &mut store.get_mut(self.p_logit).data_mut()[0];
        *v = v.clamp(logit(P_MIN), logit(P_MAX));
    }
}

/// Concrete-dropout prior term
/// `(l²(1-p)/(2N))·‖W‖² + (C/N)·(p log p + (1-p) log(1-p))`,
/// where `W` are the weights (and bias) of the convolution whose output the
/// mask covers and `C` its channel count.
pub fn dropout_regularizer(
    tape: &mut Tape,
    vars: &[Var],
    dropout: &ConcreteDropoutLayer,
    conv: &ChebConvLayer,
    length_scale: f64,
    n_data: usize,
) -> Result<Var> {
    if !(length_scale > 0.0) || n_data == 0 {
        return Err(Error::InvalidArgument(format!(
            "length scale {length_scale} and N_data {n_data} must be positive"
        )));
    }
    let n = n_data as f64;
    let p = tape.sigmoid(vars[dropout.p_logit]);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);

    let sq = tape.square(vars[conv.theta]);
    let mut norm = tape.sum(sq);
    if let Some(b) = conv.bias {
        let bsq = tape.square(vars[b]);
        let bsum = tape.sum(bsq);
        norm = tape.add(norm, bsum)?;
    }
    let weight_term = tape.mul(one_minus_p, norm)?;
    let weight_term = tape.scale(weight_term, length_scale * length_scale / (2.0 * n));

    let log_p = tape.log(p);
    let log_q = tape.log(one_minus_p);
    let a = tape.mul(p, log_p)?;
    let b = tape.mul(one_minus_p, log_q)?;
    let neg_entropy = tape.add(a, b)?;
    let entropy_term = tape.scale(neg_entropy, conv.out_channels as f64 / n);
    tape.add(weight_term, entropy_term)
}

/// Nested-order pooling between a resolution and the next coarser one:
/// target pixel `p` gathers source pixels `4p..4p+4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolingMap {
    pub source: Resolution,
    pub target: Resolution,
}

impl PoolingMap {
    pub fn new(source: Resolution) -> Result<Self> {
        let target = source.coarser().ok_or_else(|| {
            Error::InvalidArgument(format!("cannot pool below nside 1 (source nside {})", source.nside()))
        })?;
        Ok(PoolingMap { source, target })
    }

    pub fn children(&self, p: usize) -> [usize; 4] {
        [4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3]
    }

    fn check(&self, op: &'static str, tape: &Tape, x: Var, res: Resolution) -> Result<()> {
        let n = tape.shape(x)[2];
        if n != res.n_pixels() {
            return Err(Error::shape(op, format!("{n} pixels, expected {} (nside {})", res.n_pixels(), res.nside())));
        }
        Ok(())
    }

    pub fn max_pool(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check("max_pool4", tape, x, self.source)?;
        tape.max_pool4(x)
    }

    pub fn upsample(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check("upsample_nn", tape, x, self.target)?;
        Ok(tape.upsample4(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::scaled_laplacian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_convolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = ChebConvLayer::new(&mut store, "c", 1, 1, 0, true, &mut rng);
        store.get_mut(conv.theta).data_mut()[0] = 1.0;
        let lhat = scaled_laplacian(Resolution::new(2).unwrap()).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 1, 48], |i| i as f64 * 0.5));
        let y = conv.forward(&mut tape, &vars, &lhat, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ChebConvLayer::new(&mut store, "c", 3, 2, 3, true, &mut rng);
        *store.get_mut(conv.bias.unwrap()) = Tensor::new([1, 2, 1], vec![0.25, -4.0]).unwrap();
        let lhat = scaled_laplacian(Resolution::new(2).unwrap()).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros([2, 3, 48]));
        let y = conv.forward(&mut tape, &vars, &lhat, x).unwrap();
        let yv = tape.value(y);
        for b in 0..2 {
            assert!(yv.row(b, 0).iter().all(|&v| v == 0.25));
            assert!(yv.row(b, 1).iter().all(|&v| v == -4.0));
        }
    }

    #[test]
    fn logit_of_init_probability() {
        assert!((logit(1e-3) - (-6.906754778648554)).abs() < 1e-12);
        assert!((sigmoid(logit(1e-3)) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn dropout_vanishes_as_p_goes_to_zero() {
        let mut store = ParamStore::new();
        let d = ConcreteDropoutLayer::new(&mut store, "d", 0.5);
        store.get_mut(d.p_logit).data_mut()[0] = -20.0;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([3, 4, 12], |i| 1.0 + i as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = d.forward(&mut tape, &vars, x, &mut MaskMode::Sample(&mut rng)).unwrap();
        let dev =
            tape.value(y).data().iter().zip(tape.value(x).data()).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-6, "{dev}");
    }

    #[test]
    fn mask_is_shared_across_pixels_and_seeded() {
        let mut store = ParamStore::new();
        let d = ConcreteDropoutLayer::new(&mut store, "d", 0.3);
        let run = |seed| {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let x = tape.constant(Tensor::full([2, 3, 12], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = d.forward(&mut tape, &vars, x, &mut MaskMode::Sample(&mut rng)).unwrap();
            tape.value(y).clone()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert_ne!(a, run(6));
        for b in 0..2 {
            for c in 0..3 {
                assert!(a.row(b, c).iter().all(|&v| v == a.row(b, c)[0]));
            }
        }
    }

    #[test]
    fn clamp_keeps_probability_in_range() {
        let mut store = ParamStore::new();
        let d = ConcreteDropoutLayer::new(&mut store, "d", 0.5);
        store.get_mut(d.p_logit).data_mut()[0] = 40.0;
        d.clamp(&mut store);
        assert!(d.p(&store) <= P_MAX);
        store.get_mut(d.p_logit).data_mut()[0] = -40.0;
        d.clamp(&mut store);
        assert!(d.p(&store) >= P_MIN * (1.0 - 1e-9));
    }

    #[test]
    fn pooling_map_structure() {
        let pm = PoolingMap::new(Resolution::new(4).unwrap()).unwrap();
        assert_eq!(pm.target.nside(), 2);
        assert_eq!(pm.children(5), [20, 21, 22, 23]);
        assert!(PoolingMap::new(Resolution::new(1).unwrap()).is_err());
    }
}
