//! Graph U-Net on the HEALPix sphere in deterministic and Bayesian
//! (concrete dropout + log-variance head) variants, and the two losses.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{scaled_laplacian_with, EdgeWeighting, LaplacianOperator};
use crate::healpix::Resolution;
use crate::layers::{
    dropout_regularizer, logit, sigmoid, BatchNormLayer, ChebConvLayer, ConcreteDropoutLayer, MaskMode, NormMode,
    ParamStore, PoolingMap,
};

pub const INIT_DROPOUT_P: f64 = 1e-3;
/// Standard deviation of the log-variance head at transfer (variance 1e-6).
pub const LOGVAR_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub nside: u32,
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Chebyshev order of every hidden convolution.
    pub order: usize,
    pub bayesian: bool,
    #[serde(default)]
    pub edge_weighting: EdgeWeighting,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 9,
            nside: 64,
            depth: 3,
            widths: vec![32, 64, 128],
            order: 3,
            bayesian: false,
            edge_weighting: EdgeWeighting::Gaussian,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<Resolution> {
        let res = Resolution::new(self.nside)?;
        if self.in_channels == 0 {
            return Err(Error::InvalidArgument("in_channels must be positive".into()));
        }
        if self.depth == 0 || self.depth > res.order() as usize {
            return Err(Error::InvalidArgument(format!(
                "depth {} must be in 1..=log2(nside) = {} for nside {}",
                self.depth,
                res.order(),
                self.nside
            )));
        }
        if self.widths.len() != self.depth || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "widths {:?} must list {} positive channel counts",
                self.widths, self.depth
            )));
        }
        Ok(res)
    }

    /// Same network with the other stage's flag.
    pub fn with_bayesian(&self, bayesian: bool) -> Self {
        UNetConfig { bayesian, ..self.clone() }
    }
}

/// Chebyshev convolution, batch norm, ReLU and (Bayesian only) dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: ChebConvLayer,
    pub bn: BatchNormLayer,
    pub dropout: Option<ConcreteDropoutLayer>,
}

impl Block {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        // no conv bias: the following batch norm subtracts it out exactly
        let conv = ChebConvLayer::new(store, &format!("{name}.conv"), cin, cout, cfg.order, false, rng);
        let bn = BatchNormLayer::new(store, &format!("{name}.bn"), cout);
        let dropout = cfg.bayesian.then(|| ConcreteDropoutLayer::new(store, &format!("{name}.drop"), INIT_DROPOUT_P));
        Block { conv, bn, dropout }
    }

    fn forward(&self, ctx: &mut Ctx, lhat: &Arc<LaplacianOperator>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx.tape, ctx.vars, lhat, x)?;
        let (h, stats) = self.bn.forward(ctx.tape, ctx.vars, h, ctx.norm)?;
        ctx.stats.extend(stats);
        let h = ctx.tape.relu(h);
        match &self.dropout {
            Some(d) => d.forward(ctx.tape, ctx.vars, h, ctx.mask),
            None => Ok(h),
        }
    }
}

struct Ctx<'t, 'm, 'r> {
    tape: &'t mut Tape,
    vars: &'t [Var],
    norm: NormMode,
    mask: &'m mut MaskMode<'r>,
    stats: Vec<BatchStats>,
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted map `ŷ`, shape `(B, 1, N)`.
    pub mean: Var,
    /// Predicted `s = log σ̂²`, Bayesian models only.
    pub log_var: Option<Var>,
    /// Batch statistics of every batch norm, in [`UNet::blocks`] order
    /// (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    encoder: Vec<[Block; 2]>,
    bottleneck: [Block; 2],
    decoder: Vec<[Block; 2]>,
    mean_head: ChebConvLayer,
    logvar_head: Option<ChebConvLayer>,
    laplacians: Vec<Arc<LaplacianOperator>>,
    pools: Vec<PoolingMap>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        let base = config.validate()?;
        let mut params = ParamStore::new();
        let mut resolutions = vec![base];
        for _ in 0..config.depth {
            resolutions.push(resolutions.last().and_then(|r| r.coarser()).expect("depth validated"));
        }
        let laplacians =
            resolutions.iter().map(|&r| scaled_laplacian_with(r, config.edge_weighting)).collect::<Result<Vec<_>>>()?;
        let pools = resolutions[..config.depth].iter().map(|&r| PoolingMap::new(r)).collect::<Result<Vec<_>>>()?;

        let w = &config.widths;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for (l, &width) in w.iter().enumerate() {
            let a = Block::new(&mut params, &format!("enc{l}.0"), cin, width, &config, rng);
            let b = Block::new(&mut params, &format!("enc{l}.1"), width, width, &config, rng);
            encoder.push([a, b]);
            cin = width;
        }
        let last = w[config.depth - 1];
        let bottleneck = [
            Block::new(&mut params, "mid.0", last, last, &config, rng),
            Block::new(&mut params, "mid.1", last, last, &config, rng),
        ];
        let mut decoder: Vec<[Block; 2]> = Vec::with_capacity(config.depth);
        let mut below = last;
        for l in (0..config.depth).rev() {
            let a = Block::new(&mut params, &format!("dec{l}.0"), below + w[l], w[l], &config, rng);
            let b = Block::new(&mut params, &format!("dec{l}.1"), w[l], w[l], &config, rng);
            decoder.push([a, b]);
            below = w[l];
        }
        decoder.reverse();
        let mean_head = ChebConvLayer::new(&mut params, "head_mean", w[0], 1, 0, true, rng);
        let logvar_head =
            config.bayesian.then(|| ChebConvLayer::new(&mut params, "head_logvar", w[0], 1, 0, true, rng));
        Ok(UNet { config, params, encoder, bottleneck, decoder, mean_head, logvar_head, laplacians, pools })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn resolution(&self) -> Resolution {
        self.laplacians[0].resolution()
    }

    /// Blocks in forward-pass order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder.iter().flatten().chain(self.bottleneck.iter()).chain(self.decoder.iter().rev().flatten())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        self.encoder
            .iter_mut()
            .flatten()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut().rev().flatten())
    }

    pub fn dropout_layers(&self) -> impl Iterator<Item = &ConcreteDropoutLayer> {
        self.blocks().filter_map(|b| b.dropout.as_ref())
    }

    /// Dropout probabilities in block order.
    pub fn dropout_probabilities(&self) -> Vec<f64> {
        self.dropout_layers().map(|d| d.p(&self.params)).collect()
    }

    /// `(name, running mean, running var)` for every batch norm.
    pub fn bn_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.blocks()
            .map(|b| {
                let name = self.params.name(b.bn.gamma).trim_end_matches(".gamma").to_string();
                (name, b.bn.running_mean.clone(), b.bn.running_var.clone())
            })
            .collect()
    }

    pub fn set_bn_state(&mut self, state: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        let expected: Vec<String> = self.bn_state().into_iter().map(|s| s.0).collect();
        if state.len() != expected.len() || state.iter().zip(&expected).any(|(s, e)| &s.0 != e) {
            return Err(Error::ArchitectureMismatch("batch-norm layers differ".into()));
        }
        for (block, (_, mean, var)) in self.blocks_mut().zip(state) {
            if mean.len() != block.bn.channels || var.len() != block.bn.channels {
                return Err(Error::ArchitectureMismatch("batch-norm channel count differs".into()));
            }
            block.bn.running_mean.clone_from(mean);
            block.bn.running_var.clone_from(var);
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let n = self.blocks().count();
        if stats.len() != n {
            return Err(Error::shape(
                "update_running_stats",
                format!("{} statistics for {n} batch norms", stats.len()),
            ));
        }
        for (block, s) in self.blocks_mut().zip(stats) {
            block.bn.update_running(s);
        }
        Ok(())
    }

    /// Re-imposes the dropout probability bounds after an optimizer step.
    pub fn clamp_dropout(&mut self) {
        let layers: Vec<ConcreteDropoutLayer> = self.dropout_layers().cloned().collect();
        for d in layers {
            d.clamp(&mut self.params);
        }
    }

    /// Runs the network on `x` of shape `(B, in_channels, N)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        norm: NormMode,
        mask: &mut MaskMode,
    ) -> Result<ForwardOutput> {
        let [_, c, n] = tape.shape(x);
        if c != self.config.in_channels {
            return Err(Error::shape(
                "unet forward",
                format!("{c} input channels, model expects {}", self.config.in_channels),
            ));
        }
        if n != self.resolution().n_pixels() {
            return Err(Error::shape(
                "unet forward",
                format!("{n} pixels, model expects {}", self.resolution().n_pixels()),
            ));
        }
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "unet forward",
                format!("{} bound parameters for {}", vars.len(), self.params.len()),
            ));
        }
        let mut ctx = Ctx { tape, vars, norm, mask, stats: Vec::new() };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            h = a.forward(&mut ctx, &self.laplacians[l], h)?;
            h = b.forward(&mut ctx, &self.laplacians[l], h)?;
            skips.push(h);
            h = self.pools[l].max_pool(ctx.tape, h)?;
        }
        let deepest = &self.laplacians[self.config.depth];
        h = self.bottleneck[0].forward(&mut ctx, deepest, h)?;
        h = self.bottleneck[1].forward(&mut ctx, deepest, h)?;
        for l in (0..self.config.depth).rev() {
            let up = self.pools[l].upsample(ctx.tape, h)?;
            let cat = ctx.tape.concat(&[up, skips[l]])?;
            let [a, b] = &self.decoder[l];
            h = a.forward(&mut ctx, &self.laplacians[l], cat)?;
            h = b.forward(&mut ctx, &self.laplacians[l], h)?;
        }
        let mean = self.mean_head.forward(ctx.tape, vars, &self.laplacians[0], h)?;
        let log_var = match &self.logvar_head {
            Some(head) => Some(head.forward(ctx.tape, vars, &self.laplacians[0], h)?),
            None => None,
        };
        Ok(ForwardOutput { mean, log_var, bn_stats: ctx.stats })
    }

    /// Sum of the dropout prior terms over all dropout layers (zero scalar for
    /// deterministic models).
    pub fn kl_term(&self, tape: &mut Tape, vars: &[Var], length_scale: f64, n_data: usize) -> Result<Var> {
        let mut total = tape.constant(Tensor::scalar(0.0));
        for block in self.blocks() {
            if let Some(d) = &block.dropout {
                let r = dropout_regularizer(tape, vars, d, &block.conv, length_scale, n_data)?;
                total = tape.add(total, r)?;
            }
        }
        Ok(total)
    }

    /// Inference without gradients: returns `(ŷ, s)` tensors.
    pub fn predict(&self, x: &Tensor, norm: NormMode, mask: &mut MaskMode) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, norm, mask)?;
        let mean = tape.value(out.mean).clone();
        Ok((mean, out.log_var.map(|s| tape.value(s).clone())))
    }
}

/// `mean((ŷ - y)²)`.
pub fn loss_mse(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    let d = tape.sub(y_hat, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `(1/D) Σ [½ exp(-s)(y - ŷ)² + ½ s] + kl`.
pub fn loss_heteroscedastic(tape: &mut Tape, y_hat: Var, s: Var, y: Var, kl: Var) -> Result<Var> {
    let r = tape.sub(y, y_hat)?;
    let r2 = tape.square(r);
    let neg_s = tape.scale(s, -1.0);
    let prec = tape.exp(neg_s);
    let fit = tape.mul(prec, r2)?;
    let per = tape.add(fit, s)?;
    let per = tape.scale(per, 0.5);
    let data = tape.mean(per);
    if tape.shape(kl) != [1, 1, 1] {
        return Err(Error::shape("loss_heteroscedastic", format!("kl must be scalar, got {:?}", tape.shape(kl))));
    }
    tape.add(data, kl)
}

/// Initializes a Bayesian network from a trained deterministic one.
///
/// Shared parameters and batch-norm statistics are copied. All dropout
/// probabilities are set to [`INIT_DROPOUT_P`], and the retain factor `1-p`
/// is folded into every layer that consumes dropped activations, so the
/// Bayesian network with all masks kept reproduces the deterministic output.
/// The log-variance head is drawn from `N(0, LOGVAR_INIT_STD²)`.
pub fn transfer_weights<R: Rng + ?Sized>(det: &UNet, bayes: &mut UNet, rng: &mut R) -> Result<()> {
    if det.config.bayesian || !bayes.config.bayesian {
        return Err(Error::ArchitectureMismatch("transfer goes from a deterministic to a Bayesian network".into()));
    }
    if det.config.with_bayesian(true) != bayes.config {
        return Err(Error::ArchitectureMismatch(format!(
            "configurations differ: {:?} vs {:?}",
            det.config, bayes.config
        )));
    }
    let mut unmatched = Vec::new();
    for (name, value) in det.params.names().iter().zip(det.params.values()) {
        match bayes.params.find(name) {
            Some(id) if bayes.params.get(id).shape() == value.shape() => *bayes.params.get_mut(id) = value.clone(),
            _ => unmatched.push(name.clone()),
        }
    }
    for name in bayes.params.names() {
        let extra = det.params.find(name).is_none();
        if extra && !(name.ends_with(".p_logit") || name.starts_with("head_logvar.")) {
            unmatched.push(name.clone());
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::ArchitectureMismatch(format!("unmatched parameters: {}", unmatched.join(", "))));
    }
    bayes.set_bn_state(&det.bn_state())?;

    let p_logit = logit(INIT_DROPOUT_P);
    let retain = 1.0 - sigmoid(p_logit);
    let dropouts: Vec<_> = bayes.dropout_layers().map(|d| d.p_logit).collect();
    for id in dropouts {
        bayes.params.get_mut(id).data_mut()[0] = p_logit;
    }
    let first = bayes.encoder[0][0].conv.theta;
    let mut consumers: Vec<usize> = bayes.blocks().map(|b| b.conv.theta).filter(|&t| t != first).collect();
    consumers.push(bayes.mean_head.theta);
    for id in consumers {
        bayes.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= retain);
    }

    let head = bayes.logvar_head.clone().expect("bayesian network has a variance head");
    let dist = Normal::new(0.0, LOGVAR_INIT_STD).expect("finite std");
    for id in std::iter::once(head.theta).chain(head.bias) {
        bayes.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    }
    Ok(())
}
