use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::graph::LaplacianOperator;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Noise source for a concrete dropout mask, one entry per (sample, channel).
#[derive(Debug, Clone, PartialEq)]
pub enum DropoutNoise {
    /// Uniform draws `u ∈ (0, 1)`, length `batch × channels`.
    Uniform(Vec<f64>),
    /// Soft mask forced to zero: every unit is kept and rescaled by `1/(1-p)`.
    KeepAll,
}

/// Statistics a training-mode batch norm measured on its input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over batch × pixels.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Affine { x: Var, scale: Var, shift: Var },
    Laplacian { x: Var, op: Arc<LaplacianOperator> },
    Gather { x: Var, index: Arc<[usize]> },
    MaxPool4 { x: Var, argmax: Vec<u8> },
    Upsample4(Var),
    ChebConv { x: Var, theta: Var, bias: Option<Var>, lhat: Arc<LaplacianOperator>, basis: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, p_logit: Var, soft: Vec<f64>, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations supporting reverse-mode
/// differentiation.
///
/// Leaf gradients persist across [`Tape::backward`] calls and accumulate
/// until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

/// `c = alpha·A·B + beta·c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 && k > 0 {
        assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
        assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    }
    assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 3]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.same_shape(op_name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| f(*x)).collect()).expect("same length");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let [b, _, n] = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let [pb, pc, pn] = self.shape(p);
            if pb != b || pn != n {
                return Err(shape_err("concat", format!("{:?} vs {:?}", self.shape(first), [pb, pc, pn])));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(b * channels * n);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let block = t.channels() * n;
                data.extend_from_slice(&t.data()[bi * block..(bi + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([b, channels, n], data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [b, c, n] = self.shape(x);
        if start >= end || end > c {
            return Err(shape_err("slice", format!("channels {start}..{end} of {c}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(b * (end - start) * n);
        for bi in 0..b {
            data.extend_from_slice(&t.data()[(bi * c + start) * n..(bi * c + end) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, end - start, n], data)?, Op::Slice { x, start }, rg))
    }

    /// `y[b,c,n] = scale[c]·x[b,c,n] + shift[c]` with `scale`, `shift` shaped `(1, C, 1)`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let [b, c, n] = self.shape(x);
        for v in [scale, shift] {
            if self.shape(v) != [1, c, 1] {
                return Err(shape_err(
                    "affine",
                    format!("per-channel vector {:?} for input {:?}", self.shape(v), [b, c, n]),
                ));
            }
        }
        let (xs, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut data = vec![0.0; b * c * n];
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * n;
                for k in o..o + n {
                    data[k] = sc[ci] * xs[k] + sh[ci];
                }
            }
        }
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(Tensor::new([b, c, n], data)?, Op::Affine { x, scale, shift }, rg))
    }

    /// Applies a (symmetric) Laplacian to every pixel row.
    pub fn laplacian(&mut self, x: Var, op: Arc<LaplacianOperator>) -> Result<Var> {
        let shape = self.shape(x);
        if shape[2] != op.n() {
            return Err(shape_err(
                "sparse_laplacian_apply",
                format!("{} pixels vs operator size {}", shape[2], op.n()),
            ));
        }
        let mut out = Tensor::zeros(shape);
        op.apply_rows(self.value(x).data(), out.data_mut());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Laplacian { x, op }, rg))
    }

    /// `y[b,c,j] = x[b,c,index[j]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let [b, c, n] = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of {n} pixels")));
        }
        let m = index.len();
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * m);
        for row in xs.chunks_exact(n) {
            data.extend(index.iter().map(|&i| row[i]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c, m], data)?, Op::Gather { x, index }, rg))
    }

    /// Max over each block of 4 nested children. Ties go to the lowest index.
    pub fn max_pool4(&mut self, x: Var) -> Result<Var> {
        let [b, c, n] = self.shape(x);
        if n % 4 != 0 {
            return Err(shape_err("max_pool4", format!("pixel count {n} not divisible by 4")));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(xs.len() / 4);
        let mut argmax = Vec::with_capacity(xs.len() / 4);
        for block in xs.chunks_exact(4) {
            let mut best = 0;
            for k in 1..4 {
                if block[k] > block[best] {
                    best = k;
                }
            }
            data.push(block[best]);
            argmax.push(best as u8);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c, n / 4], data)?, Op::MaxPool4 { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling: each parent value fills its 4 children.
    pub fn upsample4(&mut self, x: Var) -> Var {
        let [b, c, n] = self.shape(x);
        let data = self.value(x).data().iter().flat_map(|&v| [v; 4]).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new([b, c, 4 * n], data).expect("4x length"), Op::Upsample4(x), rg)
    }

    /// Chebyshev graph convolution
    /// `y[b,o,:] = Σ_k Σ_i θ[k,i,o]·T_k(L̂) x[b,i,:] + bias[o]`.
    ///
    /// `theta` is `(K+1, Cin, Cout)`, `bias` is `(1, Cout, 1)`.
    pub fn cheb_conv(&mut self, x: Var, theta: Var, bias: Option<Var>, lhat: Arc<LaplacianOperator>) -> Result<Var> {
        let [b, cin, n] = self.shape(x);
        let [kp1, tin, cout] = self.shape(theta);
        if tin != cin {
            return Err(shape_err("cheb_conv", format!("input has {cin} channels, weights expect {tin}")));
        }
        if n != lhat.n() {
            return Err(shape_err("cheb_conv", format!("{n} pixels vs operator size {}", lhat.n())));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [1, cout, 1] {
                return Err(shape_err(
                    "cheb_conv",
                    format!("bias shape {:?}, expected [1, {cout}, 1]", self.shape(bv)),
                ));
            }
        }
        let xs = self.value(x).data();
        let kc = kp1 * cin;
        // basis layout: [b][k][cin][n]
        let mut basis = vec![0.0; b * kc * n];
        for bi in 0..b {
            let zb = &mut basis[bi * kc * n..(bi + 1) * kc * n];
            let block = cin * n;
            zb[..block].copy_from_slice(&xs[bi * block..(bi + 1) * block]);
            if kp1 > 1 {
                let (t0, rest) = zb.split_at_mut(block);
                lhat.apply_rows(t0, &mut rest[..block]);
            }
            for k in 2..kp1 {
                let (done, rest) = zb.split_at_mut(k * block);
                let tk = &mut rest[..block];
                lhat.apply_rows(&done[(k - 1) * block..k * block], tk);
                for (t, p) in tk.iter_mut().zip(&done[(k - 2) * block..(k - 1) * block]) {
                    *t = 2.0 * *t - p;
                }
            }
        }
        let w = self.value(theta).data();
        let mut out = vec![0.0; b * cout * n];
        for bi in 0..b {
            gemm(cout, kc, n, 1.0, w, (1, cout), &basis[bi * kc * n..], (n, 1), 0.0, &mut out[bi * cout * n..], (n, 1));
        }
        if let Some(bv) = bias {
            let bs = self.value(bv).data();
            for (r, row) in out.chunks_exact_mut(n).enumerate() {
                let bo = bs[r % cout];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
        let mut deps = vec![x, theta];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let basis = if rg { basis } else { Vec::new() };
        Ok(self.push(Tensor::new([b, cout, n], out)?, Op::ChebConv { x, theta, bias, lhat, basis }, rg))
    }

    /// Training-mode batch normalization over batch × pixels per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [b, c, n] = self.shape(x);
        for v in [gamma, beta] {
            if self.shape(v) != [1, c, 1] {
                return Err(shape_err("batch_norm", format!("parameter shape {:?} for {c} channels", self.shape(v))));
            }
        }
        let count = b * n;
        let xs = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xs[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += xs[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let o = (bi * c + ci) * n;
                for k in o..o + n {
                    let h = (xs[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    out[k] = g[ci] * h + be[ci];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(Tensor::new([b, c, n], out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Spatial concrete dropout: one relaxed mask value per (sample, channel),
    /// `y = x·(1 - z̃)/(1 - p)` with `z̃ = σ((logit p + log u - log(1-u))/t)`.
    pub fn concrete_dropout(&mut self, x: Var, p_logit: Var, noise: &DropoutNoise, temperature: f64) -> Result<Var> {
        let [b, c, n] = self.shape(x);
        if self.shape(p_logit) != [1, 1, 1] {
            return Err(shape_err(
                "concrete_dropout",
                format!("p_logit must be a scalar, got {:?}", self.shape(p_logit)),
            ));
        }
        let pl = self.value(p_logit).data()[0];
        let p = sigmoid(pl);
        let soft: Vec<f64> = match noise {
            DropoutNoise::KeepAll => vec![0.0; b * c],
            DropoutNoise::Uniform(u) => {
                if u.len() != b * c {
                    return Err(shape_err("concrete_dropout", format!("{} noise draws for {b}×{c} masks", u.len())));
                }
                u.iter().map(|&u| sigmoid((pl + u.ln() - (1.0 - u).ln()) / temperature)).collect()
            }
        };
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        for (r, (orow, xrow)) in out.chunks_exact_mut(n).zip(xs.chunks_exact(n)).enumerate() {
            let keep = (1.0 - soft[r]) / (1.0 - p);
            orow.iter_mut().zip(xrow).for_each(|(o, v)| *o = v * keep);
        }
        let rg = self.rg(&[x, p_logit]);
        Ok(self.push(Tensor::new([b, c, n], out)?, Op::Dropout { x, p_logit, soft, temperature }, rg))
    }

    /// Hash of every piecewise branch taken on this tape (ReLU activity
    /// patterns and max-pool winners). Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool4 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar. Leaf gradients are added to any gradients
    /// left by earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1, 1] {
            return Err(shape_err("backward", format!("loss must be scalar, got {shape:?}")));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let t = Tensor::new(self.nodes[i].value.shape(), g)?;
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(vb).for_each(|((s, g), y)| *s += g * y));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(va).for_each(|((s, g), x)| *s += g * x));
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Exp(a) => acc(*a, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((s, g), y)| *s += g * y)),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(va).for_each(|((s, g), x)| *s += g / x));
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(out).for_each(|((s, g), y)| *s += g * y * (1.0 - y)))
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(va).for_each(|((s, g), x)| {
                        if *x > 0.0 {
                            *s += g
                        }
                    })
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(va).for_each(|((s, g), x)| *s += 2.0 * g * x));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let k = g[0] / nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += k));
            }
            Op::Concat(parts) => {
                let [b, c_total, n] = nodes[i].value.shape();
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.channels();
                    acc(p, &mut |s| {
                        for bi in 0..b {
                            let src = &g[(bi * c_total + offset) * n..(bi * c_total + offset + pc) * n];
                            let dst = &mut s[bi * pc * n..(bi + 1) * pc * n];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                let [b, c_in, n] = nodes[x.0].value.shape();
                let width = nodes[i].value.channels();
                acc(*x, &mut |s| {
                    for bi in 0..b {
                        let dst = &mut s[(bi * c_in + start) * n..(bi * c_in + start + width) * n];
                        let src = &g[bi * width * n..(bi + 1) * width * n];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Affine { x, scale, shift } => {
                let [b, c, n] = nodes[x.0].value.shape();
                let (xs, sc) = (val(*x), val(*scale));
                acc(*x, &mut |s| {
                    for (r, (srow, grow)) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        let k = sc[r % c];
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += k * g);
                    }
                });
                acc(*scale, &mut |s| {
                    for r in 0..b * c {
                        let dot: f64 =
                            g[r * n..(r + 1) * n].iter().zip(&xs[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum();
                        s[r % c] += dot;
                    }
                });
                acc(*shift, &mut |s| {
                    for r in 0..b * c {
                        s[r % c] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::Laplacian { x, op } => {
                // L is symmetric, so the adjoint is L applied to g.
                let mut lg = vec![0.0; g.len()];
                op.apply_rows(g, &mut lg);
                acc(*x, &mut |s| s.iter_mut().zip(&lg).for_each(|(s, v)| *s += v));
            }
            Op::Gather { x, index } => {
                let n = nodes[x.0].value.pixels();
                let m = index.len();
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_exact_mut(n).zip(g.chunks_exact(m)) {
                        for (&j, gv) in index.iter().zip(grow) {
                            srow[j] += gv;
                        }
                    }
                });
            }
            Op::MaxPool4 { x, argmax } => acc(*x, &mut |s| {
                for (p, (&k, gv)) in argmax.iter().zip(g).enumerate() {
                    s[4 * p + k as usize] += gv;
                }
            }),
            Op::Upsample4(x) => acc(*x, &mut |s| {
                for (sv, block) in s.iter_mut().zip(g.chunks_exact(4)) {
                    *sv += block.iter().sum::<f64>();
                }
            }),
            Op::ChebConv { x, theta, bias, lhat, basis } => {
                let [b, cin, n] = nodes[x.0].value.shape();
                let [kp1, _, cout] = nodes[theta.0].value.shape();
                let kc = kp1 * cin;
                if let Some(bv) = bias {
                    acc(*bv, &mut |s| {
                        for (r, grow) in g.chunks_exact(n).enumerate() {
                            s[r % cout] += grow.iter().sum::<f64>();
                        }
                    });
                }
                acc(*theta, &mut |s| {
                    for bi in 0..b {
                        gemm(
                            kc,
                            n,
                            cout,
                            1.0,
                            &basis[bi * kc * n..],
                            (n, 1),
                            &g[bi * cout * n..],
                            (1, n),
                            1.0,
                            s,
                            (cout, 1),
                        );
                    }
                });
                let w = val(*theta);
                acc(*x, &mut |s| {
                    let block = cin * n;
                    let mut dz = vec![0.0; kc * n];
                    let mut b1 = vec![0.0; block];
                    let mut b2 = vec![0.0; block];
                    let mut tmp = vec![0.0; block];
                    for bi in 0..b {
                        gemm(kc, cout, n, 1.0, w, (cout, 1), &g[bi * cout * n..], (n, 1), 0.0, &mut dz, (n, 1));
                        // Clenshaw: Σ_k T_k(L̂) dz_k with b_k = dz_k + 2L̂ b_{k+1} - b_{k+2}
                        b1.iter_mut().for_each(|v| *v = 0.0);
                        b2.iter_mut().for_each(|v| *v = 0.0);
                        for k in (1..kp1).rev() {
                            lhat.apply_rows(&b1, &mut tmp);
                            let dzk = &dz[k * block..(k + 1) * block];
                            for j in 0..block {
                                let v = dzk[j] + 2.0 * tmp[j] - b2[j];
                                b2[j] = b1[j];
                                b1[j] = v;
                            }
                        }
                        let dst = &mut s[bi * block..(bi + 1) * block];
                        if kp1 > 1 {
                            lhat.apply_rows(&b1, &mut tmp);
                            for j in 0..block {
                                dst[j] += dz[j] + tmp[j] - b2[j];
                            }
                        } else {
                            dst.iter_mut().zip(&dz[..block]).for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let [b, c, n] = nodes[x.0].value.shape();
                let m = (b * n) as f64;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..b * c {
                    let ci = r % c;
                    let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                    sum_g[ci] += gr.iter().sum::<f64>();
                    sum_gx[ci] += gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>();
                }
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v));
                acc(*x, &mut |s| {
                    for r in 0..b * c {
                        let ci = r % c;
                        let k = gam[ci] * inv_std[ci] / m;
                        for j in r * n..(r + 1) * n {
                            s[j] += k * (m * g[j] - sum_g[ci] - xhat[j] * sum_gx[ci]);
                        }
                    }
                });
            }
            Op::Dropout { x, p_logit, soft, temperature } => {
                let n = nodes[x.0].value.pixels();
                let p = sigmoid(val(*p_logit)[0]);
                let xs = val(*x);
                acc(*x, &mut |s| {
                    for (r, (srow, grow)) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        let keep = (1.0 - soft[r]) / (1.0 - p);
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += keep * g);
                    }
                });
                acc(*p_logit, &mut |s| {
                    let mut total = 0.0;
                    for (r, &z) in soft.iter().enumerate() {
                        // d/dlogit of (1-z)/(1-p); z depends on the logit through the relaxation
                        // (frozen at 0 for KeepAll, where the first term vanishes)
                        let dkeep = -z * (1.0 - z) / (temperature * (1.0 - p)) + (1.0 - z) * p / (1.0 - p);
                        let dot: f64 =
                            g[r * n..(r + 1) * n].iter().zip(&xs[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum();
                        total += dkeep * dot;
                    }
                    s[0] += total;
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([1, 1, 2], vec![-2.0, 3.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros([1, 2, 3]));
        let s = t.sigmoid(x);
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn concat_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([1, 2, 5]));
        let b = t.leaf(Tensor::zeros([1, 3, 5]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(c), [1, 5, 5]);
        let d = t.leaf(Tensor::zeros([1, 3, 4]));
        assert!(t.concat(&[a, d]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros([1, 2, 5]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new([1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let e = t.exp(x);
        let l = t.sum(e);
        t.backward(l).unwrap();
        let once = t.grad(x).unwrap().clone();
        t.backward(l).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[5.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn pool_and_upsample() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([1, 1, 16], |i| i as f64));
        let p = t.max_pool4(x).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 7.0, 11.0, 15.0]);
        let u = t.upsample4(p);
        let back = t.max_pool4(u).unwrap();
        assert_eq!(t.value(back).data(), t.value(p).data());
        let ties = t.leaf(Tensor::full([1, 1, 4], 1.0));
        let tp = t.max_pool4(ties).unwrap();
        let l = t.sum(tp);
        t.backward(l).unwrap();
        assert_eq!(t.grad(ties).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_and_affine() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let s = t.slice(x, 1, 3).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let sc = t.constant(Tensor::new([1, 2, 1], vec![2.0, -1.0]).unwrap());
        let sh = t.constant(Tensor::new([1, 2, 1], vec![1.0, 0.5]).unwrap());
        let a = t.affine(s, sc, sh).unwrap();
        assert_eq!(t.value(a).data(), &[5.0, 7.0, -3.5, -4.5, 17.0, 19.0, -9.5, -10.5]);
        assert!(t.slice(x, 2, 4).is_err());
    }
}
