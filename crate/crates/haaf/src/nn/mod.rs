//! Parameterized layers on top of the tape: linear, layer norm, MLP,
//! multi-head self-attention blocks, and the named-parameter machinery that
//! binds them to graphs, optimizers and checkpoints.

mod checkpoint;

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("model dim {d} is not divisible by head count {heads}")]
    HeadSplit { d: usize, heads: usize },
    #[error("parameter {0} is missing")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Anything that exposes named trainable tensors. Paths are dot-joined and
/// must be unique within a model.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named snapshot of a model's parameters. Iteration is sorted by name.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collects a deep copy of every parameter of `model`.
    pub fn from_model(model: &dyn Params) -> Self {
        let mut map = BTreeMap::new();
        model.visit("", &mut |name, t| {
            let prev = map.insert(name.to_string(), t.clone());
            assert!(prev.is_none(), "duplicate parameter path {name}");
        });
        ModelParams { map }
    }

    /// Writes this snapshot back into `model`. The parameter name sets and
    /// shapes must match exactly.
    pub fn apply_to(&self, model: &mut dyn Params) -> Result<(), NnError> {
        let mut result = Ok(());
        let mut seen = 0usize;
        model.visit_mut("", &mut |name, t| {
            if result.is_err() {
                return;
            }
            seen += 1;
            match self.map.get(name) {
                None => result = Err(NnError::MissingParam(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    result = Err(NnError::ParamShape {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        actual: src.shape().to_vec(),
                    })
                }
                Some(src) => t.values_mut().copy_from_slice(src.values()),
            }
        });
        result?;
        if seen != self.map.len() {
            let mut model_names = Vec::new();
            model.visit("", &mut |name, _| model_names.push(name.to_string()));
            for name in self.map.keys() {
                if !model_names.iter().any(|n| n == name) {
                    return Err(NnError::UnknownParam(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Per-pass association between model tensors and graph leaves. Registering
/// the same tensor twice returns the existing leaf.
#[derive(Debug, Default)]
pub struct TapeBinding {
    vars: Vec<(u64, Var)>,
    index: HashMap<u64, usize>,
}

impl TapeBinding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, g: &mut Graph, t: &Tensor) -> Result<Var, TensorError> {
        if let Some(&i) = self.index.get(&t.id()) {
            return Ok(self.vars[i].1);
        }
        let v = g.leaf(t)?;
        self.index.insert(t.id(), self.vars.len());
        self.vars.push((t.id(), v));
        Ok(v)
    }

    /// After `g.backward(..)`, adds each bound leaf's gradient into the
    /// owning tensor's grad buffer (accumulating across calls, which is what
    /// batched training wants).
    pub fn accumulate_grads(&self, g: &Graph, model: &mut dyn Params) {
        let mut grads: HashMap<u64, &[Real]> = HashMap::new();
        for &(id, var) in &self.vars {
            if let Some(gr) = g.grad(var) {
                grads.insert(id, gr);
            }
        }
        model.visit_mut("", &mut |_, t| {
            if let Some(gr) = grads.get(&t.id()) {
                t.accumulate_grad(gr);
            }
        });
    }
}

/// Clears the grad buffer on every parameter.
pub fn zero_grads(model: &mut dyn Params) {
    model.visit_mut("", &mut |_, t| t.zero_grad());
}

/// Central-finite-difference oracle for the gradient of `forward` (a scalar-
/// valued graph builder over `model`) with respect to one named parameter.
/// Returns the max over that parameter's coordinates of
/// `|analytic - fd| / max(1, |fd|)`. Test oracle; not used by training.
pub fn finite_diff_param_check<M: Params>(
    model: &mut M,
    param_path: &str,
    eps: Real,
    forward: &dyn Fn(&mut Graph, &mut TapeBinding, &M) -> Result<Var, TensorError>,
) -> Result<Real, NnError> {
    let eval = |model: &M| -> Result<Real, NnError> {
        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let out = forward(&mut g, &mut bind, model)?;
        if g.value(out).len() != 1 {
            return Err(NnError::Tensor(TensorError::NonScalarLoss(g.shape(out).to_vec())));
        }
        Ok(g.value(out)[0])
    };

    let base = eval(model)?;
    if eval(model)? != base {
        return Err(NnError::Tensor(TensorError::NonDeterministic));
    }

    // Analytic gradient through the tape.
    let analytic = {
        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let out = forward(&mut g, &mut bind, model)?;
        g.backward(out)?;
        bind.accumulate_grads(&g, model);
        let mut grad: Option<Vec<Real>> = None;
        model.visit("", &mut |name, t| {
            if name == param_path {
                grad = Some(t.grad().map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]));
            }
        });
        zero_grads(model);
        grad.ok_or_else(|| NnError::MissingParam(param_path.to_string()))?
    };

    let mut max_err: Real = 0.0;
    for i in 0..analytic.len() {
        let nudge = |model: &mut M, delta: Real| {
            model.visit_mut("", &mut |name, t| {
                if name == param_path {
                    t.values_mut()[i] += delta;
                }
            });
        };
        nudge(model, eps);
        let fp = eval(model)?;
        nudge(model, -2.0 * eps);
        let fm = eval(model)?;
        nudge(model, eps);
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

// ----- initialization -----

/// Uniform(-a, a) with a = sqrt(6 / (d_in + d_out)), the usual fan-balanced
/// scheme for linear weights.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Tensor {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    uniform_tensor(rng, vec![d_in, d_out], a)
}

/// Uniform(-a, a) over an arbitrary shape.
pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, a: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<Real> = (0..n).map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * a) as Real).collect();
    Tensor::param(shape, values).expect("uniform_tensor: shape consistent")
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0f64, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    let values: Vec<Real> = (0..n).map(|_| normal.sample(rng) as Real).collect();
    Tensor::param(shape, values).expect("normal_tensor: shape consistent")
}

// ----- layers -----

/// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let mut b = Tensor::zeros(vec![d_out]);
        b.set_requires_grad(true);
        LinearLayer { w: xavier_uniform(rng, d_in, d_out), b }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = bind.leaf(g, &self.w)?;
        let b = bind.leaf(g, &self.b)?;
        let xw = g.matmul(x, w)?;
        g.broadcast_add_row(xw, b)
    }
}

impl Params for LinearLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Row-wise standardization followed by a learned affine (gamma, beta).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor, // [1, d]
    pub beta: Tensor,  // [1, d]
    pub eps: Real,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        let mut gamma = Tensor::full(vec![1, d], 1.0);
        gamma.set_requires_grad(true);
        let mut beta = Tensor::zeros(vec![1, d]);
        beta.set_requires_grad(true);
        LayerNorm { gamma, beta, eps: 1e-8 }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        x: Var,
    ) -> Result<Var, TensorError> {
        let m = g.shape(x)[0];
        let normed = g.layernorm_lastdim(x, self.eps)?;
        let gamma = bind.leaf(g, &self.gamma)?;
        let beta = bind.leaf(g, &self.beta)?;
        // Expand gamma to [m, d] through a ones-column outer product so the
        // scaling stays inside the supported op set.
        let ones = g.constant_full(vec![m, 1], 1.0)?;
        let gamma_rows = g.matmul(ones, gamma)?;
        let scaled = g.mul(normed, gamma_rows)?;
        g.broadcast_add_row(scaled, beta)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Stack of linear layers with gelu between them (and optionally after the
/// last one).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize], activate_last: bool) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims.windows(2).map(|w| LinearLayer::new(rng, w[0], w[1])).collect();
        Mlp { layers, activate_last }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        mut x: Var,
    ) -> Result<Var, TensorError> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, bind, x)?;
            if i < last || self.activate_last {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("nonempty").d_out()
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

/// One attention head's projections, each `d -> d/H`.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
}

impl Params for AttentionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
    }
}

/// Pre-norm transformer encoder block:
/// `x + MHSA(LN1(x))`, then `x + FF(LN2(x))`. No positional encodings, so
/// the block is equivariant under row permutations.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub heads: Vec<AttentionHead>,
    pub out_proj: LinearLayer,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: LinearLayer,
    pub ff2: LinearLayer,
    pub head_dim: usize,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, d_ff: usize) -> Result<Self, NnError> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(NnError::HeadSplit { d, heads: n_heads });
        }
        let head_dim = d / n_heads;
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                q: LinearLayer::new(rng, d, head_dim),
                k: LinearLayer::new(rng, d, head_dim),
                v: LinearLayer::new(rng, d, head_dim),
            })
            .collect();
        Ok(TransformerBlock {
            heads,
            out_proj: LinearLayer::new(rng, d, d),
            ln1: LayerNorm::new(d),
            ln2: LayerNorm::new(d),
            ff1: LinearLayer::new(rng, d, d_ff),
            ff2: LinearLayer::new(rng, d_ff, d),
            head_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.out_proj.d_out()
    }

    /// `tokens: [m, d] -> ([m, d], per-head attention [m, m])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let normed = self.ln1.forward(g, bind, tokens)?;
        let scale = 1.0 / (self.head_dim as Real).sqrt();
        let mut attns = Vec::with_capacity(self.heads.len());
        let mut head_outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.q.forward(g, bind, normed)?;
            let k = head.k.forward(g, bind, normed)?;
            let v = head.v.forward(g, bind, normed)?;
            let q = g.scale(q, scale)?;
            let kt = g.transpose_last2(k)?;
            let scores = g.matmul(q, kt)?;
            let attn = g.softmax_lastdim(scores)?;
            head_outs.push(g.matmul(attn, v)?);
            attns.push(attn);
        }
        let cat = g.concat_lastdim(&head_outs)?;
        let mixed = self.out_proj.forward(g, bind, cat)?;
        let x = g.add(tokens, mixed)?;

        let normed2 = self.ln2.forward(g, bind, x)?;
        let h = self.ff1.forward(g, bind, normed2)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, bind, h)?;
        let out = g.add(x, h)?;
        Ok((out, attns))
    }
}

impl Params for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("h{i}")), f);
        }
        self.out_proj.visit(&join(prefix, "out"), f);
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("h{i}")), f);
        }
        self.out_proj.visit_mut(&join(prefix, "out"), f);
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
    }
}

/// Standalone block application on plain tensors. Returns the transformed
/// tokens and the stacked per-head attention `[H, m, m]`.
pub fn mhsa_forward(
    block: &TransformerBlock,
    tokens: &Tensor,
) -> Result<(Tensor, Tensor), NnError> {
    let mut g = Graph::new();
    let mut bind = TapeBinding::new();
    let x = g.constant(tokens.shape().to_vec(), tokens.values().to_vec())?;
    let (out, attns) = block.forward(&mut g, &mut bind, x)?;
    let m = tokens.shape()[0];
    let mut stacked = Vec::with_capacity(attns.len() * m * m);
    for a in &attns {
        stacked.extend_from_slice(g.value(*a));
    }
    let attn = Tensor::new(vec![attns.len(), m, m], stacked)?;
    Ok((g.to_tensor(out), attn))
}
