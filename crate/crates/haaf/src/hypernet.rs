//! The hypernetwork: maps a bag's tabular vector to a token shift `v` and a
//! generated per-bag classifier `(w, b)`. A shared MLP trunk feeds three
//! linear heads; the heads use a variance-scaled init so the generated
//! classifier starts small and the initial bag logit sits near zero.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{join, uniform_tensor, LinearLayer, Mlp, Params, TapeBinding};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Per-bag tabular side information. `normalized` records whether the values
/// have been z-scored with training-fold statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Real>", into = "Vec<Real>")]
pub struct TabularVector {
    pub values: Vec<Real>,
    pub normalized: bool,
}

impl TabularVector {
    pub fn new(values: Vec<Real>) -> Self {
        TabularVector { values, normalized: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<Real>> for TabularVector {
    fn from(values: Vec<Real>) -> Self {
        TabularVector::new(values)
    }
}

impl From<TabularVector> for Vec<Real> {
    fn from(t: TabularVector) -> Self {
        t.values
    }
}

/// Hypernetwork output triple: token shift `v [d]`, generated classifier
/// weights `w [d]` (applied as a d-by-1 column) and bias `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tctp {
    pub v: Vec<Real>,
    pub w: Vec<Real>,
    pub b: Real,
}

impl Tctp {
    pub fn v_norm(&self) -> Real {
        self.v.iter().map(|x| x * x).sum::<Real>().sqrt()
    }

    pub fn w_norm(&self) -> Real {
        self.w.iter().map(|x| x * x).sum::<Real>().sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HyperNetConfig {
    /// Trunk widths after the input layer.
    pub trunk_dims: Vec<usize>,
    /// Variance of the head weight entries. `None` picks 1/(trunk_out * d),
    /// which keeps generated classifiers near zero at init.
    pub head_weight_variance: Option<f64>,
    /// Variance of the token-shift head specifically; defaults to the
    /// resolved head variance. A much smaller value makes the full model
    /// start out indistinguishable from its classifier-only ablation and
    /// grow the shift only where it helps.
    pub head_v_variance: Option<f64>,
    /// Multiplier on the generated token shift. Values below 1 slow the
    /// shift's growth relative to the shared parameters, which keeps the
    /// adaptive path from disturbing early training.
    pub token_shift_scale: f64,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        HyperNetConfig {
            trunk_dims: vec![64, 64, 64],
            head_weight_variance: None,
            head_v_variance: None,
            token_shift_scale: 1.0,
        }
    }
}

impl HyperNetConfig {
    pub fn resolved_head_variance(&self, d: usize) -> f64 {
        let trunk_out = *self.trunk_dims.last().expect("trunk has layers");
        self.head_weight_variance.unwrap_or(1.0 / (trunk_out * d) as f64)
    }

    pub fn resolved_v_variance(&self, d: usize) -> f64 {
        self.head_v_variance.unwrap_or_else(|| self.resolved_head_variance(d))
    }
}

/// Graph-side handles to one hypernetwork evaluation.
pub struct TctpVars {
    /// Token shift `[1, d]`; absent when the network was built without the
    /// shift head (the classifier-only ablation).
    pub v: Option<Var>,
    pub w: Var, // [1, d]
    pub b: Var, // [1, 1]
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    pub trunk: Mlp,
    pub head_v: Option<LinearLayer>,
    pub head_w: LinearLayer,
    pub head_b: LinearLayer,
    pub token_shift_scale: Real,
}

impl HyperNet {
    /// `with_token_shift` controls whether the `v` head exists at all.
    pub fn new(
        rng: &mut ChaCha8Rng,
        k_tabular: usize,
        d: usize,
        cfg: &HyperNetConfig,
        with_token_shift: bool,
    ) -> Self {
        let mut dims = vec![k_tabular];
        dims.extend_from_slice(&cfg.trunk_dims);
        let trunk = Mlp::new(rng, &dims, true);
        let trunk_out = trunk.d_out();
        let a = (3.0 * cfg.resolved_head_variance(d)).sqrt();
        let head = |rng: &mut ChaCha8Rng, out: usize| {
            let mut b = Tensor::zeros(vec![out]);
            b.set_requires_grad(true);
            LinearLayer { w: uniform_tensor(rng, vec![trunk_out, out], a), b }
        };
        let head_w = head(rng, d);
        let head_b = head(rng, 1);
        // The shift head draws last, so with or without it the shared
        // parameters initialize identically for a given seed; the two
        // ablation variants then differ only by the shift itself.
        let head_v = with_token_shift.then(|| {
            let a_v = (3.0 * cfg.resolved_v_variance(d)).sqrt();
            let mut b = Tensor::zeros(vec![d]);
            b.set_requires_grad(true);
            LinearLayer { w: uniform_tensor(rng, vec![trunk_out, d], a_v), b }
        });
        HyperNet { trunk, head_v, head_w, head_b, token_shift_scale: cfg.token_shift_scale as Real }
    }

    pub fn k_tabular(&self) -> usize {
        self.trunk.layers[0].d_in()
    }

    pub fn d(&self) -> usize {
        self.head_w.d_out()
    }

    /// Runs the trunk and heads on a `[1, k]` input var.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        t: Var,
    ) -> Result<TctpVars, TensorError> {
        let trunk = self.trunk.forward(g, bind, t)?;
        let v = match &self.head_v {
            Some(h) => {
                let raw = h.forward(g, bind, trunk)?;
                Some(if self.token_shift_scale == 1.0 {
                    raw
                } else {
                    g.scale(raw, self.token_shift_scale)?
                })
            }
            None => None,
        };
        let w = self.head_w.forward(g, bind, trunk)?;
        let b = self.head_b.forward(g, bind, trunk)?;
        Ok(TctpVars { v, w, b })
    }
}

impl Params for HyperNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        if let Some(h) = &self.head_v {
            h.visit(&join(prefix, "head_v"), f);
        }
        self.head_w.visit(&join(prefix, "head_w"), f);
        self.head_b.visit(&join(prefix, "head_b"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        if let Some(h) = &mut self.head_v {
            h.visit_mut(&join(prefix, "head_v"), f);
        }
        self.head_w.visit_mut(&join(prefix, "head_w"), f);
        self.head_b.visit_mut(&join(prefix, "head_b"), f);
    }
}

/// Standalone evaluation on plain values. A network built without the shift
/// head reports `v = 0`, matching its semantics.
pub fn hypernet_forward(net: &HyperNet, t: &TabularVector) -> Result<Tctp, TensorError> {
    if t.len() != net.k_tabular() {
        return Err(TensorError::ShapeMismatch {
            op: "hypernet_forward",
            expected: format!("[{}]", net.k_tabular()),
            actual: format!("[{}]", t.len()),
        });
    }
    let mut g = Graph::new();
    let mut bind = TapeBinding::new();
    let tv = g.constant(vec![1, t.len()], t.values.clone())?;
    let out = net.forward_vars(&mut g, &mut bind, tv)?;
    let v = match out.v {
        Some(var) => g.value(var).to_vec(),
        None => vec![0.0; net.d()],
    };
    Ok(Tctp { v, w: g.value(out.w).to_vec(), b: g.value(out.b)[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_param_check;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tab(r: &mut ChaCha8Rng, k: usize) -> TabularVector {
        TabularVector::new((0..k).map(|_| (r.random::<f64>() * 2.0 - 1.0) as Real).collect())
    }

    #[test]
    fn zeroed_heads_produce_zero_tctp() {
        let mut net = HyperNet::new(&mut rng(1), 6, 8, &HyperNetConfig::default(), true);
        for head in [net.head_v.as_mut().unwrap(), &mut net.head_w, &mut net.head_b] {
            head.w.values_mut().fill(0.0);
            head.b.values_mut().fill(0.0);
        }
        let tctp = hypernet_forward(&net, &random_tab(&mut rng(2), 6)).unwrap();
        assert!(tctp.v.iter().all(|&x| x == 0.0));
        assert!(tctp.w.iter().all(|&x| x == 0.0));
        assert_eq!(tctp.b, 0.0);
    }

    #[test]
    fn forward_is_a_pure_function() {
        let net = HyperNet::new(&mut rng(3), 6, 8, &HyperNetConfig::default(), true);
        let t = random_tab(&mut rng(4), 6);
        let a = hypernet_forward(&net, &t).unwrap();
        let b = hypernet_forward(&net, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = HyperNet::new(&mut rng(5), 6, 8, &HyperNetConfig::default(), true);
        assert!(hypernet_forward(&net, &random_tab(&mut rng(6), 7)).is_err());
    }

    #[test]
    fn zero_input_with_zero_trunk_biases_yields_head_biases() {
        let mut net = HyperNet::new(&mut rng(7), 6, 8, &HyperNetConfig::default(), true);
        // Trunk biases are zero-initialized already; plant recognizable head biases.
        net.head_v.as_mut().unwrap().b.values_mut().fill(0.25);
        net.head_w.b.values_mut().fill(-0.5);
        net.head_b.b.values_mut().fill(1.5);
        let tctp = hypernet_forward(&net, &TabularVector::new(vec![0.0; 6])).unwrap();
        assert!(tctp.v.iter().all(|&x| x == 0.25));
        assert!(tctp.w.iter().all(|&x| x == -0.5));
        assert_eq!(tctp.b, 1.5);
    }

    #[test]
    fn trunk_gradient_matches_finite_differences() {
        let mut net = HyperNet::new(&mut rng(8), 5, 6, &HyperNetConfig::default(), true);
        let t = random_tab(&mut rng(9), 5);
        // Scalar readout mixing all three heads.
        let forward = |g: &mut Graph, bind: &mut TapeBinding, net: &HyperNet| {
            let tv = g.constant(vec![1, 5], t.values.clone())?;
            let out = net.forward_vars(g, bind, tv)?;
            let cat = g.concat_lastdim(&[out.v.unwrap(), out.w, out.b])?;
            let mix = g.constant(vec![13, 1], (0..13).map(|i| 0.07 * i as Real - 0.4).collect())?;
            let s = g.matmul(cat, mix)?;
            g.reshape(s, vec![1])
        };
        for path in ["trunk.l0.w", "trunk.l1.w", "trunk.l2.b"] {
            let err = finite_diff_param_check(&mut net, path, 1e-6, &forward).unwrap();
            assert!(err < 1e-5, "{path}: err = {err}");
        }
    }

    #[test]
    fn gradient_reaches_every_hypernet_parameter() {
        let mut net = HyperNet::new(&mut rng(10), 5, 6, &HyperNetConfig::default(), true);
        let t = random_tab(&mut rng(11), 5);
        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let tv = g.constant(vec![1, 5], t.values.clone()).unwrap();
        let out = net.forward_vars(&mut g, &mut bind, tv).unwrap();
        let cat = g.concat_lastdim(&[out.v.unwrap(), out.w, out.b]).unwrap();
        let mix = g
            .constant(vec![13, 1], (0..13).map(|i| 0.05 * i as Real + 0.1).collect())
            .unwrap();
        let s = g.matmul(cat, mix).unwrap();
        let loss = g.reshape(s, vec![1]).unwrap();
        g.backward(loss).unwrap();
        bind.accumulate_grads(&g, &mut net);
        net.visit("", &mut |name, tensor| {
            let grad = tensor.grad().unwrap_or_else(|| panic!("no grad on {name}"));
            let norm: Real = grad.iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "zero grad norm on {name}");
        });
    }

    #[test]
    fn initial_generated_bias_is_small() {
        // Monte-Carlo over inits and inputs: |b| < 0.5 on at least 99% of draws.
        let mut r = rng(12);
        let d = 128;
        let mut small = 0usize;
        let n = 1000;
        for i in 0..n {
            let net = HyperNet::new(&mut rng(1000 + i), 20, d, &HyperNetConfig::default(), true);
            let t = random_tab(&mut r, 20);
            let tctp = hypernet_forward(&net, &t).unwrap();
            if tctp.b.abs() < 0.5 {
                small += 1;
            }
        }
        assert!(small >= 990, "only {small}/1000 draws had |b| < 0.5");
    }

    #[test]
    fn generated_w_variance_tracks_configured_target() {
        // With head weights ~ U of variance s2 independent of the trunk
        // activations a, Var(w_j) = s2 * E[sum_k a_k^2]. Estimate both sides
        // by Monte-Carlo and compare.
        let d = 32;
        let cfg = HyperNetConfig::default();
        let s2 = cfg.resolved_head_variance(d) as Real;
        let mut r = rng(13);
        let mut entries = Vec::new();
        let mut trunk_sq = 0.0;
        let n = 1000;
        for i in 0..n {
            let net = HyperNet::new(&mut rng(5000 + i), 20, d, &cfg, true);
            let t = random_tab(&mut r, 20);
            let tctp = hypernet_forward(&net, &t).unwrap();
            entries.extend_from_slice(&tctp.w);

            let mut g = Graph::new();
            let mut bind = TapeBinding::new();
            let tv = g.constant(vec![1, 20], t.values.clone()).unwrap();
            let trunk = net.trunk.forward(&mut g, &mut bind, tv).unwrap();
            trunk_sq += g.value(trunk).iter().map(|a| a * a).sum::<Real>();
        }
        let expected = s2 * trunk_sq / n as Real;
        let mean: Real = entries.iter().sum::<Real>() / entries.len() as Real;
        let var: Real =
            entries.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / entries.len() as Real;
        assert!(
            (var - expected).abs() / expected < 0.2,
            "generated-w variance {var} vs target {expected}"
        );
    }

    #[test]
    fn ablated_net_reports_zero_shift() {
        let net = HyperNet::new(&mut rng(14), 6, 8, &HyperNetConfig::default(), false);
        let tctp = hypernet_forward(&net, &random_tab(&mut rng(15), 6)).unwrap();
        assert_eq!(tctp.v, vec![0.0; 8]);
        assert!(net.head_v.is_none());
    }
}
