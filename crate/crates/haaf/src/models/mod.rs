//! Bag-level predictors: unimodal MIL baselines, concat fusion, and the
//! hypernetwork-adaptive aggregation transformer. Every variant is a set
//! function over the bag's instances.

mod encoder;

pub use encoder::{ConvStem, InstanceEncoder};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypernet::{HyperNet, HyperNetConfig, TabularVector, TctpVars};
use crate::nn::{
    join, normal_tensor, xavier_uniform, LinearLayer, ModelParams, Mlp, NnError, Params,
    TapeBinding, TransformerBlock,
};
use crate::tensor::{sigmoid, Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bag {bag_id}: instance {index} has {actual} values, expected {expected}")]
    InstanceLength {
        bag_id: String,
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("bag {0}: instance list is empty")]
    EmptyBag(String),
    #[error("bag {bag_id}: label {label} is not 0 or 1")]
    BadLabel { bag_id: String, label: u8 },
    #[error("bag {bag_id}: instance {index} has {actual} values but instance 0 has {first}")]
    RaggedInstances {
        bag_id: String,
        index: usize,
        first: usize,
        actual: usize,
    },
    #[error("bag {bag_id}: tabular vector has {actual} values, model expects {expected}")]
    TabularDim {
        bag_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown model variant {got:?}; expected one of: {}", ModelVariant::NAMES.join(", "))]
    UnknownVariant { got: String },
    #[error("variant {variant} has no {what}")]
    Unsupported {
        variant: ModelVariant,
        what: &'static str,
    },
    #[error("patch size {patch} is too small for the conv encoder (needs >= 7)")]
    PatchTooSmall { patch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One labeled bag: a variable-length set of flattened instance patches plus
/// the bag-level tabular vector. `meta` carries generator-side ground truth
/// for auditing; models never read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bag {
    pub bag_id: String,
    pub label: u8,
    pub tabular: TabularVector,
    pub instances: Vec<Vec<Real>>,
    #[serde(default)]
    pub meta: BagMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub severities: Vec<Real>,
}

impl Bag {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.instances.is_empty() {
            return Err(ModelError::EmptyBag(self.bag_id.clone()));
        }
        if self.label > 1 {
            return Err(ModelError::BadLabel { bag_id: self.bag_id.clone(), label: self.label });
        }
        let first = self.instances[0].len();
        for (index, inst) in self.instances.iter().enumerate() {
            if inst.len() != first {
                return Err(ModelError::RaggedInstances {
                    bag_id: self.bag_id.clone(),
                    index,
                    first,
                    actual: inst.len(),
                });
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.instances.len()
    }
}

/// Prediction for one bag. `attention` is present for variants that produce
/// per-instance weights; it is a probability vector over instances.
#[derive(Debug, Clone, Serialize)]
pub struct BagPrediction {
    pub logit: Real,
    pub probability: Real,
    pub attention: Option<Vec<Real>>,
    pub tctp_norms: Option<TctpNorms>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TctpNorms {
    pub v_norm: Real,
    pub w_norm: Real,
    pub b: Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    TableMlp,
    OutputMax,
    FeatureMean,
    FeatureMax,
    FeatureAttention,
    FeatureTransformer,
    ConcatFusion,
    HyperAdagNoTctp,
    HyperAdag,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 9] = [
        ModelVariant::TableMlp,
        ModelVariant::OutputMax,
        ModelVariant::FeatureMean,
        ModelVariant::FeatureMax,
        ModelVariant::FeatureAttention,
        ModelVariant::FeatureTransformer,
        ModelVariant::ConcatFusion,
        ModelVariant::HyperAdagNoTctp,
        ModelVariant::HyperAdag,
    ];

    pub const NAMES: [&'static str; 9] = [
        "table_mlp",
        "output_max",
        "feature_mean",
        "feature_max",
        "feature_attention",
        "feature_transformer",
        "concat_fusion",
        "hyper_adag_no_tctp",
        "hyper_adag",
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|&v| v == self).expect("listed")]
    }

    /// Whether the bag logit may depend on the tabular vector.
    pub fn uses_tabular(self) -> bool {
        matches!(
            self,
            ModelVariant::TableMlp
                | ModelVariant::ConcatFusion
                | ModelVariant::HyperAdagNoTctp
                | ModelVariant::HyperAdag
        )
    }

    pub fn uses_instances(self) -> bool {
        self != ModelVariant::TableMlp
    }

    fn uses_transformer(self) -> bool {
        matches!(
            self,
            ModelVariant::FeatureTransformer
                | ModelVariant::ConcatFusion
                | ModelVariant::HyperAdagNoTctp
                | ModelVariant::HyperAdag
        )
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant { got: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Mlp,
    Conv2,
}

/// Architecture hyperparameters shared by all variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Instances are `patch * patch` flattened pixels.
    pub patch: usize,
    pub k_tabular: usize,
    /// Token / feature dimension.
    pub d: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub encoder: EncoderKind,
    pub encoder_hidden: usize,
    pub conv_channels: usize,
    /// Hidden width of the gated-free attention pool.
    pub attn_pool_hidden: usize,
    /// Table-branch widths (table_mlp hidden, concat fusion output).
    pub tab_hidden: usize,
    pub tab_out: usize,
    pub hypernet: HyperNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 16,
            k_tabular: 20,
            d: 128,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 256,
            encoder: EncoderKind::Mlp,
            encoder_hidden: 256,
            conv_channels: 8,
            attn_pool_hidden: 64,
            tab_hidden: 64,
            tab_out: 32,
            hypernet: HyperNetConfig::default(),
        }
    }
}

/// Plain (ungated) attention pool: `score_j = w^T tanh(V e_j)`.
#[derive(Debug, Clone)]
struct AttnPool {
    proj: Tensor,  // [d, hidden]
    score: Tensor, // [hidden, 1]
}

impl Params for AttnPool {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "proj"), &self.proj);
        f(&join(prefix, "score"), &self.score);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "proj"), &mut self.proj);
        f(&join(prefix, "score"), &mut self.score);
    }
}

/// A bag-level predictor of some [`ModelVariant`]. Only the components the
/// variant needs are constructed.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub variant: ModelVariant,
    pub cfg: ModelConfig,
    encoder: Option<InstanceEncoder>,
    agg_token: Option<Tensor>, // [1, d]
    blocks: Vec<TransformerBlock>,
    attn_pool: Option<AttnPool>,
    inst_classifier: Option<LinearLayer>,
    classifier: Option<LinearLayer>,
    tab_mlp: Option<Mlp>,
    hypernet: Option<HyperNet>,
}

impl MilModel {
    pub fn new(cfg: &ModelConfig, variant: ModelVariant, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let d = cfg.d;

        let encoder = if variant.uses_instances() {
            Some(match cfg.encoder {
                EncoderKind::Mlp => InstanceEncoder::new_mlp(r, cfg.patch, cfg.encoder_hidden, d),
                EncoderKind::Conv2 => {
                    InstanceEncoder::new_conv2(r, cfg.patch, cfg.conv_channels, d)?
                }
            })
        } else {
            None
        };

        let (agg_token, blocks) = if variant.uses_transformer() {
            let token = normal_tensor(r, vec![1, d], 0.02);
            let blocks = (0..cfg.n_blocks)
                .map(|_| TransformerBlock::new(r, d, cfg.n_heads, cfg.d_ff))
                .collect::<Result<Vec<_>, _>>()?;
            (Some(token), blocks)
        } else {
            (None, Vec::new())
        };

        let attn_pool = (variant == ModelVariant::FeatureAttention).then(|| AttnPool {
            proj: xavier_uniform(r, d, cfg.attn_pool_hidden),
            score: xavier_uniform(r, cfg.attn_pool_hidden, 1),
        });

        let inst_classifier =
            (variant == ModelVariant::OutputMax).then(|| LinearLayer::new(r, d, 1));

        let tab_mlp = match variant {
            ModelVariant::TableMlp => {
                Some(Mlp::new(r, &[cfg.k_tabular, cfg.tab_hidden, cfg.tab_hidden], true))
            }
            ModelVariant::ConcatFusion => {
                Some(Mlp::new(r, &[cfg.k_tabular, cfg.tab_hidden, cfg.tab_out], true))
            }
            _ => None,
        };

        let classifier = match variant {
            ModelVariant::TableMlp => Some(LinearLayer::new(r, cfg.tab_hidden, 1)),
            ModelVariant::FeatureMean
            | ModelVariant::FeatureMax
            | ModelVariant::FeatureAttention
            | ModelVariant::FeatureTransformer => Some(LinearLayer::new(r, d, 1)),
            ModelVariant::ConcatFusion => Some(LinearLayer::new(r, d + cfg.tab_out, 1)),
            _ => None,
        };

        let hypernet = match variant {
            ModelVariant::HyperAdag => {
                Some(HyperNet::new(r, cfg.k_tabular, d, &cfg.hypernet, true))
            }
            ModelVariant::HyperAdagNoTctp => {
                Some(HyperNet::new(r, cfg.k_tabular, d, &cfg.hypernet, false))
            }
            _ => None,
        };

        Ok(MilModel {
            variant,
            cfg: cfg.clone(),
            encoder,
            agg_token,
            blocks,
            attn_pool,
            inst_classifier,
            classifier,
            tab_mlp,
            hypernet,
        })
    }

    pub fn state(&self) -> ModelParams {
        ModelParams::from_model(self)
    }

    pub fn load_state(&mut self, params: &ModelParams) -> Result<(), NnError> {
        params.apply_to(self)
    }

    pub fn hypernet(&self) -> Option<&HyperNet> {
        self.hypernet.as_ref()
    }

    pub fn hypernet_mut(&mut self) -> Option<&mut HyperNet> {
        self.hypernet.as_mut()
    }

    pub fn classifier(&self) -> Option<&LinearLayer> {
        self.classifier.as_ref()
    }

    /// Builds the forward graph for one bag.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        bag: &Bag,
    ) -> Result<GraphPrediction, ModelError> {
        bag.validate()?;
        if self.variant.uses_tabular() && bag.tabular.len() != self.cfg.k_tabular {
            return Err(ModelError::TabularDim {
                bag_id: bag.bag_id.clone(),
                expected: self.cfg.k_tabular,
                actual: bag.tabular.len(),
            });
        }
        let m = bag.size();

        let features = if self.variant.uses_instances() {
            let x = self.instance_matrix(g, bag)?;
            Some(self.encoder.as_ref().expect("encoder").forward(g, bind, x)?)
        } else {
            None
        };

        let (logit, attn, tctp) = match self.variant {
            ModelVariant::TableMlp => {
                let t = self.tabular_const(g, bag)?;
                let h = self.tab_mlp.as_ref().expect("tab_mlp").forward(g, bind, t)?;
                let logit = self.classify(g, bind, h)?;
                (logit, AttnSource::None, None)
            }
            ModelVariant::OutputMax => {
                let per_inst =
                    self.inst_classifier.as_ref().expect("inst_classifier").forward(
                        g,
                        bind,
                        features.expect("features"),
                    )?; // [m, 1]
                let row = g.transpose_last2(per_inst)?; // [1, m]
                let mx = g.max_lastdim(row)?; // [1]
                let logit = g.reshape(mx, vec![1, 1])?;
                (logit, AttnSource::None, None)
            }
            ModelVariant::FeatureMean | ModelVariant::FeatureMax => {
                let max = self.variant == ModelVariant::FeatureMax;
                let q = pool_rows(g, features.expect("features"), max)?;
                let logit = self.classify(g, bind, q)?;
                (logit, AttnSource::None, None)
            }
            ModelVariant::FeatureAttention => {
                let feats = features.expect("features");
                let pool = self.attn_pool.as_ref().expect("attn_pool");
                let proj = bind.leaf(g, &pool.proj)?;
                let score = bind.leaf(g, &pool.score)?;
                let h = g.matmul(feats, proj)?;
                let h = g.tanh(h)?;
                let s = g.matmul(h, score)?; // [m, 1]
                let srow = g.transpose_last2(s)?; // [1, m]
                let alpha = g.softmax_lastdim(srow)?;
                let q = g.matmul(alpha, feats)?; // [1, d]
                let logit = self.classify(g, bind, q)?;
                (logit, AttnSource::Direct(alpha), None)
            }
            ModelVariant::FeatureTransformer => {
                let token = bind.leaf(g, self.agg_token.as_ref().expect("token"))?;
                let (q, attns) = self.aggregate(g, bind, token, features.expect("features"))?;
                let logit = self.classify(g, bind, q)?;
                (logit, AttnSource::TokenRow(attns), None)
            }
            ModelVariant::ConcatFusion => {
                let token = bind.leaf(g, self.agg_token.as_ref().expect("token"))?;
                let (q, attns) = self.aggregate(g, bind, token, features.expect("features"))?;
                let t = self.tabular_const(g, bag)?;
                let tb = self.tab_mlp.as_ref().expect("tab_mlp").forward(g, bind, t)?;
                let cat = g.concat_lastdim(&[q, tb])?;
                let logit = self.classify(g, bind, cat)?;
                (logit, AttnSource::TokenRow(attns), None)
            }
            ModelVariant::HyperAdagNoTctp | ModelVariant::HyperAdag => {
                let t = self.tabular_const(g, bag)?;
                let net = self.hypernet.as_ref().expect("hypernet");
                let tctp = net.forward_vars(g, bind, t)?;
                let mut token = bind.leaf(g, self.agg_token.as_ref().expect("token"))?;
                if let Some(v) = tctp.v {
                    token = g.add(token, v)?;
                }
                let (q, attns) = self.aggregate(g, bind, token, features.expect("features"))?;
                let w_col = g.transpose_last2(tctp.w)?; // [d, 1]
                let qw = g.matmul(q, w_col)?; // [1, 1]
                let logit = g.add(qw, tctp.b)?;
                (logit, AttnSource::TokenRow(attns), Some(tctp))
            }
        };

        Ok(GraphPrediction { logit, attn, tctp, m })
    }

    /// Forward plus scaled BCE loss for training. Returns the prediction,
    /// the raw loss var, and the loss scaled by `scale` (for batch
    /// averaging) — backward through the scaled one.
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        bag: &Bag,
        scale: Real,
    ) -> Result<(GraphPrediction, Var, Var), ModelError> {
        let pred = self.forward_graph(g, bind, bag)?;
        let label = g.constant(vec![1, 1], vec![bag.label as Real])?;
        let loss = g.bce_with_logits(pred.logit, label)?;
        let scaled = g.scale(loss, scale)?;
        Ok((pred, loss, scaled))
    }

    /// Standalone prediction on plain values.
    pub fn predict(&self, bag: &Bag) -> Result<BagPrediction, ModelError> {
        let mut g = Graph::new();
        let mut bind = TapeBinding::new();
        let pred = self.forward_graph(&mut g, &mut bind, bag)?;
        Ok(pred.prediction(&g))
    }

    fn instance_matrix(&self, g: &mut Graph, bag: &Bag) -> Result<Var, ModelError> {
        let expected = self.cfg.patch * self.cfg.patch;
        let m = bag.size();
        let mut values = Vec::with_capacity(m * expected);
        for (index, inst) in bag.instances.iter().enumerate() {
            if inst.len() != expected {
                return Err(ModelError::InstanceLength {
                    bag_id: bag.bag_id.clone(),
                    index,
                    expected,
                    actual: inst.len(),
                });
            }
            values.extend_from_slice(inst);
        }
        Ok(g.constant(vec![m, expected], values)?)
    }

    fn tabular_const(&self, g: &mut Graph, bag: &Bag) -> Result<Var, ModelError> {
        Ok(g.constant(vec![1, bag.tabular.len()], bag.tabular.values.clone())?)
    }

    fn classify(&self, g: &mut Graph, bind: &mut TapeBinding, x: Var) -> Result<Var, ModelError> {
        Ok(self.classifier.as_ref().expect("classifier").forward(g, bind, x)?)
    }

    /// Prepends the aggregation token to the instance features and runs the
    /// transformer stack. Returns the token-position output `[1, d]` and the
    /// last block's per-head attention maps.
    fn aggregate(
        &self,
        g: &mut Graph,
        bind: &mut TapeBinding,
        token: Var,
        features: Var,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let tt = g.transpose_last2(token)?; // [d, 1]
        let ft = g.transpose_last2(features)?; // [d, m]
        let cat = g.concat_lastdim(&[tt, ft])?; // [d, m+1]
        let mut x = g.transpose_last2(cat)?; // [m+1, d]
        let mut last_attns = Vec::new();
        for block in &self.blocks {
            let (out, attns) = block.forward(g, bind, x)?;
            x = out;
            last_attns = attns;
        }
        let q = g.slice(x, 0, 1)?; // [1, d]
        Ok((q, last_attns))
    }
}

/// Column-wise mean or max over the rows of `features [m, d]`, as a `[1, d]`
/// bag feature.
fn pool_rows(g: &mut Graph, features: Var, max: bool) -> Result<Var, TensorError> {
    let ft = g.transpose_last2(features)?; // [d, m]
    let d = g.shape(ft)[0];
    let pooled = if max { g.max_lastdim(ft)? } else { g.mean_lastdim(ft)? };
    g.reshape(pooled, vec![1, d])
}

/// Head-averaged token-row weights over the `m` instance positions of
/// `[m+1, m+1]` attention maps, renormalized to a distribution.
fn token_row_attention(g: &Graph, heads: &[Var], m: usize) -> Vec<Real> {
    let mut avg = vec![0.0 as Real; m];
    for &h in heads {
        let row = &g.value(h)[..m + 1]; // token row
        for j in 0..m {
            avg[j] += row[j + 1];
        }
    }
    let sum: Real = avg.iter().sum();
    for v in avg.iter_mut() {
        *v /= sum;
    }
    avg
}

enum AttnSource {
    None,
    /// Last-block per-head maps `[m+1, m+1]`; export is the head-averaged
    /// token row over instance positions, renormalized.
    TokenRow(Vec<Var>),
    /// Softmax weights `[1, m]` straight from the attention pool.
    Direct(Var),
}

/// Graph-side handles for one bag forward; values are read back through the
/// graph that produced it.
pub struct GraphPrediction {
    pub logit: Var,
    attn: AttnSource,
    tctp: Option<TctpVars>,
    m: usize,
}

impl GraphPrediction {
    pub fn logit_value(&self, g: &Graph) -> Real {
        g.value(self.logit)[0]
    }

    pub fn attention(&self, g: &Graph) -> Option<Vec<Real>> {
        match &self.attn {
            AttnSource::None => None,
            AttnSource::Direct(alpha) => Some(g.value(*alpha).to_vec()),
            AttnSource::TokenRow(heads) => Some(token_row_attention(g, heads, self.m)),
        }
    }

    pub fn tctp_norms(&self, g: &Graph) -> Option<TctpNorms> {
        self.tctp.as_ref().map(|t| {
            let v_norm = t
                .v
                .map(|v| g.value(v).iter().map(|x| x * x).sum::<Real>().sqrt())
                .unwrap_or(0.0);
            let w_norm = g.value(t.w).iter().map(|x| x * x).sum::<Real>().sqrt();
            TctpNorms { v_norm, w_norm, b: g.value(t.b)[0] }
        })
    }

    pub fn prediction(&self, g: &Graph) -> BagPrediction {
        let logit = self.logit_value(g);
        BagPrediction {
            logit,
            probability: sigmoid(logit),
            attention: self.attention(g),
            tctp_norms: self.tctp_norms(g),
        }
    }
}

impl Params for MilModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(e) = &self.encoder {
            e.visit(&join(prefix, "encoder"), f);
        }
        if let Some(t) = &self.agg_token {
            f(&join(prefix, "agg_token"), t);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        if let Some(p) = &self.attn_pool {
            p.visit(&join(prefix, "attn_pool"), f);
        }
        if let Some(c) = &self.inst_classifier {
            c.visit(&join(prefix, "inst_classifier"), f);
        }
        if let Some(c) = &self.classifier {
            c.visit(&join(prefix, "classifier"), f);
        }
        if let Some(m) = &self.tab_mlp {
            m.visit(&join(prefix, "tab_mlp"), f);
        }
        if let Some(h) = &self.hypernet {
            h.visit(&join(prefix, "hypernet"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&join(prefix, "encoder"), f);
        }
        if let Some(t) = &mut self.agg_token {
            f(&join(prefix, "agg_token"), t);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        if let Some(p) = &mut self.attn_pool {
            p.visit_mut(&join(prefix, "attn_pool"), f);
        }
        if let Some(c) = &mut self.inst_classifier {
            c.visit_mut(&join(prefix, "inst_classifier"), f);
        }
        if let Some(c) = &mut self.classifier {
            c.visit_mut(&join(prefix, "classifier"), f);
        }
        if let Some(m) = &mut self.tab_mlp {
            m.visit_mut(&join(prefix, "tab_mlp"), f);
        }
        if let Some(h) = &mut self.hypernet {
            h.visit_mut(&join(prefix, "hypernet"), f);
        }
    }
}

/// Best-effort structural identification of a parameter snapshot's variant.
/// `feature_mean` and `feature_max` share a structure and cannot be told
/// apart; this reports `feature_mean` for that shape.
pub fn infer_variant(params: &ModelParams) -> Option<ModelVariant> {
    let has = |name: &str| params.get(name).is_some();
    if has("hypernet.head_v.w") {
        Some(ModelVariant::HyperAdag)
    } else if has("hypernet.head_w.w") {
        Some(ModelVariant::HyperAdagNoTctp)
    } else if has("attn_pool.proj") {
        Some(ModelVariant::FeatureAttention)
    } else if has("inst_classifier.w") {
        Some(ModelVariant::OutputMax)
    } else if has("tab_mlp.l0.w") {
        if has("block0.out.w") {
            Some(ModelVariant::ConcatFusion)
        } else {
            Some(ModelVariant::TableMlp)
        }
    } else if has("block0.out.w") {
        Some(ModelVariant::FeatureTransformer)
    } else if has("encoder.l0.w") || has("encoder.conv1.w") {
        Some(ModelVariant::FeatureMean)
    } else {
        None
    }
}

// ----- standalone operation wrappers -----

/// Runs the shared encoder over a bag, returning the `[m, d]` feature matrix.
pub fn encode_instances(model: &MilModel, bag: &Bag) -> Result<Tensor, ModelError> {
    bag.validate()?;
    let encoder = model
        .encoder
        .as_ref()
        .ok_or(ModelError::Unsupported { variant: model.variant, what: "instance encoder" })?;
    let mut g = Graph::new();
    let mut bind = TapeBinding::new();
    let x = model.instance_matrix(&mut g, bag)?;
    let feats = encoder.forward(&mut g, &mut bind, x)?;
    Ok(g.to_tensor(feats))
}

/// Transformer aggregation of precomputed features under the model's shared
/// token: returns the bag feature `q [d]` and the exported attention over
/// the `m` instances.
pub fn aggregate_transformer(
    model: &MilModel,
    features: &Tensor,
) -> Result<(Tensor, Vec<Real>), ModelError> {
    let token = model
        .agg_token
        .as_ref()
        .ok_or(ModelError::Unsupported { variant: model.variant, what: "aggregation token" })?;
    let mut g = Graph::new();
    let mut bind = TapeBinding::new();
    let feats = g.constant(features.shape().to_vec(), features.values().to_vec())?;
    let token_var = bind.leaf(&mut g, token)?;
    let m = features.shape()[0];
    let (q, attns) = model.aggregate(&mut g, &mut bind, token_var, feats)?;
    let attention = token_row_attention(&g, &attns, m);
    let q_tensor = Tensor::new(vec![model.cfg.d], g.value(q).to_vec())?;
    Ok((q_tensor, attention))
}

/// Full forward of the hypernetwork-adaptive model (either hyper variant).
pub fn hyper_adag_forward(model: &MilModel, bag: &Bag) -> Result<BagPrediction, ModelError> {
    match model.variant {
        ModelVariant::HyperAdag | ModelVariant::HyperAdagNoTctp => model.predict(bag),
        _ => Err(ModelError::Unsupported { variant: model.variant, what: "hypernetwork" }),
    }
}

/// Forward for one of the seven baseline variants; errors when `model` was
/// built as a different variant.
pub fn baseline_forward(
    variant: ModelVariant,
    model: &MilModel,
    bag: &Bag,
) -> Result<BagPrediction, ModelError> {
    if model.variant != variant {
        return Err(ModelError::Unsupported { variant: model.variant, what: "that variant" });
    }
    model.predict(bag)
}
