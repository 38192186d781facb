//! Small frozen-base models exposing named adapter attachment sites.
//!
//! Three kinds are supported: a bias-free single linear map (the closed-form
//! NTK reference), an MLP classifier, and a 1-4 block transformer encoder.
//! "Pre-trained" is simulated by seeded Gaussian init with variance 1/fan_in;
//! after `build` every base parameter is frozen and only adapters (or an
//! explicit BitFit/full-FT marking) carry trainable state.

use std::collections::BTreeMap;
use std::fmt;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::graph::{Graph, Var};
use crate::peft::AdapterSet;
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Single affine map without bias, activation, or head. Used by the
    /// NTK checks, where its kernel has a closed form.
    Linear,
    Mlp,
    Transformer,
}

/// Declarative description of a model. `seed` fully determines the weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of layers (blocks for the transformer).
    pub depth: usize,
    /// Input feature width for linear/mlp kinds.
    #[serde(default = "default_one")]
    pub d_in: usize,
    pub d_model: usize,
    /// MLP intermediate width inside transformer blocks.
    #[serde(default)]
    pub d_ff: usize,
    #[serde(default)]
    pub n_heads: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub max_seq: usize,
    #[serde(default = "default_two")]
    pub n_classes: usize,
    /// 0 means "derive from the experiment seed" when run via configs.
    #[serde(default)]
    pub seed: u64,
}

fn default_one() -> usize {
    1
}

fn default_two() -> usize {
    2
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("depth", self.depth),
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Spec(format!("{name} must be >= 1")));
            }
        }
        if self.kind == ModelKind::Transformer {
            for (name, v) in [
                ("d_ff", self.d_ff),
                ("n_heads", self.n_heads),
                ("vocab_size", self.vocab_size),
                ("max_seq", self.max_seq),
            ] {
                if v == 0 {
                    return Err(ModelError::Spec(format!("{name} must be >= 1")));
                }
            }
            if !self.d_model.is_multiple_of(self.n_heads) {
                return Err(ModelError::Spec(format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                )));
            }
        }
        if self.kind == ModelKind::Linear && self.depth != 1 {
            return Err(ModelError::Spec("linear models have depth 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Embedding,
    Key,
    Query,
    Value,
    Mlp,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SiteKind::Embedding => "embedding",
            SiteKind::Key => "key",
            SiteKind::Query => "query",
            SiteKind::Value => "value",
            SiteKind::Mlp => "mlp",
        };
        f.write_str(s)
    }
}

/// A named layer output an adapter may intercept. The embedding site uses
/// layer index 0; block sites are 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttachmentSite {
    pub layer: usize,
    pub kind: SiteKind,
    pub width: usize,
}

impl AttachmentSite {
    pub fn id(&self) -> SiteId {
        (self.layer, self.kind)
    }

    pub fn label(&self) -> String {
        match self.kind {
            SiteKind::Embedding => "embedding".to_string(),
            SiteKind::Key | SiteKind::Query | SiteKind::Value => {
                format!("layer{}.attn.{}", self.layer, self.kind)
            }
            SiteKind::Mlp => format!("layer{}.mlp", self.layer),
        }
    }
}

pub type SiteId = (usize, SiteKind);

/// Site selection groups: `Attn` is Key+Query+Value across all layers,
/// `All` is every site including Embedding and MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteGroup {
    All,
    Attn,
    Embedding,
    Key,
    Query,
    Value,
    Mlp,
}

impl SiteGroup {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(SiteGroup::All),
            "attn" | "attention" => Ok(SiteGroup::Attn),
            "embedding" => Ok(SiteGroup::Embedding),
            "key" => Ok(SiteGroup::Key),
            "query" => Ok(SiteGroup::Query),
            "value" => Ok(SiteGroup::Value),
            "mlp" => Ok(SiteGroup::Mlp),
            other => Err(ModelError::UnknownGroup(other.to_string())),
        }
    }

    fn matches(&self, kind: SiteKind) -> bool {
        match self {
            SiteGroup::All => true,
            SiteGroup::Attn => matches!(kind, SiteKind::Key | SiteKind::Query | SiteKind::Value),
            SiteGroup::Embedding => kind == SiteKind::Embedding,
            SiteGroup::Key => kind == SiteKind::Key,
            SiteGroup::Query => kind == SiteKind::Query,
            SiteGroup::Value => kind == SiteKind::Value,
            SiteGroup::Mlp => kind == SiteKind::Mlp,
        }
    }
}

impl fmt::Display for SiteGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SiteGroup::All => "all",
            SiteGroup::Attn => "attn",
            SiteGroup::Embedding => "embedding",
            SiteGroup::Key => "key",
            SiteGroup::Query => "query",
            SiteGroup::Value => "value",
            SiteGroup::Mlp => "mlp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub enum ModelError {
    Spec(String),
    Attachment { site: String, detail: String },
    UnknownGroup(String),
    MissingParam(String),
    BatchKind { expected: &'static str },
    SequenceTooLong { len: usize, max: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Spec(msg) => write!(f, "invalid model spec: {msg}"),
            ModelError::Attachment { site, detail } => {
                write!(f, "attachment error at {site}: {detail}")
            }
            ModelError::UnknownGroup(g) => write!(f, "unknown site group '{g}'"),
            ModelError::MissingParam(name) => write!(f, "missing parameter '{name}'"),
            ModelError::BatchKind { expected } => {
                write!(f, "batch kind mismatch: model expects {expected} input")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq {max}")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// One batch of model input.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Row-per-sample feature matrix for linear/mlp models.
    Dense(Tensor),
    /// Token id sequences for the transformer.
    Tokens(Vec<Vec<usize>>),
}

/// Forward execution mode. Eval is deterministic; train mode draws
/// inverted-dropout masks from the supplied RNG.
pub struct ForwardMode<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut StdRng>,
}

impl<'r> ForwardMode<'r> {
    pub fn eval() -> ForwardMode<'static> {
        ForwardMode { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut StdRng) -> ForwardMode<'r> {
        ForwardMode { dropout, rng: Some(rng) }
    }

    fn apply_dropout(&mut self, g: &mut Graph, v: Var) -> Result<Var, TensorError> {
        if self.dropout <= 0.0 {
            return Ok(v);
        }
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(v) };
        let n = g.value(v).numel();
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random_range(0.0..1.0) < self.dropout { 0.0 } else { 1.0 / keep })
            .collect();
        g.dropout(v, mask)
    }
}

/// Shapes of every base parameter, in registration order, without
/// materializing any data. Used by `build` and by parameter budgeting.
pub fn param_layout(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    match spec.kind {
        ModelKind::Linear => {
            layout.push(("layer1.linear.weight".into(), vec![spec.d_in, spec.d_model]));
        }
        ModelKind::Mlp => {
            let mut prev = spec.d_in;
            for i in 1..=spec.depth {
                layout.push((format!("layer{i}.mlp.weight"), vec![prev, spec.d_model]));
                layout.push((format!("layer{i}.mlp.bias"), vec![spec.d_model]));
                prev = spec.d_model;
            }
            layout.push(("head.weight".into(), vec![spec.d_model, spec.n_classes]));
            layout.push(("head.bias".into(), vec![spec.n_classes]));
        }
        ModelKind::Transformer => {
            let d = spec.d_model;
            layout.push(("embedding.table".into(), vec![spec.vocab_size, d]));
            for i in 1..=spec.depth {
                for proj in ["key", "query", "value", "out"] {
                    layout.push((format!("layer{i}.attn.{proj}.weight"), vec![d, d]));
                    layout.push((format!("layer{i}.attn.{proj}.bias"), vec![d]));
                }
                layout.push((format!("layer{i}.mlp.fc1.weight"), vec![d, spec.d_ff]));
                layout.push((format!("layer{i}.mlp.fc1.bias"), vec![spec.d_ff]));
                layout.push((format!("layer{i}.mlp.fc2.weight"), vec![spec.d_ff, d]));
                layout.push((format!("layer{i}.mlp.fc2.bias"), vec![d]));
            }
            layout.push(("head.weight".into(), vec![d, spec.n_classes]));
            layout.push(("head.bias".into(), vec![spec.n_classes]));
        }
    }
    layout
}

/// Attachment-site registry for a spec: embedding first (layer 0), then
/// key/query/value/mlp per layer. Does not build the model.
pub fn enumerate_sites(spec: &ModelSpec) -> Vec<AttachmentSite> {
    let mut sites = Vec::new();
    match spec.kind {
        ModelKind::Linear => {
            sites.push(AttachmentSite { layer: 1, kind: SiteKind::Mlp, width: spec.d_model });
        }
        ModelKind::Mlp => {
            for i in 1..=spec.depth {
                sites.push(AttachmentSite { layer: i, kind: SiteKind::Mlp, width: spec.d_model });
            }
        }
        ModelKind::Transformer => {
            let d = spec.d_model;
            sites.push(AttachmentSite { layer: 0, kind: SiteKind::Embedding, width: d });
            for i in 1..=spec.depth {
                sites.push(AttachmentSite { layer: i, kind: SiteKind::Key, width: d });
                sites.push(AttachmentSite { layer: i, kind: SiteKind::Query, width: d });
                sites.push(AttachmentSite { layer: i, kind: SiteKind::Value, width: d });
                sites.push(AttachmentSite { layer: i, kind: SiteKind::Mlp, width: spec.d_ff });
            }
        }
    }
    sites
}

/// A layer stack whose base weights never receive gradient updates.
pub struct FrozenModel {
    spec: ModelSpec,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
    sites: Vec<AttachmentSite>,
}

impl FrozenModel {
    /// Build and freeze a model from its spec. Weight matrices are seeded
    /// Gaussian with variance 1/fan_in, biases start at zero.
    pub fn build(spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = StdRng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        for (name, shape) in param_layout(spec) {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "embedding.table" {
                Tensor::randn(&shape, 1.0 / (spec.d_model as f64).sqrt(), &mut rng)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            };
            params.push(Parameter::frozen(name, tensor));
        }
        let sites = enumerate_sites(spec);
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(FrozenModel { spec: spec.clone(), params, index, sites })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// All attachment sites in registry order (embedding first, then
    /// key/query/value/mlp per layer).
    pub fn sites(&self) -> &[AttachmentSite] {
        &self.sites
    }

    pub fn site(&self, id: SiteId) -> Option<&AttachmentSite> {
        self.sites.iter().find(|s| s.id() == id)
    }

    pub fn site_group(&self, group: SiteGroup) -> Vec<AttachmentSite> {
        self.sites.iter().copied().filter(|s| group.matches(s.kind)).collect()
    }

    /// Input width feeding the affine map at a site; `None` for the
    /// embedding lookup, which has no dense input.
    pub fn site_input_width(&self, id: SiteId) -> Option<usize> {
        let (layer, kind) = id;
        match (self.spec.kind, kind) {
            (_, SiteKind::Embedding) => None,
            (ModelKind::Linear, SiteKind::Mlp) => Some(self.spec.d_in),
            (ModelKind::Mlp, SiteKind::Mlp) => {
                Some(if layer == 1 { self.spec.d_in } else { self.spec.d_model })
            }
            (ModelKind::Transformer, _) => Some(self.spec.d_model),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Result<&Parameter, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Freeze every base parameter.
    pub fn freeze_all(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = false;
        }
    }

    /// Mark only bias parameters trainable (the BitFit surface).
    pub fn mark_biases_trainable(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = p.name.ends_with(".bias");
        }
    }

    /// Mark every base parameter trainable (full fine-tuning).
    pub fn mark_all_trainable(&mut self) {
        for p in self.params.iter_mut() {
            p.trainable = true;
        }
    }

    /// FNV-1a over the bit patterns of all currently-frozen parameters.
    /// Constant across training for every adapter kind except full FT.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if p.trainable {
                continue;
            }
            for &v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }

    /// Forward pass with adapter substitution at each adapted site.
    /// Returns the logits node (`[batch, n_classes]`; for the linear kind,
    /// the raw affine output).
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        adapters: &AdapterSet,
        mode: &mut ForwardMode,
    ) -> Result<Var, ModelError> {
        adapters.check_sites(self)?;
        match self.spec.kind {
            ModelKind::Linear | ModelKind::Mlp => {
                let Batch::Dense(x) = batch else {
                    return Err(ModelError::BatchKind { expected: "dense feature" });
                };
                self.forward_dense(g, x, adapters, mode)
            }
            ModelKind::Transformer => {
                let Batch::Tokens(seqs) = batch else {
                    return Err(ModelError::BatchKind { expected: "token sequence" });
                };
                self.forward_tokens(g, seqs, adapters, mode)
            }
        }
    }

    fn forward_dense(
        &self,
        g: &mut Graph,
        x: &Tensor,
        adapters: &AdapterSet,
        mode: &mut ForwardMode,
    ) -> Result<Var, ModelError> {
        if x.shape().len() != 2 || x.cols() != self.spec.d_in {
            return Err(ModelError::Spec(format!(
                "dense batch must be [n, {}], got {:?}",
                self.spec.d_in,
                x.shape()
            )));
        }
        let mut h = g.leaf(x.clone());

        if self.spec.kind == ModelKind::Linear {
            let w = g.param(self.param("layer1.linear.weight")?);
            let a = g.matmul(h, w)?;
            return Ok(adapters.apply(g, (1, SiteKind::Mlp), Some(h), a)?);
        }

        for i in 1..=self.spec.depth {
            let w = g.param(self.param(&format!("layer{i}.mlp.weight"))?);
            let b = g.param(self.param(&format!("layer{i}.mlp.bias"))?);
            let pre = g.matmul(h, w)?;
            let a = g.row_add(pre, b)?;
            // Propulsion scales the affine output before the nonlinearity.
            let a = adapters.apply(g, (i, SiteKind::Mlp), Some(h), a)?;
            let act = g.gelu(a)?;
            h = mode.apply_dropout(g, act)?;
        }
        let hw = g.param(self.param("head.weight")?);
        let hb = g.param(self.param("head.bias")?);
        let logits = g.matmul(h, hw)?;
        Ok(g.row_add(logits, hb)?)
    }

    fn forward_tokens(
        &self,
        g: &mut Graph,
        seqs: &[Vec<usize>],
        adapters: &AdapterSet,
        mode: &mut ForwardMode,
    ) -> Result<Var, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Spec("empty token batch".into()));
        }
        let mut pooled_rows = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.is_empty() {
                return Err(ModelError::Spec("empty token sequence".into()));
            }
            if seq.len() > self.spec.max_seq {
                return Err(ModelError::SequenceTooLong {
                    len: seq.len(),
                    max: self.spec.max_seq,
                });
            }
            let pooled = self.encode_sequence(g, seq, adapters, mode)?;
            pooled_rows.push(pooled);
        }
        let pooled = g.concat_rows(&pooled_rows)?;
        let hw = g.param(self.param("head.weight")?);
        let hb = g.param(self.param("head.bias")?);
        let logits = g.matmul(pooled, hw)?;
        Ok(g.row_add(logits, hb)?)
    }

    fn encode_sequence(
        &self,
        g: &mut Graph,
        seq: &[usize],
        adapters: &AdapterSet,
        mode: &mut ForwardMode,
    ) -> Result<Var, ModelError> {
        let d = self.spec.d_model;
        let heads = self.spec.n_heads;
        let head_dim = d / heads;

        let table = g.param(self.param("embedding.table")?);
        let mut x = g.embed_lookup(table, seq)?;
        x = adapters.apply(g, (0, SiteKind::Embedding), None, x)?;

        for i in 1..=self.spec.depth {
            let proj = |g: &mut Graph, name: &str, input: Var| -> Result<Var, ModelError> {
                let w = g.param(self.param(&format!("layer{i}.attn.{name}.weight"))?);
                let b = g.param(self.param(&format!("layer{i}.attn.{name}.bias"))?);
                let m = g.matmul(input, w)?;
                Ok(g.row_add(m, b)?)
            };
            let q0 = proj(g, "query", x)?;
            let k0 = proj(g, "key", x)?;
            let v0 = proj(g, "value", x)?;
            let q = adapters.apply(g, (i, SiteKind::Query), Some(x), q0)?;
            let k = adapters.apply(g, (i, SiteKind::Key), Some(x), k0)?;
            let v = adapters.apply(g, (i, SiteKind::Value), Some(x), v0)?;

            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let lo = h * head_dim;
                let hi = lo + head_dim;
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
                let attn = g.softmax_rows(scaled)?;
                head_outputs.push(g.matmul(attn, vh)?);
            }
            let concat = g.concat_cols(&head_outputs)?;
            let ow = g.param(self.param(&format!("layer{i}.attn.out.weight"))?);
            let ob = g.param(self.param(&format!("layer{i}.attn.out.bias"))?);
            let om = g.matmul(concat, ow)?;
            let o = g.row_add(om, ob)?;
            let o = mode.apply_dropout(g, o)?;
            x = g.add(x, o)?;

            let w1 = g.param(self.param(&format!("layer{i}.mlp.fc1.weight"))?);
            let b1 = g.param(self.param(&format!("layer{i}.mlp.fc1.bias"))?);
            let m1 = g.matmul(x, w1)?;
            let a1 = g.row_add(m1, b1)?;
            let a1 = adapters.apply(g, (i, SiteKind::Mlp), Some(x), a1)?;
            let act = g.gelu(a1)?;
            let w2 = g.param(self.param(&format!("layer{i}.mlp.fc2.weight"))?);
            let b2 = g.param(self.param(&format!("layer{i}.mlp.fc2.bias"))?);
            let m2 = g.matmul(act, w2)?;
            let m2 = g.row_add(m2, b2)?;
            let m2 = mode.apply_dropout(g, m2)?;
            x = g.add(x, m2)?;
        }

        Ok(g.mean_rows(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::AdapterSet;

    fn mlp_spec(depth: usize, d_model: usize) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp,
            depth,
            d_in: 4,
            d_model,
            d_ff: 0,
            n_heads: 0,
            vocab_size: 0,
            max_seq: 0,
            n_classes: 2,
            seed: 11,
        }
    }

    fn tiny_transformer(depth: usize) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Transformer,
            depth,
            d_in: 1,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 32,
            max_seq: 12,
            n_classes: 2,
            seed: 3,
        }
    }

    #[test]
    fn mlp_has_one_site_per_layer() {
        let m = FrozenModel::build(&mlp_spec(2, 8)).unwrap();
        let sites = m.sites();
        assert_eq!(sites.len(), 2);
        assert!(sites.iter().all(|s| s.kind == SiteKind::Mlp && s.width == 8));
    }

    #[test]
    fn build_is_deterministic_for_same_seed() {
        let a = FrozenModel::build(&mlp_spec(2, 8)).unwrap();
        let b = FrozenModel::build(&mlp_spec(2, 8)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "{}", pa.name);
        }
    }

    #[test]
    fn transformer_site_count_by_enumeration() {
        let m = FrozenModel::build(&tiny_transformer(2)).unwrap();
        assert_eq!(m.sites().len(), 9); // 2 x {K,Q,V,MLP} + embedding
    }

    #[test]
    fn site_groups_expand_per_table_semantics() {
        let m = FrozenModel::build(&tiny_transformer(2)).unwrap();
        assert_eq!(m.site_group(SiteGroup::Attn).len(), 6);
        assert_eq!(m.site_group(SiteGroup::All).len(), 9);
        assert_eq!(m.site_group(SiteGroup::Key).len(), 2);
        assert!(SiteGroup::parse("nonsense").is_err());
    }

    #[test]
    fn attn_group_on_a_deep_stack_is_three_per_layer() {
        let mut spec = tiny_transformer(1);
        spec.depth = 12;
        spec.d_model = 4;
        spec.d_ff = 8;
        spec.n_heads = 2;
        let m = FrozenModel::build(&spec).unwrap();
        assert_eq!(m.site_group(SiteGroup::Attn).len(), 36);
    }

    #[test]
    fn all_params_frozen_after_build() {
        let m = FrozenModel::build(&tiny_transformer(1)).unwrap();
        assert!(m.params().iter().all(|p| !p.trainable));
    }

    #[test]
    fn forward_without_adapters_is_bitwise_repeatable() {
        let m = FrozenModel::build(&mlp_spec(2, 8)).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let run = || {
            let mut g = Graph::new();
            let out = m
                .forward(&mut g, &Batch::Dense(x.clone()), &AdapterSet::none(), &mut ForwardMode::eval())
                .unwrap();
            g.value(out).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn transformer_forward_shapes_and_determinism() {
        let m = FrozenModel::build(&tiny_transformer(2)).unwrap();
        let batch = Batch::Tokens(vec![vec![1, 5, 9], vec![2, 2]]);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch, &AdapterSet::none(), &mut ForwardMode::eval()).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 2]);
    }

    #[test]
    fn rejects_wrong_batch_kind_and_long_sequences() {
        let m = FrozenModel::build(&tiny_transformer(1)).unwrap();
        let mut g = Graph::new();
        let dense = Batch::Dense(Tensor::zeros(&[1, 8]));
        assert!(matches!(
            m.forward(&mut g, &dense, &AdapterSet::none(), &mut ForwardMode::eval()),
            Err(ModelError::BatchKind { .. })
        ));
        let long = Batch::Tokens(vec![vec![0; 13]]);
        assert!(matches!(
            m.forward(&mut g, &long, &AdapterSet::none(), &mut ForwardMode::eval()),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = tiny_transformer(1);
        s.n_heads = 3; // 8 % 3 != 0
        assert!(FrozenModel::build(&s).is_err());
        let mut s = mlp_spec(2, 8);
        s.d_model = 0;
        assert!(FrozenModel::build(&s).is_err());
    }

    #[test]
    fn bias_marking_flips_only_biases() {
        let mut m = FrozenModel::build(&mlp_spec(2, 8)).unwrap();
        m.mark_biases_trainable();
        for p in m.params() {
            assert_eq!(p.trainable, p.name.ends_with(".bias"), "{}", p.name);
        }
        m.freeze_all();
        assert!(m.params().iter().all(|p| !p.trainable));
    }
}
