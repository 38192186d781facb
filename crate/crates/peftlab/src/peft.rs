//! Adapter implementations: propulsion (single and multi-vector with
//! pooling), LoRA, BitFit, and full fine-tuning, plus effective-weight
//! materialization.
//!
//! Propulsion attaches a trainable vector `z` of the site's output width
//! and rescales the site output as `V' = V ⊙ z^k`. At construction every
//! element of `z` is 1, so the adapted forward pass is exactly the frozen
//! forward pass.

use std::collections::BTreeMap;
use std::fmt;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::graph::{Graph, Var};
use crate::model::{FrozenModel, ModelError, SiteGroup, SiteId, SiteKind};
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    None,
    Propulsion,
    MultiPropulsion,
    Lora,
    Bitfit,
    FullFt,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AdapterKind::None => "none",
            AdapterKind::Propulsion => "propulsion",
            AdapterKind::MultiPropulsion => "multi_propulsion",
            AdapterKind::Lora => "lora",
            AdapterKind::Bitfit => "bitfit",
            AdapterKind::FullFt => "full_ft",
        };
        f.write_str(s)
    }
}

/// Elementwise pooling over the p candidate outputs of a multi-propulsion
/// site. L2 is root-mean-square, `sqrt((1/p) Σ x²)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Max,
    Min,
    L2,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pooling::Average => "average",
            Pooling::Max => "max",
            Pooling::Min => "min",
            Pooling::L2 => "l2",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub enum PeftError {
    Config(String),
    Width { site: String, expected: usize, got: usize },
    Rank { rank: usize, limit: usize },
    Degree(i64),
}

impl fmt::Display for PeftError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeftError::Config(msg) => write!(f, "adapter config error: {msg}"),
            PeftError::Width { site, expected, got } => {
                write!(f, "width mismatch at {site}: site width {expected}, adapter width {got}")
            }
            PeftError::Rank { rank, limit } => {
                write!(f, "rank {rank} exceeds min(d_in, d_out) = {limit}")
            }
            PeftError::Degree(k) => write!(f, "unsupported propulsion degree {k}"),
        }
    }
}

impl std::error::Error for PeftError {}

/// Declarative adapter description (what to attach and where).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    #[serde(default = "default_sites")]
    pub sites: SiteGroup,
    /// Propulsion degree k in `V ⊙ z^k`.
    #[serde(default = "default_degree")]
    pub degree: i64,
    /// Number of propulsion vectors per site (multi-propulsion only).
    #[serde(default = "default_vectors")]
    pub vectors: usize,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    /// LoRA rank.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// LoRA scaling numerator; `None` means alpha = rank (scaling 1).
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_sites() -> SiteGroup {
    SiteGroup::All
}
fn default_degree() -> i64 {
    1
}
fn default_vectors() -> usize {
    1
}
fn default_pooling() -> Pooling {
    Pooling::Average
}
fn default_rank() -> usize {
    4
}

impl AdapterSpec {
    pub fn propulsion(sites: SiteGroup, degree: i64) -> Self {
        AdapterSpec { kind: AdapterKind::Propulsion, sites, degree, ..AdapterSpec::none() }
    }

    pub fn none() -> Self {
        AdapterSpec {
            kind: AdapterKind::None,
            sites: SiteGroup::All,
            degree: 1,
            vectors: 1,
            pooling: Pooling::Average,
            rank: 4,
            alpha: None,
        }
    }
}

/// One trainable rescaling vector at one site.
#[derive(Debug, Clone)]
pub struct PropulsionAdapter {
    pub z: Parameter,
    pub degree: i64,
    pub width: usize,
}

/// p propulsion vectors sharing one site, combined by elementwise pooling.
#[derive(Debug, Clone)]
pub struct MultiPropulsionAdapter {
    pub vectors: Vec<Parameter>,
    pub degree: i64,
    pub pooling: Pooling,
    pub width: usize,
}

/// Low-rank additive adapter: `x W + scaling (x A) B`, `B` zero at init.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Parameter,
    pub b: Parameter,
    pub rank: usize,
    pub scaling: f64,
    pub width: usize,
}

#[derive(Debug, Clone)]
enum SiteAdapter {
    Propulsion(PropulsionAdapter),
    MultiPropulsion(MultiPropulsionAdapter),
    Lora(LoraAdapter),
}

/// Map from site to adapter, plus the method tag. BitFit and full FT carry
/// no entries; they only flip trainability flags on the base model.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    kind: AdapterKind,
    entries: BTreeMap<SiteId, SiteAdapter>,
}

impl AdapterSet {
    pub fn none() -> Self {
        AdapterSet { kind: AdapterKind::None, entries: BTreeMap::new() }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.entries.keys().copied().collect()
    }

    /// Adapter parameters in deterministic (site, then vector) order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for entry in self.entries.values() {
            match entry {
                SiteAdapter::Propulsion(p) => out.push(&p.z),
                SiteAdapter::MultiPropulsion(m) => out.extend(m.vectors.iter()),
                SiteAdapter::Lora(l) => {
                    out.push(&l.a);
                    out.push(&l.b);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for entry in self.entries.values_mut() {
            match entry {
                SiteAdapter::Propulsion(p) => out.push(&mut p.z),
                SiteAdapter::MultiPropulsion(m) => out.extend(m.vectors.iter_mut()),
                SiteAdapter::Lora(l) => {
                    out.push(&mut l.a);
                    out.push(&mut l.b);
                }
            }
        }
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    /// Validate every entry against the model's site registry.
    pub fn check_sites(&self, model: &FrozenModel) -> Result<(), ModelError> {
        for (&id, entry) in &self.entries {
            let Some(site) = model.site(id) else {
                return Err(ModelError::Attachment {
                    site: format!("({}, {})", id.0, id.1),
                    detail: "no such site in this model".into(),
                });
            };
            let width = match entry {
                SiteAdapter::Propulsion(p) => p.width,
                SiteAdapter::MultiPropulsion(m) => m.width,
                SiteAdapter::Lora(l) => l.width,
            };
            if width != site.width {
                return Err(ModelError::Attachment {
                    site: site.label(),
                    detail: format!("site width {}, adapter width {}", site.width, width),
                });
            }
        }
        Ok(())
    }

    /// Transform the raw site output `v`. `input` is the dense input that
    /// fed the site's affine map (absent for the embedding site).
    pub fn apply(
        &self,
        g: &mut Graph,
        site: SiteId,
        input: Option<Var>,
        v: Var,
    ) -> Result<Var, TensorError> {
        let Some(entry) = self.entries.get(&site) else { return Ok(v) };
        match entry {
            SiteAdapter::Propulsion(p) => {
                let z = g.param(&p.z);
                propulsion_apply(g, v, z, p.degree)
            }
            SiteAdapter::MultiPropulsion(m) => {
                let zs: Vec<Var> = m.vectors.iter().map(|z| g.param(z)).collect();
                multi_propulsion_apply(g, v, &zs, m.degree, m.pooling)
            }
            SiteAdapter::Lora(l) => {
                let x = input.ok_or(TensorError::EmptyInput("lora requires a dense site input"))?;
                let a = g.param(&l.a);
                let b = g.param(&l.b);
                lora_apply(g, x, v, a, b, l.scaling)
            }
        }
    }
}

/// `V' = V ⊙ z^k` with `z` broadcast over the rows of `V`. `z^k` is
/// computed once per forward pass.
pub fn propulsion_apply(g: &mut Graph, v: Var, z: Var, degree: i64) -> Result<Var, TensorError> {
    let zk = g.pow_int(z, degree)?;
    g.row_mul(v, zk)
}

/// Low-rank additive update on a frozen affine output:
/// `base + scaling * (x A) B`, where `base = x W (+ bias)`.
pub fn lora_apply(
    g: &mut Graph,
    x: Var,
    base: Var,
    a: Var,
    b: Var,
    scaling: f64,
) -> Result<Var, TensorError> {
    let xa = g.matmul(x, a)?;
    let xab = g.matmul(xa, b)?;
    let delta = g.scale(xab, scaling)?;
    g.add(base, delta)
}

/// Apply p propulsion vectors to one site output and pool elementwise.
/// A single vector bypasses pooling entirely, so p = 1 reduces exactly to
/// the plain adapter under every mode.
pub fn multi_propulsion_apply(
    g: &mut Graph,
    v: Var,
    zs: &[Var],
    degree: i64,
    pooling: Pooling,
) -> Result<Var, TensorError> {
    if zs.is_empty() {
        return Err(TensorError::EmptyInput("multi_propulsion"));
    }
    if zs.len() == 1 {
        return propulsion_apply(g, v, zs[0], degree);
    }
    let candidates: Vec<Var> =
        zs.iter().map(|&z| propulsion_apply(g, v, z, degree)).collect::<Result<_, _>>()?;
    let p = candidates.len() as f64;
    match pooling {
        Pooling::Average => {
            let mut acc = candidates[0];
            for &c in &candidates[1..] {
                acc = g.add(acc, c)?;
            }
            g.scale(acc, 1.0 / p)
        }
        Pooling::Max => {
            let mut acc = candidates[0];
            for &c in &candidates[1..] {
                acc = g.ew_max(acc, c)?;
            }
            Ok(acc)
        }
        Pooling::Min => {
            let mut acc = candidates[0];
            for &c in &candidates[1..] {
                acc = g.ew_min(acc, c)?;
            }
            Ok(acc)
        }
        Pooling::L2 => {
            let mut acc: Option<Var> = None;
            for &c in &candidates {
                let sq = g.ew_mul(c, c)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, sq)?,
                    None => sq,
                });
            }
            let mean = g.scale(acc.expect("non-empty"), 1.0 / p)?;
            g.sqrt(mean)
        }
    }
}

/// Materialize `W · diag(z^k)`: the dense weight whose plain forward pass
/// reproduces the propulsion-adapted forward pass for every input.
pub fn materialize_effective_weight(
    w: &Tensor,
    z: &Tensor,
    degree: i64,
) -> Result<Tensor, PeftError> {
    if degree < 0 {
        return Err(PeftError::Degree(degree));
    }
    if w.shape().len() != 2 {
        return Err(PeftError::Config(format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (rows, cols) = (w.rows(), w.cols());
    if z.numel() != cols {
        return Err(PeftError::Width {
            site: "effective_weight".into(),
            expected: cols,
            got: z.numel(),
        });
    }
    let zk: Vec<f64> = z.data().iter().map(|&v| v.powi(degree as i32)).collect();
    let mut out = w.data().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] *= zk[c];
        }
    }
    Ok(Tensor::new(vec![rows, cols], out).expect("same shape as W"))
}

/// Mark only the model's bias parameters trainable.
pub fn bitfit_enable(model: &mut FrozenModel) -> AdapterSet {
    model.mark_biases_trainable();
    AdapterSet { kind: AdapterKind::Bitfit, entries: BTreeMap::new() }
}

/// Mark every base parameter trainable.
pub fn fullft_enable(model: &mut FrozenModel) -> AdapterSet {
    model.mark_all_trainable();
    AdapterSet { kind: AdapterKind::FullFt, entries: BTreeMap::new() }
}

/// Build an adapter set against a model. Resets base trainability first so
/// repeated builds start from a fully frozen model.
pub fn build_adapters(
    model: &mut FrozenModel,
    spec: &AdapterSpec,
    seed: u64,
) -> Result<AdapterSet, PeftError> {
    model.freeze_all();
    match spec.kind {
        AdapterKind::None => Ok(AdapterSet::none()),
        AdapterKind::Bitfit => Ok(bitfit_enable(model)),
        AdapterKind::FullFt => Ok(fullft_enable(model)),
        AdapterKind::Propulsion | AdapterKind::MultiPropulsion => {
            if spec.degree < 0 {
                return Err(PeftError::Degree(spec.degree));
            }
            let p = if spec.kind == AdapterKind::MultiPropulsion { spec.vectors } else { 1 };
            if p == 0 {
                return Err(PeftError::Config("multi_propulsion requires vectors >= 1".into()));
            }
            let sites = model.site_group(spec.sites);
            if sites.is_empty() {
                return Err(PeftError::Config(format!(
                    "site group '{}' selects no sites on this model",
                    spec.sites
                )));
            }
            let mut entries = BTreeMap::new();
            for site in sites {
                let label = site.label();
                let entry = if spec.kind == AdapterKind::Propulsion {
                    SiteAdapter::Propulsion(PropulsionAdapter {
                        z: Parameter::trainable(format!("{label}.z"), Tensor::ones(&[site.width]))
                            .with_decay_target(1.0),
                        degree: spec.degree,
                        width: site.width,
                    })
                } else {
                    let vectors = (1..=p)
                        .map(|j| {
                            Parameter::trainable(
                                format!("{label}.z{j}"),
                                Tensor::ones(&[site.width]),
                            )
                            .with_decay_target(1.0)
                        })
                        .collect();
                    SiteAdapter::MultiPropulsion(MultiPropulsionAdapter {
                        vectors,
                        degree: spec.degree,
                        pooling: spec.pooling,
                        width: site.width,
                    })
                };
                entries.insert(site.id(), entry);
            }
            Ok(AdapterSet { kind: spec.kind, entries })
        }
        AdapterKind::Lora => {
            if spec.rank == 0 {
                return Err(PeftError::Config("lora rank must be >= 1".into()));
            }
            // LoRA needs a dense input; the embedding lookup is excluded.
            let sites: Vec<_> = model
                .site_group(spec.sites)
                .into_iter()
                .filter(|s| s.kind != SiteKind::Embedding)
                .collect();
            if sites.is_empty() {
                return Err(PeftError::Config(format!(
                    "site group '{}' selects no LoRA-compatible (affine) sites",
                    spec.sites
                )));
            }
            let mut rng = StdRng::seed_from_u64(seed);
            let mut entries = BTreeMap::new();
            for site in sites {
                let d_in = model
                    .site_input_width(site.id())
                    .ok_or_else(|| PeftError::Config(format!("{} has no input", site.label())))?;
                let limit = d_in.min(site.width);
                if spec.rank > limit {
                    return Err(PeftError::Rank { rank: spec.rank, limit });
                }
                let label = site.label();
                let scaling = spec.alpha.unwrap_or(spec.rank as f64) / spec.rank as f64;
                let a = Parameter::trainable(
                    format!("{label}.lora_a"),
                    Tensor::randn(&[d_in, spec.rank], 1.0 / (d_in as f64).sqrt(), &mut rng),
                );
                let b = Parameter::trainable(
                    format!("{label}.lora_b"),
                    Tensor::zeros(&[spec.rank, site.width]),
                );
                entries.insert(
                    site.id(),
                    SiteAdapter::Lora(LoraAdapter {
                        a,
                        b,
                        rank: spec.rank,
                        scaling,
                        width: site.width,
                    }),
                );
            }
            Ok(AdapterSet { kind: AdapterKind::Lora, entries })
        }
    }
}
