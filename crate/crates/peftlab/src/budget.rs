//! Trainable-parameter accounting.
//!
//! Two layers of API: [`single_layer_count`] evaluates the per-method count
//! formula for one square `d x d` layer (the complexity-table contract),
//! and [`model_budget`] totals a method over a concrete model spec. Methods
//! like AdaLoRA, LoHa, prompt and prefix tuning are counted here without
//! being trainable in this lab.

use std::fmt;

use crate::model::{enumerate_sites, param_layout, ModelSpec, SiteGroup, SiteKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMethod {
    Propulsion,
    MultiPropulsion,
    FullFt,
    Bitfit,
    Lora,
    LoraFa,
    AdaLora,
    LoHa,
    Ia3,
    Prompt,
    Prefix,
}

impl BudgetMethod {
    pub fn parse(s: &str) -> Result<Self, BudgetError> {
        match s.to_ascii_lowercase().as_str() {
            "propulsion" => Ok(BudgetMethod::Propulsion),
            "multi_propulsion" | "multipropulsion" => Ok(BudgetMethod::MultiPropulsion),
            "ft" | "full_ft" | "fullft" => Ok(BudgetMethod::FullFt),
            "bitfit" => Ok(BudgetMethod::Bitfit),
            "lora" => Ok(BudgetMethod::Lora),
            "lora_fa" | "lorafa" => Ok(BudgetMethod::LoraFa),
            "adalora" => Ok(BudgetMethod::AdaLora),
            "loha" => Ok(BudgetMethod::LoHa),
            "ia3" => Ok(BudgetMethod::Ia3),
            "prompt" => Ok(BudgetMethod::Prompt),
            "prefix" => Ok(BudgetMethod::Prefix),
            other => Err(BudgetError::UnknownMethod(other.to_string())),
        }
    }

    pub const ALL: [BudgetMethod; 11] = [
        BudgetMethod::Propulsion,
        BudgetMethod::MultiPropulsion,
        BudgetMethod::FullFt,
        BudgetMethod::Bitfit,
        BudgetMethod::Lora,
        BudgetMethod::LoraFa,
        BudgetMethod::AdaLora,
        BudgetMethod::LoHa,
        BudgetMethod::Ia3,
        BudgetMethod::Prompt,
        BudgetMethod::Prefix,
    ];

    /// The per-layer count formula, as text, for reports.
    pub fn formula(&self) -> &'static str {
        match self {
            BudgetMethod::Propulsion => "d",
            BudgetMethod::MultiPropulsion => "p*d",
            BudgetMethod::FullFt => "d^2",
            BudgetMethod::Bitfit => "d",
            BudgetMethod::Lora => "2*d*r",
            BudgetMethod::LoraFa => "d*r",
            BudgetMethod::AdaLora => "2*d*r + r^2",
            BudgetMethod::LoHa => "4*d*r",
            BudgetMethod::Ia3 => "3*d",
            BudgetMethod::Prompt => "l_p*d",
            BudgetMethod::Prefix => "L*l_p*d",
        }
    }
}

impl fmt::Display for BudgetMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BudgetMethod::Propulsion => "propulsion",
            BudgetMethod::MultiPropulsion => "multi_propulsion",
            BudgetMethod::FullFt => "ft",
            BudgetMethod::Bitfit => "bitfit",
            BudgetMethod::Lora => "lora",
            BudgetMethod::LoraFa => "lora_fa",
            BudgetMethod::AdaLora => "adalora",
            BudgetMethod::LoHa => "loha",
            BudgetMethod::Ia3 => "ia3",
            BudgetMethod::Prompt => "prompt",
            BudgetMethod::Prefix => "prefix",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BudgetError {
    UnknownMethod(String),
}

impl fmt::Display for BudgetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BudgetError::UnknownMethod(m) => write!(f, "unknown budget method '{m}'"),
        }
    }
}

impl std::error::Error for BudgetError {}

/// Knobs for formula-only methods.
#[derive(Debug, Clone, Copy)]
pub struct BudgetOpts {
    pub rank: usize,
    /// Propulsion vectors per site for multi-propulsion.
    pub vectors: usize,
    /// Prompt length l_p for prompt/prefix tuning.
    pub prompt_len: usize,
    /// Layer count L for prefix tuning.
    pub layers: usize,
}

impl Default for BudgetOpts {
    fn default() -> Self {
        BudgetOpts { rank: 8, vectors: 1, prompt_len: 10, layers: 1 }
    }
}

/// Trainable-parameter count for a single square layer `W in R^{d x d}`.
pub fn single_layer_count(method: BudgetMethod, d: usize, opts: &BudgetOpts) -> usize {
    let r = opts.rank;
    match method {
        BudgetMethod::Propulsion => d,
        BudgetMethod::MultiPropulsion => opts.vectors * d,
        BudgetMethod::FullFt => d * d,
        BudgetMethod::Bitfit => d,
        BudgetMethod::Lora => 2 * d * r,
        BudgetMethod::LoraFa => d * r,
        BudgetMethod::AdaLora => 2 * d * r + r * r,
        BudgetMethod::LoHa => 4 * d * r,
        BudgetMethod::Ia3 => 3 * d,
        BudgetMethod::Prompt => opts.prompt_len * d,
        BudgetMethod::Prefix => opts.layers * opts.prompt_len * d,
    }
}

/// Per-method budget for a concrete model.
#[derive(Debug, Clone)]
pub struct ParamBudget {
    pub method: BudgetMethod,
    pub formula: &'static str,
    /// `(site or parameter label, count)` contributions.
    pub per_site: Vec<(String, usize)>,
    pub total: usize,
}

/// Total a method over a model spec. Adapter methods count over the sites
/// a `sites` group selects; FT counts every weight matrix (biases excluded,
/// matching the `d^2` convention); BitFit counts every bias.
pub fn model_budget(
    spec: &ModelSpec,
    method: BudgetMethod,
    sites: SiteGroup,
    opts: &BudgetOpts,
) -> ParamBudget {
    let mut per_site: Vec<(String, usize)> = Vec::new();
    match method {
        BudgetMethod::Propulsion | BudgetMethod::MultiPropulsion => {
            let mult = if method == BudgetMethod::MultiPropulsion { opts.vectors } else { 1 };
            for site in site_selection(spec, sites) {
                per_site.push((site_label(spec, site.layer, site.kind), mult * site.width));
            }
        }
        BudgetMethod::FullFt => {
            for (name, shape) in param_layout(spec) {
                if !name.ends_with(".bias") {
                    per_site.push((name, shape.iter().product()));
                }
            }
        }
        BudgetMethod::Bitfit => {
            for (name, shape) in param_layout(spec) {
                if name.ends_with(".bias") {
                    per_site.push((name, shape.iter().product()));
                }
            }
        }
        BudgetMethod::Lora | BudgetMethod::LoraFa | BudgetMethod::AdaLora | BudgetMethod::LoHa => {
            let r = opts.rank;
            for site in site_selection(spec, sites) {
                if site.kind == SiteKind::Embedding {
                    continue;
                }
                let d_in = site_input_width(spec, site.layer, site.kind);
                let count = match method {
                    BudgetMethod::Lora => r * (d_in + site.width),
                    BudgetMethod::LoraFa => r * site.width,
                    BudgetMethod::AdaLora => r * (d_in + site.width) + r * r,
                    BudgetMethod::LoHa => 2 * r * (d_in + site.width),
                    _ => unreachable!(),
                };
                per_site.push((site_label(spec, site.layer, site.kind), count));
            }
        }
        BudgetMethod::Ia3 => {
            // Three learned vectors per layer: key, value, and the MLP
            // intermediate.
            let d_ff = if spec.d_ff > 0 { spec.d_ff } else { spec.d_model };
            for i in 1..=spec.depth {
                per_site.push((format!("layer{i}"), 2 * spec.d_model + d_ff));
            }
        }
        BudgetMethod::Prompt => {
            per_site.push(("prompt".into(), opts.prompt_len * spec.d_model));
        }
        BudgetMethod::Prefix => {
            per_site.push(("prefix".into(), spec.depth * opts.prompt_len * spec.d_model));
        }
    }
    let total = per_site.iter().map(|(_, c)| c).sum();
    ParamBudget { method, formula: method.formula(), per_site, total }
}

fn site_selection(
    spec: &ModelSpec,
    group: SiteGroup,
) -> Vec<crate::model::AttachmentSite> {
    enumerate_sites(spec)
        .into_iter()
        .filter(|s| {
            let g = match s.kind {
                SiteKind::Embedding => SiteGroup::Embedding,
                SiteKind::Key => SiteGroup::Key,
                SiteKind::Query => SiteGroup::Query,
                SiteKind::Value => SiteGroup::Value,
                SiteKind::Mlp => SiteGroup::Mlp,
            };
            match group {
                SiteGroup::All => true,
                SiteGroup::Attn => {
                    matches!(g, SiteGroup::Key | SiteGroup::Query | SiteGroup::Value)
                }
                other => other == g,
            }
        })
        .collect()
}

fn site_label(spec: &ModelSpec, layer: usize, kind: SiteKind) -> String {
    let _ = spec;
    match kind {
        SiteKind::Embedding => "embedding".into(),
        SiteKind::Key | SiteKind::Query | SiteKind::Value => format!("layer{layer}.attn.{kind}"),
        SiteKind::Mlp => format!("layer{layer}.mlp"),
    }
}

fn site_input_width(spec: &ModelSpec, layer: usize, kind: SiteKind) -> usize {
    use crate::model::ModelKind;
    match (spec.kind, kind) {
        (ModelKind::Linear, _) => spec.d_in,
        (ModelKind::Mlp, _) => {
            if layer == 1 {
                spec.d_in
            } else {
                spec.d_model
            }
        }
        (ModelKind::Transformer, _) => spec.d_model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn complexity_table_rows_are_exact() {
        let opts = BudgetOpts { rank: 8, ..BudgetOpts::default() };
        let d = 768;
        assert_eq!(single_layer_count(BudgetMethod::Propulsion, d, &opts), 768);
        assert_eq!(single_layer_count(BudgetMethod::FullFt, d, &opts), 589_824);
        assert_eq!(single_layer_count(BudgetMethod::Lora, d, &opts), 12_288);
        assert_eq!(single_layer_count(BudgetMethod::AdaLora, d, &opts), 12_288 + 64);
        assert_eq!(single_layer_count(BudgetMethod::LoHa, d, &opts), 24_576);
        assert_eq!(single_layer_count(BudgetMethod::Ia3, d, &opts), 2_304);
        assert_eq!(single_layer_count(BudgetMethod::LoraFa, d, &opts), 6_144);
    }

    #[test]
    fn unknown_method_is_an_error() {
        assert!(BudgetMethod::parse("galore").is_err());
        assert_eq!(BudgetMethod::parse("LoRA").unwrap(), BudgetMethod::Lora);
    }

    #[test]
    fn deep_wide_stack_favors_propulsion_by_2r_per_square_site() {
        let spec = ModelSpec {
            kind: ModelKind::Transformer,
            depth: 12,
            d_in: 1,
            d_model: 768,
            d_ff: 3072,
            n_heads: 12,
            vocab_size: 50_000,
            max_seq: 128,
            n_classes: 2,
            seed: 0,
        };
        let opts = BudgetOpts { rank: 8, ..BudgetOpts::default() };
        let prop = model_budget(&spec, BudgetMethod::Propulsion, SiteGroup::All, &opts);
        let lora = model_budget(&spec, BudgetMethod::Lora, SiteGroup::All, &opts);
        assert_eq!(prop.total, 768 + 12 * (3 * 768 + 3072));
        assert!(lora.total > 10 * prop.total);
        // Per square site the ratio is exactly 2r.
        assert_eq!(
            single_layer_count(BudgetMethod::Lora, 768, &opts),
            2 * opts.rank * single_layer_count(BudgetMethod::Propulsion, 768, &opts)
        );

        let ft = model_budget(&spec, BudgetMethod::FullFt, SiteGroup::All, &opts);
        let weights: usize = param_layout(&spec)
            .iter()
            .filter(|(n, _)| !n.ends_with(".bias"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(ft.total, weights);
    }

    #[test]
    fn transformer_totals_by_enumeration() {
        let spec = ModelSpec {
            kind: ModelKind::Transformer,
            depth: 2,
            d_in: 1,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 32,
            max_seq: 8,
            n_classes: 2,
            seed: 0,
        };
        let opts = BudgetOpts::default();
        let prop = model_budget(&spec, BudgetMethod::Propulsion, SiteGroup::All, &opts);
        // embedding(8) + per layer 3*8 + 16 = 40, two layers.
        assert_eq!(prop.total, 8 + 2 * (3 * 8 + 16));

        let attn = model_budget(&spec, BudgetMethod::Propulsion, SiteGroup::Attn, &opts);
        assert_eq!(attn.total, 2 * 3 * 8);

        let ft = model_budget(&spec, BudgetMethod::FullFt, SiteGroup::All, &opts);
        let expected_weights = 32 * 8            // embedding
            + 2 * (4 * 8 * 8 + 8 * 16 + 16 * 8)  // attn projections + mlp
            + 8 * 2; // head
        assert_eq!(ft.total, expected_weights);

        let bitfit = model_budget(&spec, BudgetMethod::Bitfit, SiteGroup::All, &opts);
        assert_eq!(bitfit.total, 2 * (4 * 8 + 16 + 8) + 2);
    }
}
