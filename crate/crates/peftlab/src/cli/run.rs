//! The four experiment commands: `train`, `sweep`, `ntk`, `budget`.
//!
//! Every command is a pure function of (config, seed) to output bytes,
//! except for the wall-clock fields in `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rayon::prelude::*;

use super::config::{CliError, ExperimentConfig};
use super::csvio::{fmt_opt, write_csv, write_matrix};
use super::data::load_dataset;
use crate::budget::{model_budget, BudgetMethod, BudgetOpts, ParamBudget};
use crate::checkpoint::{save_adapters, save_model, Dtype};
use crate::graph::{Graph, Precision};
use crate::metrics::MetricReport;
use crate::model::{ForwardMode, FrozenModel};
use crate::ntk::{
    compute_ntk, jacobian, jacobian_drift, jl::jl_empirical, linearization_residual,
    ntk_distance, ParamSubset, Probe, MAX_PROBES,
};
use crate::optim::Optimizer;
use crate::peft::{build_adapters, AdapterKind, AdapterSet};
use crate::trainer::{train, Dataset, Features, TrainOutcome};

/// Cap on full-Jacobian parameter count: n_probes rows of P entries each.
pub const MAX_FULL_JACOBIAN_PARAMS: usize = 2_000_000;

/// Outcome of one `train` run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub final_train: MetricReport,
    pub final_val: Option<MetricReport>,
    pub steps_to_threshold: Option<u64>,
    pub trainable_params: usize,
    pub wall_clock_secs: f64,
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(CliError::from)
}

fn write_lock(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    fs::write(dir.join("config.lock"), cfg.lock_string()).map_err(CliError::from)
}

fn trainable_param_count(model: &FrozenModel, adapters: &AdapterSet) -> usize {
    let base: usize =
        model.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum();
    base + adapters.trainable_count()
}

/// Build, attach, train, and write `metrics.csv` + `summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunRecord, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let out = cfg.out_path();
    ensure_dir(&out)?;
    write_lock(cfg, &out)?;

    let data = load_dataset(&cfg.dataset)?;
    let mut model = FrozenModel::build(&cfg.model)?;
    let mut adapters = build_adapters(&mut model, &cfg.adapter, cfg.train.seed)?;
    let trainable_params = trainable_param_count(&model, &adapters);

    let outcome = train(&mut model, &mut adapters, &data, &cfg.train)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome)?;

    if cfg.save_checkpoints {
        let dtype = match cfg.train.precision {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
        save_model(&model, &out.join("model.ckpt"), dtype)?;
        if !adapters.is_empty() {
            save_adapters(&adapters, &out.join("adapters.ckpt"), cfg.train.seed, dtype)?;
        }
    }

    let record = RunRecord {
        config_hash: cfg.hash(),
        out_dir: out.clone(),
        epochs: outcome.history.len(),
        final_train: outcome.final_train.clone(),
        final_val: outcome.final_val.clone(),
        steps_to_threshold: outcome.steps_to_threshold,
        trainable_params,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_train_summary(cfg, &record, &out)?;
    Ok(record)
}

fn write_metrics_csv(path: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    let has_val = outcome.history.iter().any(|r| r.val.is_some());
    let mut header = vec!["epoch", "step", "loss", "accuracy", "f1", "mcc", "pearson", "spearman"];
    if has_val {
        header.extend(["val_loss", "val_accuracy", "val_f1", "val_mcc", "val_pearson", "val_spearman"]);
    }
    let mut rows = Vec::with_capacity(outcome.history.len());
    for row in &outcome.history {
        let mut fields = vec![
            row.epoch.to_string(),
            row.step.to_string(),
            format!("{}", row.train_loss),
            fmt_opt(row.train.accuracy),
            fmt_opt(row.train.f1),
            fmt_opt(row.train.mcc),
            fmt_opt(row.train.pearson),
            fmt_opt(row.train.spearman),
        ];
        if has_val {
            match &row.val {
                Some(v) => fields.extend([
                    format!("{}", v.loss),
                    fmt_opt(v.accuracy),
                    fmt_opt(v.f1),
                    fmt_opt(v.mcc),
                    fmt_opt(v.pearson),
                    fmt_opt(v.spearman),
                ]),
                None => fields.extend(std::iter::repeat_with(String::new).take(6)),
            }
        }
        rows.push(fields);
    }
    write_csv(path, &header, &rows)
}

fn write_train_summary(
    cfg: &ExperimentConfig,
    record: &RunRecord,
    out: &Path,
) -> Result<(), CliError> {
    let summary = serde_json::json!({
        "config_hash": record.config_hash,
        "seed": cfg.seed,
        "adapter": cfg.adapter.kind.to_string(),
        "sites": cfg.adapter.sites.to_string(),
        "degree": cfg.adapter.degree,
        "trainable_params": record.trainable_params,
        "epochs": record.epochs,
        "steps_to_threshold": record.steps_to_threshold,
        "final": record.final_train,
        "final_val": record.final_val,
        "runtime_seconds": record.wall_clock_secs,
    });
    fs::write(out.join("summary.json"), pretty_json(&summary)).map_err(CliError::from)
}

fn pretty_json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

/// Expand the sweep axes into labelled runs and execute them (up to
/// `jobs` in parallel), then write the cross-run `summary.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>, CliError> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(CliError::Config("sweep requested but every sweep axis is empty".into()));
    }
    let base = cfg.out_path();
    ensure_dir(&base)?;
    write_lock(cfg, &base)?;

    let degrees: Vec<Option<i64>> = if cfg.sweep.degrees.is_empty() {
        vec![None]
    } else {
        cfg.sweep.degrees.iter().copied().map(Some).collect()
    };
    let poolings: Vec<Option<crate::peft::Pooling>> = if cfg.sweep.poolings.is_empty() {
        vec![None]
    } else {
        cfg.sweep.poolings.iter().copied().map(Some).collect()
    };
    let groups: Vec<Option<crate::model::SiteGroup>> = if cfg.sweep.site_groups.is_empty() {
        vec![None]
    } else {
        cfg.sweep.site_groups.iter().copied().map(Some).collect()
    };

    let mut points = Vec::new();
    for &d in &degrees {
        for &p in &poolings {
            for &g in &groups {
                points.push((d, p, g));
            }
        }
    }

    let subs: Vec<ExperimentConfig> = points
        .iter()
        .enumerate()
        .map(|(i, &(d, p, g))| {
            let mut sub = cfg.clone();
            if let Some(d) = d {
                sub.adapter.degree = d;
            }
            if let Some(p) = p {
                sub.adapter.pooling = p;
            }
            if let Some(g) = g {
                sub.adapter.sites = g;
            }
            sub.train.adapter = sub.adapter.clone();
            sub.sweep = Default::default();
            sub.output_dir =
                base.join(format!("run_{i:03}")).to_string_lossy().into_owned();
            sub
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Resource(e.to_string()))?;
    let results: Vec<Result<RunRecord, CliError>> =
        pool.install(|| subs.par_iter().map(cmd_train).collect());

    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    let header = ["degree", "pooling", "sites", "final_loss", "final_primary", "steps_to_threshold", "run_dir"];
    let rows: Vec<Vec<String>> = points
        .iter()
        .zip(&records)
        .map(|(&(d, p, g), rec)| {
            vec![
                d.map(|v| v.to_string()).unwrap_or_else(|| cfg.adapter.degree.to_string()),
                p.map(|v| v.to_string()).unwrap_or_else(|| cfg.adapter.pooling.to_string()),
                g.map(|v| v.to_string()).unwrap_or_else(|| cfg.adapter.sites.to_string()),
                format!("{}", rec.final_train.loss),
                fmt_opt(rec.final_train.primary()),
                rec.steps_to_threshold.map(|v| v.to_string()).unwrap_or_default(),
                rec.out_dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            ]
        })
        .collect();
    write_csv(&base.join("summary.csv"), &header, &rows)?;
    Ok(records)
}

/// Kernel, drift, residual, and JL artifacts for one configuration.
pub fn cmd_ntk(cfg: &ExperimentConfig) -> Result<serde_json::Value, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    if !matches!(cfg.adapter.kind, AdapterKind::Propulsion | AdapterKind::MultiPropulsion) {
        return Err(CliError::Config(
            "ntk command compares the full kernel against a propulsion kernel; \
             adapter.kind must be propulsion or multi_propulsion"
                .into(),
        ));
    }
    if cfg.ntk.probes == 0 {
        return Err(CliError::Config("ntk.probes must be >= 1".into()));
    }
    if cfg.ntk.probes > MAX_PROBES {
        return Err(CliError::Resource(format!(
            "ntk.probes = {} exceeds the cap of {MAX_PROBES}",
            cfg.ntk.probes
        )));
    }
    let full_params: usize = crate::model::param_layout(&cfg.model)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if full_params > MAX_FULL_JACOBIAN_PARAMS {
        return Err(CliError::Resource(format!(
            "model has {full_params} parameters; the full Jacobian cap is {MAX_FULL_JACOBIAN_PARAMS}"
        )));
    }

    let out = cfg.out_path();
    ensure_dir(&out)?;
    write_lock(cfg, &out)?;

    let data = load_dataset(&cfg.dataset)?;
    data.validate().map_err(CliError::from)?;
    let probes = probes_from(&data, cfg.ntk.probes)?;

    let mut model = FrozenModel::build(&cfg.model)?;
    let mut adapters = build_adapters(&mut model, &cfg.adapter, cfg.train.seed)?;

    // Kernels at initialization.
    let kernel_full = compute_ntk(&model, &AdapterSet::none(), &probes, ParamSubset::Full)?;
    let kernel_prop = compute_ntk(&model, &adapters, &probes, ParamSubset::Propulsion)?;
    let diff = ntk_distance(&kernel_full, &kernel_prop, true)?;
    let n = kernel_full.n;
    write_matrix(&out.join("kernel_F.csv"), &kernel_full.data, n, n)?;
    write_matrix(&out.join("kernel_P.csv"), &kernel_prop.data, n, n)?;
    write_matrix(&out.join("kernel_diff.csv"), &diff.matrix, n, n)?;

    // Drift + residual series over a short training run.
    let j0 = jacobian(&model, &adapters, &probes, ParamSubset::Propulsion)?;
    let mut drift_rows: Vec<Vec<String>> = vec![vec![
        "0".into(),
        "0".into(),
        String::new(),
        String::new(),
    ]];
    let mut drift_series = Vec::new();
    let mut rng = StdRng::seed_from_u64(cfg.train.seed);
    let mut optimizer = Optimizer::new(
        cfg.train.optimizer,
        cfg.train.learning_rate,
        cfg.train.weight_decay,
        cfg.train.decay_toward_one,
    );
    let order = data.train_idx.clone();
    let mut cursor = 0usize;
    for step in 1..=cfg.ntk.steps {
        let take: Vec<usize> = (0..cfg.train.batch_size.min(order.len()))
            .map(|k| order[(cursor + k) % order.len()])
            .collect();
        cursor = (cursor + cfg.train.batch_size) % order.len().max(1);
        let snapshot = step % cfg.ntk.snapshot_every == 0 || step == cfg.ntk.steps;
        let before = if snapshot { Some(adapters.clone()) } else { None };

        let (batch, labels) = data.batch(&take).map_err(CliError::from)?;
        let mut g = Graph::with_precision(cfg.train.precision);
        let mut mode = ForwardMode::train(cfg.train.dropout, &mut rng);
        let logits = model.forward(&mut g, &batch, &adapters, &mut mode)?;
        let loss = match &labels {
            crate::trainer::Labels::Class(ys) => g.cross_entropy(logits, ys),
            crate::trainer::Labels::Real(ys) => {
                let t = g.leaf(
                    crate::tensor::Tensor::new(vec![ys.len(), 1], ys.clone())
                        .map_err(|e| CliError::Data(e.to_string()))?,
                );
                crate::trainer::mse(&mut g, logits, t)
            }
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        optimizer.begin_step();
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(CliError::Diverged { step: optimizer.steps_taken() });
        }
        g.backward(loss).map_err(|e| CliError::Config(e.to_string()))?;
        for (name, grad) in g.trainable_grads() {
            if let Some(p) = adapters.param_mut(&name) {
                optimizer.update(p, grad.data());
            } else if let Some(p) = model.param_mut(&name) {
                optimizer.update(p, grad.data());
            }
        }

        if let Some(before) = before {
            let mut jt = jacobian(&model, &adapters, &probes, ParamSubset::Propulsion)?;
            jt.step = step as u64;
            let drift = jacobian_drift(&j0, &jt)?;
            let residual = linearization_residual(&model, &before, &adapters, &probes[0])?;
            drift_rows.push(vec![
                step.to_string(),
                format!("{}", drift.relative_frobenius),
                format!("{}", residual.absolute),
                format!("{}", residual.normalized),
            ]);
            drift_series.push(serde_json::json!({
                "step": step,
                "relative_drift": drift.relative_frobenius,
                "residual_abs": residual.absolute,
                "residual_norm": residual.normalized,
            }));
        }
    }
    write_csv(
        &out.join("drift.csv"),
        &["step", "relative_drift", "residual_abs", "residual_norm"],
        &drift_rows,
    )?;

    let jl = jl_empirical(
        cfg.model.d_model,
        cfg.ntk.jl_trials,
        cfg.ntk.jl_eps,
        cfg.ntk.jl_c,
        cfg.seed,
    )?;

    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "probes": n,
        "kernel": {
            "full_mean_diagonal": kernel_full.mean_diagonal(),
            "propulsion_mean_diagonal": kernel_prop.mean_diagonal(),
            "normalized_max_distance": diff.max_abs,
            "normalized_frobenius_distance": diff.frobenius,
        },
        "drift": drift_series,
        "jl": jl,
        "runtime_seconds": started.elapsed().as_secs_f64(),
    });
    fs::write(out.join("summary.json"), pretty_json(&summary))?;
    Ok(summary)
}

fn probes_from(data: &Dataset, count: usize) -> Result<Vec<Probe>, CliError> {
    if data.train_idx.len() < count {
        return Err(CliError::Data(format!(
            "dataset provides {} train items, ntk needs {count} probes",
            data.train_idx.len()
        )));
    }
    let probes = data.train_idx[..count]
        .iter()
        .map(|&i| match &data.features {
            Features::Dense { rows, .. } => Probe::Dense(rows[i].clone()),
            Features::Tokens { seqs, .. } => Probe::Tokens(seqs[i].clone()),
        })
        .collect();
    Ok(probes)
}

/// Per-method totals over the configured model, written as `budget.csv`.
pub fn cmd_budget(
    cfg: &ExperimentConfig,
    methods: &[BudgetMethod],
) -> Result<Vec<ParamBudget>, CliError> {
    cfg.model.validate()?;
    let out = cfg.out_path();
    ensure_dir(&out)?;
    let opts = BudgetOpts {
        rank: cfg.adapter.rank,
        vectors: cfg.adapter.vectors,
        prompt_len: 10,
        layers: cfg.model.depth,
    };
    let budgets: Vec<ParamBudget> = methods
        .iter()
        .map(|&m| model_budget(&cfg.model, m, cfg.adapter.sites, &opts))
        .collect();
    let rows: Vec<Vec<String>> = budgets
        .iter()
        .map(|b| {
            vec![b.method.to_string(), b.formula.to_string(), b.total.to_string()]
        })
        .collect();
    write_csv(&out.join("budget.csv"), &["method", "formula", "total"], &rows)?;
    Ok(budgets)
}
