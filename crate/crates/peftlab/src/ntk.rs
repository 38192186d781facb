//! Empirical Neural Tangent Kernel machinery.
//!
//! The kernel of a scalar-valued model is `K_ij = <∇_θ φ(x_i), ∇_θ φ(x_j)>`
//! over a chosen parameter subset: the full base parameters (`K^F`, the
//! full-fine-tuning kernel) or the propulsion vectors alone (`K^P`). The
//! scalar output convention is the sum of logits. Alongside the kernel this
//! module measures Jacobian drift across training and first-order Taylor
//! residuals, and checks the Johnson–Lindenstrauss concentration bound that
//! controls the distance between the two kernels.

pub mod jl;

use std::fmt;

use crate::graph::Graph;
use crate::model::{Batch, ForwardMode, FrozenModel, ModelError};
use crate::peft::AdapterSet;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSubset {
    /// All base model parameters (adapter parameters excluded).
    Full,
    /// Adapter-owned parameters only.
    Propulsion,
}

impl fmt::Display for ParamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSubset::Full => f.write_str("full"),
            ParamSubset::Propulsion => f.write_str("propulsion"),
        }
    }
}

/// One probe input for kernel evaluation.
#[derive(Debug, Clone)]
pub enum Probe {
    Dense(Vec<f64>),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone)]
pub enum NtkError {
    Config(String),
    Shape(String),
    Model(String),
}

impl fmt::Display for NtkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NtkError::Config(m) => write!(f, "ntk config error: {m}"),
            NtkError::Shape(m) => write!(f, "ntk shape error: {m}"),
            NtkError::Model(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for NtkError {}

impl From<ModelError> for NtkError {
    fn from(e: ModelError) -> Self {
        NtkError::Model(e.to_string())
    }
}

impl From<TensorError> for NtkError {
    fn from(e: TensorError) -> Self {
        NtkError::Model(e.to_string())
    }
}

/// Cap on probe-set size: the Jacobian is `n x P` and P can be every
/// model weight.
pub const MAX_PROBES: usize = 64;

/// Per-probe gradient of the scalar output wrt the chosen subset.
#[derive(Debug, Clone)]
pub struct JacobianSnapshot {
    pub probes: usize,
    pub params: usize,
    /// Row-major `[probes, params]`.
    pub data: Vec<f64>,
    pub subset: ParamSubset,
    /// Training step this snapshot was taken at (0 = initialization).
    pub step: u64,
}

impl JacobianSnapshot {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.params..(i + 1) * self.params]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Empirical kernel matrix over a probe set.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub n: usize,
    /// Row-major symmetric `[n, n]`.
    pub data: Vec<f64>,
    pub subset: ParamSubset,
    /// Identifier of the probe set the kernel was evaluated on.
    pub probe_set: String,
}

impl KernelMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum::<f64>() / self.n as f64
    }

    /// Kernel scaled by its own mean diagonal, the scale-free form used for
    /// cross-subset comparison.
    pub fn normalized(&self) -> KernelMatrix {
        let m = self.mean_diagonal();
        let data = if m == 0.0 { self.data.clone() } else { self.data.iter().map(|v| v / m).collect() };
        KernelMatrix { n: self.n, data, subset: self.subset, probe_set: self.probe_set.clone() }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.at(i, j) - self.at(j, i)).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue via cyclic Jacobi rotations (n is capped at 64).
    pub fn min_eigenvalue(&self) -> f64 {
        let mut a = self.data.clone();
        let n = self.n;
        if n == 1 {
            return a[0];
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
            if off.sqrt() < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min)
    }
}

fn probe_batch(probe: &Probe) -> Result<Batch, NtkError> {
    match probe {
        Probe::Dense(row) => Ok(Batch::Dense(
            Tensor::new(vec![1, row.len()], row.clone()).map_err(NtkError::from)?,
        )),
        Probe::Tokens(seq) => Ok(Batch::Tokens(vec![seq.clone()])),
    }
}

/// Scalar model output for one probe: the sum of logits, eval mode.
pub fn phi(model: &FrozenModel, adapters: &AdapterSet, probe: &Probe) -> Result<f64, NtkError> {
    let batch = probe_batch(probe)?;
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &batch, adapters, &mut ForwardMode::eval())?;
    let s = g.sum(logits)?;
    Ok(g.value(s).item())
}

/// Gradient of `phi` wrt the chosen subset, flattened in binding order.
fn phi_gradient(
    model: &FrozenModel,
    adapters: &AdapterSet,
    probe: &Probe,
    subset: ParamSubset,
) -> Result<Vec<f64>, NtkError> {
    let batch = probe_batch(probe)?;
    let mut g = Graph::new();
    if subset == ParamSubset::Full {
        g.force_all_grads();
    }
    let logits = model.forward(&mut g, &batch, adapters, &mut ForwardMode::eval())?;
    let s = g.sum(logits)?;
    g.backward(s)?;

    let mut flat = Vec::new();
    match subset {
        ParamSubset::Full => {
            // Binding order is forward order; restrict to base parameters.
            for (name, grad) in g.all_grads() {
                if model.has_param(&name) {
                    flat.extend_from_slice(grad.data());
                }
            }
        }
        ParamSubset::Propulsion => {
            for (name, grad) in g.all_grads() {
                if !model.has_param(&name) {
                    flat.extend_from_slice(grad.data());
                }
            }
        }
    }
    if flat.is_empty() {
        return Err(NtkError::Config(format!(
            "subset {subset} selects no parameters (no gradient reached it)"
        )));
    }
    Ok(flat)
}

/// Stacked per-probe gradients.
pub fn jacobian(
    model: &FrozenModel,
    adapters: &AdapterSet,
    probes: &[Probe],
    subset: ParamSubset,
) -> Result<JacobianSnapshot, NtkError> {
    if probes.is_empty() {
        return Err(NtkError::Config("empty probe set".into()));
    }
    if probes.len() > MAX_PROBES {
        return Err(NtkError::Config(format!(
            "probe set of {} exceeds the cap of {MAX_PROBES}",
            probes.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(probes.len());
    for probe in probes {
        rows.push(phi_gradient(model, adapters, probe, subset)?);
    }
    let params = rows[0].len();
    if rows.iter().any(|r| r.len() != params) {
        return Err(NtkError::Shape("inconsistent gradient widths across probes".into()));
    }
    let mut data = Vec::with_capacity(probes.len() * params);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Ok(JacobianSnapshot { probes: probes.len(), params, data, subset, step: 0 })
}

/// `K = J Jᵀ` over the probe set.
pub fn compute_ntk(
    model: &FrozenModel,
    adapters: &AdapterSet,
    probes: &[Probe],
    subset: ParamSubset,
) -> Result<KernelMatrix, NtkError> {
    let j = jacobian(model, adapters, probes, subset)?;
    Ok(kernel_from_jacobian(&j))
}

pub fn kernel_from_jacobian(j: &JacobianSnapshot) -> KernelMatrix {
    let n = j.probes;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let dot: f64 = j.row(i).iter().zip(j.row(k)).map(|(a, b)| a * b).sum();
            data[i * n + k] = dot;
            data[k * n + i] = dot;
        }
    }
    KernelMatrix { n, data, subset: j.subset, probe_set: format!("n={n}") }
}

/// Elementwise absolute distance between two kernels plus summary norms.
#[derive(Debug, Clone)]
pub struct KernelDistance {
    pub n: usize,
    pub matrix: Vec<f64>,
    pub max_abs: f64,
    pub frobenius: f64,
}

/// `|K_a - K_b|`. With `normalize`, both kernels are first scaled by their
/// own mean diagonal; the two subsets sum over different parameter counts,
/// so only the scale-free comparison is meaningful.
pub fn ntk_distance(
    a: &KernelMatrix,
    b: &KernelMatrix,
    normalize: bool,
) -> Result<KernelDistance, NtkError> {
    if a.n != b.n {
        return Err(NtkError::Shape(format!("kernel sizes differ: {} vs {}", a.n, b.n)));
    }
    let (ka, kb);
    let (da, db) = if normalize {
        ka = a.normalized();
        kb = b.normalized();
        (&ka.data, &kb.data)
    } else {
        (&a.data, &b.data)
    };
    let matrix: Vec<f64> = da.iter().zip(db).map(|(x, y)| (x - y).abs()).collect();
    let max_abs = matrix.iter().cloned().fold(0.0, f64::max);
    let frobenius = matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(KernelDistance { n: a.n, matrix, max_abs, frobenius })
}

/// Elementwise Jacobian change plus the relative Frobenius drift
/// `|J_t - J_0|_F / |J_0|_F`.
#[derive(Debug, Clone)]
pub struct JacobianDrift {
    pub matrix: Vec<f64>,
    pub relative_frobenius: f64,
}

pub fn jacobian_drift(
    j0: &JacobianSnapshot,
    jt: &JacobianSnapshot,
) -> Result<JacobianDrift, NtkError> {
    if j0.probes != jt.probes || j0.params != jt.params {
        return Err(NtkError::Shape(format!(
            "snapshot shapes differ: {}x{} vs {}x{}",
            j0.probes, j0.params, jt.probes, jt.params
        )));
    }
    let matrix: Vec<f64> = j0.data.iter().zip(&jt.data).map(|(a, b)| (b - a).abs()).collect();
    let base = j0.frobenius();
    let diff = matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
    let relative_frobenius = if base == 0.0 { 0.0 } else { diff / base };
    Ok(JacobianDrift { matrix, relative_frobenius })
}

/// First-order Taylor residual of one training step.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Residual {
    /// `|φ(θ_t) - φ(θ_{t-1}) - <∇φ(θ_{t-1}), θ_t - θ_{t-1}>|`.
    pub absolute: f64,
    /// Absolute residual over `|φ(θ_t) - φ(θ_{t-1})|`; 0 when the output
    /// did not move.
    pub normalized: f64,
}

/// Measure the Taylor residual between two adapter snapshots taken from
/// the same run (identical structure, consecutive steps).
pub fn linearization_residual(
    model: &FrozenModel,
    adapters_prev: &AdapterSet,
    adapters_next: &AdapterSet,
    probe: &Probe,
) -> Result<Residual, NtkError> {
    let phi_prev = phi(model, adapters_prev, probe)?;
    let phi_next = phi(model, adapters_next, probe)?;
    let grad_prev = phi_gradient(model, adapters_prev, probe, ParamSubset::Propulsion)?;

    let theta_prev: Vec<f64> = adapters_prev
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().copied())
        .collect();
    let theta_next: Vec<f64> = adapters_next
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().copied())
        .collect();
    if theta_prev.len() != grad_prev.len() || theta_prev.len() != theta_next.len() {
        return Err(NtkError::Shape("snapshot parameter layouts differ".into()));
    }
    Ok(residual_from_parts(phi_prev, phi_next, &grad_prev, &theta_prev, &theta_next))
}

pub fn residual_from_parts(
    phi_prev: f64,
    phi_next: f64,
    grad_prev: &[f64],
    theta_prev: &[f64],
    theta_next: &[f64],
) -> Residual {
    let inner: f64 = grad_prev
        .iter()
        .zip(theta_next.iter().zip(theta_prev))
        .map(|(g, (n, p))| g * (n - p))
        .sum();
    let change = phi_next - phi_prev;
    let absolute = (change - inner).abs();
    let normalized = if change == 0.0 { 0.0 } else { absolute / change.abs() };
    Residual { absolute, normalized }
}
