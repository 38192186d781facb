//! Dataset construction: synthetic generators and delimited-file loading.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::config::{CliError, DatasetSource, FileSpec, GeneratorKind, SyntheticSpec};
use crate::trainer::{Dataset, Features, Labels};

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset, CliError> {
    match source {
        DatasetSource::Synthetic(spec) => synthetic(spec),
        DatasetSource::File(spec) => from_file(spec),
    }
}

fn synthetic(spec: &SyntheticSpec) -> Result<Dataset, CliError> {
    let seed = spec.seed.unwrap_or(0);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut data = match spec.generator {
        GeneratorKind::Blobs => blobs(spec, &mut rng)?,
        GeneratorKind::Moons => moons(spec, &mut rng)?,
        GeneratorKind::Keywords => keywords(spec, &mut rng)?,
    };
    split(&mut data, spec.val_fraction, &mut rng);
    Ok(data)
}

/// Gaussian blobs with mutually orthogonal class centers of norm
/// `separation` and per-class unit-variance noise (unless overridden).
/// Classes are balanced: class c receives an extra sample while `n`
/// does not divide evenly.
fn blobs(spec: &SyntheticSpec, rng: &mut StdRng) -> Result<Dataset, CliError> {
    if spec.classes < 2 {
        return Err(CliError::Config("blobs needs at least 2 classes".into()));
    }
    if spec.dim < spec.classes {
        return Err(CliError::Config(format!(
            "blobs needs dim >= classes to orthogonalize centers ({} < {})",
            spec.dim, spec.classes
        )));
    }
    let noise = spec.noise.unwrap_or(1.0);
    let centers = orthonormal_directions(spec.classes, spec.dim, rng);
    let gauss = Normal::new(0.0, noise).expect("noise std");
    let mut rows = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let row: Vec<f64> = (0..spec.dim)
            .map(|j| spec.separation * centers[class][j] + gauss.sample(rng))
            .collect();
        rows.push(row);
        ys.push(class);
    }
    Ok(Dataset {
        features: Features::Dense { dim: spec.dim, rows },
        labels: Labels::Class(ys),
        n_classes: spec.classes,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
    })
}

/// Two interleaved half-moons in the plane; `dim` is fixed at 2.
fn moons(spec: &SyntheticSpec, rng: &mut StdRng) -> Result<Dataset, CliError> {
    let noise = spec.noise.unwrap_or(0.1);
    let gauss = Normal::new(0.0, noise).expect("noise std");
    let mut rows = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % 2;
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        rows.push(vec![x + gauss.sample(rng), y + gauss.sample(rng)]);
        ys.push(class);
    }
    Ok(Dataset {
        features: Features::Dense { dim: 2, rows },
        labels: Labels::Class(ys),
        n_classes: 2,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
    })
}

/// Balanced keyword-detection sequences: label 1 iff the sequence contains
/// a token from `{1..=keywords}`; filler tokens are drawn above the
/// keyword range.
fn keywords(spec: &SyntheticSpec, rng: &mut StdRng) -> Result<Dataset, CliError> {
    if spec.vocab_size <= spec.keywords + 1 {
        return Err(CliError::Config(format!(
            "keywords generator needs vocab_size > keywords + 1 ({} <= {})",
            spec.vocab_size,
            spec.keywords + 1
        )));
    }
    if spec.seq_len < 2 {
        return Err(CliError::Config("keywords generator needs seq_len >= 2".into()));
    }
    let filler = (spec.keywords + 1)..spec.vocab_size;
    let mut seqs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % 2;
        let len = rng.random_range(2..=spec.seq_len);
        let mut seq: Vec<usize> =
            (0..len).map(|_| rng.random_range(filler.clone())).collect();
        if label == 1 {
            let pos = rng.random_range(0..len);
            seq[pos] = rng.random_range(1..=spec.keywords);
        }
        seqs.push(seq);
        ys.push(label);
    }
    Ok(Dataset {
        features: Features::Tokens { vocab: spec.vocab_size, seqs },
        labels: Labels::Class(ys),
        n_classes: 2,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
    })
}

/// Delimited text with header `label,text` (classification over hashed
/// tokens) or `target,f1,...,fn` (regression over numeric features).
fn from_file(spec: &FileSpec) -> Result<Dataset, CliError> {
    let path = Path::new(&spec.path);
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(CliError::Data(format!("{}: empty file", path.display())));
    };
    let head_fields: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut dataset = match head_fields.first().copied() {
        Some("label") if head_fields.len() == 2 && head_fields[1] == "text" => {
            let mut seqs = Vec::new();
            let mut ys = Vec::new();
            for (i, line) in lines {
                if line.is_empty() {
                    continue;
                }
                let Some((label, body)) = line.split_once(',') else {
                    return Err(CliError::Data(format!(
                        "{}: line {}: expected 'label,text'",
                        path.display(),
                        i + 1
                    )));
                };
                let y: usize = label.trim().parse().map_err(|_| {
                    CliError::Data(format!(
                        "{}: line {}: bad label '{label}'",
                        path.display(),
                        i + 1
                    ))
                })?;
                seqs.push(tokenize(body, spec.vocab_size));
                ys.push(y);
            }
            if seqs.is_empty() {
                return Err(CliError::Data(format!("{}: no data rows", path.display())));
            }
            if seqs.iter().any(|s| s.is_empty()) {
                return Err(CliError::Data(format!("{}: empty text row", path.display())));
            }
            let n_classes = ys.iter().max().copied().unwrap_or(0) + 1;
            Dataset {
                features: Features::Tokens { vocab: spec.vocab_size, seqs },
                labels: Labels::Class(ys),
                n_classes: n_classes.max(2),
                train_idx: Vec::new(),
                val_idx: Vec::new(),
            }
        }
        Some("target") if head_fields.len() >= 2 => {
            let dim = head_fields.len() - 1;
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for (i, line) in lines {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != dim + 1 {
                    return Err(CliError::Data(format!(
                        "{}: line {}: {} fields, expected {}",
                        path.display(),
                        i + 1,
                        fields.len(),
                        dim + 1
                    )));
                }
                let parse = |s: &str| -> Result<f64, CliError> {
                    s.trim().parse().map_err(|_| {
                        CliError::Data(format!(
                            "{}: line {}: bad number '{s}'",
                            path.display(),
                            i + 1
                        ))
                    })
                };
                ys.push(parse(fields[0])?);
                rows.push(fields[1..].iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?);
            }
            if rows.is_empty() {
                return Err(CliError::Data(format!("{}: no data rows", path.display())));
            }
            Dataset {
                features: Features::Dense { dim, rows },
                labels: Labels::Real(ys),
                n_classes: 1,
                train_idx: Vec::new(),
                val_idx: Vec::new(),
            }
        }
        _ => {
            return Err(CliError::Data(format!(
                "{}: header must be 'label,text' or 'target,f1,...'",
                path.display()
            )))
        }
    };

    let mut rng = StdRng::seed_from_u64(spec.seed.unwrap_or(0));
    split(&mut dataset, spec.val_fraction, &mut rng);
    Ok(dataset)
}

/// Whitespace tokenization, lowercased, FNV-1a hashed into the vocabulary.
/// Token id 0 is reserved so hashes land in `1..vocab`.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            1 + (h % (vocab as u64 - 1)) as usize
        })
        .collect()
}

fn split(data: &mut Dataset, val_fraction: f64, rng: &mut StdRng) {
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let n_train = n - n_val;
    data.train_idx = idx[..n_train].to_vec();
    data.val_idx = idx[n_train..].to_vec();
}

fn orthonormal_directions(count: usize, dim: usize, rng: &mut StdRng) -> Vec<Vec<f64>> {
    let gauss = Normal::new(0.0, 1.0).expect("unit std");
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss.sample(rng)).collect();
        // Gram-Schmidt against what we already have.
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(d) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        dirs.push(v);
    }
    dirs
}
