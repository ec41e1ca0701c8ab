//! Synthetic multi-domain datasets with controllable shift, and the
//! split/batch/standardize utilities used by training and streaming.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// Two interleaved half circles rotated by `domain_param` degrees.
    RotatedMoons,
    /// Gaussian class clusters translated by `domain_param` along the
    /// diagonal, with feature 0 stretched by `1 + domain_param / 10`.
    ShiftedBlobs { classes: usize, dim: usize },
}

impl Family {
    pub fn num_classes(&self) -> usize {
        match self {
            Family::RotatedMoons => 2,
            Family::ShiftedBlobs { classes, .. } => *classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Family::RotatedMoons => 2,
            Family::ShiftedBlobs { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub family: Family,
    pub domain_param: f64,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::Input(format!(
                "a domain needs at least 10 samples, got {}",
                self.n_samples
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Input(format!(
                "invalid noise sigma {}",
                self.noise_sigma
            )));
        }
        if let Family::ShiftedBlobs { classes, dim } = self.family {
            if classes < 2 || dim == 0 {
                return Err(Error::Input(
                    "blobs need ≥ 2 classes and ≥ 1 dimension".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension {
                op: "labeled_set",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Concatenates sets with equal feature width.
    pub fn concat(parts: &[&LabeledSet]) -> Result<LabeledSet> {
        let xs: Vec<&Tensor> = parts.iter().map(|p| &p.x).collect();
        let x = Tensor::vstack(&xs)?;
        let y = parts.iter().flat_map(|p| p.y.iter().copied()).collect();
        LabeledSet::new(x, y)
    }
}

fn label_counts(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

fn rotate(x: f64, y: f64, degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Two-moons layout (outer arc `(cos t, sin t)`, inner arc
/// `(1 − cos t, ½ − sin t)`, `t ∈ [0, π]`), isotropic Gaussian noise, then a
/// rotation about the origin by `domain_param` degrees.
pub fn make_rotated_moons(spec: &DomainSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = Uniform::new_inclusive(0.0, std::f64::consts::PI).expect("valid range");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let counts = label_counts(spec.n_samples, 2);
    let mut data = Vec::with_capacity(spec.n_samples * 2);
    let mut y = Vec::with_capacity(spec.n_samples);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let t: f64 = angle.sample(&mut rng);
            let (mut px, mut py) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            if spec.noise_sigma > 0.0 {
                px += noise.sample(&mut rng);
                py += noise.sample(&mut rng);
            }
            let (rx, ry) = rotate(px, py, spec.domain_param);
            data.extend([rx, ry]);
            y.push(class);
        }
    }
    LabeledSet::new(Tensor::new(vec![spec.n_samples, 2], data)?, y)
}

/// Fixed class means for the blobs family: evenly spaced on a circle of
/// radius 3 in the first two coordinates (on a line when `dim == 1`).
pub fn blob_class_means(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = 3.0 * c as f64;
            } else {
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                m[0] = 3.0 * a.cos();
                m[1] = 3.0 * a.sin();
            }
            m
        })
        .collect()
}

pub fn make_shifted_blobs(spec: &DomainSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let Family::ShiftedBlobs { classes, dim } = spec.family else {
        return Err(Error::Input(
            "make_shifted_blobs needs the blobs family".into(),
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let means = blob_class_means(classes, dim);
    let unit = 1.0 / (dim as f64).sqrt();
    let stretch = 1.0 + spec.domain_param / 10.0;
    let mut data = Vec::with_capacity(spec.n_samples * dim);
    let mut y = Vec::with_capacity(spec.n_samples);
    for (class, &count) in label_counts(spec.n_samples, classes).iter().enumerate() {
        for _ in 0..count {
            let mut p: Vec<f64> = means[class]
                .iter()
                .map(|m| {
                    m + if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            p[0] *= stretch;
            for v in &mut p {
                *v += spec.domain_param * unit;
            }
            data.extend(p);
            y.push(class);
        }
    }
    LabeledSet::new(Tensor::new(vec![spec.n_samples, dim], data)?, y)
}

pub fn generate(spec: &DomainSpec) -> Result<LabeledSet> {
    match spec.family {
        Family::RotatedMoons => make_rotated_moons(spec),
        Family::ShiftedBlobs { .. } => make_shifted_blobs(spec),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub fraction: f64,
}

/// Seeded shuffle then prefix split; the training part has
/// `round(fraction · n)` rows.
pub fn split(set: &LabeledSet, fraction: f64, seed: u64) -> Result<SplitDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let n = set.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Input(format!(
            "split of {n} rows at {fraction} leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitDataset {
        train: set.subset(&idx[..n_train]),
        val: set.subset(&idx[n_train..]),
        fraction,
    })
}

/// Seeded permutation of `0..n` cut into batches of `batch_size`. The short
/// tail batch is dropped when `drop_last` (training) and kept otherwise
/// (streaming, evaluation).
pub fn batch_plan(
    n: usize,
    batch_size: usize,
    epoch_seed: u64,
    drop_last: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    idx.chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Contiguous batches in the given order (no shuffling), tail kept.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Per-feature affine standardization fitted on pooled source data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(sets: &[&LabeledSet]) -> Result<Self> {
        let pooled = LabeledSet::concat(sets)?;
        let (n, d) = (pooled.len() as f64, pooled.dim());
        let mut mean = vec![0.0; d];
        for i in 0..pooled.len() {
            for (m, v) in mean.iter_mut().zip(pooled.x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..pooled.len() {
            for ((s, v), m) in var.iter_mut().zip(pooled.x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, set: &LabeledSet) -> LabeledSet {
        let d = self.mean.len();
        let mut x = set.x.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        LabeledSet {
            x,
            y: set.y.clone(),
        }
    }
}

/// Writes `x0..x{d−1},label,domain` rows.
pub fn write_csv(path: &Path, domains: &[(usize, &LabeledSet)]) -> Result<()> {
    let dim = domains
        .first()
        .map(|(_, s)| s.dim())
        .ok_or_else(|| Error::Input("nothing to write".into()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = (0..dim)
        .map(|j| format!("x{j}"))
        .chain(["label".to_string(), "domain".to_string()])
        .collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (domain, set) in domains {
        for i in 0..set.len() {
            let mut fields: Vec<String> = set.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            fields.push(set.y[i].to_string());
            fields.push(domain.to_string());
            writeln!(w, "{}", fields.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the format written by [`write_csv`], grouped by domain index.
pub fn read_csv(path: &Path) -> Result<BTreeMap<usize, LabeledSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let dim = cols.len().saturating_sub(2);
    let header_ok = cols.len() >= 3
        && cols[dim] == "label"
        && cols[dim + 1] == "domain"
        && (0..dim).all(|j| cols[j] == format!("x{j}"));
    if !header_ok {
        return Err(parse_err(1, format!("unexpected header `{header}`")));
    }
    let mut rows: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(
                lineno + 2,
                format!("expected {} fields", dim + 2),
            ));
        }
        let mut xs = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            xs.push(
                f.parse::<f64>()
                    .map_err(|e| parse_err(lineno + 2, format!("`{f}`: {e}")))?,
            );
        }
        let label = fields[dim]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno + 2, format!("label: {e}")))?;
        let domain = fields[dim + 1]
            .parse::<usize>()
            .map_err(|e| parse_err(lineno + 2, format!("domain: {e}")))?;
        let entry = rows.entry(domain).or_default();
        entry.0.extend(xs);
        entry.1.push(label);
    }
    rows.into_iter()
        .map(|(d, (x, y))| {
            let n = y.len();
            Ok((d, LabeledSet::new(Tensor::new(vec![n, dim], x)?, y)?))
        })
        .collect()
}
