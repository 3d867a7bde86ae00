//! Datasets: paired (input, target) records, synthetic generators with known
//! ground-truth attribution structure, and seeded splitting.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Scalar(Vec<f64>),
    /// Labels in `0..classes`.
    Labels { labels: Vec<u32>, classes: usize },
}

/// Per-component input standardization applied to a dataset, kept so raw
/// values can be recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    dim: usize,
    targets: Targets,
    /// Logical per-sample shape, e.g. `[28, 28]` for image data. `None`
    /// means plain vectors.
    input_dims: Option<Vec<usize>>,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, dim: usize, targets: Targets) -> Result<Dataset> {
        Dataset::with_dims(inputs, dim, targets, None)
    }

    pub fn with_dims(
        inputs: Vec<f64>,
        dim: usize,
        targets: Targets,
        input_dims: Option<Vec<usize>>,
    ) -> Result<Dataset> {
        if dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be >= 1".into()));
        }
        if inputs.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "input length {} not divisible by dimension {dim}",
                inputs.len()
            )));
        }
        let n = inputs.len() / dim;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let tn = match &targets {
            Targets::Scalar(t) => t.len(),
            Targets::Labels { labels, classes } => {
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= *classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
                labels.len()
            }
        };
        if tn != n {
            return Err(Error::InvalidArgument(format!(
                "{n} inputs but {tn} targets"
            )));
        }
        if let Some(dims) = &input_dims {
            if dims.iter().product::<usize>() != dim {
                return Err(Error::InvalidArgument(format!(
                    "input dims {dims:?} do not multiply to {dim}"
                )));
            }
        }
        Ok(Dataset {
            inputs,
            dim,
            targets,
            input_dims,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Flattened input size m.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn input_dims(&self) -> Option<&[usize]> {
        self.input_dims.as_deref()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.targets, Targets::Labels { .. })
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Labels { classes, .. } => Some(*classes),
            Targets::Scalar(_) => None,
        }
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample `i` reshaped to `shape` (extent product must equal `dim`).
    pub fn input_tensor(&self, i: usize, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape.to_vec(), self.input_row(i).to_vec())
    }

    pub fn scalar_target(&self, i: usize) -> Option<f64> {
        match &self.targets {
            Targets::Scalar(t) => Some(t[i]),
            Targets::Labels { .. } => None,
        }
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels[i]),
            Targets::Scalar(_) => None,
        }
    }

    /// Subset with the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.input_row(i));
        }
        let targets = match &self.targets {
            Targets::Scalar(t) => Targets::Scalar(indices.iter().map(|&i| t[i]).collect()),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        let mut out = Dataset::with_dims(inputs, self.dim, targets, self.input_dims.clone())?;
        out.normalization = self.normalization.clone();
        Ok(out)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Standardize every input component to zero mean, unit standard
    /// deviation (population), recording the applied transform.
    pub fn standardize_inputs(&self) -> Result<Dataset> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        let mut std = vec![0.0; self.dim];
        for row in self.inputs.chunks(self.dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for row in self.inputs.chunks(self.dim) {
            for ((s, &m), &v) in std.iter_mut().zip(&mean).zip(row) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                return Err(Error::DegenerateScore(
                    "constant input component cannot be standardized".into(),
                ));
            }
        }
        let inputs = self
            .inputs
            .chunks(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(mean.iter().zip(&std))
                    .map(|(&v, (&m, &s))| (v - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut out = Dataset::with_dims(
            inputs,
            self.dim,
            self.targets.clone(),
            self.input_dims.clone(),
        )?;
        out.normalization = Some(Normalization { mean, std });
        Ok(out)
    }
}

/// `x ~ N(0, I)`, `y = w . x + bias + noise`, seeded and reproducible.
pub fn gen_linear(
    n: usize,
    m: usize,
    w: &[f64],
    bias: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("need at least 1 component".into()));
    }
    if w.len() != m {
        return Err(Error::InvalidArgument(format!(
            "weight vector length {} != dimension {m}",
            w.len()
        )));
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument("noise std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * m);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let y = w.iter().zip(&row).map(|(&wi, &xi)| wi * xi).sum::<f64>() + bias
            + noise_std * noise;
        inputs.extend_from_slice(&row);
        targets.push(y);
    }
    Dataset::new(inputs, m, Targets::Scalar(targets))
}

/// Statistic computed over the planted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionStatistic {
    Mean,
    /// Population standard deviation.
    Std,
}

/// Uniform-noise images of `side x side` pixels whose target is a statistic
/// over a fixed pixel region; only region pixels carry signal.
pub fn gen_planted_roi(
    n: usize,
    side: usize,
    region: &[usize],
    statistic: RegionStatistic,
    seed: u64,
) -> Result<Dataset> {
    let m = side * side;
    if region.is_empty() {
        return Err(Error::InvalidArgument("region must be non-empty".into()));
    }
    if let Some(&bad) = region.iter().find(|&&i| i >= m) {
        return Err(Error::InvalidArgument(format!(
            "region index {bad} outside {side}x{side} grid"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * m);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        targets.push(region_statistic(&row, region, statistic));
        inputs.extend_from_slice(&row);
    }
    let mut ds = Dataset::with_dims(
        inputs,
        m,
        Targets::Scalar(targets),
        Some(vec![side, side]),
    )?;
    ds.normalization = None;
    Ok(ds)
}

pub fn region_statistic(row: &[f64], region: &[usize], statistic: RegionStatistic) -> f64 {
    let k = region.len() as f64;
    let mean = region.iter().map(|&i| row[i]).sum::<f64>() / k;
    match statistic {
        RegionStatistic::Mean => mean,
        RegionStatistic::Std => {
            let var = region
                .iter()
                .map(|&i| (row[i] - mean) * (row[i] - mean))
                .sum::<f64>()
                / k;
            var.sqrt()
        }
    }
}

/// Indices of a `h x w` block with top-left corner `(row, col)` on a
/// `side x side` grid.
pub fn block_region(side: usize, row: usize, col: usize, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for r in row..row + h {
        for c in col..col + w {
            out.push(r * side + c);
        }
    }
    out
}

/// Disjoint seeded splits. Every fraction must be positive and the sum must
/// not exceed 1. All but the last split are floor-sized; when the fractions
/// sum to 1 the last split absorbs the rounding remainder.
pub fn split(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no split fractions given".into()));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::InvalidArgument(
            "split fractions must be positive".into(),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {total} > 1"
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64) as usize).collect();
    if (total - 1.0).abs() <= 1e-9 {
        let assigned: usize = sizes[..sizes.len() - 1].iter().sum();
        *sizes.last_mut().unwrap() = n - assigned;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(
            "a requested split would be empty".into(),
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for s in sizes {
        out.push(data.subset(&order[at..at + s])?);
        at += s;
    }
    Ok(out)
}
