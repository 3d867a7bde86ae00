//! Dataset-wise attribution: the Pearson prediction score decomposed over
//! input components.
//!
//! For a supporting per-sample attribution g that satisfies completeness,
//! `h_j = mean_i[ g_ij * (y_i - mean(y)) ] / (std(f) * std(y))` sums (up to
//! the supporting method's quadrature error) to the correlation between
//! predictions and targets. All moments are population moments (divide by
//! n); mixing conventions would break the identity.

use crate::attribution::{
    ig_random_baselines_multi, shapley_set_multi, AttributionMethod, BaselineSet,
};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::model::Differentiable;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Samples aggregated per parallel task; fixed so the reduction order (and
/// the result) is independent of thread count.
const SAMPLE_CHUNK: usize = 16;

/// Population Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 2 points".into(),
        ));
    }
    let (mean_a, std_a) = moments(a);
    let (mean_b, std_b) = moments(b);
    if std_a == 0.0 || std_b == 0.0 {
        return Err(Error::DegenerateScore(
            "zero-variance series has no correlation".into(),
        ));
    }
    let n = a.len() as f64;
    let cov = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - mean_a) * (y - mean_b))
        .sum::<f64>()
        / n;
    Ok(cov / (std_a * std_b))
}

/// Population mean and standard deviation.
pub fn moments(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// How the per-sample attributions under a report were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMeta {
    pub attribution: AttributionMethod,
    pub steps: Option<usize>,
    pub permutations: Option<usize>,
    pub baseline_count: usize,
    pub baseline_seed: Option<u64>,
    /// Seed of the permutation sampler (sampled Shapley only).
    pub sampling_seed: Option<u64>,
}

/// Dataset-wise attribution report: per-component values whose sum matches
/// the prediction score up to the recorded residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgcReport {
    /// h_j, one per flattened input component.
    pub values: Vec<f64>,
    /// Pearson correlation between predictions and targets.
    pub score: f64,
    /// sum(values) - score.
    pub residual: f64,
    /// Number of samples aggregated.
    pub samples: usize,
    /// Class the report refers to (categorical runs only).
    pub class_index: Option<usize>,
    pub method: MethodMeta,
}

impl IgcReport {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<IgcReport> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            section: "report".into(),
            offset: None,
            message: e.to_string(),
        })
    }

    /// Flat `component,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,value\n");
        for (j, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{j},{v}\n"));
        }
        out
    }
}

/// Named, possibly overlapping index sets over the input components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    rois: Vec<(String, Vec<usize>)>,
}

impl RoiSpec {
    pub fn new(rois: Vec<(String, Vec<usize>)>) -> Result<RoiSpec> {
        for (i, (name, _)) in rois.iter().enumerate() {
            if rois[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::Roi(format!("duplicate roi name '{name}'")));
            }
        }
        Ok(RoiSpec { rois })
    }

    pub fn rois(&self) -> &[(String, Vec<usize>)] {
        &self.rois
    }

    /// True when some component belongs to more than one ROI.
    pub fn has_overlap(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.rois
            .iter()
            .flat_map(|(_, idx)| idx.iter())
            .any(|&i| !seen.insert(i))
    }

    /// True when the ROIs exactly partition `0..m`.
    pub fn is_partition(&self, m: usize) -> bool {
        let mut seen = vec![false; m];
        for (_, idx) in &self.rois {
            for &i in idx {
                if i >= m || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Sum report values over each ROI. For a partition of the components the
/// ROI values sum exactly to the report total (fixed-order summation).
pub fn roi_sum(report: &IgcReport, rois: &RoiSpec) -> Result<Vec<(String, f64)>> {
    let m = report.values.len();
    rois.rois
        .iter()
        .map(|(name, idx)| {
            let mut sum = 0.0;
            for &i in idx {
                if i >= m {
                    return Err(Error::Roi(format!(
                        "roi '{name}' index {i} out of range for {m} components"
                    )));
                }
                sum += report.values[i];
            }
            Ok((name.clone(), sum))
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Support {
    Ig { steps: usize },
    Bs { permutations: Option<usize>, seed: u64 },
}

/// A finished dataset-wise computation: one report per requested output, and
/// optionally the full per-sample attribution matrix.
#[derive(Debug, Clone)]
pub struct IgcComputation {
    pub reports: Vec<IgcReport>,
    /// Packed `[sample][report][component]` when collection was requested.
    pub attributions: Option<Vec<f64>>,
}

/// Integrated Gradient Correlation of output `k` against scalar targets.
pub fn igc<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    steps: usize,
    k: usize,
) -> Result<IgcReport> {
    let targets = scalar_targets(data)?;
    let mut out = aggregate(
        f,
        data,
        baselines,
        Support::Ig { steps },
        &[k],
        &[targets],
        &[None],
        false,
    )?;
    Ok(out.reports.remove(0))
}

/// Per-class Integrated Gradient Correlation for a categorical dataset: for
/// class k the targets are the one-hot components and the predictions the
/// model probabilities p_k.
pub fn igc_categorical<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    steps: usize,
) -> Result<Vec<IgcReport>> {
    let (ks, targets, class_index) = one_hot_targets(f, data)?;
    Ok(aggregate(
        f,
        data,
        baselines,
        Support::Ig { steps },
        &ks,
        &targets,
        &class_index,
        false,
    )?
    .reports)
}

/// Like `igc` but carrying the per-sample attribution matrix as well.
#[allow(clippy::too_many_arguments)]
pub fn igc_detailed<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    steps: usize,
) -> Result<IgcComputation> {
    if data.is_categorical() {
        let (ks, targets, class_index) = one_hot_targets(f, data)?;
        aggregate(
            f,
            data,
            baselines,
            Support::Ig { steps },
            &ks,
            &targets,
            &class_index,
            true,
        )
    } else {
        let targets = scalar_targets(data)?;
        aggregate(
            f,
            data,
            baselines,
            Support::Ig { steps },
            &[0],
            &[targets],
            &[None],
            true,
        )
    }
}

/// Correlation decomposition supported by Baseline Shapley instead of
/// Integrated Gradients: exact Shapley when `permutations` is `None`
/// (inputs limited to 20 components), permutation-sampled otherwise.
pub fn bs_correlation<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    k: usize,
    permutations: Option<usize>,
    seed: u64,
) -> Result<IgcReport> {
    let targets = scalar_targets(data)?;
    let mut out = aggregate(
        f,
        data,
        baselines,
        Support::Bs { permutations, seed },
        &[k],
        &[targets],
        &[None],
        false,
    )?;
    Ok(out.reports.remove(0))
}

/// Per-class Baseline Shapley Correlation for a categorical dataset.
pub fn bs_correlation_categorical<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    permutations: Option<usize>,
    seed: u64,
) -> Result<Vec<IgcReport>> {
    let (ks, targets, class_index) = one_hot_targets(f, data)?;
    Ok(aggregate(
        f,
        data,
        baselines,
        Support::Bs { permutations, seed },
        &ks,
        &targets,
        &class_index,
        false,
    )?
    .reports)
}

fn scalar_targets(data: &Dataset) -> Result<Vec<f64>> {
    match data.targets() {
        Targets::Scalar(t) => Ok(t.clone()),
        Targets::Labels { .. } => Err(Error::TaskMismatch),
    }
}

type OneHot = (Vec<usize>, Vec<Vec<f64>>, Vec<Option<usize>>);

fn one_hot_targets<F: Differentiable>(f: &F, data: &Dataset) -> Result<OneHot> {
    let classes = data.classes().ok_or(Error::TaskMismatch)?;
    if classes > f.output_dim() {
        return Err(Error::TaskMismatch);
    }
    let n = data.len();
    let mut counts = vec![0usize; classes];
    for i in 0..n {
        counts[data.label(i).unwrap() as usize] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        if c < 2 {
            return Err(Error::DegenerateScore(format!(
                "class {k} present {c} time(s); need at least 2 for a per-class score"
            )));
        }
    }
    let ks: Vec<usize> = (0..classes).collect();
    let targets: Vec<Vec<f64>> = ks
        .iter()
        .map(|&k| {
            (0..n)
                .map(|i| if data.label(i).unwrap() as usize == k { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let class_index = ks.iter().map(|&k| Some(k)).collect();
    Ok((ks, targets, class_index))
}

/// Evaluation outputs for the whole dataset, row-major `[n, output_dim]`.
fn all_outputs<F: Differentiable>(f: &F, data: &Dataset) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let n = data.len();
    let mut out = Vec::with_capacity(n * f.output_dim());
    let mut at = 0;
    while at < n {
        let rows = CHUNK.min(n - at);
        let points: Vec<Tensor> = (at..at + rows)
            .map(|i| data.input_tensor(i, f.input_shape()))
            .collect::<Result<Vec<_>>>()?;
        out.extend(f.outputs_batch(&points)?);
        at += rows;
    }
    Ok(out)
}

/// Per-sample seed for sampled-Shapley permutations (mixed so neighboring
/// samples draw unrelated orders).
fn sample_seed(seed: u64, sample: usize) -> u64 {
    seed ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[allow(clippy::too_many_arguments)]
fn aggregate<F: Differentiable>(
    f: &F,
    data: &Dataset,
    baselines: &BaselineSet,
    support: Support,
    ks: &[usize],
    targets: &[Vec<f64>],
    class_index: &[Option<usize>],
    collect: bool,
) -> Result<IgcComputation> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "dataset-wise attribution needs at least 2 samples".into(),
        ));
    }
    let m: usize = f.input_shape().iter().product();
    if data.dim() != m {
        return Err(Error::ShapeMismatch {
            expected: f.input_shape().to_vec(),
            actual: vec![data.dim()],
        });
    }
    let kdim = f.output_dim();
    for &k in ks {
        if k >= kdim {
            return Err(Error::OutputIndexOutOfRange {
                index: k,
                outputs: kdim,
            });
        }
    }

    // Prediction and target moments.
    let preds = all_outputs(f, data)?;
    let mut stats = Vec::with_capacity(ks.len());
    for (ki, &k) in ks.iter().enumerate() {
        let series: Vec<f64> = (0..n).map(|i| preds[i * kdim + k]).collect();
        let (_, std_f) = moments(&series);
        let (mean_y, std_y) = moments(&targets[ki]);
        let score = pearson(&series, &targets[ki]).map_err(|e| match (e, class_index[ki]) {
            (Error::DegenerateScore(msg), Some(c)) => {
                Error::DegenerateScore(format!("class {c}: {msg}"))
            }
            (e, _) => e,
        })?;
        stats.push((std_f, mean_y, std_y, score));
    }

    // acc[ki][j] = sum_i g_ij * (y_i - mean_y), accumulated per fixed-size
    // sample chunk; chunks are reduced in order so the result is independent
    // of the parallel schedule.
    let chunk_starts: Vec<usize> = (0..n).step_by(SAMPLE_CHUNK).collect();
    let chunk_results: Vec<(Vec<f64>, Vec<f64>)> = chunk_starts
        .par_iter()
        .map(|&start| -> Result<(Vec<f64>, Vec<f64>)> {
            let end = (start + SAMPLE_CHUNK).min(n);
            let mut partial = vec![0.0; ks.len() * m];
            let mut collected = if collect {
                Vec::with_capacity((end - start) * ks.len() * m)
            } else {
                Vec::new()
            };
            for i in start..end {
                let x = data.input_tensor(i, f.input_shape())?;
                let g: Vec<f64> = match support {
                    Support::Ig { steps } => {
                        let maps = ig_random_baselines_multi(f, &x, baselines, steps, ks)?;
                        let mut packed = Vec::with_capacity(ks.len() * m);
                        for map in maps {
                            packed.extend(map.values);
                        }
                        packed
                    }
                    Support::Bs { permutations, seed } => shapley_set_multi(
                        f,
                        &x,
                        baselines,
                        permutations,
                        sample_seed(seed, i),
                        ks,
                    )?,
                };
                for (ki, &(_, mean_y, _, _)) in stats.iter().enumerate() {
                    let w = targets[ki][i] - mean_y;
                    let dst = &mut partial[ki * m..(ki + 1) * m];
                    let src = &g[ki * m..(ki + 1) * m];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v * w;
                    }
                }
                if collect {
                    collected.extend_from_slice(&g);
                }
            }
            Ok((partial, collected))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = vec![0.0; ks.len() * m];
    let mut attributions = if collect {
        Some(Vec::with_capacity(n * ks.len() * m))
    } else {
        None
    };
    for (partial, collected) in chunk_results {
        for (a, v) in acc.iter_mut().zip(partial) {
            *a += v;
        }
        if let Some(all) = attributions.as_mut() {
            all.extend(collected);
        }
    }

    let (baseline_seed, sampling_seed, method, steps, permutations) = match support {
        Support::Ig { steps } => (
            baselines.seed(),
            None,
            AttributionMethod::IntegratedGradients,
            Some(steps),
            None,
        ),
        Support::Bs { permutations, seed } => (
            baselines.seed(),
            permutations.map(|_| seed),
            match permutations {
                None => AttributionMethod::BaselineShapleyExact,
                Some(_) => AttributionMethod::BaselineShapleySampled,
            },
            None,
            permutations,
        ),
    };

    let reports = ks
        .iter()
        .enumerate()
        .map(|(ki, _)| {
            let (std_f, _, std_y, score) = stats[ki];
            let norm = 1.0 / (n as f64 * std_f * std_y);
            let values: Vec<f64> = acc[ki * m..(ki + 1) * m].iter().map(|&v| v * norm).collect();
            let residual = values.iter().sum::<f64>() - score;
            IgcReport {
                values,
                score,
                residual,
                samples: n,
                class_index: class_index[ki],
                method: MethodMeta {
                    attribution: method,
                    steps,
                    permutations,
                    baseline_count: baselines.len(),
                    baseline_seed,
                    sampling_seed,
                },
            }
        })
        .collect();

    Ok(IgcComputation {
        reports,
        attributions,
    })
}
