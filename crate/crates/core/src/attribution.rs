//! Per-sample attribution methods satisfying the completeness axiom:
//! Integrated Gradients with single or dataset-sampled random baselines, and
//! Baseline Shapley in exact and permutation-sampled form.
//!
//! All averages run in a fixed order (steps, then baselines, then
//! permutations), so results do not depend on scheduling.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Differentiable;
use crate::tensor::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Rows per batched gradient/forward call inside the attribution loops.
const CHUNK_ROWS: usize = 128;

/// Inputs above this size are rejected by exact Shapley
/// (cost grows as m * 2^(m-1) marginal evaluations).
pub const EXACT_SHAPLEY_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMethod {
    IntegratedGradients,
    BaselineShapleyExact,
    BaselineShapleySampled,
}

/// Per-component contribution vector for one prediction.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    /// One value per flattened input component.
    pub values: Vec<f64>,
    pub method: AttributionMethod,
    /// Interpolation steps (Integrated Gradients only).
    pub steps: Option<usize>,
    /// Permutation count (sampled Baseline Shapley only).
    pub permutations: Option<usize>,
    pub baseline_count: usize,
    /// Attributed output index.
    pub target: usize,
    /// Dataset sample id, when the input came from a dataset.
    pub sample: Option<usize>,
    /// Completeness residual: sum(values) - (f_k(x) - mean baseline f_k).
    pub residual: Option<f64>,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineSource {
    DatasetSampled,
    Explicit,
}

/// A fixed set of reference inputs. For dataset-wise aggregation the set is
/// drawn once and shared by every sample, which keeps the mean baseline
/// prediction constant across the dataset.
#[derive(Debug, Clone)]
pub struct BaselineSet {
    baselines: Vec<Tensor>,
    seed: Option<u64>,
    source: BaselineSource,
}

impl BaselineSet {
    pub fn explicit(baselines: Vec<Tensor>) -> Result<BaselineSet> {
        if baselines.is_empty() {
            return Err(Error::InvalidArgument("baseline set is empty".into()));
        }
        let shape = baselines[0].shape().to_vec();
        if baselines.iter().any(|b| b.shape() != shape) {
            return Err(Error::InvalidArgument(
                "baselines must share one shape".into(),
            ));
        }
        Ok(BaselineSet {
            baselines,
            seed: None,
            source: BaselineSource::Explicit,
        })
    }

    /// Single all-zeros baseline (e.g. a black image).
    pub fn zero(shape: &[usize]) -> BaselineSet {
        BaselineSet {
            baselines: vec![Tensor::zeros(shape.to_vec())],
            seed: None,
            source: BaselineSource::Explicit,
        }
    }

    /// Draw `count` baselines uniformly with replacement from `data`,
    /// reshaped to `shape`. Pass `exclude` to keep one sample (the one being
    /// attributed) out of the draw.
    pub fn sample(
        data: &Dataset,
        shape: &[usize],
        count: usize,
        seed: u64,
        exclude: Option<usize>,
    ) -> Result<BaselineSet> {
        if count == 0 {
            return Err(Error::InvalidArgument("baseline count must be >= 1".into()));
        }
        let pool: Vec<usize> = (0..data.len()).filter(|i| Some(*i) != exclude).collect();
        if pool.is_empty() {
            return Err(Error::InvalidArgument(
                "no samples left to draw baselines from".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let baselines = (0..count)
            .map(|_| {
                let &i = pool.choose(&mut rng).expect("non-empty pool");
                data.input_tensor(i, shape)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BaselineSet {
            baselines,
            seed: Some(seed),
            source: BaselineSource::DatasetSampled,
        })
    }

    pub fn baselines(&self) -> &[Tensor] {
        &self.baselines
    }

    pub fn len(&self) -> usize {
        self.baselines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baselines.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn source(&self) -> BaselineSource {
        self.source
    }
}

fn check_point<F: Differentiable + ?Sized>(f: &F, x: &Tensor) -> Result<()> {
    if x.shape() != f.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: f.input_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_target<F: Differentiable + ?Sized>(f: &F, k: usize) -> Result<()> {
    if k >= f.output_dim() {
        return Err(Error::OutputIndexOutOfRange {
            index: k,
            outputs: f.output_dim(),
        });
    }
    Ok(())
}

/// Sum over t = 1..=steps of the input gradients at `b + (t/s)(x - b)` for
/// every baseline and every requested output, sweeping the whole
/// (baseline, step) grid in fixed lexicographic order through shared batched
/// passes. Packed `[baseline][ks][m]`.
fn ig_gradient_sums<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baselines: &[Tensor],
    steps: usize,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let m = x.numel();
    let nb = baselines.len();
    let mut sums = vec![0.0; nb * ks.len() * m];
    let total = nb * steps;
    let mut at = 0;
    while at < total {
        let rows = CHUNK_ROWS.min(total - at);
        let points: Vec<Tensor> = (at..at + rows)
            .map(|idx| {
                let (b, t) = (idx / steps, idx % steps + 1);
                baselines[b].lerp(x, t as f64 / steps as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = f.input_gradients_batch(&points, ks)?;
        for row in 0..rows {
            let b = (at + row) / steps;
            for ki in 0..ks.len() {
                let src = &grads[(row * ks.len() + ki) * m..(row * ks.len() + ki + 1) * m];
                let dst = &mut sums[(b * ks.len() + ki) * m..(b * ks.len() + ki + 1) * m];
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d += g;
                }
            }
        }
        at += rows;
    }
    Ok(sums)
}

/// Integrated Gradients against several baselines for several outputs at
/// once, sharing the interpolation sweeps. Values are the mean over the
/// baseline set, in set order.
pub fn ig_random_baselines_multi<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baselines: &BaselineSet,
    steps: usize,
    ks: &[usize],
) -> Result<Vec<AttributionMap>> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "integrated gradients needs steps >= 1".into(),
        ));
    }
    check_point(f, x)?;
    for &k in ks {
        check_target(f, k)?;
    }
    let m = x.numel();
    for baseline in baselines.baselines() {
        check_point(f, baseline)?;
    }
    let sums = ig_gradient_sums(f, x, baselines.baselines(), steps, ks)?;
    let scale = 1.0 / steps as f64;
    let mut acc = vec![0.0; ks.len() * m];
    for (b, baseline) in baselines.baselines().iter().enumerate() {
        for ki in 0..ks.len() {
            let dst = &mut acc[ki * m..(ki + 1) * m];
            let src = &sums[(b * ks.len() + ki) * m..(b * ks.len() + ki + 1) * m];
            for ((a, &s), (&xv, &bv)) in dst
                .iter_mut()
                .zip(src)
                .zip(x.data().iter().zip(baseline.data()))
            {
                *a += (xv - bv) * scale * s;
            }
        }
    }
    let inv_b = 1.0 / baselines.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv_b;
    }

    // Completeness bookkeeping: f_k(x) and the mean baseline prediction.
    let fx = f.outputs(x)?;
    let base_out = f.outputs_batch(baselines.baselines())?;
    let kdim = f.output_dim();

    Ok(ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let values = acc[ki * m..(ki + 1) * m].to_vec();
            let mean_base = base_out.iter().skip(k).step_by(kdim).sum::<f64>() * inv_b;
            let residual = values.iter().sum::<f64>() - (fx[k] - mean_base);
            AttributionMap {
                values,
                method: AttributionMethod::IntegratedGradients,
                steps: Some(steps),
                permutations: None,
                baseline_count: baselines.len(),
                target: k,
                sample: None,
                residual: Some(residual),
            }
        })
        .collect())
}

/// Riemann-sum Integrated Gradients for output `k`, right-endpoint scheme:
/// `values_j = ((x_j - b_j)/s) * sum_{t=1..s} d f_k(b + (t/s)(x-b)) / dx_j`.
pub fn integrated_gradients<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
    k: usize,
) -> Result<AttributionMap> {
    let set = BaselineSet::explicit(vec![baseline.clone()])?;
    let mut maps = ig_random_baselines_multi(f, x, &set, steps, &[k])?;
    Ok(maps.remove(0))
}

/// Integrated Gradients averaged over a baseline set (the empirical form of
/// the expectation over random baselines).
pub fn ig_random_baselines<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baselines: &BaselineSet,
    steps: usize,
    k: usize,
) -> Result<AttributionMap> {
    let mut maps = ig_random_baselines_multi(f, x, baselines, steps, &[k])?;
    Ok(maps.remove(0))
}

/// Recompute the completeness residual of `map` against the model:
/// `sum_j values_j - (f_k(x) - mean_b f_k(b))`. Near zero for exact path
/// methods, O(1/s) for Riemann-sum Integrated Gradients.
pub fn completeness_residual<F: Differentiable>(
    map: &AttributionMap,
    f: &F,
    x: &Tensor,
    baselines: &BaselineSet,
    k: usize,
) -> Result<f64> {
    check_point(f, x)?;
    check_target(f, k)?;
    let fx = f.outputs(x)?[k];
    let kdim = f.output_dim();
    let base_out = f.outputs_batch(baselines.baselines())?;
    let mean_base =
        base_out.iter().skip(k).step_by(kdim).sum::<f64>() / baselines.len() as f64;
    Ok(map.total() - (fx - mean_base))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for i in 0..k {
        num *= (n - i) as u128;
        den *= (i + 1) as u128;
    }
    num / den
}

/// Exact Baseline Shapley values for all outputs in `ks`, sharing the
/// 2^m subset evaluations. Packed `[ks][m]` plus the raw f(x), f(baseline)
/// outputs for completeness bookkeeping.
fn shapley_exact_multi<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let m = x.numel();
    if m > EXACT_SHAPLEY_LIMIT {
        return Err(Error::ShapleySizeLimit {
            limit: EXACT_SHAPLEY_LIMIT,
            actual: m,
        });
    }
    let masks = 1usize << m;
    let kdim = f.output_dim();

    // f over every subset input: component j comes from x when bit j of the
    // mask is set, from the baseline otherwise.
    let mut outputs = vec![0.0; masks * kdim];
    let mut mask = 0usize;
    while mask < masks {
        let rows = CHUNK_ROWS.min(masks - mask);
        let points: Vec<Tensor> = (mask..mask + rows)
            .map(|mk| {
                let data: Vec<f64> = (0..m)
                    .map(|j| {
                        if mk & (1 << j) != 0 {
                            x.data()[j]
                        } else {
                            baseline.data()[j]
                        }
                    })
                    .collect();
                Tensor::from_vec(x.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f.outputs_batch(&points)?;
        outputs[mask * kdim..(mask + rows) * kdim].copy_from_slice(&out);
        mask += rows;
    }

    // weight(|S|) = |S|! (m-|S|-1)! / m! = 1 / (m * C(m-1, |S|))
    let weights: Vec<f64> = (0..m)
        .map(|s| 1.0 / (m as f64 * binomial(m - 1, s) as f64))
        .collect();

    let mut values = vec![0.0; ks.len() * m];
    for j in 0..m {
        let bit = 1usize << j;
        for mask in 0..masks {
            if mask & bit != 0 {
                continue;
            }
            let w = weights[(mask as u64).count_ones() as usize];
            for (ki, &k) in ks.iter().enumerate() {
                let gain = outputs[(mask | bit) * kdim + k] - outputs[mask * kdim + k];
                values[ki * m + j] += w * gain;
            }
        }
    }
    Ok(values)
}

/// Exact Baseline Shapley attribution of output `k` (rejects m > 20).
pub fn baseline_shapley_exact<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    k: usize,
) -> Result<AttributionMap> {
    check_point(f, x)?;
    check_point(f, baseline)?;
    check_target(f, k)?;
    let values_packed = shapley_exact_multi(f, x, baseline, &[k])?;
    let residual =
        values_packed.iter().sum::<f64>() - (f.outputs(x)?[k] - f.outputs(baseline)?[k]);
    Ok(AttributionMap {
        values: values_packed,
        method: AttributionMethod::BaselineShapleyExact,
        steps: None,
        permutations: None,
        baseline_count: 1,
        target: k,
        sample: None,
        residual: Some(residual),
    })
}

/// Marginal contributions along `permutations` seeded random activation
/// orders, for all outputs in `ks`, sharing the prefix forward sweeps.
/// Packed `[ks][m]`.
fn shapley_sampled_multi<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    permutations: usize,
    seed: u64,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let m = x.numel();
    let kdim = f.output_dim();
    let mut acc = vec![0.0; ks.len() * m];
    let mut perm: Vec<usize> = (0..m).collect();

    for p in 0..permutations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        perm.sort_unstable();
        perm.shuffle(&mut rng);

        // Prefix walk: state_t flips components perm[0..t] from the baseline
        // to x. Evaluate all m+1 states in order, chunked.
        let mut state = baseline.data().to_vec();
        let mut prev: Option<Vec<f64>> = None;
        let mut t = 0usize;
        while t <= m {
            let rows = CHUNK_ROWS.min(m + 1 - t);
            let mut points = Vec::with_capacity(rows);
            for ti in t..t + rows {
                if ti > 0 {
                    state[perm[ti - 1]] = x.data()[perm[ti - 1]];
                }
                points.push(Tensor::from_vec(x.shape().to_vec(), state.clone())?);
            }
            let out = f.outputs_batch(&points)?;
            for (row, ti) in (t..t + rows).enumerate() {
                let cur = &out[row * kdim..(row + 1) * kdim];
                if ti > 0 {
                    let j = perm[ti - 1];
                    let prev = prev.as_ref().expect("t=0 row seen first");
                    for (ki, &k) in ks.iter().enumerate() {
                        acc[ki * m + j] += cur[k] - prev[k];
                    }
                }
                prev = Some(cur.to_vec());
            }
            t += rows;
        }
    }
    let inv = 1.0 / permutations as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Monte-Carlo Baseline Shapley: the mean of marginal contributions over
/// seeded random permutations. Completeness holds exactly per permutation
/// (the marginals telescope), hence in the average.
pub fn baseline_shapley_sampled<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baseline: &Tensor,
    permutations: usize,
    seed: u64,
    k: usize,
) -> Result<AttributionMap> {
    if permutations == 0 {
        return Err(Error::InvalidArgument(
            "sampled Shapley needs permutations >= 1".into(),
        ));
    }
    check_point(f, x)?;
    check_point(f, baseline)?;
    check_target(f, k)?;
    let values = shapley_sampled_multi(f, x, baseline, permutations, seed, &[k])?;
    let residual = values.iter().sum::<f64>() - (f.outputs(x)?[k] - f.outputs(baseline)?[k]);
    Ok(AttributionMap {
        values,
        method: AttributionMethod::BaselineShapleySampled,
        steps: None,
        permutations: Some(permutations),
        baseline_count: 1,
        target: k,
        sample: None,
        residual: Some(residual),
    })
}

/// Baseline-set Shapley for several outputs: mean of per-baseline Shapley
/// values over the set, exact when `permutations` is `None` (m <= 20),
/// otherwise permutation-sampled. Used by the dataset-wise aggregation.
pub(crate) fn shapley_set_multi<F: Differentiable>(
    f: &F,
    x: &Tensor,
    baselines: &BaselineSet,
    permutations: Option<usize>,
    seed: u64,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let m = x.numel();
    let mut acc = vec![0.0; ks.len() * m];
    for (bi, baseline) in baselines.baselines().iter().enumerate() {
        let one = match permutations {
            None => shapley_exact_multi(f, x, baseline, ks)?,
            Some(p) => {
                // Decorrelate permutations across baselines.
                let s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(bi as u64 + 1));
                shapley_sampled_multi(f, x, baseline, p, s, ks)?
            }
        };
        for (a, v) in acc.iter_mut().zip(one) {
            *a += v;
        }
    }
    let inv = 1.0 / baselines.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}
