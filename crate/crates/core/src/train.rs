//! Minibatch gradient-descent training with MSE (scalar) or cross-entropy
//! (categorical) loss. Deterministic for a fixed seed: data order, batch
//! statistics and the optimizer all reduce in a fixed order.

use crate::batch::Batch;
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::igc::pearson;
use crate::layer::LayerGrads;
use crate::model::{Model, Task};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd_momentum() -> OptimizerKind {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Fraction of the data held out for the per-run validation metric.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            validation_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument(
                "validation fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluation score of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Pearson correlation between predictions and targets (scalar task).
    Correlation(f64),
    /// Top-1 accuracy (categorical task).
    Accuracy(f64),
}

impl Metric {
    pub fn value(&self) -> f64 {
        match *self {
            Metric::Correlation(v) | Metric::Accuracy(v) => v,
        }
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    /// Mean training loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    /// Metric on the held-out split, when `validation_fraction > 0`.
    pub validation_metric: Option<Metric>,
}

/// Train a copy of `model` on `data` and return it.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    Ok(train_run(model, data, cfg)?.model)
}

/// Train and keep the per-epoch loss history.
pub fn train_run(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_task(model, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let holdout = (cfg.validation_fraction * n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(holdout);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument(
            "validation fraction leaves no training data".into(),
        ));
    }

    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, &mut model);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut indices = train_idx.to_vec();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let loss = train_step(&mut model, data, chunk, cfg, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        epoch_losses.push(loss_sum / indices.len() as f64);
    }

    let validation_metric = if holdout > 0 {
        Some(evaluate(&model, &data.subset(val_idx)?)?)
    } else {
        None
    };
    Ok(TrainRun {
        model,
        epoch_losses,
        validation_metric,
    })
}

fn check_task(model: &Model, data: &Dataset) -> Result<()> {
    match (model.task(), data.targets()) {
        (Task::Categorical, Targets::Labels { classes, .. }) => {
            if *classes > model.output_dim() {
                return Err(Error::TaskMismatch);
            }
        }
        (Task::Scalar, Targets::Scalar(_)) => {
            if model.output_dim() != 1 {
                // Scalar targets only drive a single-output regression.
                return Err(Error::TaskMismatch);
            }
        }
        _ => return Err(Error::TaskMismatch),
    }
    Ok(())
}

/// One optimizer step over a batch; returns the mean batch loss.
fn train_step(
    model: &mut Model,
    data: &Dataset,
    batch_indices: &[usize],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
) -> Result<f64> {
    let rows = batch_indices.len();
    let mut xs = Batch::zeros(rows, model.input_shape().to_vec());
    let dim = data.dim();
    for (r, &i) in batch_indices.iter().enumerate() {
        xs.row_mut(r).copy_from_slice(data.input_row(i));
    }
    debug_assert_eq!(xs.stride(), dim);

    let (trace, caches) = model.forward_trace_train(&xs);
    let outputs = trace.last().unwrap();
    let k_out = model.output_dim();
    let scale = 1.0 / rows as f64;

    // Loss and the gradient seed. For categorical models the seed is placed
    // at the softmax input (p - onehot), which is the fused cross-entropy
    // gradient and avoids dividing by small probabilities.
    let (loss, seed, start_layer) = match model.task() {
        Task::Categorical => {
            let mut seed = Batch::zeros(rows, vec![k_out]);
            let mut loss = 0.0;
            for (r, &i) in batch_indices.iter().enumerate() {
                let label = data.label(i).expect("checked categorical") as usize;
                let p = outputs.row(r);
                loss -= p[label].max(1e-300).ln();
                let dst = seed.row_mut(r);
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = (p[j] - if j == label { 1.0 } else { 0.0 }) * scale;
                }
            }
            (loss * scale, seed, model.layers().len() - 1)
        }
        Task::Scalar => {
            let mut seed = Batch::zeros(rows, vec![k_out]);
            let mut loss = 0.0;
            for (r, &i) in batch_indices.iter().enumerate() {
                let y = data.scalar_target(i).expect("checked scalar");
                let err = outputs.row(r)[0] - y;
                loss += err * err;
                seed.row_mut(r)[0] = 2.0 * err * scale;
            }
            (loss * scale, seed, model.layers().len())
        }
    };

    let mut grads: Vec<LayerGrads> = model.layers().iter().map(|l| l.zero_grads()).collect();
    model.backward_train(&trace, &caches, &seed, start_layer, &mut grads);
    model.update_running_stats(&caches);
    opt.step(model, &grads, cfg.learning_rate);
    Ok(loss)
}

/// Pearson correlation for scalar models, top-1 accuracy for categorical.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metric> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_task(model, data)?;
    let preds = predictions(model, data);
    match data.targets() {
        Targets::Scalar(targets) => {
            let series: Vec<f64> = (0..data.len()).map(|i| preds[i * model.output_dim()]).collect();
            Ok(Metric::Correlation(pearson(&series, targets)?))
        }
        Targets::Labels { labels, .. } => {
            let k = model.output_dim();
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &label)| {
                    let row = &preds[i * k..(i + 1) * k];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(j, _)| j)
                        .unwrap();
                    argmax == label as usize
                })
                .count();
            Ok(Metric::Accuracy(hits as f64 / labels.len() as f64))
        }
    }
}

/// Evaluation-mode predictions for the whole dataset, row-major
/// `[n, output_dim]`, computed in fixed-size chunks.
pub(crate) fn predictions(model: &Model, data: &Dataset) -> Vec<f64> {
    const CHUNK: usize = 256;
    let n = data.len();
    let dim = data.dim();
    let mut out = Vec::with_capacity(n * model.output_dim());
    let mut at = 0;
    while at < n {
        let rows = CHUNK.min(n - at);
        let mut xs = Batch::zeros(rows, model.input_shape().to_vec());
        for r in 0..rows {
            xs.row_mut(r).copy_from_slice(data.input_row(at + r));
        }
        debug_assert_eq!(xs.stride(), dim);
        out.extend(model.forward_eval(&xs).data);
        at += rows;
    }
    out
}

/// Optimizer state, one moment buffer per trainable tensor.
struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    fn new(kind: OptimizerKind, model: &mut Model) -> Optimizer {
        let sizes: Vec<usize> = model
            .layers_mut()
            .iter_mut()
            .flat_map(|l| l.params_mut().into_iter().map(|p| p.len()))
            .collect();
        let first = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => sizes.iter().map(|&s| vec![0.0; s]).collect(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            first,
            second,
            step_count: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[LayerGrads], lr: f64) {
        self.step_count += 1;
        let grad_slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.as_slices()).collect();
        let mut idx = 0;
        for layer in model.layers_mut().iter_mut() {
            for param in layer.params_mut() {
                let g = grad_slices[idx];
                match self.kind {
                    OptimizerKind::SgdMomentum { momentum } => {
                        let vel = &mut self.first[idx];
                        for ((w, &gi), v) in param.iter_mut().zip(g).zip(vel.iter_mut()) {
                            *v = momentum * *v + gi;
                            *w -= lr * *v;
                        }
                    }
                    OptimizerKind::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        let t = self.step_count as i32;
                        let bc1 = 1.0 - beta1.powi(t);
                        let bc2 = 1.0 - beta2.powi(t);
                        let m = &mut self.first[idx];
                        let v = &mut self.second[idx];
                        for (((w, &gi), mi), vi) in
                            param.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                        {
                            *mi = beta1 * *mi + (1.0 - beta1) * gi;
                            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                            let mhat = *mi / bc1;
                            let vhat = *vi / bc2;
                            *w -= lr * mhat / (vhat.sqrt() + epsilon);
                        }
                    }
                }
                idx += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_linear;
    use crate::zoo::{linear_model, linear_regressor};

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let data = gen_linear(8, 2, &[1.0, -1.0], 0.0, 0.0, 1).unwrap();
        let model = linear_regressor(2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let trained = train(&model, &data, &cfg).unwrap();
        let x = crate::tensor::Tensor::vector(vec![0.3, 0.7]);
        assert_eq!(
            model.forward(&x).unwrap(),
            trained.forward(&x).unwrap(),
            "no-op training must not move parameters"
        );
    }

    #[test]
    fn recovers_linear_weight() {
        // y = 3x + noise(0.01); least-squares solution is ~3.
        let data = gen_linear(256, 1, &[3.0], 0.0, 0.01, 5).unwrap();
        let model = linear_regressor(1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let trained = train(&model, &data, &cfg).unwrap();
        let g = trained
            .input_gradient(&crate::tensor::Tensor::vector(vec![0.0]), 0)
            .unwrap();
        assert!(
            (g.data()[0] - 3.0).abs() <= 0.05,
            "recovered weight {} not within 0.05 of 3",
            g.data()[0]
        );
    }

    #[test]
    fn same_seed_identical_parameters() {
        let data = gen_linear(64, 3, &[1.0, 2.0, -0.5], 0.1, 0.05, 9).unwrap();
        let model = linear_regressor(3, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        let x = crate::tensor::Tensor::vector(vec![0.2, -0.4, 0.6]);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn loss_non_increasing_on_linear_task() {
        let data = gen_linear(128, 2, &[1.0, -2.0], 0.5, 0.0, 3).unwrap();
        let model = linear_regressor(2, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 128, // full batch: plain gradient descent
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.0 },
            ..TrainConfig::default()
        };
        let run = train_run(&model, &data, &cfg).unwrap();
        for w in run.epoch_losses.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "loss increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn task_mismatch_rejected() {
        let data = gen_linear(8, 2, &[1.0, 0.0], 0.0, 0.0, 1).unwrap();
        let model = crate::zoo::mnist_mlp(0).unwrap();
        assert!(matches!(
            train(&model, &data, &TrainConfig::default()),
            Err(Error::TaskMismatch)
        ));
    }

    /// Numeric check of the full training gradient path (conv, batch-norm
    /// batch statistics, Mish, dense, fused softmax cross-entropy) against
    /// central finite differences of the batch loss over every parameter.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        use crate::layer::{ActivationKind, Layer, Padding};
        use crate::model::{Model, Task};
        use crate::tensor::Tensor;
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut rand_tensor = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.8..0.8)).collect())
                .unwrap()
        };
        let layers = vec![
            Layer::conv2d(rand_tensor(vec![2, 1, 3, 3]), 2, Padding::Same).unwrap(),
            Layer::batch_norm(2, 1e-5).unwrap(),
            Layer::activation(ActivationKind::Mish),
            Layer::Flatten,
            Layer::dense(rand_tensor(vec![3, 18]), rand_tensor(vec![3])).unwrap(),
            Layer::Softmax,
        ];
        let mut model = Model::new(layers, vec![1, 6, 6], Task::Categorical).unwrap();

        let rows = 3;
        let mut xs = Batch::zeros(rows, vec![1, 6, 6]);
        for v in xs.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let labels = [0usize, 2, 1];

        // batch cross-entropy under training-mode forward
        let loss_of = |model: &Model| -> f64 {
            let (trace, _) = model.forward_trace_train(&xs);
            let out = trace.last().unwrap();
            let mut loss = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                loss -= out.row(r)[label].ln();
            }
            loss / rows as f64
        };

        // analytic gradients via the fused softmax seed
        let (trace, caches) = model.forward_trace_train(&xs);
        let out = trace.last().unwrap();
        let mut seed = Batch::zeros(rows, vec![3]);
        for (r, &label) in labels.iter().enumerate() {
            let p = out.row(r);
            for j in 0..3 {
                seed.row_mut(r)[j] =
                    (p[j] - if j == label { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        let mut grads: Vec<LayerGrads> =
            model.layers().iter().map(|l| l.zero_grads()).collect();
        let start = model.layers().len() - 1;
        model.backward_train(&trace, &caches, &seed, start, &mut grads);
        let flat_grads: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.as_slices().into_iter().flatten().copied().collect::<Vec<_>>())
            .collect();

        // finite differences over every parameter
        let step = 1e-5;
        let mut param_idx = 0;
        let mut worst: f64 = 0.0;
        let n_layers = model.layers().len();
        for li in 0..n_layers {
            let n_params = model.layers_mut()[li].params_mut().len();
            for pi in 0..n_params {
                let len = model.layers_mut()[li].params_mut()[pi].len();
                for e in 0..len {
                    let orig = model.layers_mut()[li].params_mut()[pi][e];
                    model.layers_mut()[li].params_mut()[pi][e] = orig + step;
                    let up = loss_of(&model);
                    model.layers_mut()[li].params_mut()[pi][e] = orig - step;
                    let down = loss_of(&model);
                    model.layers_mut()[li].params_mut()[pi][e] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let analytic = flat_grads[param_idx + e];
                    let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
                    worst = worst.max(err);
                }
                param_idx += len;
            }
        }
        assert_eq!(param_idx, flat_grads.len());
        assert!(worst < 1e-6, "worst parameter-gradient error {worst}");
    }

    /// Same check for the scalar MSE path.
    #[test]
    fn mse_parameter_gradients_match_finite_differences() {
        let data = gen_linear(12, 3, &[0.5, -1.0, 2.0], 0.2, 0.3, 31).unwrap();
        let model = crate::zoo::mlp_regressor(3, &[5], 17).unwrap();
        let idx: Vec<usize> = (0..8).collect();

        let mut xs = Batch::zeros(idx.len(), vec![3]);
        for (r, &i) in idx.iter().enumerate() {
            xs.row_mut(r).copy_from_slice(data.input_row(i));
        }
        let loss_of = |model: &Model| -> f64 {
            let (trace, _) = model.forward_trace_train(&xs);
            let out = trace.last().unwrap();
            idx.iter()
                .enumerate()
                .map(|(r, &i)| {
                    let err = out.row(r)[0] - data.scalar_target(i).unwrap();
                    err * err
                })
                .sum::<f64>()
                / idx.len() as f64
        };

        let mut model = model;
        let (trace, caches) = model.forward_trace_train(&xs);
        let out = trace.last().unwrap();
        let mut seed = Batch::zeros(idx.len(), vec![1]);
        for (r, &i) in idx.iter().enumerate() {
            seed.row_mut(r)[0] = 2.0 * (out.row(r)[0] - data.scalar_target(i).unwrap())
                / idx.len() as f64;
        }
        let mut grads: Vec<LayerGrads> =
            model.layers().iter().map(|l| l.zero_grads()).collect();
        let start = model.layers().len();
        model.backward_train(&trace, &caches, &seed, start, &mut grads);
        let flat_grads: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.as_slices().into_iter().flatten().copied().collect::<Vec<_>>())
            .collect();

        let step = 1e-5;
        let mut worst: f64 = 0.0;
        let mut param_idx = 0;
        let n_layers = model.layers().len();
        for li in 0..n_layers {
            let n_params = model.layers_mut()[li].params_mut().len();
            for pi in 0..n_params {
                let len = model.layers_mut()[li].params_mut()[pi].len();
                for e in 0..len {
                    let orig = model.layers_mut()[li].params_mut()[pi][e];
                    model.layers_mut()[li].params_mut()[pi][e] = orig + step;
                    let up = loss_of(&model);
                    model.layers_mut()[li].params_mut()[pi][e] = orig - step;
                    let down = loss_of(&model);
                    model.layers_mut()[li].params_mut()[pi][e] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let analytic = flat_grads[param_idx + e];
                    let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
                    worst = worst.max(err);
                }
                param_idx += len;
            }
        }
        assert!(worst < 1e-6, "worst parameter-gradient error {worst}");
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let data = gen_linear(32, 2, &[2.0, -1.0], 0.25, 0.0, 8).unwrap();
        let model = linear_model(&[2.0, -1.0], 0.25).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert!((m.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_is_degenerate() {
        let data = gen_linear(16, 2, &[1.0, 1.0], 0.0, 0.0, 2).unwrap();
        let model = linear_model(&[0.0, 0.0], 1.0).unwrap();
        assert!(matches!(
            evaluate(&model, &data),
            Err(Error::DegenerateScore(_))
        ));
    }
}
