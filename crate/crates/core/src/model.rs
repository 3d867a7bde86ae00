//! Feedforward models: an ordered layer list with shape validation, forward
//! evaluation and reverse-mode input gradients.

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::layer::{Layer, LayerCache, LayerGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Scalar,
    Categorical,
}

/// Anything attribution can be computed for: a function with a fixed input
/// shape, `output_dim` outputs, and per-output input gradients.
///
/// `Model` is the primary implementor; tests implement it for closed-form
/// functions to get independent oracles.
pub trait Differentiable: Sync {
    fn input_shape(&self) -> &[usize];
    fn output_dim(&self) -> usize;

    /// All outputs at `x`, in one evaluation.
    fn outputs(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Gradient of output `k` with respect to the input, same shape as `x`.
    fn input_gradient(&self, x: &Tensor, k: usize) -> Result<Tensor>;

    /// Row-major `[xs.len(), output_dim]` outputs.
    fn outputs_batch(&self, xs: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len() * self.output_dim());
        for x in xs {
            out.extend(self.outputs(x)?);
        }
        Ok(out)
    }

    /// Gradients for several outputs at several points, packed row-major as
    /// `[xs.len(), ks.len(), input numel]`.
    fn input_gradients_batch(&self, xs: &[Tensor], ks: &[usize]) -> Result<Vec<f64>> {
        let m: usize = self.input_shape().iter().product();
        let mut out = Vec::with_capacity(xs.len() * ks.len() * m);
        for x in xs {
            for &k in ks {
                out.extend(self.input_gradient(x, k)?.into_data());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_dim: usize,
    task: Task,
}

impl Model {
    /// Validate the layer chain against `input_shape` and build the model.
    ///
    /// The chain must end in a 1-D shape; categorical models must end in
    /// `Softmax`.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, task: Task) -> Result<Model> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidModel(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.out_shape(&shape).map_err(|e| {
                Error::InvalidModel(format!("layer {i} incompatible with input shape: {e}"))
            })?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "model output must be 1-D, got {shape:?}"
            )));
        }
        let output_dim = shape[0];
        if task == Task::Categorical && !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err(Error::InvalidModel(
                "categorical models must end in a softmax layer".into(),
            ));
        }
        Ok(Model {
            layers,
            input_shape,
            output_dim,
            task,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Flattened input size m.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Evaluate the model on one input (evaluation mode: batch norm uses its
    /// running statistics). Deterministic.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let batch = Batch {
            rows: 1,
            shape: self.input_shape.clone(),
            data: x.data().to_vec(),
        };
        let out = self.forward_eval(&batch);
        Tensor::from_vec(vec![self.output_dim], out.data)
    }

    /// Evaluate a batch: `xs` has shape `[n, input...]`, the result
    /// `[n, output_dim]`. Row i is bitwise equal to `forward` of row i.
    pub fn batch_forward(&self, xs: &Tensor) -> Result<Tensor> {
        let batch = self.as_batch(xs)?;
        let out = self.forward_eval(&batch);
        Tensor::from_vec(vec![batch.rows, self.output_dim], out.data)
    }

    /// Per-layer evaluation-mode outputs at `x` (diagnostics: activation
    /// inspection, kink proximity checks). Entry i is the output of layer i.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let batch = Batch {
            rows: 1,
            shape: self.input_shape.clone(),
            data: x.data().to_vec(),
        };
        let trace = self.forward_trace_eval(&batch);
        trace
            .into_iter()
            .skip(1)
            .map(|b| Tensor::from_vec(b.shape.clone(), b.data))
            .collect()
    }

    /// Gradient of output `k` with respect to the input, at `x`.
    pub fn input_gradient(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_output_index(k)?;
        let batch = Batch {
            rows: 1,
            shape: self.input_shape.clone(),
            data: x.data().to_vec(),
        };
        let trace = self.forward_trace_eval(&batch);
        let mut seed = Batch::zeros(1, vec![self.output_dim]);
        seed.data[k] = 1.0;
        let dx = self.backward_input(&trace, &seed);
        Tensor::from_vec(self.input_shape.clone(), dx.data)
    }

    fn check_output_index(&self, k: usize) -> Result<()> {
        if k >= self.output_dim {
            return Err(Error::OutputIndexOutOfRange {
                index: k,
                outputs: self.output_dim,
            });
        }
        Ok(())
    }

    fn as_batch(&self, xs: &Tensor) -> Result<Batch> {
        let shape = xs.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != *self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: std::iter::once(0)
                    .chain(self.input_shape.iter().copied())
                    .collect(),
                actual: shape.to_vec(),
            });
        }
        Ok(Batch {
            rows: shape[0],
            shape: self.input_shape.clone(),
            data: xs.data().to_vec(),
        })
    }

    pub(crate) fn forward_eval(&self, x: &Batch) -> Batch {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_eval_batch(&cur);
        }
        cur
    }

    /// Evaluation-mode forward keeping every inter-layer activation
    /// (`trace[0]` is the input, `trace[i+1]` the output of layer i).
    pub(crate) fn forward_trace_eval(&self, x: &Batch) -> Vec<Batch> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward_eval_batch(trace.last().unwrap());
            trace.push(next);
        }
        trace
    }

    /// Backpropagate `dy` (shape `[rows, output_dim]`) through an
    /// evaluation-mode trace down to the input.
    pub(crate) fn backward_input(&self, trace: &[Batch], dy: &Batch) -> Batch {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward_batch(&trace[i], &trace[i + 1], &LayerCache::None, &grad, None);
        }
        grad
    }

    /// Training-mode forward: batch norm uses batch statistics. Returns the
    /// activations and the per-layer caches.
    pub(crate) fn forward_trace_train(&self, x: &Batch) -> (Vec<Batch>, Vec<LayerCache>) {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        trace.push(x.clone());
        for layer in &self.layers {
            let (next, cache) = layer.forward_train_batch(trace.last().unwrap());
            trace.push(next);
            caches.push(cache);
        }
        (trace, caches)
    }

    /// Training-mode backward from a gradient seeded at layer `start_layer`'s
    /// output, accumulating parameter gradients for layers `0..start_layer`.
    pub(crate) fn backward_train(
        &self,
        trace: &[Batch],
        caches: &[LayerCache],
        dy: &Batch,
        start_layer: usize,
        grads: &mut [LayerGrads],
    ) {
        let mut grad = dy.clone();
        for i in (0..start_layer).rev() {
            grad = self.layers[i].backward_batch(
                &trace[i],
                &trace[i + 1],
                &caches[i],
                &grad,
                Some(&mut grads[i]),
            );
        }
    }

    pub(crate) fn update_running_stats(&mut self, caches: &[LayerCache]) {
        for (layer, cache) in self.layers_mut().iter_mut().zip(caches) {
            layer.update_running_stats(cache);
        }
    }
}

impl Differentiable for Model {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn outputs(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.into_data())
    }

    fn input_gradient(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        Model::input_gradient(self, x, k)
    }

    fn outputs_batch(&self, xs: &[Tensor]) -> Result<Vec<f64>> {
        let batch = self.pack(xs)?;
        Ok(self.forward_eval(&batch).data)
    }

    fn input_gradients_batch(&self, xs: &[Tensor], ks: &[usize]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        for &k in ks {
            self.check_output_index(k)?;
        }
        let m = self.input_len();
        let batch = self.pack(xs)?;
        let trace = self.forward_trace_eval(&batch);
        // One backward per requested output; they share the trace and are
        // independent, so they run in parallel.
        let grads: Vec<Batch> = ks
            .par_iter()
            .map(|&k| {
                let mut seed = Batch::zeros(batch.rows, vec![self.output_dim]);
                for row in 0..batch.rows {
                    seed.row_mut(row)[k] = 1.0;
                }
                self.backward_input(&trace, &seed)
            })
            .collect();
        let mut out = vec![0.0; xs.len() * ks.len() * m];
        for (ki, dx) in grads.iter().enumerate() {
            for row in 0..batch.rows {
                let dst = (row * ks.len() + ki) * m;
                out[dst..dst + m].copy_from_slice(dx.row(row));
            }
        }
        Ok(out)
    }
}

impl Model {
    fn pack(&self, xs: &[Tensor]) -> Result<Batch> {
        let m = self.input_len();
        let mut batch = Batch::zeros(xs.len(), self.input_shape.clone());
        for (i, x) in xs.iter().enumerate() {
            self.check_input(x)?;
            batch.data[i * m..(i + 1) * m].copy_from_slice(x.data());
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::ActivationKind;

    fn identity_model(dim: usize) -> Model {
        Model::new(
            vec![Layer::activation(ActivationKind::Identity)],
            vec![dim],
            Task::Scalar,
        )
        .unwrap()
    }

    fn dense_model(weights: Vec<f64>, out: usize, inp: usize, bias: Vec<f64>) -> Model {
        Model::new(
            vec![Layer::dense(
                Tensor::from_vec(vec![out, inp], weights).unwrap(),
                Tensor::vector(bias),
            )
            .unwrap()],
            vec![inp],
            Task::Scalar,
        )
        .unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let m = identity_model(2);
        let y = m.forward(&Tensor::vector(vec![3.0, -2.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -2.0]);
    }

    #[test]
    fn dense_forward_hand_multiply() {
        let m = dense_model(vec![1.0, 2.0, 0.0, 1.0], 2, 2, vec![1.0, 0.0]);
        let y = m.forward(&Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0]);
    }

    #[test]
    fn softmax_on_equal_logits() {
        let m = Model::new(
            vec![Layer::Softmax],
            vec![2],
            Task::Categorical,
        )
        .unwrap();
        let y = m.forward(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let m = identity_model(2);
        let err = m.forward(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let m = dense_model(vec![0.0, 0.0], 1, 2, vec![3.0]);
        let g = m
            .input_gradient(&Tensor::vector(vec![0.7, -0.3]), 0)
            .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_model_gradient_is_weights_everywhere() {
        let m = dense_model(vec![2.0, -1.0], 1, 2, vec![0.5]);
        for x in [[0.0, 0.0], [1.0, 1.0], [-3.0, 7.0]] {
            let g = m.input_gradient(&Tensor::vector(x.to_vec()), 0).unwrap();
            assert_eq!(g.data(), &[2.0, -1.0]);
        }
    }

    #[test]
    fn gradient_output_index_checked() {
        let m = identity_model(2);
        assert!(matches!(
            m.input_gradient(&Tensor::vector(vec![0.0, 0.0]), 2),
            Err(Error::OutputIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn singleton_batch_equals_forward() {
        let m = dense_model(vec![0.25, -0.5, 1.5, 0.0], 2, 2, vec![0.0, 1.0]);
        let x = Tensor::vector(vec![0.9, -1.1]);
        let single = m.forward(&x).unwrap();
        let batch = m
            .batch_forward(&Tensor::from_vec(vec![1, 2], x.data().to_vec()).unwrap())
            .unwrap();
        assert_eq!(batch.data(), single.data());
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let m = dense_model(vec![0.25, -0.5], 1, 2, vec![0.125]);
        let xs = Tensor::from_vec(vec![2, 2], vec![0.3, 0.4, 0.3, 0.4]).unwrap();
        let y = m.batch_forward(&xs).unwrap();
        assert_eq!(y.data()[0], y.data()[1]);
    }

    #[test]
    fn permuted_batch_gives_permuted_outputs() {
        let m = dense_model(vec![1.0, 2.0], 1, 2, vec![0.0]);
        let fwd = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rev = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let yf = m.batch_forward(&fwd).unwrap();
        let yr = m.batch_forward(&rev).unwrap();
        assert_eq!(yf.data()[0], yr.data()[1]);
        assert_eq!(yf.data()[1], yr.data()[0]);
    }

    #[test]
    fn categorical_requires_softmax_tail() {
        let r = Model::new(
            vec![Layer::activation(ActivationKind::Identity)],
            vec![3],
            Task::Categorical,
        );
        assert!(r.is_err());
    }
}
