//! Ready-made architectures with seeded Kaiming-uniform initialization.

use crate::error::Result;
use crate::layer::{ActivationKind, Layer, Padding};
use crate::model::{Model, Task};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BN_EPSILON: f64 = 1e-5;

/// Kaiming-uniform fan-in draw: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

fn dense(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Layer {
    let weights = Tensor::from_vec(vec![outputs, inputs], kaiming(rng, inputs, outputs * inputs))
        .expect("sized by construction");
    Layer::dense(weights, Tensor::zeros(vec![outputs])).expect("shapes match")
}

fn conv(
    rng: &mut ChaCha8Rng,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Layer {
    let fan_in = in_c * k * k;
    let kernels = Tensor::from_vec(
        vec![out_c, in_c, k, k],
        kaiming(rng, fan_in, out_c * in_c * k * k),
    )
    .expect("sized by construction");
    Layer::conv2d(kernels, stride, padding).expect("valid stride")
}

/// Digit classifier: two stride-2 convolutions followed by five dense
/// layers, batch norm and Mish throughout, softmax output over 10 classes.
pub fn mnist_conv(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 1, 10, 5, 2, Padding::Same),
        Layer::batch_norm(10, BN_EPSILON)?,
        Layer::activation(ActivationKind::Mish),
        conv(&mut rng, 10, 20, 3, 2, Padding::Same),
        Layer::batch_norm(20, BN_EPSILON)?,
        Layer::activation(ActivationKind::Mish),
        Layer::Flatten,
        dense(&mut rng, 20 * 7 * 7, 128),
        Layer::batch_norm(128, BN_EPSILON)?,
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 128, 64),
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 64, 32),
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 32, 16),
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 16, 10),
        Layer::Softmax,
    ];
    Model::new(layers, vec![1, 28, 28], Task::Categorical)
}

/// Digit classifier without convolutions: five dense layers on flat pixels,
/// batch norm and Mish.
pub fn mnist_mlp(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        dense(&mut rng, 784, 160),
        Layer::batch_norm(160, BN_EPSILON)?,
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 160, 96),
        Layer::batch_norm(96, BN_EPSILON)?,
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 96, 48),
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 48, 24),
        Layer::activation(ActivationKind::Mish),
        dense(&mut rng, 24, 10),
        Layer::Softmax,
    ];
    Model::new(layers, vec![784], Task::Categorical)
}

/// Conv classifier with ReLU activations instead of Mish.
pub fn mnist_conv_relu(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 1, 10, 5, 2, Padding::Same),
        Layer::batch_norm(10, BN_EPSILON)?,
        Layer::activation(ActivationKind::ReLU),
        conv(&mut rng, 10, 20, 3, 2, Padding::Same),
        Layer::batch_norm(20, BN_EPSILON)?,
        Layer::activation(ActivationKind::ReLU),
        Layer::Flatten,
        dense(&mut rng, 20 * 7 * 7, 128),
        Layer::activation(ActivationKind::ReLU),
        dense(&mut rng, 128, 64),
        Layer::activation(ActivationKind::ReLU),
        dense(&mut rng, 64, 32),
        Layer::activation(ActivationKind::ReLU),
        dense(&mut rng, 32, 10),
        Layer::Softmax,
    ];
    Model::new(layers, vec![1, 28, 28], Task::Categorical)
}

/// Exact linear map y = w . x + bias as a model, for oracle comparisons.
pub fn linear_model(w: &[f64], bias: f64) -> Result<Model> {
    let weights = Tensor::from_vec(vec![1, w.len()], w.to_vec())?;
    let layers = vec![Layer::dense(weights, Tensor::vector(vec![bias]))?];
    Model::new(layers, vec![w.len()], Task::Scalar)
}

/// Trainable single-output linear regressor.
pub fn linear_regressor(inputs: usize, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![dense(&mut rng, inputs, 1)];
    Model::new(layers, vec![inputs], Task::Scalar)
}

/// Scalar MLP with Mish hidden activations, e.g. for the planted-region
/// regression task.
pub fn mlp_regressor(inputs: usize, hidden: &[usize], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut cur = inputs;
    for &h in hidden {
        layers.push(dense(&mut rng, cur, h));
        layers.push(Layer::activation(ActivationKind::Mish));
        cur = h;
    }
    layers.push(dense(&mut rng, cur, 1));
    Model::new(layers, vec![inputs], Task::Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_builders_are_reproducible() {
        let a = mnist_mlp(3).unwrap();
        let b = mnist_mlp(3).unwrap();
        let x = Tensor::vector(vec![0.5; 784]);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn conv_model_shapes_line_up() {
        let m = mnist_conv(0).unwrap();
        assert_eq!(m.input_shape(), &[1, 28, 28]);
        assert_eq!(m.output_dim(), 10);
        let x = Tensor::from_vec(vec![1, 28, 28], vec![0.1; 784]).unwrap();
        let y = m.forward(&x).unwrap();
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "softmax should normalize");
    }

    #[test]
    fn linear_model_is_exact() {
        let m = linear_model(&[2.0, -1.0], 0.5).unwrap();
        let y = m.forward(&Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }
}
