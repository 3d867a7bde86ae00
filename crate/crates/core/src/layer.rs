//! Network building blocks and their forward/backward rules.
//!
//! Every kernel walks its accumulation indices in a fixed ascending order, so
//! results are reproducible and independent of batch size or thread count.

use crate::batch::{gemm_acc, gemm_acc_bt, transpose, Batch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// EMA weight for batch-statistics updates of the running moments.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Mish,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so the output covers ceil(extent / stride).
    Same,
    /// No padding; kernel applications stay fully inside the input.
    Valid,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        /// `[out, in]`, row-major.
        weights: Tensor,
        /// `[out]`.
        bias: Tensor,
    },
    Conv2D {
        /// `[out_channels, in_channels, kh, kw]`, row-major.
        kernels: Tensor,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f64,
    },
    Activation(ActivationKind),
    Flatten,
    Softmax,
}

/// Per-layer values saved by a training-mode forward pass for the backward
/// pass. Evaluation-mode passes save nothing.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    None,
    BatchNorm { mean: Vec<f64>, var: Vec<f64> },
}

/// Parameter gradients mirroring a layer's trainable tensors.
#[derive(Debug, Clone)]
pub(crate) enum LayerGrads {
    None,
    Dense { dw: Vec<f64>, db: Vec<f64> },
    Conv { dk: Vec<f64> },
    BatchNorm { dscale: Vec<f64>, dshift: Vec<f64> },
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor) -> Result<Layer> {
        if weights.shape().len() != 2 {
            return Err(Error::InvalidModel(format!(
                "dense weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::InvalidModel(format!(
                "dense bias shape {:?} does not match {} outputs",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        Ok(Layer::Dense { weights, bias })
    }

    pub fn conv2d(kernels: Tensor, stride: usize, padding: Padding) -> Result<Layer> {
        if kernels.shape().len() != 4 {
            return Err(Error::InvalidModel(format!(
                "conv kernels must be 4-D [out_c, in_c, kh, kw], got {:?}",
                kernels.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidModel("conv stride must be >= 1".into()));
        }
        Ok(Layer::Conv2D {
            kernels,
            stride,
            padding,
        })
    }

    pub fn batch_norm(features: usize, epsilon: f64) -> Result<Layer> {
        if epsilon <= 0.0 {
            return Err(Error::InvalidModel("batch norm epsilon must be > 0".into()));
        }
        Ok(Layer::BatchNorm {
            scale: Tensor::from_vec(vec![features], vec![1.0; features])?,
            shift: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::from_vec(vec![features], vec![1.0; features])?,
            epsilon,
        })
    }

    pub fn batch_norm_from_parts(
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        epsilon: f64,
    ) -> Result<Layer> {
        let n = scale.numel();
        for t in [&shift, &running_mean, &running_var] {
            if t.numel() != n {
                return Err(Error::InvalidModel(
                    "batch norm parameter tensors must share one length".into(),
                ));
            }
        }
        if epsilon <= 0.0 {
            return Err(Error::InvalidModel("batch norm epsilon must be > 0".into()));
        }
        if running_var.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidModel(
                "batch norm running variance entries must be > 0".into(),
            ));
        }
        Ok(Layer::BatchNorm {
            scale,
            shift,
            running_mean,
            running_var,
            epsilon,
        })
    }

    pub fn activation(kind: ActivationKind) -> Layer {
        Layer::Activation(kind)
    }

    /// Output shape for a given per-sample input shape.
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                if input != [inp] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![inp],
                        actual: input.to_vec(),
                    });
                }
                Ok(vec![out])
            }
            Layer::Conv2D {
                kernels,
                stride,
                padding,
            } => {
                let ks = kernels.shape();
                let (out_c, in_c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                if input.len() != 3 || input[0] != in_c {
                    return Err(Error::ShapeMismatch {
                        expected: vec![in_c, 0, 0],
                        actual: input.to_vec(),
                    });
                }
                let (h, w) = (input[1], input[2]);
                let (oh, ow) = match padding {
                    Padding::Same => (h.div_ceil(*stride), w.div_ceil(*stride)),
                    Padding::Valid => {
                        if h < kh || w < kw {
                            return Err(Error::InvalidModel(format!(
                                "conv kernel {kh}x{kw} exceeds input {h}x{w} with valid padding"
                            )));
                        }
                        ((h - kh) / stride + 1, (w - kw) / stride + 1)
                    }
                };
                Ok(vec![out_c, oh, ow])
            }
            Layer::BatchNorm { scale, .. } => {
                if input.is_empty() || input[0] != scale.numel() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![scale.numel()],
                        actual: input.to_vec(),
                    });
                }
                Ok(input.to_vec())
            }
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        expected: vec![input.iter().product()],
                        actual: input.to_vec(),
                    });
                }
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn forward_eval_batch(&self, x: &Batch) -> Batch {
        self.forward_batch_impl(x, false).0
    }

    pub(crate) fn forward_train_batch(&self, x: &Batch) -> (Batch, LayerCache) {
        self.forward_batch_impl(x, true)
    }

    fn forward_batch_impl(&self, x: &Batch, train: bool) -> (Batch, LayerCache) {
        let out_shape = self.out_shape(&x.shape).expect("validated at construction");
        match self {
            Layer::Dense { weights, bias } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                let mut y = Batch::zeros(x.rows, out_shape);
                for row in y.data.chunks_mut(out) {
                    row.copy_from_slice(bias.data());
                }
                if x.rows == 1 {
                    gemm_acc_bt(&mut y.data, &x.data, weights.data(), x.rows, inp, out);
                } else {
                    // y = x W^T via the blocked kernel; the transpose is
                    // transient and amortized over the batch.
                    let mut wt = Vec::new();
                    transpose(weights.data(), out, inp, &mut wt);
                    gemm_acc(&mut y.data, &x.data, &wt, x.rows, inp, out);
                }
                (y, LayerCache::None)
            }
            Layer::Conv2D {
                kernels,
                stride,
                padding,
            } => (
                conv_forward(x, kernels, *stride, *padding, &out_shape),
                LayerCache::None,
            ),
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                epsilon,
            } => {
                let channels = scale.numel();
                let spatial = x.stride() / channels;
                let mut y = Batch::zeros(x.rows, out_shape);
                if train {
                    let n = (x.rows * spatial) as f64;
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for row in x.data.chunks(x.stride()) {
                        for (c, chunk) in row.chunks(spatial).enumerate() {
                            mean[c] += chunk.iter().sum::<f64>();
                        }
                    }
                    for m in mean.iter_mut() {
                        *m /= n;
                    }
                    for row in x.data.chunks(x.stride()) {
                        for (c, chunk) in row.chunks(spatial).enumerate() {
                            let m = mean[c];
                            var[c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
                        }
                    }
                    for v in var.iter_mut() {
                        *v /= n;
                    }
                    for (yrow, xrow) in y.data.chunks_mut(x.stride()).zip(x.data.chunks(x.stride()))
                    {
                        for c in 0..channels {
                            let inv = 1.0 / (var[c] + epsilon).sqrt();
                            let (g, b, m) = (scale.data()[c], shift.data()[c], mean[c]);
                            for (yv, &xv) in yrow[c * spatial..(c + 1) * spatial]
                                .iter_mut()
                                .zip(&xrow[c * spatial..(c + 1) * spatial])
                            {
                                *yv = g * (xv - m) * inv + b;
                            }
                        }
                    }
                    (y, LayerCache::BatchNorm { mean, var })
                } else {
                    // Frozen statistics: a fixed per-channel affine map.
                    let coeff: Vec<(f64, f64)> = (0..channels)
                        .map(|c| {
                            let a = scale.data()[c]
                                / (running_var.data()[c] + epsilon).sqrt();
                            (a, shift.data()[c] - running_mean.data()[c] * a)
                        })
                        .collect();
                    for (yrow, xrow) in y.data.chunks_mut(x.stride()).zip(x.data.chunks(x.stride()))
                    {
                        for (c, &(a, b)) in coeff.iter().enumerate() {
                            for (yv, &xv) in yrow[c * spatial..(c + 1) * spatial]
                                .iter_mut()
                                .zip(&xrow[c * spatial..(c + 1) * spatial])
                            {
                                *yv = a * xv + b;
                            }
                        }
                    }
                    (y, LayerCache::None)
                }
            }
            Layer::Activation(kind) => {
                let mut y = Batch::zeros(x.rows, out_shape);
                match kind {
                    ActivationKind::ReLU => {
                        for (yv, &xv) in y.data.iter_mut().zip(&x.data) {
                            *yv = if xv > 0.0 { xv } else { 0.0 };
                        }
                    }
                    ActivationKind::Mish => {
                        for (yv, &xv) in y.data.iter_mut().zip(&x.data) {
                            *yv = mish(xv);
                        }
                    }
                    ActivationKind::Identity => y.data.copy_from_slice(&x.data),
                }
                (y, LayerCache::None)
            }
            Layer::Flatten => {
                let mut y = Batch::zeros(x.rows, out_shape);
                y.data.copy_from_slice(&x.data);
                (y, LayerCache::None)
            }
            Layer::Softmax => {
                let k = x.stride();
                let mut y = Batch::zeros(x.rows, out_shape);
                for (yrow, xrow) in y.data.chunks_mut(k).zip(x.data.chunks(k)) {
                    let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                        *yv = (xv - max).exp();
                        sum += *yv;
                    }
                    for yv in yrow.iter_mut() {
                        *yv /= sum;
                    }
                }
                (y, LayerCache::None)
            }
        }
    }

    /// Propagate `dy` back to the layer input, optionally accumulating
    /// parameter gradients. `x`/`y` are the input and output of the matching
    /// forward pass; `cache` decides between frozen and batch statistics for
    /// batch norm.
    pub(crate) fn backward_batch(
        &self,
        x: &Batch,
        y: &Batch,
        cache: &LayerCache,
        dy: &Batch,
        mut grads: Option<&mut LayerGrads>,
    ) -> Batch {
        let mut dx = Batch::zeros(x.rows, x.shape.clone());
        match self {
            Layer::Dense { weights, .. } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                gemm_acc(&mut dx.data, &dy.data, weights.data(), x.rows, out, inp);
                if let Some(LayerGrads::Dense { dw, db }) = grads.as_deref_mut() {
                    for (dyrow, xrow) in dy.data.chunks(out).zip(x.data.chunks(inp)) {
                        for (o, &g) in dyrow.iter().enumerate() {
                            db[o] += g;
                            if g == 0.0 {
                                continue;
                            }
                            for (dwv, &xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xrow) {
                                *dwv += g * xv;
                            }
                        }
                    }
                }
            }
            Layer::Conv2D {
                kernels,
                stride,
                padding,
            } => {
                conv_backward(
                    x,
                    dy,
                    kernels,
                    *stride,
                    *padding,
                    &mut dx,
                    match grads.as_deref_mut() {
                        Some(LayerGrads::Conv { dk }) => Some(dk),
                        _ => None,
                    },
                );
            }
            Layer::BatchNorm {
                scale,
                running_mean: _,
                running_var,
                epsilon,
                ..
            } => {
                let channels = scale.numel();
                let spatial = x.stride() / channels;
                match cache {
                    LayerCache::BatchNorm { mean, var } => {
                        let n = (x.rows * spatial) as f64;
                        let mut sum_dy = vec![0.0; channels];
                        let mut sum_dy_xhat = vec![0.0; channels];
                        for (dyrow, xrow) in
                            dy.data.chunks(x.stride()).zip(x.data.chunks(x.stride()))
                        {
                            for c in 0..channels {
                                let inv = 1.0 / (var[c] + epsilon).sqrt();
                                for (&g, &xv) in dyrow[c * spatial..(c + 1) * spatial]
                                    .iter()
                                    .zip(&xrow[c * spatial..(c + 1) * spatial])
                                {
                                    sum_dy[c] += g;
                                    sum_dy_xhat[c] += g * (xv - mean[c]) * inv;
                                }
                            }
                        }
                        if let Some(LayerGrads::BatchNorm { dscale, dshift }) =
                            grads.as_deref_mut()
                        {
                            for c in 0..channels {
                                dscale[c] += sum_dy_xhat[c];
                                dshift[c] += sum_dy[c];
                            }
                        }
                        for ((dxrow, dyrow), xrow) in dx
                            .data
                            .chunks_mut(x.stride())
                            .zip(dy.data.chunks(x.stride()))
                            .zip(x.data.chunks(x.stride()))
                        {
                            for c in 0..channels {
                                let inv = 1.0 / (var[c] + epsilon).sqrt();
                                let g = scale.data()[c];
                                for ((dxv, &dyv), &xv) in dxrow[c * spatial..(c + 1) * spatial]
                                    .iter_mut()
                                    .zip(&dyrow[c * spatial..(c + 1) * spatial])
                                    .zip(&xrow[c * spatial..(c + 1) * spatial])
                                {
                                    let xhat = (xv - mean[c]) * inv;
                                    *dxv = g * inv / n
                                        * (n * dyv - sum_dy[c] - xhat * sum_dy_xhat[c]);
                                }
                            }
                        }
                    }
                    LayerCache::None => {
                        // Frozen statistics: gradient of an affine map.
                        let coeff: Vec<f64> = (0..channels)
                            .map(|c| {
                                scale.data()[c] / (running_var.data()[c] + epsilon).sqrt()
                            })
                            .collect();
                        for (dxrow, dyrow) in dx
                            .data
                            .chunks_mut(x.stride())
                            .zip(dy.data.chunks(x.stride()))
                        {
                            for (c, &a) in coeff.iter().enumerate() {
                                for (dxv, &dyv) in dxrow[c * spatial..(c + 1) * spatial]
                                    .iter_mut()
                                    .zip(&dyrow[c * spatial..(c + 1) * spatial])
                                {
                                    *dxv = a * dyv;
                                }
                            }
                        }
                    }
                }
            }
            Layer::Activation(kind) => match kind {
                ActivationKind::ReLU => {
                    // Subgradient at exactly 0 is 0.
                    for ((dxv, &dyv), &xv) in dx.data.iter_mut().zip(&dy.data).zip(&x.data) {
                        *dxv = if xv > 0.0 { dyv } else { 0.0 };
                    }
                }
                ActivationKind::Mish => {
                    for ((dxv, &dyv), &xv) in dx.data.iter_mut().zip(&dy.data).zip(&x.data) {
                        *dxv = dyv * mish_derivative(xv);
                    }
                }
                ActivationKind::Identity => dx.data.copy_from_slice(&dy.data),
            },
            Layer::Flatten => dx.data.copy_from_slice(&dy.data),
            Layer::Softmax => {
                let k = x.stride();
                for ((dxrow, dyrow), yrow) in dx
                    .data
                    .chunks_mut(k)
                    .zip(dy.data.chunks(k))
                    .zip(y.data.chunks(k))
                {
                    let dot: f64 = dyrow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for ((dxv, &dyv), &p) in dxrow.iter_mut().zip(dyrow).zip(yrow) {
                        *dxv = p * (dyv - dot);
                    }
                }
            }
        }
        dx
    }

    /// Fold training-batch statistics into the running moments (batch norm
    /// only; other layers ignore the call).
    pub(crate) fn update_running_stats(&mut self, cache: &LayerCache) {
        if let (
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            LayerCache::BatchNorm { mean, var },
        ) = (self, cache)
        {
            for (rm, &m) in running_mean.data_mut().iter_mut().zip(mean) {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
            }
            for (rv, &v) in running_var.data_mut().iter_mut().zip(var) {
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
            }
        }
    }

    pub(crate) fn zero_grads(&self) -> LayerGrads {
        match self {
            Layer::Dense { weights, bias } => LayerGrads::Dense {
                dw: vec![0.0; weights.numel()],
                db: vec![0.0; bias.numel()],
            },
            Layer::Conv2D { kernels, .. } => LayerGrads::Conv {
                dk: vec![0.0; kernels.numel()],
            },
            Layer::BatchNorm { scale, .. } => LayerGrads::BatchNorm {
                dscale: vec![0.0; scale.numel()],
                dshift: vec![0.0; scale.numel()],
            },
            _ => LayerGrads::None,
        }
    }

    /// Trainable parameter slices in a fixed order (matching `zero_grads`).
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense { weights, bias } => {
                vec![weights.data_mut(), bias.data_mut()]
            }
            Layer::Conv2D { kernels, .. } => vec![kernels.data_mut()],
            Layer::BatchNorm { scale, shift, .. } => {
                vec![scale.data_mut(), shift.data_mut()]
            }
            _ => Vec::new(),
        }
    }

    /// Every state tensor, trainable or not, in serialization order.
    pub(crate) fn state_tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2D { kernels, .. } => vec![kernels],
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } => vec![scale, shift, running_mean, running_var],
            _ => Vec::new(),
        }
    }

    pub(crate) fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            Layer::Conv2D { kernels, .. } => vec![kernels],
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } => vec![scale, shift, running_mean, running_var],
            _ => Vec::new(),
        }
    }
}

impl LayerGrads {
    pub(crate) fn as_slices(&self) -> Vec<&[f64]> {
        match self {
            LayerGrads::None => Vec::new(),
            LayerGrads::Dense { dw, db } => vec![dw, db],
            LayerGrads::Conv { dk } => vec![dk],
            LayerGrads::BatchNorm { dscale, dshift } => vec![dscale, dshift],
        }
    }

}

/// x * tanh(ln(1 + e^x)), with the representation switched at |x| > 20 where
/// the softplus saturates. In the central range the identity
/// tanh(ln(1+u)) = (u^2 + 2u) / (u^2 + 2u + 2) with u = e^x needs a single
/// exponential and no cancellation (all terms positive).
pub(crate) fn mish(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        // softplus ~= e^x and tanh(e^x) ~= e^x to double precision
        x * x.exp()
    } else {
        let u = x.exp();
        let s = u * u + 2.0 * u;
        x * s / (s + 2.0)
    }
}

pub(crate) fn mish_derivative(x: f64) -> f64 {
    if x > 20.0 {
        1.0
    } else if x < -20.0 {
        // t ~= e^x, sigmoid ~= e^x: d = t + x (1 - t^2) sigmoid ~= e^x (1 + x)
        x.exp() * (1.0 + x)
    } else {
        let u = x.exp();
        let s = u * u + 2.0 * u;
        let t = s / (s + 2.0);
        let sig = u / (1.0 + u);
        t + x * (1.0 - t * t) * sig
    }
}

/// Resolved padding offsets for one spatial axis.
fn pad_before(extent: usize, kernel: usize, stride: usize, padding: Padding) -> isize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(extent);
            (total / 2) as isize
        }
    }
}

/// Geometry of one convolution application, shared by the forward and
/// backward paths.
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_y: isize,
    pad_x: isize,
    stride: usize,
}

impl ConvGeom {
    fn new(x_shape: &[usize], kernels: &Tensor, stride: usize, padding: Padding, oh: usize, ow: usize) -> ConvGeom {
        let ks = kernels.shape();
        let (h, w) = (x_shape[1], x_shape[2]);
        ConvGeom {
            in_c: ks[1],
            out_c: ks[0],
            kh: ks[2],
            kw: ks[3],
            h,
            w,
            oh,
            ow,
            pad_y: pad_before(h, ks[2], stride, padding),
            pad_x: pad_before(w, ks[3], stride, padding),
            stride,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gather the kernel windows of one sample into patch-major rows
/// `[in_c*kh*kw, oh*ow]` (one row per kernel tap, one column per output
/// position); out-of-image taps are zero.
fn im2col_row(g: &ConvGeom, xrow: &[f64], patches: &mut [f64]) {
    let opos = g.positions();
    for v in patches.iter_mut() {
        *v = 0.0;
    }
    for ic in 0..g.in_c {
        let xplane = &xrow[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let p = (ic * g.kh + ky) * g.kw + kx;
                let dst = &mut patches[p * opos..(p + 1) * opos];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + ky as isize - g.pad_y;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xline = &xplane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dline = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in dline.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - g.pad_x;
                        if ix >= 0 && ix < g.w as isize {
                            *d = xline[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add patch-major gradients back onto one input sample.
fn col2im_row(g: &ConvGeom, dpatches: &[f64], dxrow: &mut [f64]) {
    let opos = g.positions();
    for ic in 0..g.in_c {
        let dxplane = &mut dxrow[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let p = (ic * g.kh + ky) * g.kw + kx;
                let src = &dpatches[p * opos..(p + 1) * opos];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + ky as isize - g.pad_y;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dxline =
                        &mut dxplane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let sline = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in sline.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + kx as isize - g.pad_x;
                        if ix >= 0 && ix < g.w as isize {
                            dxline[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &Batch,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    out_shape: &[usize],
) -> Batch {
    use rayon::prelude::*;
    let g = ConvGeom::new(&x.shape, kernels, stride, padding, out_shape[1], out_shape[2]);
    let plen = g.patch_len();
    let opos = g.positions();
    let mut y = Batch::zeros(x.rows, out_shape.to_vec());
    let in_stride = x.stride();
    let out_stride = y.stride();

    let job = |(yrow, xrow): (&mut [f64], &[f64])| {
        let mut patches = vec![0.0; plen * opos];
        im2col_row(&g, xrow, &mut patches);
        // channel-major output directly: [out_c, opos] = K[out_c, plen] . patches,
        // summed over (ic, ky, kx) ascending
        gemm_acc(yrow, kernels.data(), &patches, g.out_c, plen, opos);
    };
    if x.rows > 1 {
        y.data
            .par_chunks_mut(out_stride)
            .zip(x.data.par_chunks(in_stride))
            .for_each(job);
    } else {
        y.data
            .chunks_mut(out_stride)
            .zip(x.data.chunks(in_stride))
            .for_each(job);
    }
    y
}

fn conv_backward(
    x: &Batch,
    dy: &Batch,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    dx: &mut Batch,
    dk: Option<&mut Vec<f64>>,
) {
    use rayon::prelude::*;
    let g = ConvGeom::new(&x.shape, kernels, stride, padding, dy.shape[1], dy.shape[2]);
    let plen = g.patch_len();
    let opos = g.positions();
    let in_stride = x.stride();
    let out_stride = dy.stride();

    // kernels transposed to [plen, out_c] so the tap gradient is one GEMM
    let mut kt = Vec::new();
    transpose(kernels.data(), g.out_c, plen, &mut kt);

    let dx_job = |(dxrow, dyrow): (&mut [f64], &[f64])| {
        // [plen, opos] = K^T [plen, out_c] . dy [out_c, opos]
        let mut dpatches = vec![0.0; plen * opos];
        gemm_acc(&mut dpatches, &kt, dyrow, plen, g.out_c, opos);
        col2im_row(&g, &dpatches, dxrow);
    };
    if x.rows > 1 {
        dx.data
            .par_chunks_mut(in_stride)
            .zip(dy.data.par_chunks(out_stride))
            .for_each(dx_job);
    } else {
        dx.data
            .chunks_mut(in_stride)
            .zip(dy.data.chunks(out_stride))
            .for_each(dx_job);
    }

    if let Some(dk) = dk {
        // dK[oc][p] += dot over positions of dy[oc] and patch row p,
        // positions ascending, rows in batch order.
        let mut patches = vec![0.0; plen * opos];
        for (xrow, dyrow) in x.data.chunks(in_stride).zip(dy.data.chunks(out_stride)) {
            im2col_row(&g, xrow, &mut patches);
            gemm_acc_bt(dk, dyrow, &patches, g.out_c, opos, plen);
        }
    }
}
