//! Checkpoint persistence.
//!
//! Self-describing container, one format:
//!
//! ```text
//! bytes 0..8   magic "IGCMODEL"
//! bytes 8..12  format version, u32 little-endian (currently 1)
//! bytes 12..20 metadata length L, u64 little-endian
//! bytes 20..20+L  metadata JSON: architecture descriptor + training info
//! then, per layer in model order, per state tensor in layer order:
//!     u64 little-endian element count, then that many f64 little-endian
//! ```
//!
//! Parameter bytes are bit-exact: a saved model reloads to bitwise-identical
//! forward outputs.

use crate::error::{Error, Result};
use crate::layer::{ActivationKind, Layer, Padding};
use crate::model::{Model, Task};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"IGCMODEL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: String,
    },
    BatchNorm {
        features: usize,
        epsilon: f64,
    },
    Activation {
        function: String,
    },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchSpec {
    task: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

/// Provenance of a trained model, stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    architecture: ArchSpec,
    training: Option<TrainingMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingMeta>,
}

fn layer_spec(layer: &Layer) -> LayerSpec {
    match layer {
        Layer::Dense { weights, .. } => LayerSpec::Dense {
            inputs: weights.shape()[1],
            outputs: weights.shape()[0],
        },
        Layer::Conv2D {
            kernels,
            stride,
            padding,
        } => LayerSpec::Conv2d {
            in_channels: kernels.shape()[1],
            out_channels: kernels.shape()[0],
            kernel: [kernels.shape()[2], kernels.shape()[3]],
            stride: *stride,
            padding: match padding {
                Padding::Same => "same".into(),
                Padding::Valid => "valid".into(),
            },
        },
        Layer::BatchNorm { scale, epsilon, .. } => LayerSpec::BatchNorm {
            features: scale.numel(),
            epsilon: *epsilon,
        },
        Layer::Activation(kind) => LayerSpec::Activation {
            function: match kind {
                ActivationKind::ReLU => "relu".into(),
                ActivationKind::Mish => "mish".into(),
                ActivationKind::Identity => "identity".into(),
            },
        },
        Layer::Flatten => LayerSpec::Flatten,
        Layer::Softmax => LayerSpec::Softmax,
    }
}

/// Build an uninitialized layer (zero parameters) matching a descriptor;
/// parameter payloads are filled in afterwards.
fn build_layer(spec: &LayerSpec) -> Result<Layer> {
    Ok(match spec {
        LayerSpec::Dense { inputs, outputs } => Layer::dense(
            Tensor::zeros(vec![*outputs, *inputs]),
            Tensor::zeros(vec![*outputs]),
        )?,
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let padding = match padding.as_str() {
                "same" => Padding::Same,
                "valid" => Padding::Valid,
                other => {
                    return Err(Error::Parse {
                        section: "metadata".into(),
                        offset: None,
                        message: format!("unknown padding '{other}'"),
                    })
                }
            };
            Layer::conv2d(
                Tensor::zeros(vec![*out_channels, *in_channels, kernel[0], kernel[1]]),
                *stride,
                padding,
            )?
        }
        LayerSpec::BatchNorm { features, epsilon } => Layer::batch_norm(*features, *epsilon)?,
        LayerSpec::Activation { function } => Layer::activation(match function.as_str() {
            "relu" => ActivationKind::ReLU,
            "mish" => ActivationKind::Mish,
            "identity" => ActivationKind::Identity,
            other => {
                return Err(Error::Parse {
                    section: "metadata".into(),
                    offset: None,
                    message: format!("unknown activation '{other}'"),
                })
            }
        }),
        LayerSpec::Flatten => Layer::Flatten,
        LayerSpec::Softmax => Layer::Softmax,
    })
}

/// Serialize a model (and optional training provenance) to `path`.
pub fn save(model: &Model, training: Option<&TrainingMeta>, path: &Path) -> Result<()> {
    let meta = Meta {
        architecture: ArchSpec {
            task: match model.task() {
                Task::Scalar => "scalar".into(),
                Task::Categorical => "categorical".into(),
            },
            input_shape: model.input_shape().to_vec(),
            layers: model.layers().iter().map(layer_spec).collect(),
        },
        training: training.cloned(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for layer in model.layers() {
        for tensor in layer.state_tensors() {
            out.extend_from_slice(&(tensor.numel() as u64).to_le_bytes());
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn parse_err(section: &str, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        section: section.into(),
        offset: Some(offset),
        message: message.into(),
    }
}

/// Load a checkpoint written by `save`.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(parse_err("header", 0, "file shorter than fixed header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(parse_err("header", 0, "bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err("metadata", 20, "metadata extends past end of file"))?;
    let meta: Meta = serde_json::from_slice(&bytes[20..meta_end])
        .map_err(|e| parse_err("metadata", 20, e.to_string()))?;

    let task = match meta.architecture.task.as_str() {
        "scalar" => Task::Scalar,
        "categorical" => Task::Categorical,
        other => return Err(parse_err("metadata", 20, format!("unknown task '{other}'"))),
    };
    let mut layers = meta
        .architecture
        .layers
        .iter()
        .map(build_layer)
        .collect::<Result<Vec<_>>>()?;

    // Parameter payload.
    let mut at = meta_end;
    for (li, layer) in layers.iter_mut().enumerate() {
        for tensor in layer.state_tensors_mut() {
            let section = format!("parameters[{li}]");
            if at + 8 > bytes.len() {
                return Err(parse_err(&section, at as u64, "missing tensor length"));
            }
            let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
            at += 8;
            if count != tensor.numel() {
                return Err(parse_err(
                    &section,
                    (at - 8) as u64,
                    format!("expected {} values, found {count}", tensor.numel()),
                ));
            }
            let end = at + 8 * count;
            if end > bytes.len() {
                return Err(parse_err(&section, at as u64, "tensor payload truncated"));
            }
            for (v, chunk) in tensor.data_mut().iter_mut().zip(bytes[at..end].chunks(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            at = end;
        }
    }
    if at != bytes.len() {
        return Err(parse_err(
            "parameters",
            at as u64,
            format!("{} trailing bytes", bytes.len() - at),
        ));
    }

    // Re-validate invariants (e.g. batch-norm variances) on the loaded data.
    let rebuilt: Vec<Layer> = layers
        .into_iter()
        .map(|l| match l {
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                epsilon,
            } => Layer::batch_norm_from_parts(scale, shift, running_mean, running_var, epsilon),
            other => Ok(other),
        })
        .collect::<Result<_>>()?;
    let model = Model::new(rebuilt, meta.architecture.input_shape, task)?;
    Ok(Checkpoint {
        model,
        training: meta.training,
    })
}
