use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One layer as written in a config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bn: bool,
    },
    Fc {
        out: usize,
        #[serde(default)]
        bn: bool,
    },
}

fn one() -> usize {
    1
}

/// Network description: input shape `[C, H, W]`, class count and layers.
/// Every layer but the last is followed by a ReLU; the first and last
/// layers are the fixed-precision ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

/// A layer with all shapes resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub op: LayerOp,
    pub bn: bool,
    pub relu: bool,
    /// Bias is used only when there is no batch-norm to absorb it.
    pub bias: bool,
    pub macs: u64,
}

impl ResolvedLayer {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.op {
            LayerOp::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerOp::Fc {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.op {
            LayerOp::Conv { out_channels, .. } => out_channels,
            LayerOp::Fc { out_features, .. } => out_features,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.op {
            LayerOp::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerOp::Fc { in_features, .. } => in_features,
        }
    }
}

impl Topology {
    /// Two strided 3x3 convolutions and two fully-connected layers for
    /// 28x28 single-channel digits.
    pub fn reference_cnn() -> Self {
        Topology {
            input: [1, 28, 28],
            classes: 10,
            layers: vec![
                LayerSpec::Conv {
                    out: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bn: true,
                },
                LayerSpec::Conv {
                    out: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bn: true,
                },
                LayerSpec::Fc { out: 32, bn: true },
                LayerSpec::Fc { out: 10, bn: false },
            ],
        }
    }

    /// Six 3x3 convolutions (three strided) and two fully-connected layers.
    pub fn mini_vgg() -> Self {
        let conv = |out, stride| LayerSpec::Conv {
            out,
            kernel: 3,
            stride,
            padding: 1,
            bn: true,
        };
        Topology {
            input: [1, 28, 28],
            classes: 10,
            layers: vec![
                conv(8, 1),
                conv(8, 2),
                conv(16, 1),
                conv(16, 2),
                conv(32, 1),
                conv(32, 2),
                LayerSpec::Fc { out: 64, bn: true },
                LayerSpec::Fc { out: 10, bn: false },
            ],
        }
    }

    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.layers.len() < 2 {
            return Err(Error::Config("topology needs at least two layers".into()));
        }
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("bad input shape {:?}", self.input)));
        }
        let mut flat: Option<usize> = None;
        let last = self.layers.len() - 1;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let (op, bn) = match *spec {
                LayerSpec::Conv {
                    out: oc,
                    kernel,
                    stride,
                    padding,
                    bn,
                } => {
                    if flat.is_some() {
                        return Err(Error::Config(format!("layer {i}: conv after fc")));
                    }
                    if oc == 0 || kernel == 0 || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::Config(format!("layer {i}: invalid conv geometry")));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let op = LayerOp::Conv {
                        in_channels: c,
                        out_channels: oc,
                        kernel,
                        stride,
                        padding,
                        in_hw: (h, w),
                        out_hw: (oh, ow),
                    };
                    (c, h, w) = (oc, oh, ow);
                    (op, bn)
                }
                LayerSpec::Fc { out: of, bn } => {
                    if of == 0 {
                        return Err(Error::Config(format!("layer {i}: zero outputs")));
                    }
                    let inf = flat.unwrap_or(c * h * w);
                    flat = Some(of);
                    (
                        LayerOp::Fc {
                            in_features: inf,
                            out_features: of,
                        },
                        bn,
                    )
                }
            };
            let macs = match op {
                LayerOp::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    out_hw,
                    ..
                } => (out_hw.0 * out_hw.1 * out_channels * in_channels * kernel * kernel) as u64,
                LayerOp::Fc {
                    in_features,
                    out_features,
                } => (in_features * out_features) as u64,
            };
            out.push(ResolvedLayer {
                op,
                bn,
                relu: i != last,
                bias: !bn,
                macs,
            });
        }
        let final_width = flat.ok_or_else(|| Error::Config("last layer must be fc".into()))?;
        if !matches!(self.layers[last], LayerSpec::Fc { .. }) || final_width != self.classes {
            return Err(Error::Config(format!(
                "last layer must be fc with {} outputs",
                self.classes
            )));
        }
        Ok(out)
    }
}

/// Hex SHA-256 over any serializable description (used to tie checkpoints
/// to a topology and bit space).
pub fn content_hash<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("topology serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
