//! Layer stacks for the three arousal classifiers and their shape and
//! parameter arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::{pool_output, ConvGeom, Vol};
use crate::error::{Error, Result};

pub const FRAME_HEIGHT: usize = 72;
pub const FRAME_WIDTH: usize = 128;
pub const SEGMENT_FRAMES: usize = 8;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "2DFrameCNN")]
    FrameCnn2d,
    #[serde(rename = "2DSeqCNN")]
    SeqCnn2d,
    #[serde(rename = "3DSeqCNN")]
    SeqCnn3d,
}

impl ModelName {
    pub const ALL: [ModelName; 3] = [ModelName::FrameCnn2d, ModelName::SeqCnn2d, ModelName::SeqCnn3d];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::FrameCnn2d => "2DFrameCNN",
            ModelName::SeqCnn2d => "2DSeqCNN",
            ModelName::SeqCnn3d => "3DSeqCNN",
        }
    }

    /// Identifier stored in checkpoints.
    pub fn id(self) -> u32 {
        match self {
            ModelName::FrameCnn2d => 0,
            ModelName::SeqCnn2d => 1,
            ModelName::SeqCnn3d => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::UnknownModel(format!("id {id}")))
    }

    /// Whether the model sees only the last frame of a segment.
    pub fn single_frame(self) -> bool {
        self == ModelName::FrameCnn2d
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    /// Accepts the canonical names and the short CLI forms
    /// `2dframe`, `2dseq`, `3dseq` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2dframecnn" | "2dframe" => Ok(ModelName::FrameCnn2d),
            "2dseqcnn" | "2dseq" => Ok(ModelName::SeqCnn2d),
            "3dseqcnn" | "3dseq" => Ok(ModelName::SeqCnn3d),
            _ => Err(Error::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2D { filters: usize, kernel: [usize; 2] },
    /// Kernel is `[temporal, height, width]`.
    Conv3D { filters: usize, kernel: [usize; 3] },
    MaxPool2D { pool: [usize; 2] },
    /// Pool is `[temporal, height, width]`.
    MaxPool3D { pool: [usize; 3] },
    ReLU,
    Flatten,
    BatchNorm,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2D { .. } | LayerSpec::Conv3D { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::Conv3D { .. } => "Conv3D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::MaxPool3D { .. } => "MaxPool3D",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::BatchNorm => "BatchNorm",
            LayerSpec::Dense { .. } => "Dense",
        }
    }
}

/// Per-sample activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    /// `[C, H, W]` (`temporal == false`, `vol.t == 1`) or `[C, T, H, W]`.
    Volume { vol: Vol, temporal: bool },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match self {
            ActShape::Volume { vol, .. } => vol.len(),
            ActShape::Flat(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Volume { vol, temporal: false } => vec![vol.c, vol.h, vol.w],
            ActShape::Volume { vol, temporal: true } => vec![vol.c, vol.t, vol.h, vol.w],
            ActShape::Flat(n) => vec![n],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [c, h, w] => Ok(ActShape::Volume {
                vol: Vol::new(c, 1, h, w),
                temporal: false,
            }),
            [c, t, h, w] => Ok(ActShape::Volume {
                vol: Vol::new(c, t, h, w),
                temporal: true,
            }),
            [n] => Ok(ActShape::Flat(n)),
            _ => Err(Error::shape(format!("unsupported input shape {dims:?}"))),
        }
    }

    fn volume(&self, temporal: bool, what: &str) -> Result<Vol> {
        match *self {
            ActShape::Volume { vol, temporal: t } if t == temporal => Ok(vol),
            other => Err(Error::shape(format!("{what} cannot take input {:?}", other.dims()))),
        }
    }

    fn flat(&self, what: &str) -> Result<usize> {
        match *self {
            ActShape::Flat(n) => Ok(n),
            other => Err(Error::shape(format!("{what} needs a flat input, got {:?}", other.dims()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: ModelName,
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

/// Geometry of layer `i` resolved against its input shape.
#[derive(Debug, Clone, Copy)]
pub enum Resolved {
    Conv(ConvGeom),
    Pool { input: Vol, pool: [usize; 3] },
    Relu,
    Flatten,
    BatchNorm { features: usize },
    Dense { inputs: usize, units: usize },
}

impl ModelSpec {
    /// Propagates `input_shape` through every layer. Entry `i` is the input
    /// to layer `i`; the final entry is the model output.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut shapes = vec![ActShape::from_dims(&self.input_shape)?];
        for layer in &self.layers {
            let cur = *shapes.last().unwrap();
            let next = match (layer, self.resolve_one(layer, cur)?) {
                (_, Resolved::Conv(g)) => ActShape::Volume {
                    vol: g.output(),
                    temporal: matches!(layer, LayerSpec::Conv3D { .. }),
                },
                (_, Resolved::Pool { input, pool }) => ActShape::Volume {
                    vol: pool_output(input, pool)?,
                    temporal: matches!(layer, LayerSpec::MaxPool3D { .. }),
                },
                (_, Resolved::Relu | Resolved::BatchNorm { .. }) => cur,
                (_, Resolved::Flatten) => ActShape::Flat(cur.len()),
                (_, Resolved::Dense { units, .. }) => ActShape::Flat(units),
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Resolved geometry per layer (validated).
    pub fn resolve(&self) -> Result<Vec<Resolved>> {
        let shapes = self.shapes()?;
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| self.resolve_one(l, *s))
            .collect()
    }

    fn resolve_one(&self, layer: &LayerSpec, cur: ActShape) -> Result<Resolved> {
        Ok(match *layer {
            LayerSpec::Conv2D { filters, kernel: [kh, kw] } => {
                Resolved::Conv(ConvGeom::new(cur.volume(false, "Conv2D")?, filters, [1, kh, kw])?)
            }
            LayerSpec::Conv3D { filters, kernel } => {
                Resolved::Conv(ConvGeom::new(cur.volume(true, "Conv3D")?, filters, kernel)?)
            }
            LayerSpec::MaxPool2D { pool: [ph, pw] } => Resolved::Pool {
                input: cur.volume(false, "MaxPool2D")?,
                pool: [1, ph, pw],
            },
            LayerSpec::MaxPool3D { pool } => Resolved::Pool {
                input: cur.volume(true, "MaxPool3D")?,
                pool,
            },
            LayerSpec::ReLU => Resolved::Relu,
            LayerSpec::Flatten => match cur {
                ActShape::Volume { .. } => Resolved::Flatten,
                ActShape::Flat(_) => return Err(Error::shape("Flatten on an already flat input")),
            },
            LayerSpec::BatchNorm => Resolved::BatchNorm {
                features: cur.flat("BatchNorm")?,
            },
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(Error::shape("Dense with zero units"));
                }
                Resolved::Dense {
                    inputs: cur.flat("Dense")?,
                    units,
                }
            }
        })
    }

    /// Checks the shape chain ends at `[num_classes]`.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        match shapes.last() {
            Some(ActShape::Flat(n)) if *n == self.num_classes => Ok(()),
            other => Err(Error::shape(format!(
                "model output {other:?} is not [{}]",
                self.num_classes
            ))),
        }
    }

    /// The same layer stack applied to a different input shape (used for
    /// reduced-size checks). Fails if the chain no longer reaches the output.
    pub fn with_input(&self, input_shape: &[usize]) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input_shape: input_shape.to_vec(),
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the vector produced by the Flatten layer.
    pub fn flatten_width(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        self.layers
            .iter()
            .position(|l| *l == LayerSpec::Flatten)
            .map(|i| shapes[i + 1].len())
            .ok_or_else(|| Error::shape("model has no Flatten layer"))
    }

    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }
}

/// The layer stack for `name`.
///
/// All three share conv(8) -> conv(12) -> conv(16) with 5x5 spatial
/// kernels, ReLU after every convolution, max pooling after every ReLU,
/// then flatten -> batch norm -> dense(64) -> ReLU -> dense(2).
///
/// | model      | input         | pooling                      | flatten |
/// |------------|---------------|------------------------------|---------|
/// | 2DFrameCNN | `[1,72,128]`  | 2x2, 2x2, 2x2                | 960     |
/// | 2DSeqCNN   | `[8,72,128]`  | 2x2, 2x2, 2x2                | 960     |
/// | 3DSeqCNN   | `[1,8,72,128]`| 1x2x2, 1x2x2, 2x2x2 (t,h,w)  | 1920    |
///
/// 3D kernels are 2 frames deep. The temporal pooling schedule is the one
/// that yields a 1,920-wide feature vector (time 8 -> 7 -> 7 -> 6 -> 6 -> 5 -> 2).
pub fn build_architecture(name: ModelName) -> ModelSpec {
    let filters = [8, 12, 16];
    let mut layers = Vec::new();
    let input_shape = match name {
        ModelName::FrameCnn2d | ModelName::SeqCnn2d => {
            for f in filters {
                layers.push(LayerSpec::Conv2D { filters: f, kernel: [5, 5] });
                layers.push(LayerSpec::ReLU);
                layers.push(LayerSpec::MaxPool2D { pool: [2, 2] });
            }
            let channels = if name == ModelName::FrameCnn2d { 1 } else { SEGMENT_FRAMES };
            vec![channels, FRAME_HEIGHT, FRAME_WIDTH]
        }
        ModelName::SeqCnn3d => {
            let pools = [[1, 2, 2], [1, 2, 2], [2, 2, 2]];
            for (f, pool) in filters.into_iter().zip(pools) {
                layers.push(LayerSpec::Conv3D { filters: f, kernel: [2, 5, 5] });
                layers.push(LayerSpec::ReLU);
                layers.push(LayerSpec::MaxPool3D { pool });
            }
            vec![1, SEGMENT_FRAMES, FRAME_HEIGHT, FRAME_WIDTH]
        }
    };
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::BatchNorm,
        LayerSpec::Dense { units: 64 },
        LayerSpec::ReLU,
        LayerSpec::Dense { units: NUM_CLASSES },
    ]);
    ModelSpec {
        name,
        layers,
        input_shape,
        num_classes: NUM_CLASSES,
    }
}

/// Closed-form count of trainable weights and biases. Batch-norm scale and
/// shift are included only when `include_batchnorm` is set.
///
/// Excluding batch norm: 2DFrameCNN 69,070; 2DSeqCNN 70,470; 3DSeqCNN
/// 137,910. The commonly quoted figure for the 3D network (about 145k)
/// does not follow from this stack; it is not reproduced.
pub fn count_parameters(spec: &ModelSpec, include_batchnorm: bool) -> Result<usize> {
    let mut total = 0;
    for r in spec.resolve()? {
        total += match r {
            Resolved::Conv(g) => g.weight_len() + g.filters,
            Resolved::Dense { inputs, units } => inputs * units + units,
            Resolved::BatchNorm { features } if include_batchnorm => 2 * features,
            _ => 0,
        };
    }
    Ok(total)
}
