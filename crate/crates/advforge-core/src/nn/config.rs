use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One layer of the stack. The vocabulary is deliberately small: it covers
/// the small conv classifiers this toolkit studies, nothing more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Softmax,
}

/// Architecture description: input dimensions plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input dimensions as `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatShape {
    /// `[channels, height, width]` image-like activations.
    Chw(usize, usize, usize),
    /// Flat feature vector (dense layers and the logits).
    Flat(usize),
}

impl FeatShape {
    pub fn volume(&self) -> usize {
        match *self {
            FeatShape::Chw(c, h, w) => c * h * w,
            FeatShape::Flat(n) => n,
        }
    }
}

impl ModelConfig {
    /// Walks the stack and returns every inter-layer shape (input first),
    /// verifying that consecutive layers compose and that the stack ends in
    /// `num_classes` logits followed by softmax.
    pub fn shape_plan(&self) -> Result<Vec<FeatShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig("input_shape has a zero dim".into()));
        }
        let mut shapes = vec![FeatShape::Chw(c, h, w)];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (layer, cur) {
                (
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    FeatShape::Chw(_, h, w),
                ) => {
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: conv filters/kernel/stride must be positive"
                        )));
                    }
                    let oh = conv_out(h, *kernel, *stride, *padding)?;
                    let ow = conv_out(w, *kernel, *stride, *padding)?;
                    FeatShape::Chw(*filters, oh, ow)
                }
                (LayerSpec::MaxPool { window }, FeatShape::Chw(c, h, w)) => {
                    if *window == 0 || h % window != 0 || w % window != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: maxpool window {window} does not tile {h}x{w}"
                        )));
                    }
                    FeatShape::Chw(c, h / window, w / window)
                }
                (LayerSpec::Dense { units }, cur) => {
                    if *units == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "layer {i}: dense units must be positive"
                        )));
                    }
                    // A dense layer after image-shaped activations implies a
                    // flatten; row-major [c,h,w] flattens in place.
                    let _ = cur.volume();
                    FeatShape::Flat(*units)
                }
                (LayerSpec::Relu, cur) => cur,
                (LayerSpec::Softmax, FeatShape::Flat(n)) => FeatShape::Flat(n),
                (LayerSpec::Softmax, other) => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i}: softmax needs flat input, got {other:?}"
                    )))
                }
                (spec, other) => {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i}: {spec:?} cannot follow {other:?}"
                    )))
                }
            };
            shapes.push(next);
        }
        match (self.layers.last(), shapes.last()) {
            (Some(LayerSpec::Softmax), Some(FeatShape::Flat(n))) if *n == self.num_classes => {
                Ok(shapes)
            }
            _ => Err(Error::InvalidConfig(format!(
                "stack must end in Dense({}) followed by Softmax",
                self.num_classes
            ))),
        }
    }

    /// The 28x28 grayscale digit classifier used throughout: two 5x5 conv
    /// blocks (32 then 64 filters, stride 1, padding 2, each followed by
    /// relu and 2x2 max-pooling), a 1024-unit dense layer with relu, and a
    /// 10-way dense + softmax head.
    pub fn mnist_cnn() -> Self {
        ModelConfig {
            input_shape: [1, 28, 28],
            num_classes: 10,
            layers: vec![
                LayerSpec::Conv {
                    filters: 32,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv {
                    filters: 64,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Dense { units: 1024 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 10 },
                LayerSpec::Softmax,
            ],
        }
    }
}

/// Closed-form conv output size: `(in + 2*padding - kernel)/stride + 1`.
pub fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidConfig(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}
