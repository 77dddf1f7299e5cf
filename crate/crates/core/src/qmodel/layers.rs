//! Layer graph: kinds, shapes, and composability checks.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Channels-height-width shape. Fully-connected vectors use `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub fn volume(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    /// Adds the output of an earlier layer (by index) to the current value.
    AddResidual {
        from: usize,
    },
}

impl LayerKind {
    pub fn owns_weights(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. })
    }

    /// Layers whose output is produced by a truncated accumulator.
    pub fn accumulates(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::FullyConnected { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::AddResidual { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::AddResidual { .. } => "add",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Index into the model's weight-tensor list; present exactly for
    /// conv2d and fully-connected layers.
    pub weight_id: Option<usize>,
}

/// Ordered layer list with a fixed input shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl LayerGraph {
    /// Build from kinds, assigning weight ids in order.
    pub fn new(input: Shape, kinds: Vec<LayerKind>) -> Self {
        let mut next = 0;
        let layers = kinds
            .into_iter()
            .map(|kind| {
                let weight_id = kind.owns_weights().then(|| {
                    let id = next;
                    next += 1;
                    id
                });
                LayerSpec { kind, weight_id }
            })
            .collect();
        LayerGraph { input, layers }
    }

    pub fn weight_tensor_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.owns_weights()).count()
    }

    /// Number of weight elements for one weighted layer.
    pub fn weight_len(&self, layer: usize) -> usize {
        match self.layers[layer].kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => out_ch * in_ch * kernel * kernel,
            LayerKind::FullyConnected { in_features, out_features } => in_features * out_features,
            _ => 0,
        }
    }

    /// Per-layer output shapes, validating composability. The error names
    /// the first offending layer.
    pub fn output_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                    if cur.channels != in_ch {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("conv2d expects {in_ch} channels, input has {}", cur.channels),
                        });
                    }
                    if stride == 0 || kernel == 0 {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: "kernel and stride must be positive".into(),
                        });
                    }
                    let padded_h = cur.height + 2 * padding;
                    let padded_w = cur.width + 2 * padding;
                    if padded_h < kernel || padded_w < kernel {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("kernel {kernel} larger than padded input {padded_h}x{padded_w}"),
                        });
                    }
                    Shape::new(out_ch, (padded_h - kernel) / stride + 1, (padded_w - kernel) / stride + 1)
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    if cur.volume() != in_features {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("fc expects {in_features} inputs, got {} ({cur})", cur.volume()),
                        });
                    }
                    Shape::new(out_features, 1, 1)
                }
                LayerKind::Relu => cur,
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    if stride == 0 || kernel == 0 || cur.height < kernel || cur.width < kernel {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("pool kernel {kernel} does not fit input {cur}"),
                        });
                    }
                    Shape::new(cur.channels, (cur.height - kernel) / stride + 1, (cur.width - kernel) / stride + 1)
                }
                LayerKind::AddResidual { from } => {
                    if from >= i {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("residual source {from} is not an earlier layer"),
                        });
                    }
                    let src = shapes[from];
                    if src != cur {
                        return Err(CoreError::ShapeMismatch {
                            layer: i,
                            detail: format!("residual source shape {src} != current {cur}"),
                        });
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Indices of layers that own weights (the "neuron" layers).
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.owns_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total neuron count: one neuron per output element of each weighted
    /// layer.
    pub fn neuron_count(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        Ok(self
            .weighted_layers()
            .iter()
            .map(|&l| shapes[l].volume())
            .sum())
    }
}

/// The desk-scale reference topology: three conv stages and two
/// fully-connected stages over a 1×16×16 input, ten classes.
pub fn tiny_graph() -> LayerGraph {
    LayerGraph::new(
        Shape::new(1, 16, 16),
        vec![
            LayerKind::Conv2d { in_ch: 1, out_ch: 4, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { in_ch: 4, out_ch: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { in_ch: 8, out_ch: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::FullyConnected { in_features: 128, out_features: 24 },
            LayerKind::Relu,
            LayerKind::FullyConnected { in_features: 24, out_features: 10 },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_graph_composes() {
        let g = tiny_graph();
        let shapes = g.output_shapes().unwrap();
        assert_eq!(shapes[0], Shape::new(4, 16, 16));
        assert_eq!(shapes[2], Shape::new(4, 8, 8));
        assert_eq!(shapes[5], Shape::new(8, 4, 4));
        assert_eq!(shapes[10], Shape::new(10, 1, 1));
        assert_eq!(g.neuron_count().unwrap(), 1024 + 512 + 128 + 24 + 10);
        assert_eq!(g.weight_tensor_count(), 5);
    }

    #[test]
    fn mismatch_names_the_layer() {
        let g = LayerGraph::new(
            Shape::new(2, 8, 8),
            vec![
                LayerKind::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 1, padding: 1 },
                LayerKind::FullyConnected { in_features: 99, out_features: 10 },
            ],
        );
        match g.output_shapes() {
            Err(CoreError::ShapeMismatch { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn residual_requires_matching_source() {
        let g = LayerGraph::new(
            Shape::new(2, 4, 4),
            vec![
                LayerKind::Conv2d { in_ch: 2, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::AddResidual { from: 0 },
            ],
        );
        assert!(g.output_shapes().is_ok());
        let bad = LayerGraph::new(
            Shape::new(2, 4, 4),
            vec![
                LayerKind::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
                LayerKind::MaxPool { kernel: 2, stride: 2 },
                LayerKind::AddResidual { from: 0 },
            ],
        );
        assert!(bad.output_shapes().is_err());
    }
}
