//! Quantized model representation, float reference model, calibration, and
//! model file formats.

pub mod float;
pub mod format;
pub mod layers;
pub mod quantized;

pub use float::{pixels_to_float, softmax, Activations, FloatModel, Gradients};
pub use format::{load_float, load_quantized, save_float, save_quantized, FLOAT_MAGIC, QUANT_MAGIC};
pub use layers::{tiny_graph, LayerGraph, LayerKind, LayerSpec, Shape};
pub use quantized::{
    argmax_i8, best_window, calibrate_quantization, window_rewiden, window_slice, ForwardReport,
    QuantizedModel, QuantizedTensor, Scratch, TruncationWindow, ValueHook, ValueSite, ACC_BITS,
    ACC_MAX, ACC_MIN, PRODUCT_BITS, Q_MAX, VALUE_BITS,
};
