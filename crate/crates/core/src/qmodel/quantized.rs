//! Fixed-point quantized model: 8-bit values, 16-bit products, 24-bit
//! saturating accumulators, and per-layer 8-bit truncation windows.
//!
//! # Datapath semantics
//!
//! Every multiply takes two signed 8-bit operands and produces a signed
//! 16-bit product. Products accumulate into a signed 24-bit accumulator
//! that saturates at ±2^23 on every step. A layer output is the bit window
//! `[q, q+7]` of its accumulator: the accumulator is arithmetically shifted
//! right by `q` and the low 8 bits are reinterpreted as a signed byte. The
//! window is a pure bit slice, so re-widening the output and comparing
//! against the accumulator masks exactly the discarded bits; calibration
//! picks `q` to make both the dropped low bits and any wrapped high bits
//! cheap in mean-squared error.
//!
//! Quantization is symmetric with power-of-two scales only: a tensor with
//! scale exponent `e` stores `round(x * 2^e)`, so window selection is the
//! only rescaling operation the datapath ever needs.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::CoreError;
use crate::num::Real;
use crate::qmodel::float::FloatModel;
use crate::qmodel::layers::{LayerGraph, LayerKind, Shape};
use crate::Result;

pub const ACC_BITS: u32 = 24;
pub const PRODUCT_BITS: u32 = 16;
pub const VALUE_BITS: u32 = 8;
pub const ACC_MAX: i32 = (1 << (ACC_BITS - 1)) - 1;
pub const ACC_MIN: i32 = -(1 << (ACC_BITS - 1));
/// Highest legal low-bit index of the 8-bit window in the 24-bit accumulator.
pub const Q_MAX: u8 = (ACC_BITS - VALUE_BITS) as u8;

/// Signed 8-bit tensor with a power-of-two scale.
/// Dequantized value = element × 2^(-scale_exp).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub dims: Vec<usize>,
    pub data: Vec<i8>,
    pub scale_exp: i32,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Low-bit index of a layer's 8-bit output window in its 24-bit accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationWindow {
    pub layer: usize,
    pub q: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub graph: LayerGraph,
    /// Weight tensors by weight id.
    pub weights: Vec<QuantizedTensor>,
    /// Truncation windows for the accumulating layers.
    pub windows: Vec<TruncationWindow>,
    /// Scale exponent of the quantized input.
    pub input_scale: i32,
    /// Dequantization exponent of every layer output.
    pub out_scales: Vec<i32>,
}

/// Identifies one injected value during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueSite {
    /// One weight of a weighted layer, read once per inference.
    Weight { layer: usize, index: usize },
    /// One produced output activation of a weighted layer.
    Activation { layer: usize, index: usize },
}

impl ValueSite {
    pub fn layer(&self) -> usize {
        match *self {
            ValueSite::Weight { layer, .. } | ValueSite::Activation { layer, .. } => layer,
        }
    }
}

/// Per-value mutation hook: the fault-injection point. Applied to every
/// weight read and every produced activation of weighted layers, exactly
/// once per inference.
pub trait ValueHook {
    fn mutate(&mut self, site: ValueSite, value: i8) -> i8;
}

impl<T: FnMut(ValueSite, i8) -> i8> ValueHook for T {
    fn mutate(&mut self, site: ValueSite, value: i8) -> i8 {
        self(site, value)
    }
}

/// Reusable per-pass workspace. A forward pass owns its scratch; the model
/// itself is immutable and freely shared between threads.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    /// Layer outputs, indexed by layer.
    pub outputs: Vec<Vec<i8>>,
    /// Faulted weight staging buffer.
    wbuf: Vec<i8>,
    /// Per-layer saturation counts for the pass.
    pub saturations: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ForwardReport {
    pub logits: Vec<i8>,
    pub total_saturations: u64,
}

#[inline(always)]
fn sat24(v: i32, hit: &mut u64) -> i32 {
    if v > ACC_MAX {
        *hit += 1;
        ACC_MAX
    } else if v < ACC_MIN {
        *hit += 1;
        ACC_MIN
    } else {
        v
    }
}

/// The 8-bit window `[q, q+7]` of a saturated accumulator value.
#[inline(always)]
pub fn window_slice(acc: i32, q: u8) -> i8 {
    ((acc >> q) & 0xFF) as u8 as i8
}

/// Sign-extend a window value back to accumulator position `q`.
#[inline(always)]
pub fn window_rewiden(out: i8, q: u8) -> i32 {
    (out as i32) << q
}

impl QuantizedModel {
    pub fn shapes(&self) -> Vec<Shape> {
        self.graph.output_shapes().expect("validated at construction")
    }

    pub fn window_for(&self, layer: usize) -> Option<u8> {
        self.windows.iter().find(|w| w.layer == layer).map(|w| w.q)
    }

    /// Quantize a u8 image to the model's input scale (exponent 7:
    /// pixel/256 ≈ q/128).
    pub fn quantize_input(&self, pixels: &[u8]) -> Vec<i8> {
        debug_assert_eq!(self.input_scale, 7);
        pixels.iter().map(|&p| (((p as i32) + 1) >> 1).min(127) as i8).collect()
    }

    /// Run one quantized inference.
    ///
    /// `hook`, when present, is applied to every weight of each weighted
    /// layer (the per-inference weight read) and to every produced output
    /// activation of each weighted layer, exactly once.
    pub fn forward(
        &self,
        input: &[i8],
        scratch: &mut Scratch,
        mut hook: Option<&mut dyn ValueHook>,
    ) -> Result<ForwardReport> {
        let shapes = self.shapes();
        if input.len() != self.graph.input.volume() {
            return Err(CoreError::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "input has {} elements, expected {}",
                    input.len(),
                    self.graph.input.volume()
                ),
            });
        }
        let n_layers = self.graph.layers.len();
        if scratch.outputs.len() != n_layers {
            scratch.outputs = shapes.iter().map(|s| vec![0i8; s.volume()]).collect();
        }
        scratch.saturations.clear();
        scratch.saturations.resize(n_layers, 0);

        for i in 0..n_layers {
            let in_shape = if i == 0 { self.graph.input } else { shapes[i - 1] };
            let kind = self.graph.layers[i].kind;
            let q = self.window_for(i).unwrap_or(0);
            let mut sat = 0u64;
            // split-borrow the scratch: current output vs earlier outputs
            let (before, rest) = scratch.outputs.split_at_mut(i);
            let out = &mut rest[0];
            let cur: &[i8] = if i == 0 { input } else { &before[i - 1] };
            match kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                    let wid = self.graph.layers[i].weight_id.unwrap();
                    let weights = self.layer_weights(i, wid, &mut scratch.wbuf, &mut hook);
                    conv_q(
                        cur, weights, out, in_shape, shapes[i], in_ch, out_ch, kernel, stride,
                        padding, q, &mut sat,
                    );
                    apply_activation_hook(out, i, &mut hook);
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    let wid = self.graph.layers[i].weight_id.unwrap();
                    let weights = self.layer_weights(i, wid, &mut scratch.wbuf, &mut hook);
                    for o in 0..out_features {
                        let row = &weights[o * in_features..(o + 1) * in_features];
                        let mut acc = 0i32;
                        for (&x, &w) in cur.iter().zip(row) {
                            acc = sat24(acc + (x as i32) * (w as i32), &mut sat);
                        }
                        out[o] = window_slice(acc, q);
                    }
                    apply_activation_hook(out, i, &mut hook);
                }
                LayerKind::Relu => {
                    for (dst, &x) in out.iter_mut().zip(cur) {
                        *dst = x.max(0);
                    }
                }
                LayerKind::MaxPool { kernel, stride } => {
                    pool_max_q(cur, out, in_shape, shapes[i], kernel, stride);
                }
                LayerKind::AvgPool { kernel, stride } => {
                    pool_avg_q(cur, out, in_shape, shapes[i], kernel, stride, q, &mut sat);
                }
                LayerKind::AddResidual { from } => {
                    let src = &before[from];
                    let sa = if i == 0 { self.input_scale } else { self.out_scales[i - 1] };
                    let sb = self.out_scales[from];
                    let target = sa.max(sb);
                    let (sh_a, sh_b) = ((target - sa) as u32, (target - sb) as u32);
                    for ((dst, &a), &b) in out.iter_mut().zip(cur).zip(src) {
                        let wa = sat24((a as i32) << sh_a, &mut sat);
                        let wb = sat24((b as i32) << sh_b, &mut sat);
                        let acc = sat24(wa + wb, &mut sat);
                        *dst = window_slice(acc, q);
                    }
                }
            }
            scratch.saturations[i] = sat;
        }
        Ok(ForwardReport {
            logits: scratch.outputs[n_layers - 1].clone(),
            total_saturations: scratch.saturations.iter().sum(),
        })
    }

    /// Weight slice for a layer, routed through the hook when present.
    fn layer_weights<'a>(
        &'a self,
        layer: usize,
        wid: usize,
        wbuf: &'a mut Vec<i8>,
        hook: &mut Option<&mut dyn ValueHook>,
    ) -> &'a [i8] {
        let w = &self.weights[wid].data;
        match hook {
            None => w,
            Some(h) => {
                wbuf.clear();
                wbuf.extend(
                    w.iter()
                        .enumerate()
                        .map(|(index, &v)| h.mutate(ValueSite::Weight { layer, index }, v)),
                );
                wbuf
            }
        }
    }

    /// Top-1 class of one quantized inference; ties break to the lower
    /// class index.
    pub fn classify(&self, pixels: &[u8], scratch: &mut Scratch, hook: Option<&mut dyn ValueHook>) -> Result<usize> {
        let input = self.quantize_input(pixels);
        let report = self.forward(&input, scratch, hook)?;
        Ok(argmax_i8(&report.logits))
    }

    /// Fault-free top-1 accuracy over a dataset.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut scratch = Scratch::default();
        let mut correct = 0usize;
        for i in 0..data.len() {
            if self.classify(data.image(i), &mut scratch, None)? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub fn argmax_i8(v: &[i8]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn apply_activation_hook(out: &mut [i8], layer: usize, hook: &mut Option<&mut dyn ValueHook>) {
    if let Some(h) = hook {
        for (index, v) in out.iter_mut().enumerate() {
            *v = h.mutate(ValueSite::Activation { layer, index }, *v);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_q(
    input: &[i8],
    w: &[i8],
    out: &mut [i8],
    in_shape: Shape,
    out_shape: Shape,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    q: u8,
    sat: &mut u64,
) {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    for o in 0..out_ch {
        let wbase = o * in_ch * kernel * kernel;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i32;
                for i in 0..in_ch {
                    let ibase = i * ih;
                    let kbase = wbase + i * kernel * kernel;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = (ibase + iy as usize) * iw;
                        let krow = kbase + ky * kernel;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let p = (input[row + ix as usize] as i32) * (w[krow + kx] as i32);
                            acc = sat24(acc + p, sat);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = window_slice(acc, q);
            }
        }
    }
}

fn pool_max_q(input: &[i8], out: &mut [i8], in_shape: Shape, out_shape: Shape, kernel: usize, stride: usize) {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    for c in 0..in_shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = i8::MIN;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = input[(c * ih + oy * stride + ky) * iw + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(c * oh + oy) * ow + ox] = best;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pool_avg_q(
    input: &[i8],
    out: &mut [i8],
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    q: u8,
    sat: &mut u64,
) {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    for c in 0..in_shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0i32;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = input[(c * ih + oy * stride + ky) * iw + ox * stride + kx];
                        acc = sat24(acc + v as i32, sat);
                    }
                }
                out[(c * oh + oy) * ow + ox] = window_slice(acc, q);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Quantize a float model: symmetric 8-bit weights with power-of-two
/// scales, and per-layer truncation windows chosen to minimize the
/// mean-squared truncation error over one pass of the calibration set,
/// subject to `q >= q_scale`. Ties break to the smallest feasible `q`.
pub fn calibrate_quantization<F: Real>(
    float_model: &FloatModel<F>,
    calib: &Dataset,
    q_scale: u8,
) -> Result<QuantizedModel> {
    if calib.is_empty() {
        return Err(CoreError::invalid("dataset", "calibration set is empty"));
    }
    if q_scale > Q_MAX {
        return Err(CoreError::invalid("q_scale", format!("must be 0..={Q_MAX}, got {q_scale}")));
    }
    let graph = float_model.graph.clone();
    let shapes = graph.output_shapes()?;
    if graph.input.volume() != calib.height * calib.width {
        return Err(CoreError::ShapeMismatch {
            layer: 0,
            detail: "calibration images do not match the model input".into(),
        });
    }

    // weights first: symmetric, power-of-two scale exponents
    let mut weights = Vec::with_capacity(float_model.weights.len());
    for (wid, w) in float_model.weights.iter().enumerate() {
        let layer = graph
            .weighted_layers()
            .into_iter()
            .find(|&l| graph.layers[l].weight_id == Some(wid))
            .expect("weight id maps to a layer");
        let dims = match graph.layers[layer].kind {
            LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => vec![out_ch, in_ch, kernel, kernel],
            LayerKind::FullyConnected { in_features, out_features } => vec![out_features, in_features],
            _ => unreachable!(),
        };
        weights.push(quantize_weights(w, dims));
    }

    let input_scale = 7i32;
    // quantized activations of every calibration sample at the current layer
    let mut current: Vec<Vec<i8>> = (0..calib.len())
        .map(|i| {
            calib
                .image(i)
                .iter()
                .map(|&p| (((p as i32) + 1) >> 1).min(127) as i8)
                .collect()
        })
        .collect();
    let mut prev_scale = input_scale;
    let mut windows = Vec::new();
    let mut out_scales = Vec::with_capacity(graph.layers.len());
    // per-layer residual stash for add layers
    let mut stash: Vec<Option<Vec<Vec<i8>>>> = vec![None; graph.layers.len()];
    let residual_sources: Vec<usize> = graph
        .layers
        .iter()
        .filter_map(|l| match l.kind {
            LayerKind::AddResidual { from } => Some(from),
            _ => None,
        })
        .collect();

    for (i, layer) in graph.layers.iter().enumerate() {
        let in_shape = if i == 0 { graph.input } else { shapes[i - 1] };
        let out_shape = shapes[i];
        let kind = layer.kind;
        let out_scale;
        if kind.accumulates() {
            // capture raw accumulator values, pick q, emit outputs
            let mut accs: Vec<Vec<i32>> = Vec::with_capacity(current.len());
            let mut sat = 0u64;
            for (si, sample) in current.iter().enumerate() {
                let acc = match kind {
                    LayerKind::AddResidual { from } => {
                        let src = &stash[from].as_ref().expect("residual source stashed")[si];
                        let sa = prev_scale;
                        let sb = out_scales[from];
                        let target = sa.max(sb);
                        let (sh_a, sh_b) = ((target - sa) as u32, (target - sb) as u32);
                        sample
                            .iter()
                            .zip(src)
                            .map(|(&a, &b)| {
                                let wa = sat24((a as i32) << sh_a, &mut sat);
                                let wb = sat24((b as i32) << sh_b, &mut sat);
                                sat24(wa + wb, &mut sat)
                            })
                            .collect()
                    }
                    _ => accumulate_layer(sample, &graph, &weights, i, in_shape, out_shape, &mut sat),
                };
                accs.push(acc);
            }
            if sat > 0 {
                return Err(CoreError::CalibrationOverflow { layer: i });
            }
            let q = best_window(&accs, q_scale);
            windows.push(TruncationWindow { layer: i, q });
            for (sample, acc) in current.iter_mut().zip(&accs) {
                *sample = acc.iter().map(|&a| window_slice(a, q)).collect();
            }
            out_scale = match kind {
                LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
                    let wid = layer.weight_id.unwrap();
                    prev_scale + weights[wid].scale_exp - q as i32
                }
                LayerKind::AvgPool { kernel, .. } => {
                    let area = kernel * kernel;
                    if !area.is_power_of_two() {
                        return Err(CoreError::invalid(
                            "avgpool",
                            "kernel area must be a power of two for exact scales",
                        ));
                    }
                    prev_scale - q as i32 + area.trailing_zeros() as i32
                }
                LayerKind::AddResidual { from } => prev_scale.max(out_scales[from]) - q as i32,
                _ => unreachable!(),
            };
        } else {
            // pass-through transforms
            for sample in current.iter_mut() {
                let mut out = vec![0i8; out_shape.volume()];
                match kind {
                    LayerKind::Relu => {
                        for (dst, &x) in out.iter_mut().zip(sample.iter()) {
                            *dst = x.max(0);
                        }
                    }
                    LayerKind::MaxPool { kernel, stride } => {
                        pool_max_q(sample, &mut out, in_shape, out_shape, kernel, stride)
                    }
                    _ => unreachable!(),
                }
                *sample = out;
            }
            out_scale = prev_scale;
        }
        if residual_sources.contains(&i) {
            stash[i] = Some(current.clone());
        }
        out_scales.push(out_scale);
        prev_scale = out_scale;
    }

    Ok(QuantizedModel { graph, weights, windows, input_scale, out_scales })
}

fn quantize_weights<F: Real>(w: &[F], dims: Vec<usize>) -> QuantizedTensor {
    let max_abs = w.iter().fold(0.0f64, |m, &x| m.max(x.to_f64_lossy().abs()));
    let mut scale_exp = 0i32;
    if max_abs > 0.0 {
        // largest exponent with round(max_abs * 2^e) <= 127
        scale_exp = (127.0 / max_abs).log2().floor() as i32;
        while (max_abs * (2f64.powi(scale_exp + 1))).round() <= 127.0 {
            scale_exp += 1;
        }
        while (max_abs * (2f64.powi(scale_exp))).round() > 127.0 {
            scale_exp -= 1;
        }
    }
    let factor = 2f64.powi(scale_exp);
    let data = w
        .iter()
        .map(|&x| (x.to_f64_lossy() * factor).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor { dims, data, scale_exp }
}

/// Raw (pre-truncation) accumulator values for one accumulating layer
/// (residual adds are handled inline by the calibration loop).
#[allow(clippy::too_many_arguments)]
fn accumulate_layer(
    input: &[i8],
    graph: &LayerGraph,
    weights: &[QuantizedTensor],
    layer: usize,
    in_shape: Shape,
    out_shape: Shape,
    sat: &mut u64,
) -> Vec<i32> {
    let mut out = vec![0i32; out_shape.volume()];
    match graph.layers[layer].kind {
        LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            let w = &weights[graph.layers[layer].weight_id.unwrap()].data;
            let (ih, iw) = (in_shape.height, in_shape.width);
            let (oh, ow) = (out_shape.height, out_shape.width);
            for o in 0..out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0i32;
                        for i in 0..in_ch {
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let x = input[(i * ih + iy as usize) * iw + ix as usize] as i32;
                                    let wv = w[((o * in_ch + i) * kernel + ky) * kernel + kx] as i32;
                                    acc = sat24(acc + x * wv, sat);
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        LayerKind::FullyConnected { in_features, out_features } => {
            let w = &weights[graph.layers[layer].weight_id.unwrap()].data;
            for o in 0..out_features {
                let mut acc = 0i32;
                for (x, wv) in input.iter().zip(&w[o * in_features..(o + 1) * in_features]) {
                    acc = sat24(acc + (*x as i32) * (*wv as i32), sat);
                }
                out[o] = acc;
            }
        }
        LayerKind::AvgPool { kernel, stride } => {
            let (ih, iw) = (in_shape.height, in_shape.width);
            let (oh, ow) = (out_shape.height, out_shape.width);
            for c in 0..in_shape.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0i32;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                acc = sat24(
                                    acc + input[(c * ih + oy * stride + ky) * iw + ox * stride + kx] as i32,
                                    sat,
                                );
                            }
                        }
                        out[(c * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        _ => unreachable!("not an accumulating layer"),
    }
    out
}

/// Exhaustive q sweep minimizing the mean-squared truncation error,
/// restricted to `q >= q_scale`; ties break low.
pub fn best_window(accs: &[Vec<i32>], q_scale: u8) -> u8 {
    let mut best_q = q_scale;
    let mut best_err = f64::INFINITY;
    for q in q_scale..=Q_MAX {
        let mut err = 0.0f64;
        for sample in accs {
            for &a in sample {
                let d = (a - window_rewiden(window_slice(a, q), q)) as f64;
                err += d * d;
            }
        }
        if err < best_err {
            best_err = err;
            best_q = q;
        }
    }
    best_q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::layers::{LayerGraph, LayerKind, Shape};

    fn one_by_one_conv(weight: i8, q: u8) -> QuantizedModel {
        let graph = LayerGraph::new(
            Shape::new(1, 1, 1),
            vec![LayerKind::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0 }],
        );
        QuantizedModel {
            graph,
            weights: vec![QuantizedTensor { dims: vec![1, 1, 1, 1], data: vec![weight], scale_exp: 0 }],
            windows: vec![TruncationWindow { layer: 0, q }],
            input_scale: 7,
            out_scales: vec![7 - q as i32],
        }
    }

    #[test]
    fn identity_kernel_passes_value() {
        let m = one_by_one_conv(1, 0);
        let mut s = Scratch::default();
        let r = m.forward(&[5], &mut s, None).unwrap();
        assert_eq!(r.logits, vec![5]);
    }

    #[test]
    fn window_slice_matches_shift_example() {
        // 127 * 127 accumulated once, q = 7: bits [7, 14] -> 126
        let m = one_by_one_conv(127, 7);
        let mut s = Scratch::default();
        let r = m.forward(&[127], &mut s, None).unwrap();
        assert_eq!(127i32 * 127, 16129);
        assert_eq!(16129 >> 7, 126);
        assert_eq!(r.logits, vec![126]);
    }

    #[test]
    fn sign_bit_flip_changes_logits() {
        let m = one_by_one_conv(1, 0);
        let mut s = Scratch::default();
        let clean = m.forward(&[5], &mut s, None).unwrap().logits;
        let mut hook = |site: ValueSite, v: i8| match site {
            ValueSite::Activation { .. } => ((v as u8) ^ 0x80) as i8,
            _ => v,
        };
        let faulty = m
            .forward(&[5], &mut s, Some(&mut hook as &mut dyn ValueHook))
            .unwrap()
            .logits;
        assert_ne!(clean, faulty);
        assert_eq!(faulty, vec![(0x85u8) as i8]);
    }

    #[test]
    fn hook_sees_every_weight_and_activation_once() {
        let graph = LayerGraph::new(
            Shape::new(1, 4, 4),
            vec![
                LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::FullyConnected { in_features: 32, out_features: 3 },
            ],
        );
        let m = QuantizedModel {
            weights: vec![
                QuantizedTensor { dims: vec![2, 1, 3, 3], data: vec![1; 18], scale_exp: 0 },
                QuantizedTensor { dims: vec![3, 32], data: vec![1; 96], scale_exp: 0 },
            ],
            windows: vec![TruncationWindow { layer: 0, q: 0 }, TruncationWindow { layer: 2, q: 0 }],
            input_scale: 7,
            out_scales: vec![7, 7, 7],
            graph,
        };
        let mut weight_hits = 0usize;
        let mut act_hits = 0usize;
        let mut hook = |site: ValueSite, v: i8| {
            match site {
                ValueSite::Weight { .. } => weight_hits += 1,
                ValueSite::Activation { .. } => act_hits += 1,
            }
            v
        };
        let mut s = Scratch::default();
        m.forward(&[1; 16], &mut s, Some(&mut hook as &mut dyn ValueHook)).unwrap();
        assert_eq!(weight_hits, 18 + 96);
        assert_eq!(act_hits, 32 + 3);
    }

    #[test]
    fn saturation_is_counted_and_clamped() {
        // all-max weights and inputs over a long dot product overflow 24 bits
        let graph = LayerGraph::new(
            Shape::new(1024, 1, 1),
            vec![LayerKind::FullyConnected { in_features: 1024, out_features: 1 }],
        );
        let m = QuantizedModel {
            weights: vec![QuantizedTensor { dims: vec![1, 1024], data: vec![127; 1024], scale_exp: 0 }],
            windows: vec![TruncationWindow { layer: 0, q: 16 }],
            input_scale: 7,
            out_scales: vec![-9],
            graph,
        };
        let mut s = Scratch::default();
        let r = m.forward(&[127; 1024], &mut s, None).unwrap();
        assert!(r.total_saturations > 0);
        // saturated accumulator, q = 16 -> top window = ACC_MAX >> 16 = 127
        assert_eq!(r.logits, vec![127]);
    }

    #[test]
    fn truncation_is_a_pure_bit_slice() {
        for &acc in &[0i32, 1, -1, 16129, -16129, ACC_MAX, ACC_MIN, 0x3f_f0f0, -0x2a_5a5a] {
            for q in 0..=Q_MAX {
                let o = window_slice(acc, q);
                let re = window_rewiden(o, q);
                // window bits agree exactly; only discarded bits differ
                assert_eq!((acc ^ re) & (0xFF << q), 0, "acc={acc} q={q}");
            }
        }
    }

    #[test]
    fn best_window_prefers_low_q_on_zero_error() {
        let accs = vec![vec![0i32; 16]];
        assert_eq!(best_window(&accs, 0), 0);
        assert_eq!(best_window(&accs, 5), 5);
    }
}
