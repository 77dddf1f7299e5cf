//! Floating-point reference model: forward inference and reverse-mode
//! gradients.
//!
//! This is the pre-quantization model: quantization calibration reads its
//! weights, and the importance analysis reads its gradients. Generic over
//! the scalar; the shipped reference asset stores f32 and is usually loaded
//! at f64.

use crate::error::CoreError;
use crate::num::Real;
use crate::qmodel::layers::{LayerGraph, LayerKind, Shape};
use crate::Result;

#[derive(Debug, Clone)]
pub struct FloatModel<F: Real> {
    pub graph: LayerGraph,
    /// Weight tensors by weight id. Conv layout `[out][in][ky][kx]`,
    /// fully-connected layout `[out][in]`.
    pub weights: Vec<Vec<F>>,
}

/// All per-layer outputs of one forward pass (layer index -> flat CHW).
#[derive(Debug, Clone)]
pub struct Activations<F> {
    pub outputs: Vec<Vec<F>>,
}

impl<F: Real> Activations<F> {
    pub fn logits(&self) -> &[F] {
        self.outputs.last().expect("non-empty graph")
    }
}

/// Backward-pass results.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    /// d loss / d (layer output), per layer, same layout as activations.
    pub layer_grads: Vec<Vec<F>>,
    /// d loss / d input.
    pub input_grad: Vec<F>,
    /// d loss / d weights, per weight id (only when requested).
    pub weight_grads: Option<Vec<Vec<F>>>,
}

impl<F: Real> FloatModel<F> {
    pub fn new(graph: LayerGraph, weights: Vec<Vec<F>>) -> Result<Self> {
        graph.output_shapes()?;
        let expected = graph.weight_tensor_count();
        if weights.len() != expected {
            return Err(CoreError::Inconsistent(format!(
                "graph owns {expected} weight tensors, got {}",
                weights.len()
            )));
        }
        for (wid, (i, layer)) in graph
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.owns_weights())
            .enumerate()
        {
            let want = graph.weight_len(i);
            if weights[wid].len() != want {
                return Err(CoreError::Inconsistent(format!(
                    "layer {i} ({}) expects {want} weights, got {}",
                    layer.kind.name(),
                    weights[wid].len()
                )));
            }
        }
        Ok(FloatModel { graph, weights })
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.graph.output_shapes().expect("validated at construction")
    }

    pub fn forward(&self, input: &[F]) -> Result<Activations<F>> {
        self.forward_bumped(input, None)
    }

    /// Forward pass that optionally adds `delta` to one element of one
    /// layer's output before the following layers run. This is the probe
    /// used by finite-difference checks and first-order sensitivity tests.
    pub fn forward_bumped(&self, input: &[F], bump: Option<(usize, usize, F)>) -> Result<Activations<F>> {
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
        let shapes = self.shapes();
        let mut outputs: Vec<Vec<F>> = Vec::with_capacity(self.graph.layers.len());
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let in_shape = if i == 0 { self.graph.input } else { shapes[i - 1] };
            let cur: &[F] = if i == 0 { input } else { &outputs[i - 1] };
            let mut out = match layer.kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                    let w = &self.weights[layer.weight_id.unwrap()];
                    conv_forward(cur, w, in_shape, shapes[i], in_ch, out_ch, kernel, stride, padding)
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    let w = &self.weights[layer.weight_id.unwrap()];
                    let mut out = vec![F::zero(); out_features];
                    for (o, slot) in out.iter_mut().enumerate() {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        let mut acc = F::zero();
                        for (x, wi) in cur.iter().zip(row) {
                            acc += *x * *wi;
                        }
                        *slot = acc;
                    }
                    out
                }
                LayerKind::Relu => cur.iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect(),
                LayerKind::MaxPool { kernel, stride } => {
                    pool_forward(cur, in_shape, shapes[i], kernel, stride, true)
                }
                LayerKind::AvgPool { kernel, stride } => {
                    pool_forward(cur, in_shape, shapes[i], kernel, stride, false)
                }
                LayerKind::AddResidual { from } => {
                    cur.iter().zip(&outputs[from]).map(|(&a, &b)| a + b).collect()
                }
            };
            if let Some((bl, bi, delta)) = bump {
                if bl == i {
                    out[bi] += delta;
                }
            }
            outputs.push(out);
        }
        Ok(Activations { outputs })
    }

    /// Reverse-mode pass seeded with `out_grad` (d loss / d logits).
    /// Set `want_weight_grads` when training or checking weight gradients.
    pub fn backward(
        &self,
        input: &[F],
        acts: &Activations<F>,
        out_grad: &[F],
        want_weight_grads: bool,
    ) -> Result<Gradients<F>> {
        let shapes = self.shapes();
        let n_layers = self.graph.layers.len();
        let mut layer_grads: Vec<Vec<F>> = shapes.iter().map(|s| vec![F::zero(); s.volume()]).collect();
        let mut weight_grads: Option<Vec<Vec<F>>> =
            want_weight_grads.then(|| self.weights.iter().map(|w| vec![F::zero(); w.len()]).collect());
        if out_grad.len() != shapes[n_layers - 1].volume() {
            return Err(CoreError::ShapeMismatch {
                layer: n_layers - 1,
                detail: "output-gradient length mismatch".into(),
            });
        }
        for (g, &s) in layer_grads[n_layers - 1].iter_mut().zip(out_grad) {
            *g = s;
        }
        let mut input_grad = vec![F::zero(); self.graph.input.volume()];
        for i in (0..n_layers).rev() {
            let in_shape = if i == 0 { self.graph.input } else { shapes[i - 1] };
            let layer_in: &[F] = if i == 0 { input } else { &acts.outputs[i - 1] };
            // grad w.r.t. this layer's output is complete by the time we
            // get here (residual skips only point backward).
            let gout = std::mem::take(&mut layer_grads[i]);
            let mut gin = vec![F::zero(); in_shape.volume()];
            match self.graph.layers[i].kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                    let wid = self.graph.layers[i].weight_id.unwrap();
                    let w = &self.weights[wid];
                    let gw = weight_grads.as_mut().map(|g| &mut g[wid]);
                    conv_backward(
                        layer_in, w, &gout, &mut gin, gw, in_shape, shapes[i], in_ch, out_ch, kernel,
                        stride, padding,
                    );
                }
                LayerKind::FullyConnected { in_features, out_features } => {
                    let wid = self.graph.layers[i].weight_id.unwrap();
                    let w = &self.weights[wid];
                    for o in 0..out_features {
                        let g = gout[o];
                        if g == F::zero() {
                            continue;
                        }
                        let row = &w[o * in_features..(o + 1) * in_features];
                        for (gi, wi) in gin.iter_mut().zip(row) {
                            *gi += *wi * g;
                        }
                    }
                    if let Some(grads) = weight_grads.as_mut() {
                        let gw = &mut grads[wid];
                        for o in 0..out_features {
                            let g = gout[o];
                            if g == F::zero() {
                                continue;
                            }
                            let row = &mut gw[o * in_features..(o + 1) * in_features];
                            for (slot, x) in row.iter_mut().zip(layer_in) {
                                *slot += *x * g;
                            }
                        }
                    }
                }
                LayerKind::Relu => {
                    for ((gi, &x), &g) in gin.iter_mut().zip(layer_in).zip(&gout) {
                        if x > F::zero() {
                            *gi = g;
                        }
                    }
                }
                LayerKind::MaxPool { kernel, stride } => {
                    pool_backward(layer_in, &gout, &mut gin, in_shape, shapes[i], kernel, stride, true);
                }
                LayerKind::AvgPool { kernel, stride } => {
                    pool_backward(layer_in, &gout, &mut gin, in_shape, shapes[i], kernel, stride, false);
                }
                LayerKind::AddResidual { from } => {
                    for (gi, &g) in gin.iter_mut().zip(&gout) {
                        *gi = g;
                    }
                    for (gf, &g) in layer_grads[from].iter_mut().zip(&gout) {
                        *gf += g;
                    }
                }
            }
            layer_grads[i] = gout;
            if i == 0 {
                input_grad = gin;
            } else {
                for (dst, src) in layer_grads[i - 1].iter_mut().zip(&gin) {
                    *dst += *src;
                }
            }
        }
        Ok(Gradients { layer_grads, input_grad, weight_grads })
    }

    /// Numerically stable softmax cross-entropy; returns the loss and the
    /// gradient at the logits.
    pub fn cross_entropy(&self, acts: &Activations<F>, label: usize) -> (F, Vec<F>) {
        let logits = acts.logits();
        let probs = softmax(logits);
        let eps = F::from_f64_lossy(1e-30);
        let loss = -(probs[label] + eps).ln();
        let mut grad = probs;
        grad[label] -= F::one();
        (loss, grad)
    }

    /// Top-1 class for one image; ties break to the lower class index.
    pub fn classify(&self, pixels: &[u8]) -> Result<usize> {
        let acts = self.forward(&pixels_to_float::<F>(pixels))?;
        let logits = acts.logits();
        let mut best = 0usize;
        for (i, &x) in logits.iter().enumerate().skip(1) {
            if x > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Top-1 accuracy over a dataset.
    pub fn accuracy(&self, data: &crate::dataset::Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for i in 0..data.len() {
            if self.classify(data.image(i))? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Loss gradient magnitudes at every weighted-layer output, the
    /// "neuron" granularity used by the importance analysis.
    pub fn neuron_loss_gradients(&self, input: &[F], label: usize) -> Result<Vec<Vec<F>>> {
        let acts = self.forward(input)?;
        let (_, gout) = self.cross_entropy(&acts, label);
        let grads = self.backward(input, &acts, &gout, false)?;
        Ok(self
            .graph
            .weighted_layers()
            .into_iter()
            .map(|l| grads.layer_grads[l].iter().map(|g| g.abs()).collect())
            .collect())
    }
}

pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let mx = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&x| (x - mx).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Convert a u8 image into model inputs in [0, 1).
pub fn pixels_to_float<F: Real>(pixels: &[u8]) -> Vec<F> {
    pixels
        .iter()
        .map(|&p| F::from_f64_lossy(p as f64 / 256.0))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<F: Real>(
    input: &[F],
    w: &[F],
    in_shape: Shape,
    out_shape: Shape,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<F> {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut out = vec![F::zero(); out_ch * oh * ow];
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
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
                            let x = input[(i * ih + iy as usize) * iw + ix as usize];
                            let wv = w[((o * in_ch + i) * kernel + ky) * kernel + kx];
                            acc += x * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Real>(
    input: &[F],
    w: &[F],
    gout: &[F],
    gin: &mut [F],
    mut gw: Option<&mut Vec<F>>,
    in_shape: Shape,
    out_shape: Shape,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(o * oh + oy) * ow + ox];
                if g == F::zero() {
                    continue;
                }
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
                            let xi = (i * ih + iy as usize) * iw + ix as usize;
                            let wi = ((o * in_ch + i) * kernel + ky) * kernel + kx;
                            gin[xi] += w[wi] * g;
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[wi] += input[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward<F: Real>(
    input: &[F],
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    is_max: bool,
) -> Vec<F> {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let ch = in_shape.channels;
    let area = F::from_f64_lossy((kernel * kernel) as f64);
    let mut out = vec![F::zero(); ch * oh * ow];
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut sum = F::zero();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = input[(c * ih + oy * stride + ky) * iw + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                        sum += v;
                    }
                }
                out[(c * oh + oy) * ow + ox] = if is_max { best } else { sum / area };
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn pool_backward<F: Real>(
    input: &[F],
    gout: &[F],
    gin: &mut [F],
    in_shape: Shape,
    out_shape: Shape,
    kernel: usize,
    stride: usize,
    is_max: bool,
) {
    let (ih, iw) = (in_shape.height, in_shape.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let ch = in_shape.channels;
    let inv_area = F::one() / F::from_f64_lossy((kernel * kernel) as f64);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(c * oh + oy) * ow + ox];
                if is_max {
                    // first maximum wins; matches the deterministic forward
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (c * ih + oy * stride + ky) * iw + ox * stride + kx;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    gin[best_idx] += g;
                } else {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (c * ih + oy * stride + ky) * iw + ox * stride + kx;
                            gin[idx] += g * inv_area;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::layers::tiny_graph;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tiny(seed: u64) -> FloatModel<f64> {
        let graph = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = graph
            .weighted_layers()
            .iter()
            .map(|&l| {
                let n = graph.weight_len(l);
                let fan_in = n / graph.output_shapes().unwrap()[l].channels.max(1);
                let scale = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
            })
            .collect();
        FloatModel::new(graph, weights).unwrap()
    }

    #[test]
    fn linear_chain_rule() {
        // single fc layer y = w.x with loss = y: d loss / d x = w
        let graph = LayerGraph::new(
            Shape::new(1, 1, 1),
            vec![LayerKind::FullyConnected { in_features: 1, out_features: 1 }],
        );
        let m = FloatModel::new(graph, vec![vec![3.0f64]]).unwrap();
        let acts = m.forward(&[5.0]).unwrap();
        assert_eq!(acts.logits(), &[15.0]);
        let grads = m.backward(&[5.0], &acts, &[1.0], true).unwrap();
        assert_eq!(grads.input_grad, vec![3.0]);
        assert_eq!(grads.weight_grads.unwrap()[0], vec![5.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let graph = LayerGraph::new(
            Shape::new(1, 1, 1),
            vec![
                LayerKind::FullyConnected { in_features: 1, out_features: 2 },
                LayerKind::Relu,
                LayerKind::FullyConnected { in_features: 2, out_features: 1 },
            ],
        );
        // both pre-activations negative for positive input
        let m = FloatModel::new(graph, vec![vec![-1.0f64, -2.0], vec![1.0, 1.0]]).unwrap();
        let acts = m.forward(&[3.0]).unwrap();
        let grads = m.backward(&[3.0], &acts, &[1.0], true).unwrap();
        assert_eq!(grads.input_grad, vec![0.0]);
        assert_eq!(grads.layer_grads[0], vec![0.0, 0.0]);
        assert_eq!(grads.weight_grads.unwrap()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = random_tiny(11);
        let img: Vec<f64> = (0..256).map(|i| ((i * 37) % 256) as f64 / 256.0).collect();
        let label = 3;
        let acts = m.forward(&img).unwrap();
        let (_, gout) = m.cross_entropy(&acts, label);
        let grads = m.backward(&img, &acts, &gout, false).unwrap();
        let delta = 1e-3;
        let mut checked = 0;
        let mut ok = 0;
        // probe a spread of neurons in each weighted layer
        for &l in &m.graph.weighted_layers() {
            let n = acts.outputs[l].len();
            for idx in (0..n).step_by((n / 13).max(1)) {
                let loss_at = |d: f64| {
                    let a = m.forward_bumped(&img, Some((l, idx, d))).unwrap();
                    m.cross_entropy(&a, label).0
                };
                let fd = (loss_at(delta) - loss_at(-delta)) / (2.0 * delta);
                let an = grads.layer_grads[l][idx];
                checked += 1;
                let denom = fd.abs().max(an.abs()).max(1e-8);
                if (fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9 {
                    ok += 1;
                }
            }
        }
        // a few probes land on relu/pool kinks where finite differences
        // legitimately disagree with the (zero) subgradient
        assert!(checked > 50);
        assert!(
            ok as f64 >= 0.9 * checked as f64,
            "finite differences disagree: {ok}/{checked}"
        );
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let m = random_tiny(5);
        let img: Vec<f64> = (0..256).map(|i| ((i * 11) % 200) as f64 / 256.0).collect();
        let label = 7;
        let acts = m.forward(&img).unwrap();
        let (_, gout) = m.cross_entropy(&acts, label);
        let grads = m.backward(&img, &acts, &gout, true).unwrap();
        let gw = grads.weight_grads.unwrap();
        let delta = 1e-4;
        for wid in 0..m.weights.len() {
            let n = m.weights[wid].len();
            for idx in (0..n).step_by((n / 5).max(1)) {
                let mut mm = m.clone();
                mm.weights[wid][idx] += delta;
                let lp = {
                    let a = mm.forward(&img).unwrap();
                    mm.cross_entropy(&a, label).0
                };
                mm.weights[wid][idx] -= 2.0 * delta;
                let lm = {
                    let a = mm.forward(&img).unwrap();
                    mm.cross_entropy(&a, label).0
                };
                let fd = (lp - lm) / (2.0 * delta);
                let an = gw[wid][idx];
                let denom = fd.abs().max(an.abs()).max(1e-7);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "weight grad mismatch wid={wid} idx={idx}: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn residual_backward_accumulates() {
        let graph = LayerGraph::new(
            Shape::new(1, 2, 2),
            vec![
                LayerKind::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0 },
                LayerKind::Relu,
                LayerKind::AddResidual { from: 0 },
            ],
        );
        let m = FloatModel::new(graph, vec![vec![2.0f64]]).unwrap();
        let input = vec![1.0, -1.0, 0.5, 2.0];
        let acts = m.forward(&input).unwrap();
        // out = relu(2x) + 2x
        assert_eq!(acts.outputs[2], vec![4.0, -2.0, 2.0, 8.0]);
        let grads = m.backward(&input, &acts, &[1.0, 1.0, 1.0, 1.0], false).unwrap();
        // d out / d x = 2*(relu'(2x)) + 2
        assert_eq!(grads.input_grad, vec![4.0, 2.0, 4.0, 4.0]);
    }
}
