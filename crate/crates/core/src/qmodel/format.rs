//! Model files.
//!
//! Both formats share one layout: a line-oriented text header terminated by
//! `end`, followed immediately by a little-endian binary weight blob in
//! layer order.
//!
//! * `FHQM1` — quantized model. Header carries the input shape, the input
//!   scale exponent, and one `layer ...` line per layer with `q <n>` on
//!   accumulating layers and `wscale <e>` on weighted layers. Blob element
//!   type is `i8`.
//! * `FHFM1` — float reference model. Same header without scales/windows.
//!   Blob element type is `f32` little-endian.
//!
//! Example header:
//!
//! ```text
//! FHQM1
//! input 1x16x16
//! input_scale 7
//! layer conv2d in 1 out 4 kernel 3 stride 1 pad 1 q 4 wscale 8
//! layer relu
//! layer maxpool kernel 2 stride 2
//! layer fc in 128 out 24 q 6 wscale 9
//! end
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::CoreError;
use crate::num::Real;
use crate::qmodel::float::FloatModel;
use crate::qmodel::layers::{LayerGraph, LayerKind, LayerSpec, Shape};
use crate::qmodel::quantized::{QuantizedModel, QuantizedTensor, TruncationWindow};
use crate::Result;

pub const QUANT_MAGIC: &str = "FHQM1";
pub const FLOAT_MAGIC: &str = "FHFM1";

fn layer_line(kind: &LayerKind) -> String {
    match *kind {
        LayerKind::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            format!("layer conv2d in {in_ch} out {out_ch} kernel {kernel} stride {stride} pad {padding}")
        }
        LayerKind::FullyConnected { in_features, out_features } => {
            format!("layer fc in {in_features} out {out_features}")
        }
        LayerKind::Relu => "layer relu".into(),
        LayerKind::MaxPool { kernel, stride } => format!("layer maxpool kernel {kernel} stride {stride}"),
        LayerKind::AvgPool { kernel, stride } => format!("layer avgpool kernel {kernel} stride {stride}"),
        LayerKind::AddResidual { from } => format!("layer add from {from}"),
    }
}

/// Parse `key value key value ...` pairs after the layer kind token.
fn parse_attrs<'a>(path: &str, tokens: &[&'a str]) -> Result<HashMap<&'a str, i64>> {
    if tokens.len() % 2 != 0 {
        return Err(CoreError::format(path, "odd attribute list in layer line"));
    }
    let mut map = HashMap::new();
    for pair in tokens.chunks(2) {
        let v: i64 = pair[1]
            .parse()
            .map_err(|_| CoreError::format(path, format!("bad attribute value {:?}", pair[1])))?;
        map.insert(pair[0], v);
    }
    Ok(map)
}

fn parse_layer(path: &str, line: &str) -> Result<(LayerKind, Option<u8>, Option<i32>)> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let attrs = parse_attrs(path, &tokens[2..])?;
    let get = |k: &str| -> Result<usize> {
        attrs
            .get(k)
            .map(|&v| v as usize)
            .ok_or_else(|| CoreError::format(path, format!("layer missing attribute {k}")))
    };
    let kind = match tokens[1] {
        "conv2d" => LayerKind::Conv2d {
            in_ch: get("in")?,
            out_ch: get("out")?,
            kernel: get("kernel")?,
            stride: get("stride")?,
            padding: get("pad")?,
        },
        "fc" => LayerKind::FullyConnected { in_features: get("in")?, out_features: get("out")? },
        "relu" => LayerKind::Relu,
        "maxpool" => LayerKind::MaxPool { kernel: get("kernel")?, stride: get("stride")? },
        "avgpool" => LayerKind::AvgPool { kernel: get("kernel")?, stride: get("stride")? },
        "add" => LayerKind::AddResidual { from: get("from")? },
        other => return Err(CoreError::format(path, format!("unknown layer kind {other:?}"))),
    };
    let q = attrs.get("q").map(|&v| v as u8);
    let wscale = attrs.get("wscale").map(|&v| v as i32);
    Ok((kind, q, wscale))
}

fn parse_shape(path: &str, s: &str) -> Result<Shape> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(CoreError::format(path, format!("bad shape {s:?}")));
    }
    let d: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| CoreError::format(path, format!("bad shape {s:?}"))))
        .collect::<Result<_>>()?;
    Ok(Shape::new(d[0], d[1], d[2]))
}

/// Split the raw file into (header lines, blob) at the `end` marker.
fn split_header(path: &str, raw: &[u8]) -> Result<(Vec<String>, Vec<u8>)> {
    let mut lines = Vec::new();
    let mut pos = 0usize;
    loop {
        let nl = raw[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CoreError::format(path, "missing end marker"))?;
        let line = std::str::from_utf8(&raw[pos..pos + nl])
            .map_err(|_| CoreError::format(path, "non-utf8 header"))?
            .trim()
            .to_string();
        pos += nl + 1;
        if line == "end" {
            return Ok((lines, raw[pos..].to_vec()));
        }
        lines.push(line);
    }
}

struct Header {
    input: Shape,
    input_scale: i32,
    layers: Vec<(LayerKind, Option<u8>, Option<i32>)>,
}

fn parse_header(path: &str, lines: &[String], magic: &str) -> Result<Header> {
    if lines.first().map(String::as_str) != Some(magic) {
        return Err(CoreError::format(
            path,
            format!("bad magic {:?}, expected {magic}", lines.first().cloned().unwrap_or_default()),
        ));
    }
    let mut input = None;
    let mut input_scale = 7i32;
    let mut layers = Vec::new();
    for line in &lines[1..] {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("input_scale ") {
            input_scale = rest
                .trim()
                .parse()
                .map_err(|_| CoreError::format(path, "bad input_scale"))?;
        } else if let Some(rest) = line.strip_prefix("input ") {
            input = Some(parse_shape(path, rest.trim())?);
        } else if line.starts_with("layer ") {
            layers.push(parse_layer(path, line)?);
        } else {
            return Err(CoreError::format(path, format!("unexpected header line {line:?}")));
        }
    }
    let input = input.ok_or_else(|| CoreError::format(path, "missing input line"))?;
    Ok(Header { input, input_scale, layers })
}

// ---------------------------------------------------------------------------
// quantized model
// ---------------------------------------------------------------------------

pub fn save_quantized(model: &QuantizedModel, path: &Path) -> Result<()> {
    let mut header = format!("{QUANT_MAGIC}\ninput {}\ninput_scale {}\n", model.graph.input, model.input_scale);
    for (i, layer) in model.graph.layers.iter().enumerate() {
        let mut line = layer_line(&layer.kind);
        if let Some(q) = model.window_for(i) {
            line.push_str(&format!(" q {q}"));
        }
        if let Some(wid) = layer.weight_id {
            line.push_str(&format!(" wscale {}", model.weights[wid].scale_exp));
        }
        header.push_str(&line);
        header.push('\n');
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for w in &model.weights {
        bytes.extend(w.data.iter().map(|&v| v as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let raw = fs::read(path)?;
    let pstr = path.display().to_string();
    let (lines, blob) = split_header(&pstr, &raw)?;
    let header = parse_header(&pstr, &lines, QUANT_MAGIC)?;

    let kinds: Vec<LayerKind> = header.layers.iter().map(|(k, _, _)| *k).collect();
    let graph = LayerGraph::new(header.input, kinds);
    graph.output_shapes().map_err(|e| CoreError::format(&pstr, e.to_string()))?;

    let mut weights = Vec::new();
    let mut windows = Vec::new();
    let mut offset = 0usize;
    for (i, (kind, q, wscale)) in header.layers.iter().enumerate() {
        if kind.accumulates() {
            let q = q.ok_or_else(|| CoreError::format(&pstr, format!("layer {i} missing q")))?;
            windows.push(TruncationWindow { layer: i, q });
        }
        if kind.owns_weights() {
            let scale_exp = wscale.ok_or_else(|| CoreError::format(&pstr, format!("layer {i} missing wscale")))?;
            let n = graph.weight_len(i);
            if offset + n > blob.len() {
                return Err(CoreError::format(&pstr, "weight blob too short"));
            }
            let data: Vec<i8> = blob[offset..offset + n].iter().map(|&b| b as i8).collect();
            offset += n;
            let dims = match *kind {
                LayerKind::Conv2d { in_ch, out_ch, kernel, .. } => vec![out_ch, in_ch, kernel, kernel],
                LayerKind::FullyConnected { in_features, out_features } => vec![out_features, in_features],
                _ => unreachable!(),
            };
            weights.push(QuantizedTensor { dims, data, scale_exp });
        }
    }
    if offset != blob.len() {
        return Err(CoreError::format(&pstr, "trailing bytes after weight blob"));
    }

    // derive per-layer dequantization exponents
    let mut out_scales = Vec::with_capacity(graph.layers.len());
    let mut prev = header.input_scale;
    for (i, layer) in graph.layers.iter().enumerate() {
        let q = windows.iter().find(|w| w.layer == i).map(|w| w.q as i32);
        let scale = match layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
                prev + weights[layer.weight_id.unwrap()].scale_exp - q.unwrap()
            }
            LayerKind::AvgPool { kernel, .. } => {
                prev - q.unwrap() + ((kernel * kernel).trailing_zeros() as i32)
            }
            LayerKind::AddResidual { from } => prev.max(out_scales[from]) - q.unwrap(),
            _ => prev,
        };
        out_scales.push(scale);
        prev = scale;
    }

    Ok(QuantizedModel { graph, weights, windows, input_scale: header.input_scale, out_scales })
}

// ---------------------------------------------------------------------------
// float model
// ---------------------------------------------------------------------------

pub fn save_float<F: Real>(model: &FloatModel<F>, path: &Path) -> Result<()> {
    let mut header = format!("{FLOAT_MAGIC}\ninput {}\n", model.graph.input);
    for layer in &model.graph.layers {
        header.push_str(&layer_line(&layer.kind));
        header.push('\n');
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for w in &model.weights {
        for v in w {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_float<F: Real>(path: &Path) -> Result<FloatModel<F>> {
    let raw = fs::read(path)?;
    let pstr = path.display().to_string();
    let (lines, blob) = split_header(&pstr, &raw)?;
    let header = parse_header(&pstr, &lines, FLOAT_MAGIC)?;
    let kinds: Vec<LayerKind> = header.layers.iter().map(|(k, _, _)| *k).collect();
    let graph = LayerGraph::new(header.input, kinds);
    let mut weights = Vec::new();
    let mut offset = 0usize;
    for (i, spec) in graph.layers.iter().enumerate() {
        let _: &LayerSpec = spec;
        if !spec.kind.owns_weights() {
            continue;
        }
        let n = graph.weight_len(i);
        if offset + 4 * n > blob.len() {
            return Err(CoreError::format(&pstr, "weight blob too short"));
        }
        let data: Vec<F> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| F::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        offset += 4 * n;
        weights.push(data);
    }
    if offset != blob.len() {
        return Err(CoreError::format(&pstr, "trailing bytes after weight blob"));
    }
    FloatModel::new(graph, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize;
    use crate::qmodel::layers::tiny_graph;
    use crate::qmodel::quantized::calibrate_quantization;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_float_model(seed: u64) -> FloatModel<f64> {
        let graph = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = graph
            .weighted_layers()
            .iter()
            .map(|&l| (0..graph.weight_len(l)).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        FloatModel::new(graph, weights).unwrap()
    }

    #[test]
    fn float_model_round_trips() {
        let m = small_float_model(3);
        let path = std::env::temp_dir().join("fhfm_roundtrip.fhfm");
        save_float(&m, &path).unwrap();
        let back: FloatModel<f64> = load_float(&path).unwrap();
        assert_eq!(back.weights.len(), m.weights.len());
        for (a, b) in back.weights.iter().flatten().zip(m.weights.iter().flatten()) {
            assert!((a - b).abs() < 1e-6); // f32 storage rounding only
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn quantized_model_round_trips_bit_exact() {
        let m = small_float_model(4);
        let calib = synthesize(32, 5);
        let qm = calibrate_quantization(&m, &calib, 0).unwrap();
        let path = std::env::temp_dir().join("fhqm_roundtrip.fhqm");
        save_quantized(&qm, &path).unwrap();
        let back = load_quantized(&path).unwrap();
        assert_eq!(back.windows, qm.windows);
        assert_eq!(back.out_scales, qm.out_scales);
        for (a, b) in back.weights.iter().zip(&qm.weights) {
            assert_eq!(a.data, b.data);
            assert_eq!(a.scale_exp, b.scale_exp);
        }
        // same bytes again: deterministic writer
        save_quantized(&back, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        save_quantized(&qm, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = std::env::temp_dir().join("fhqm_badmagic.fhqm");
        std::fs::write(&path, b"NOPE9\ninput 1x1x1\nend\n").unwrap();
        assert!(load_quantized(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
