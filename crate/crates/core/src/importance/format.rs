//! Importance-map file: the neuron position table shipped to the
//! accelerator.
//!
//! Text header (magic `FHIM1`) with the selection parameters and per-layer
//! tile fractions, then one packed little-endian bitmap per layer (one bit
//! per neuron, flat CHW order, padded to a byte boundary per layer).

use std::fs;
use std::path::Path;

use crate::archmodel::TileGrid;
use crate::error::CoreError;
use crate::importance::{ImportanceMap, LayerImportance, SelectionPolicy};
use crate::qmodel::LayerGraph;
use crate::Result;

pub const IMPORTANCE_MAGIC: &str = "FHIM1";

pub fn save_importance(map: &ImportanceMap, path: &Path) -> Result<()> {
    let mut header = format!(
        "{IMPORTANCE_MAGIC}\ns_th {}\npolicy {}\narray {}\n",
        map.s_th,
        map.policy.as_str(),
        map.array_size
    );
    for e in map.layers() {
        let fractions: Vec<String> = e.tile_fractions().iter().map(|f| format!("{f:.6}")).collect();
        header.push_str(&format!(
            "layer {} neurons {} selected {} tiles {}\n",
            e.layer,
            e.neurons,
            e.selected,
            fractions.join(",")
        ));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for e in map.layers() {
        let mut packed = vec![0u8; e.neurons.div_ceil(8)];
        for idx in 0..e.neurons {
            if e.get(idx) {
                packed[idx / 8] |= 1 << (idx % 8);
            }
        }
        bytes.extend_from_slice(&packed);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_importance(path: &Path, graph: &LayerGraph) -> Result<ImportanceMap> {
    let raw = fs::read(path)?;
    let pstr = path.display().to_string();
    let marker = raw
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| CoreError::format(&pstr, "missing end marker"))?;
    let header_end = marker + 5;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| CoreError::format(&pstr, "non-utf8 header"))?;
    let blob = &raw[header_end..];

    let mut lines = header.lines();
    if lines.next() != Some(IMPORTANCE_MAGIC) {
        return Err(CoreError::format(&pstr, "bad magic"));
    }
    let mut s_th = None;
    let mut policy = None;
    let mut array = None;
    let mut layer_meta: Vec<(usize, usize, usize)> = Vec::new();
    for line in lines {
        let line = line.trim();
        if line == "end" || line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "s_th" => s_th = tokens[1].parse().ok(),
            "policy" => policy = SelectionPolicy::parse(tokens[1]).ok(),
            "array" => array = tokens[1].parse().ok(),
            "layer" => {
                if tokens.len() < 7 {
                    return Err(CoreError::format(&pstr, format!("bad layer line {line:?}")));
                }
                let l = tokens[1].parse().map_err(|_| CoreError::format(&pstr, "bad layer id"))?;
                let n = tokens[3].parse().map_err(|_| CoreError::format(&pstr, "bad neuron count"))?;
                let s = tokens[5].parse().map_err(|_| CoreError::format(&pstr, "bad selected count"))?;
                layer_meta.push((l, n, s));
            }
            _ => return Err(CoreError::format(&pstr, format!("unexpected line {line:?}"))),
        }
    }
    let (s_th, policy, array_size) = match (s_th, policy, array) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(CoreError::format(&pstr, "missing header keys")),
    };

    let shapes = graph.output_shapes()?;
    let mut entries: Vec<Option<LayerImportance>> = vec![None; graph.layers.len()];
    let mut offset = 0usize;
    for (layer, neurons, selected) in layer_meta {
        if layer >= graph.layers.len() || shapes[layer].volume() != neurons {
            return Err(CoreError::format(&pstr, format!("layer {layer} does not match the model")));
        }
        let nbytes = neurons.div_ceil(8);
        if offset + nbytes > blob.len() {
            return Err(CoreError::format(&pstr, "bitmap blob too short"));
        }
        let positions = shapes[layer].height * shapes[layer].width;
        let grid = TileGrid::new(shapes[layer].channels, positions, array_size);
        let mut e = LayerImportance {
            layer,
            neurons,
            selected: 0,
            bits: vec![0u64; neurons.div_ceil(64)],
            tile_selected: vec![0; grid.count()],
            grid,
        };
        for idx in 0..neurons {
            if (blob[offset + idx / 8] >> (idx % 8)) & 1 == 1 {
                e.bits[idx >> 6] |= 1 << (idx & 63);
                e.selected += 1;
                e.tile_selected[e.grid.tile_of(idx)] += 1;
            }
        }
        if e.selected != selected {
            return Err(CoreError::format(&pstr, format!("layer {layer} bitmap disagrees with header")));
        }
        offset += nbytes;
        entries[layer] = Some(e);
    }
    if offset != blob.len() {
        return Err(CoreError::format(&pstr, "trailing bytes after bitmaps"));
    }
    Ok(ImportanceMap { s_th, policy, array_size, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{select_important_neurons, GradientRecord};
    use crate::qmodel::{LayerGraph, LayerKind, Shape};

    #[test]
    fn importance_round_trips() {
        let g = LayerGraph::new(
            Shape::new(1, 8, 8),
            vec![
                LayerKind::Conv2d { in_ch: 1, out_ch: 4, kernel: 3, stride: 1, padding: 1 },
                LayerKind::Relu,
                LayerKind::FullyConnected { in_features: 256, out_features: 10 },
            ],
        );
        let grads = vec![
            (0usize, (0..256).map(|i| (i % 17) as f64).collect::<Vec<_>>()),
            (2usize, (0..10).map(|i| i as f64).collect::<Vec<_>>()),
        ];
        let r = GradientRecord { by_layer: grads, samples: 4 };
        let map = select_important_neurons(&r, &g, 0.125, SelectionPolicy::UniformPerTile, 32).unwrap();
        let path = std::env::temp_dir().join("fhim_roundtrip.fhim");
        save_importance(&map, &path).unwrap();
        let back = load_importance(&path, &g).unwrap();
        assert_eq!(back.total_selected(), map.total_selected());
        for l in [0usize, 2] {
            for idx in 0..g.output_shapes().unwrap()[l].volume() {
                assert_eq!(back.is_important(l, idx), map.is_important(l, idx));
            }
            assert_eq!(back.tile_selected(l), map.tile_selected(l));
        }
        std::fs::remove_file(&path).ok();
    }
}
