//! Analytical performance and IO model of the heterogeneous accelerator:
//! a weight-stationary 2D systolic array computing ordinary neurons plus a
//! dot-product processing unit (DPPU) recomputing the important ones.
//!
//! # Cycle model
//!
//! A weighted layer is a GEMM with `M` output channels, `N` output
//! positions, and reduction length `K`. Work tiles onto the array as
//! `⌈M/array⌉ × ⌈N/array⌉` tiles; each tile streams its positions through
//! the array once per K-block: `cycles = ⌈K/array⌉ × (array + n_positions)`
//! (array fill plus streaming). Other layer kinds are free.
//!
//! # DPPU scheduling
//!
//! Per tile, the DPPU recomputes `important × K` MACs at `dot_size` MACs
//! per cycle. With `data_reuse = true` it shares the array's cached
//! operands and stalls the array when it cannot keep up. With
//! `data_reuse = false` the portion that does not fit inside the tile's 2D
//! compute time is fetched directly from DRAM (two one-byte operands per
//! overflow MAC) and nothing stalls. Either way every tile pays for its
//! packed neuron-position table (one bit per neuron), which the compiler
//! ships to steer the recomputation.

pub mod tiling;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::importance::ImportanceMap;
use crate::qmodel::{LayerGraph, LayerKind};
use crate::Result;
pub use tiling::TileGrid;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArchConfig {
    /// 2D array dimension (fixed at 32 in the experiments).
    pub array_size: usize,
    /// DPPU multiply-accumulate lanes.
    pub dot_size: usize,
    /// Reuse array-cached data in the DPPU (stalls possible) instead of
    /// fetching overflow work from DRAM.
    pub data_reuse: bool,
    pub weight_cache_bytes: usize,
    pub data_cache_bytes: usize,
}

impl ArchConfig {
    pub fn new(array_size: usize, dot_size: usize, data_reuse: bool) -> Self {
        ArchConfig {
            array_size,
            dot_size,
            data_reuse,
            weight_cache_bytes: 512 * 1024,
            data_cache_bytes: 256 * 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.array_size == 0 {
            return Err(CoreError::invalid("array_size", "must be >= 1"));
        }
        if self.dot_size == 0 {
            return Err(CoreError::invalid("dot_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Static decomposition of one weighted layer.
#[derive(Debug, Clone)]
pub struct LayerCycles {
    pub layer: usize,
    pub grid: TileGrid,
    /// Reduction length of one neuron (MACs per output element).
    pub k: usize,
    pub k_tiles: usize,
    /// 2D-array cycles per tile, tile-major order (channel blocks outer).
    pub tile_cycles: Vec<u64>,
    pub total_cycles: u64,
}

/// Per-tile schedule once importance is known.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TileSchedule {
    pub cycles_2d: u64,
    pub important: u64,
    pub dppu_cycles: u64,
    pub stall_cycles: u64,
    pub extra_dram_bytes: u64,
    pub table_bytes: u64,
}

/// Whole-design performance/IO summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerfReport {
    pub total_cycles: u64,
    pub baseline_cycles: u64,
    pub perf_ratio: f64,
    pub extra_io_bytes: u64,
    pub baseline_io_bytes: u64,
    pub bandwidth_ratio: f64,
    pub position_table_bytes: u64,
    pub stall_cycles: u64,
    pub overflow_dram_bytes: u64,
}

/// GEMM view (M, N, K) of a weighted layer.
pub fn gemm_dims(graph: &LayerGraph, layer: usize) -> Option<(usize, usize, usize)> {
    let shapes = graph.output_shapes().ok()?;
    match graph.layers[layer].kind {
        LayerKind::Conv2d { in_ch, kernel, .. } => {
            let s = shapes[layer];
            Some((s.channels, s.height * s.width, in_ch * kernel * kernel))
        }
        LayerKind::FullyConnected { in_features, out_features } => Some((out_features, 1, in_features)),
        _ => None,
    }
}

/// Closed-form cycle count and tile decomposition of one weighted layer.
pub fn layer_cycles(graph: &LayerGraph, layer: usize, arch: &ArchConfig) -> Result<LayerCycles> {
    arch.validate()?;
    let (m, n, k) = gemm_dims(graph, layer).ok_or_else(|| {
        CoreError::invalid("layer", format!("layer {layer} is not conv2d or fully-connected"))
    })?;
    let grid = TileGrid::new(m, n, arch.array_size);
    let k_tiles = k.div_ceil(arch.array_size);
    // working-set capacity check: one weight tile and one data tile
    let weight_tile_bytes = arch.array_size.min(m) * k;
    let data_tile_bytes = k * arch.array_size.min(n.max(1));
    if weight_tile_bytes > arch.weight_cache_bytes || data_tile_bytes > arch.data_cache_bytes {
        return Err(CoreError::invalid(
            "cache",
            format!("layer {layer} tile working set exceeds on-chip caches"),
        ));
    }
    let mut tile_cycles = Vec::with_capacity(grid.count());
    let mut total = 0u64;
    for t in 0..grid.count() {
        let n_pos = grid.tile_positions(t) as u64;
        let cycles = k_tiles as u64 * (arch.array_size as u64 + n_pos);
        tile_cycles.push(cycles);
        total += cycles;
    }
    Ok(LayerCycles { layer, grid, k, k_tiles, tile_cycles, total_cycles: total })
}

/// Schedule the DPPU for one tile.
pub fn schedule_dppu(
    cycles_2d: u64,
    tile_neurons: usize,
    important: usize,
    k: usize,
    arch: &ArchConfig,
) -> TileSchedule {
    let important_macs = important as u64 * k as u64;
    let dppu_cycles = important_macs.div_ceil(arch.dot_size as u64);
    let table_bytes = (tile_neurons as u64).div_ceil(8);
    let (stall_cycles, extra_dram_bytes) = if important_macs == 0 {
        (0, 0)
    } else if arch.data_reuse {
        (dppu_cycles.saturating_sub(cycles_2d), 0)
    } else {
        let fits = arch.dot_size as u64 * cycles_2d;
        let overflow_macs = important_macs.saturating_sub(fits);
        // two one-byte operands per overflow MAC fetched from DRAM
        (0, 2 * overflow_macs)
    };
    TileSchedule {
        cycles_2d,
        important: important as u64,
        dppu_cycles,
        stall_cycles,
        extra_dram_bytes,
        table_bytes,
    }
}

/// Baseline DRAM traffic: weights, the input image, and every layer output.
pub fn baseline_io_bytes(graph: &LayerGraph) -> u64 {
    let shapes = graph.output_shapes().expect("validated graph");
    let weights: usize = (0..graph.layers.len()).map(|l| graph.weight_len(l)).sum();
    let activations: usize = shapes.iter().map(|s| s.volume()).sum();
    (weights + graph.input.volume() + activations) as u64
}

/// Evaluate the whole design: aggregate tile schedules over all weighted
/// layers and compare against the unprotected baseline.
pub fn evaluate_design(
    graph: &LayerGraph,
    importance: &ImportanceMap,
    arch: &ArchConfig,
) -> Result<PerfReport> {
    arch.validate()?;
    if importance.array_size != arch.array_size {
        return Err(CoreError::Inconsistent(format!(
            "importance map tiled for array {}, arch uses {}",
            importance.array_size, arch.array_size
        )));
    }
    let mut baseline_cycles = 0u64;
    let mut stall_cycles = 0u64;
    let mut overflow_dram = 0u64;
    let mut table_bytes = 0u64;
    for layer in graph.weighted_layers() {
        let lc = layer_cycles(graph, layer, arch)?;
        let counts = importance.tile_selected(layer).ok_or_else(|| {
            CoreError::Inconsistent(format!("importance map missing layer {layer}"))
        })?;
        if counts.len() != lc.grid.count() {
            return Err(CoreError::Inconsistent(format!(
                "layer {layer}: importance has {} tiles, arch decomposes into {}",
                counts.len(),
                lc.grid.count()
            )));
        }
        for (t, &cycles_2d) in lc.tile_cycles.iter().enumerate() {
            let sched = schedule_dppu(cycles_2d, lc.grid.tile_neurons(t), counts[t], lc.k, arch);
            baseline_cycles += cycles_2d;
            stall_cycles += sched.stall_cycles;
            overflow_dram += sched.extra_dram_bytes;
            table_bytes += sched.table_bytes;
        }
    }
    let total_cycles = baseline_cycles + stall_cycles;
    let baseline_io = baseline_io_bytes(graph);
    let extra_io = overflow_dram + table_bytes;
    Ok(PerfReport {
        total_cycles,
        baseline_cycles,
        perf_ratio: total_cycles as f64 / baseline_cycles as f64,
        extra_io_bytes: extra_io,
        baseline_io_bytes: baseline_io,
        bandwidth_ratio: (baseline_io + extra_io) as f64 / baseline_io as f64,
        position_table_bytes: table_bytes,
        stall_cycles,
        overflow_dram_bytes: overflow_dram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::Shape;

    fn single_conv_graph() -> LayerGraph {
        LayerGraph::new(
            Shape::new(32, 1, 1),
            vec![LayerKind::Conv2d { in_ch: 32, out_ch: 32, kernel: 1, stride: 1, padding: 0 }],
        )
    }

    #[test]
    fn single_tile_conv_is_fill_plus_stream() {
        let g = single_conv_graph();
        let lc = layer_cycles(&g, 0, &ArchConfig::new(32, 8, true)).unwrap();
        assert_eq!(lc.grid.count(), 1);
        assert_eq!(lc.total_cycles, 32 + 1);
    }

    #[test]
    fn fc_matches_equivalent_conv() {
        let g = LayerGraph::new(
            Shape::new(32, 1, 1),
            vec![LayerKind::FullyConnected { in_features: 32, out_features: 32 }],
        );
        let conv = layer_cycles(&single_conv_graph(), 0, &ArchConfig::new(32, 8, true)).unwrap();
        let fc = layer_cycles(&g, 0, &ArchConfig::new(32, 8, true)).unwrap();
        assert_eq!(conv.total_cycles, fc.total_cycles);
    }

    #[test]
    fn doubling_out_channels_increases_cycles() {
        let small = single_conv_graph();
        let big = LayerGraph::new(
            Shape::new(32, 1, 1),
            vec![LayerKind::Conv2d { in_ch: 32, out_ch: 64, kernel: 1, stride: 1, padding: 0 }],
        );
        let a = layer_cycles(&small, 0, &ArchConfig::new(32, 8, true)).unwrap();
        let b = layer_cycles(&big, 0, &ArchConfig::new(32, 8, true)).unwrap();
        assert_eq!(b.total_cycles, 2 * a.total_cycles);
    }

    #[test]
    fn dppu_idle_with_no_important_neurons() {
        let s = schedule_dppu(100, 64, 0, 9, &ArchConfig::new(32, 8, true));
        assert_eq!(s.dppu_cycles, 0);
        assert_eq!(s.stall_cycles, 0);
        assert_eq!(s.extra_dram_bytes, 0);
        assert_eq!(s.table_bytes, 8);
    }

    #[test]
    fn exact_fit_boundary_has_no_stall() {
        // important MACs == dot_size × tile 2D cycles
        let arch = ArchConfig::new(32, 8, true);
        let cycles_2d = 50u64;
        let k = 10usize;
        let important = (arch.dot_size as u64 * cycles_2d / k as u64) as usize;
        let s = schedule_dppu(cycles_2d, 64, important, k, &arch);
        assert_eq!(s.dppu_cycles, cycles_2d);
        assert_eq!(s.stall_cycles, 0);
        // one more neuron stalls
        let s2 = schedule_dppu(cycles_2d, 64, important + 1, k, &arch);
        assert!(s2.stall_cycles > 0);
    }

    #[test]
    fn direct_fetch_charges_overflow_operands() {
        // 100 overflow MACs, two one-byte operands each -> 200 bytes
        let arch = ArchConfig::new(32, 10, false);
        let cycles_2d = 10u64; // fits 100 MACs
        let k = 20usize;
        let important = 10; // 200 MACs, 100 overflow
        let s = schedule_dppu(cycles_2d, 80, important, k, &arch);
        assert_eq!(s.stall_cycles, 0);
        assert_eq!(s.extra_dram_bytes, 200);
        assert_eq!(s.table_bytes, 10);
    }

    #[test]
    fn reuse_dominance_between_modes() {
        let reuse = ArchConfig::new(32, 4, true);
        let fetch = ArchConfig::new(32, 4, false);
        for important in [0usize, 3, 10, 40] {
            let a = schedule_dppu(30, 64, important, 9, &reuse);
            let b = schedule_dppu(30, 64, important, 9, &fetch);
            assert!(a.extra_dram_bytes <= b.extra_dram_bytes);
            assert!(b.stall_cycles <= a.stall_cycles);
        }
    }
}
