//! Gradient-based important-neuron selection and important-bit
//! configuration search.
//!
//! A neuron is one output element of a weighted layer. Its sensitivity
//! proxy is the accumulated |d loss / d activation| over a fixed
//! calibration subset: to first order, an activation perturbation Δx moves
//! the loss by Δx·f'(x), so large-gradient neurons are the fault-sensitive
//! ones. The top `s_th` fraction is selected either globally or
//! independently inside every execution tile (uniform proportions), which
//! is what lets the DPPU size to the per-tile demand.
//!
//! The bit side enumerates `(IB_TH, NB_TH)` pairs, estimating accuracy by
//! fault injection and cost from the prebuilt area table, and keeps the
//! cheapest feasible pair.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archmodel::TileGrid;
use crate::bitcircuit::{AreaTable, MultiplierKind, ProtectPolicy};
use crate::dataset::Dataset;
use crate::error::CoreError;
use crate::num::Real;
use crate::qmodel::{pixels_to_float, FloatModel, LayerGraph, QuantizedModel};
use crate::Result;

pub mod format;

/// Accumulated |gradient| per neuron of every weighted layer.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    /// `(layer, per-neuron sums)` in layer order.
    pub by_layer: Vec<(usize, Vec<f64>)>,
    pub samples: usize,
}

impl GradientRecord {
    pub fn total_neurons(&self) -> usize {
        self.by_layer.iter().map(|(_, g)| g.len()).sum()
    }
}

/// Accumulate |d loss / d neuron| over a dataset (Algorithm 1's gradient
/// pass). Samples run in parallel; the reduction folds in sample order so
/// the result is schedule independent.
pub fn accumulate_gradients<F: Real>(model: &FloatModel<F>, data: &Dataset) -> Result<GradientRecord> {
    if data.is_empty() {
        return Err(CoreError::invalid("dataset", "gradient pass needs samples"));
    }
    let weighted = model.graph.weighted_layers();
    let per_sample: Vec<Vec<Vec<F>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let input = pixels_to_float::<F>(data.image(i));
            model.neuron_loss_gradients(&input, data.label(i))
        })
        .collect::<Result<_>>()?;
    let shapes = model.graph.output_shapes()?;
    let mut by_layer: Vec<(usize, Vec<f64>)> = weighted
        .iter()
        .map(|&l| (l, vec![0.0f64; shapes[l].volume()]))
        .collect();
    for sample in &per_sample {
        for (acc, grads) in by_layer.iter_mut().zip(sample) {
            for (a, g) in acc.1.iter_mut().zip(grads) {
                *a += g.to_f64_lossy();
            }
        }
    }
    Ok(GradientRecord { by_layer, samples: data.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// Top fraction over all neurons of the model.
    Global,
    /// Top fraction independently within every execution tile.
    UniformPerTile,
}

impl SelectionPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionPolicy::Global => "global",
            SelectionPolicy::UniformPerTile => "uniform-proportions",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" | "layers" => Ok(SelectionPolicy::Global),
            "uniform-proportions" | "uniform" | "sharding" => Ok(SelectionPolicy::UniformPerTile),
            other => Err(CoreError::invalid("policy", format!("unknown selection policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerImportance {
    pub layer: usize,
    pub neurons: usize,
    pub selected: usize,
    /// One bit per neuron, flat CHW order.
    bits: Vec<u64>,
    pub grid: TileGrid,
    /// Selected count per tile.
    pub tile_selected: Vec<usize>,
}

impl LayerImportance {
    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        (self.bits[idx >> 6] >> (idx & 63)) & 1 == 1
    }

    fn set(&mut self, idx: usize) {
        self.bits[idx >> 6] |= 1 << (idx & 63);
    }

    pub fn fraction(&self) -> f64 {
        self.selected as f64 / self.neurons as f64
    }

    pub fn tile_fractions(&self) -> Vec<f64> {
        self.tile_selected
            .iter()
            .enumerate()
            .map(|(t, &s)| s as f64 / self.grid.tile_neurons(t) as f64)
            .collect()
    }

    pub fn packed_bits(&self) -> &[u64] {
        &self.bits
    }
}

/// Important-neuron flags for the whole model plus per-tile statistics.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    pub s_th: f64,
    pub policy: SelectionPolicy,
    pub array_size: usize,
    /// Indexed by model layer; `None` for layers without neurons.
    pub entries: Vec<Option<LayerImportance>>,
}

impl ImportanceMap {
    #[inline]
    pub fn is_important(&self, layer: usize, index: usize) -> bool {
        match self.entries.get(layer) {
            Some(Some(e)) => e.get(index),
            _ => false,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerImportance> {
        self.entries.iter().flatten()
    }

    pub fn total_selected(&self) -> usize {
        self.layers().map(|e| e.selected).sum()
    }

    pub fn total_neurons(&self) -> usize {
        self.layers().map(|e| e.neurons).sum()
    }

    pub fn tile_selected(&self, layer: usize) -> Option<&[usize]> {
        self.entries.get(layer)?.as_ref().map(|e| e.tile_selected.as_slice())
    }

    /// Packed position-table size, one bit per neuron per tile.
    pub fn position_table_bytes(&self) -> u64 {
        self.layers()
            .map(|e| (0..e.grid.count()).map(|t| (e.grid.tile_neurons(t) as u64).div_ceil(8)).sum::<u64>())
            .sum()
    }
}

/// Algorithm 1: rank neurons by accumulated |gradient| and select the top
/// `s_th` fraction under the given policy. Ties break to the lower neuron
/// id, so selections are nested across thresholds.
pub fn select_important_neurons(
    record: &GradientRecord,
    graph: &LayerGraph,
    s_th: f64,
    policy: SelectionPolicy,
    array_size: usize,
) -> Result<ImportanceMap> {
    if !(s_th > 0.0 && s_th <= 1.0) {
        return Err(CoreError::invalid("s_th", format!("must be in (0, 1], got {s_th}")));
    }
    let shapes = graph.output_shapes()?;
    let mut entries: Vec<Option<LayerImportance>> = vec![None; graph.layers.len()];
    for (layer, grads) in &record.by_layer {
        let neurons = grads.len();
        let positions = shapes[*layer].height * shapes[*layer].width;
        let grid = TileGrid::new(shapes[*layer].channels, positions, array_size);
        entries[*layer] = Some(LayerImportance {
            layer: *layer,
            neurons,
            selected: 0,
            bits: vec![0u64; neurons.div_ceil(64)],
            tile_selected: vec![0; grid.count()],
            grid,
        });
    }

    match policy {
        SelectionPolicy::Global => {
            // global descending sort; ties by (layer, index) ascending
            let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(record.total_neurons());
            for (layer, grads) in &record.by_layer {
                for (idx, &g) in grads.iter().enumerate() {
                    order.push((g, *layer, idx));
                }
            }
            order.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let take = ((order.len() as f64) * s_th).round() as usize;
            for &(_, layer, idx) in order.iter().take(take) {
                let e = entries[layer].as_mut().unwrap();
                e.set(idx);
                e.selected += 1;
                e.tile_selected[e.grid.tile_of(idx)] += 1;
            }
        }
        SelectionPolicy::UniformPerTile => {
            for (layer, grads) in &record.by_layer {
                let e = entries[*layer].as_mut().unwrap();
                let mut tiles: Vec<Vec<(f64, usize)>> = vec![Vec::new(); e.grid.count()];
                for (idx, &g) in grads.iter().enumerate() {
                    tiles[e.grid.tile_of(idx)].push((g, idx));
                }
                let grid = e.grid;
                for (t, mut members) in tiles.into_iter().enumerate() {
                    members.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                    let take = ((grid.tile_neurons(t) as f64) * s_th).round() as usize;
                    for &(_, idx) in members.iter().take(take) {
                        e.set(idx);
                        e.selected += 1;
                        e.tile_selected[t] += 1;
                    }
                }
            }
        }
    }

    Ok(ImportanceMap { s_th, policy, array_size, entries })
}

/// Important-bit counts: the top `ib_th` bits of important neurons and the
/// top `nb_th` bits of ordinary neurons are protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitConfig {
    pub ib_th: u8,
    pub nb_th: u8,
}

impl BitConfig {
    pub fn new(ib_th: u8, nb_th: u8) -> Result<Self> {
        if !(1..=8).contains(&ib_th) || !(1..=8).contains(&nb_th) {
            return Err(CoreError::invalid("bit_config", "bit counts must be in 1..=8"));
        }
        if nb_th > ib_th {
            return Err(CoreError::invalid(
                "bit_config",
                format!("important neurons need at least as many protected bits ({nb_th} > {ib_th})"),
            ));
        }
        Ok(BitConfig { ib_th, nb_th })
    }
}

/// Protection-cost context for the bit-configuration search: how many PEs
/// of each kind pay for a given per-PE protection level.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub table: &'a AreaTable,
    pub policy: ProtectPolicy,
    pub structure: MultiplierKind,
    pub q_scale: u8,
    /// PEs in the 2D array (protected at NB_TH).
    pub array_pes: usize,
    /// DPPU lanes (protected at IB_TH).
    pub dppu_pes: usize,
}

impl CostContext<'_> {
    pub fn cost(&self, config: BitConfig) -> Result<f64> {
        let nb = self.table.added_area(self.policy, self.structure, config.nb_th, self.q_scale)?;
        let ib = self.table.added_area(self.policy, self.structure, config.ib_th, self.q_scale)?;
        Ok(self.array_pes as f64 * nb + self.dppu_pes as f64 * ib)
    }
}

#[derive(Debug, Clone)]
pub struct BitConfigChoice {
    pub config: BitConfig,
    pub feasible: bool,
    pub accuracy: crate::faultsim::AccuracyEstimate,
    pub cost: f64,
}

/// Algorithm 2: exhaustive enumeration of bit configurations. Returns the
/// cheapest pair whose estimated accuracy meets `acc_target`; when nothing
/// is feasible, the highest-accuracy pair is returned flagged infeasible.
///
/// The search space is `nb_th <= ib_th` (important neurons get at least as
/// much protection); `full_grid` lifts the restriction.
pub fn evaluate_bit_config(
    model: &QuantizedModel,
    data: &Dataset,
    importance: &ImportanceMap,
    acc_target: f64,
    fault_cfg: &crate::faultsim::FaultConfig,
    ctx: &CostContext<'_>,
    full_grid: bool,
) -> Result<BitConfigChoice> {
    if importance.s_th > 0.0 && importance.total_selected() == 0 && importance.total_neurons() > 0 {
        return Err(CoreError::Inconsistent(
            "importance set is empty although s_th > 0".into(),
        ));
    }
    let mut best_feasible: Option<BitConfigChoice> = None;
    let mut best_acc: Option<BitConfigChoice> = None;
    for ib in 1..=8u8 {
        let nb_max = if full_grid { 8 } else { ib };
        for nb in 1..=nb_max {
            let config = BitConfig { ib_th: ib, nb_th: nb };
            let mask = crate::faultsim::ProtectionMask::Bits { importance: importance.clone(), config };
            let accuracy = crate::faultsim::evaluate_accuracy(model, data, fault_cfg, &mask)?;
            let cost = ctx.cost(config)?;
            let choice = BitConfigChoice { config, feasible: accuracy.mean >= acc_target, accuracy, cost };
            if choice.feasible
                && best_feasible.as_ref().map_or(true, |b| {
                    choice.cost < b.cost
                        || (choice.cost == b.cost && (config.ib_th, config.nb_th) < (b.config.ib_th, b.config.nb_th))
                })
            {
                best_feasible = Some(choice.clone());
            }
            if best_acc.as_ref().map_or(true, |b| choice.accuracy.mean > b.accuracy.mean) {
                best_acc = Some(choice);
            }
        }
    }
    Ok(best_feasible.unwrap_or_else(|| {
        let mut b = best_acc.expect("non-empty grid");
        b.feasible = false;
        b
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::{LayerKind, Shape};

    fn record_for(graph: &LayerGraph, grads: Vec<(usize, Vec<f64>)>) -> GradientRecord {
        let _ = graph;
        GradientRecord { by_layer: grads, samples: 1 }
    }

    fn two_neuron_graph() -> LayerGraph {
        LayerGraph::new(
            Shape::new(1, 1, 1),
            vec![LayerKind::FullyConnected { in_features: 1, out_features: 2 }],
        )
    }

    #[test]
    fn full_threshold_selects_everything() {
        let g = two_neuron_graph();
        let r = record_for(&g, vec![(0, vec![3.0, 1.0])]);
        let map = select_important_neurons(&r, &g, 1.0, SelectionPolicy::Global, 32).unwrap();
        assert_eq!(map.total_selected(), 2);
    }

    #[test]
    fn half_threshold_takes_the_larger_gradient() {
        let g = two_neuron_graph();
        let r = record_for(&g, vec![(0, vec![3.0, 1.0])]);
        let map = select_important_neurons(&r, &g, 0.5, SelectionPolicy::Global, 32).unwrap();
        assert!(map.is_important(0, 0));
        assert!(!map.is_important(0, 1));
        let r2 = record_for(&g, vec![(0, vec![1.0, 3.0])]);
        let map2 = select_important_neurons(&r2, &g, 0.5, SelectionPolicy::Global, 32).unwrap();
        assert!(!map2.is_important(0, 0));
        assert!(map2.is_important(0, 1));
    }

    #[test]
    fn ties_break_to_lower_neuron_id() {
        let g = two_neuron_graph();
        let r = record_for(&g, vec![(0, vec![2.0, 2.0])]);
        let map = select_important_neurons(&r, &g, 0.5, SelectionPolicy::Global, 32).unwrap();
        assert!(map.is_important(0, 0));
        assert!(!map.is_important(0, 1));
    }

    #[test]
    fn selection_is_nested_across_thresholds() {
        let g = LayerGraph::new(
            Shape::new(1, 4, 4),
            vec![LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 1, stride: 1, padding: 0 }],
        );
        let grads: Vec<f64> = (0..32).map(|i| ((i * 7919) % 97) as f64).collect();
        let r = record_for(&g, vec![(0, grads)]);
        for policy in [SelectionPolicy::Global, SelectionPolicy::UniformPerTile] {
            let mut prev: Vec<(usize, usize)> = Vec::new();
            for s in [0.1, 0.25, 0.5, 0.75, 1.0] {
                let map = select_important_neurons(&r, &g, s, policy, 32).unwrap();
                let cur: Vec<(usize, usize)> = (0..32)
                    .filter(|&i| map.is_important(0, i))
                    .map(|i| (0usize, i))
                    .collect();
                for p in &prev {
                    assert!(cur.contains(p), "selection not nested at s={s} ({policy:?})");
                }
                prev = cur;
            }
        }
    }

    #[test]
    fn uniform_policy_balances_tiles_within_one_neuron() {
        // 2 channels × 64 positions on a 32-array: 1×2 grid per channel block
        let g = LayerGraph::new(
            Shape::new(1, 8, 8),
            vec![LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 1, stride: 1, padding: 0 }],
        );
        // all gradient mass in the first tile
        let mut grads = vec![0.0f64; 128];
        for (i, g) in grads.iter_mut().enumerate() {
            *g = if i < 32 { 100.0 + i as f64 } else { 0.001 * i as f64 };
        }
        let r = record_for(&g, vec![(0, grads)]);
        let s_th = 0.25;
        let map = select_important_neurons(&r, &g, s_th, SelectionPolicy::UniformPerTile, 32).unwrap();
        let e = map.entries[0].as_ref().unwrap();
        for (t, &sel) in e.tile_selected.iter().enumerate() {
            let want = e.grid.tile_neurons(t) as f64 * s_th;
            assert!((sel as f64 - want).abs() <= 1.0, "tile {t}: {sel} vs {want}");
        }
        // global policy would have dumped everything into tile 0
        let gm = select_important_neurons(&r, &g, s_th, SelectionPolicy::Global, 32).unwrap();
        let ge = gm.entries[0].as_ref().unwrap();
        assert_eq!(ge.tile_selected[0], 32);
    }

    #[test]
    fn s_th_domain_is_enforced() {
        let g = two_neuron_graph();
        let r = record_for(&g, vec![(0, vec![1.0, 2.0])]);
        assert!(select_important_neurons(&r, &g, 0.0, SelectionPolicy::Global, 32).is_err());
        assert!(select_important_neurons(&r, &g, 1.5, SelectionPolicy::Global, 32).is_err());
    }

    #[test]
    fn bit_config_invariants() {
        assert!(BitConfig::new(2, 1).is_ok());
        assert!(BitConfig::new(1, 2).is_err());
        assert!(BitConfig::new(9, 1).is_err());
        assert!(BitConfig::new(2, 0).is_err());
    }
}
