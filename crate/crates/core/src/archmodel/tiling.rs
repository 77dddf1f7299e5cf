//! Execution-tile decomposition of a weighted layer's output.
//!
//! A layer's output is an `out_channels × positions` grid; the array
//! processes blocks of up to `array × array` of it at a time. Importance
//! selection (uniform-proportions policy), DPPU scheduling, and
//! position-table accounting all share this decomposition.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub out_ch: usize,
    /// Spatial output positions (rows × cols; 1 for fully-connected).
    pub positions: usize,
    pub array: usize,
    pub ch_tiles: usize,
    pub pos_tiles: usize,
}

impl TileGrid {
    pub fn new(out_ch: usize, positions: usize, array: usize) -> Self {
        assert!(array > 0 && out_ch > 0 && positions > 0);
        TileGrid {
            out_ch,
            positions,
            array,
            ch_tiles: out_ch.div_ceil(array),
            pos_tiles: positions.div_ceil(array),
        }
    }

    pub fn count(&self) -> usize {
        self.ch_tiles * self.pos_tiles
    }

    /// Tile id of a flat CHW output index (channel-major).
    #[inline]
    pub fn tile_of(&self, flat: usize) -> usize {
        let c = flat / self.positions;
        let pos = flat % self.positions;
        (c / self.array) * self.pos_tiles + pos / self.array
    }

    fn ch_span(&self, tile: usize) -> usize {
        let cb = tile / self.pos_tiles;
        (self.out_ch - cb * self.array).min(self.array)
    }

    /// Output positions covered by one tile.
    pub fn tile_positions(&self, tile: usize) -> usize {
        let pb = tile % self.pos_tiles;
        (self.positions - pb * self.array).min(self.array)
    }

    /// Neurons in one tile.
    pub fn tile_neurons(&self, tile: usize) -> usize {
        self.ch_span(tile) * self.tile_positions(tile)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_every_neuron_exactly_once() {
        for (m, n, a) in [(4, 256, 32), (8, 64, 32), (10, 1, 32), (33, 70, 32), (64, 64, 16)] {
            let g = TileGrid::new(m, n, a);
            let mut counts = vec![0usize; g.count()];
            for flat in 0..m * n {
                counts[g.tile_of(flat)] += 1;
            }
            for t in 0..g.count() {
                assert_eq!(counts[t], g.tile_neurons(t), "tile {t} of {g:?}");
            }
            assert_eq!(counts.iter().sum::<usize>(), m * n);
        }
    }

    #[test]
    fn tiny_conv_layer_tiles_into_position_blocks() {
        // 4 channels × 256 positions on a 32-wide array: 1 × 8 tiles of 128
        let g = TileGrid::new(4, 256, 32);
        assert_eq!(g.count(), 8);
        for t in 0..8 {
            assert_eq!(g.tile_neurons(t), 128);
        }
    }
}
