//! Palette swap over encoding grids: rank each image's distinct encodings by
//! descending occurrence count (ties by ascending encoding id), pair the
//! ranks across the two images, and remap. Unmatched ranks keep their own
//! encoding.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::vqvae::{EncodingGrid, VqVae};
use crate::tensor::Tensor;

/// Distinct encodings ordered by descending frequency, ties by ascending id.
pub fn frequency_rank(grid: &EncodingGrid) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in &grid.indices {
        *counts.entry(i).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is id-ascending, and the sort is stable, so equal
    // counts keep ascending-id order.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.into_iter().map(|(id, _)| id).collect()
}

/// rank_i(A) <-> rank_i(B) up to the shorter rank list; everything else maps
/// to itself.
pub fn swap_mappings(a: &EncodingGrid, b: &EncodingGrid) -> (BTreeMap<u32, u32>, BTreeMap<u32, u32>) {
    let ra = frequency_rank(a);
    let rb = frequency_rank(b);
    let mut map_a = BTreeMap::new();
    let mut map_b = BTreeMap::new();
    for (&ca, &cb) in ra.iter().zip(rb.iter()) {
        map_a.insert(ca, cb);
        map_b.insert(cb, ca);
    }
    (map_a, map_b)
}

pub fn apply_mapping(grid: &EncodingGrid, mapping: &BTreeMap<u32, u32>) -> EncodingGrid {
    EncodingGrid {
        indices: grid.indices.iter().map(|i| *mapping.get(i).unwrap_or(i)).collect(),
        side: grid.side,
    }
}

pub struct PaletteSwap {
    pub swapped_a: Tensor<f32>,
    pub swapped_b: Tensor<f32>,
    pub grid_a: EncodingGrid,
    pub grid_b: EncodingGrid,
    pub remapped_a: EncodingGrid,
    pub remapped_b: EncodingGrid,
}

/// Encode both images, swap encodings by frequency rank, decode both.
/// Inputs are [1, 3, I, I] tensors in [0, 1].
pub fn palette_swap(model: &VqVae<f32>, image_a: &Tensor<f32>, image_b: &Tensor<f32>) -> Result<PaletteSwap> {
    let grid_a = model.encode(image_a)?.remove(0);
    let grid_b = model.encode(image_b)?.remove(0);
    let (map_a, map_b) = swap_mappings(&grid_a, &grid_b);
    let remapped_a = apply_mapping(&grid_a, &map_a);
    let remapped_b = apply_mapping(&grid_b, &map_b);
    let swapped_a = model.decode(std::slice::from_ref(&remapped_a))?;
    let swapped_b = model.decode(std::slice::from_ref(&remapped_b))?;
    Ok(PaletteSwap { swapped_a, swapped_b, grid_a, grid_b, remapped_a, remapped_b })
}
