//! Epoch construction: the augmentation lattice, seeded shuffling, and lazy
//! batch materialization.
//!
//! Training enumerates sprite x {black, white, noise, noise} x {flip, no}
//! x {identity + 4 random rotations}; evaluation uses black & white only,
//! untransformed. Rotations and noise seeds are redrawn per epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{Corpus, Split};
use crate::data::raster::{self, BackgroundKind, Resampler, Rgb8Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One planned augmentation of one sprite.
#[derive(Debug, Clone)]
pub struct AugSpec {
    pub record_idx: usize,
    pub background: BackgroundKind,
    pub flip: bool,
    pub rotation_degrees: f32,
}

#[derive(Debug, Clone)]
pub struct Provenance {
    pub entity_id: String,
    pub background: BackgroundKind,
    pub flip: bool,
    pub rotation_degrees: f32,
}

/// A materialized example: pixels in [0, 1], shape [3, I, I].
#[derive(Debug, Clone)]
pub struct AugmentedExample {
    pub pixels: Tensor<f32>,
    pub provenance: Provenance,
}

/// A batch ready for the model, plus per-item conditioning attributes.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [B, 3, I, I]
    pub pixels: Tensor<f32>,
    pub provenance: Vec<Provenance>,
    /// (shape, type1, type2) dense ids per item
    pub attributes: Vec<[usize; 3]>,
    pub record_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub items: Vec<AugSpec>,
    pub batch_size: usize,
    pub target_side: usize,
    pub resampler: Resampler,
}

fn epoch_rng(seed: u64, split: Split, epoch: u64) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    ChaCha8Rng::seed_from_u64(
        seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_mul(0xd1b5_4a32_d192_ed03),
    )
}

/// Plans one epoch over the given split. The stated augmentation lattice is
/// exact: train yields |sprites| * 4 * 2 * 5 items, eval |sprites| * 2.
pub fn build_epoch(
    corpus: &Corpus,
    split: Split,
    target_side: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochPlan> {
    build_epoch_with_resampler(corpus, split, target_side, batch_size, seed, epoch, Resampler::Bilinear)
}

#[allow(clippy::too_many_arguments)]
pub fn build_epoch_with_resampler(
    corpus: &Corpus,
    split: Split,
    target_side: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    resampler: Resampler,
) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let record_indices: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if record_indices.is_empty() {
        return Err(Error::EmptySplit(format!("no records in split '{}'", split.as_str())));
    }
    let mut rng = epoch_rng(seed, split, epoch);
    let mut items = Vec::new();
    match split {
        Split::Train => {
            for &idx in &record_indices {
                let backgrounds = [
                    BackgroundKind::Black,
                    BackgroundKind::White,
                    BackgroundKind::Noise { seed: rng.random() },
                    BackgroundKind::Noise { seed: rng.random() },
                ];
                let mut rotations = [0.0f32; 5];
                for r in rotations.iter_mut().skip(1) {
                    *r = rng.random_range(-30.0..=30.0);
                }
                for &background in &backgrounds {
                    for &flip in &[false, true] {
                        for &rotation_degrees in &rotations {
                            items.push(AugSpec { record_idx: idx, background, flip, rotation_degrees });
                        }
                    }
                }
            }
        }
        Split::Val | Split::Test => {
            for &idx in &record_indices {
                for background in [BackgroundKind::Black, BackgroundKind::White] {
                    items.push(AugSpec {
                        record_idx: idx,
                        background,
                        flip: false,
                        rotation_degrees: 0.0,
                    });
                }
            }
        }
    }
    // Fisher-Yates with the epoch stream
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    Ok(EpochPlan { items, batch_size, target_side, resampler })
}

/// Materializes one augmentation spec.
pub fn materialize(corpus: &Corpus, spec: &AugSpec, target_side: usize, resampler: Resampler) -> Result<AugmentedExample> {
    let record = &corpus.records[spec.record_idx];
    let composited = raster::composite_background(&record.image, spec.background);
    let background: Rgb8Image =
        raster::render_background(spec.background, record.image.width, record.image.height);
    let transformed = raster::augment(&composited, &background, spec.flip, spec.rotation_degrees, resampler)?;
    let resized = raster::resize_bicubic(&transformed, target_side)?;
    Ok(AugmentedExample {
        pixels: resized.to_tensor(),
        provenance: Provenance {
            entity_id: record.entity_id.clone(),
            background: spec.background,
            flip: spec.flip,
            rotation_degrees: spec.rotation_degrees,
        },
    })
}

impl EpochPlan {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_batches(&self) -> usize {
        self.items.len().div_ceil(self.batch_size)
    }

    /// Builds the b-th batch; the last one may be partial.
    pub fn batch(&self, corpus: &Corpus, b: usize) -> Result<Batch> {
        let lo = b * self.batch_size;
        let hi = (lo + self.batch_size).min(self.items.len());
        assert!(lo < hi, "batch index out of range");
        let side = self.target_side;
        let mut pixels = vec![0f32; (hi - lo) * 3 * side * side];
        let mut provenance = Vec::with_capacity(hi - lo);
        let mut attributes = Vec::with_capacity(hi - lo);
        let mut record_indices = Vec::with_capacity(hi - lo);
        for (slot, spec) in self.items[lo..hi].iter().enumerate() {
            let ex = materialize(corpus, spec, side, self.resampler)?;
            let stride = 3 * side * side;
            pixels[slot * stride..(slot + 1) * stride].copy_from_slice(ex.pixels.data());
            provenance.push(ex.provenance);
            let r = &corpus.records[spec.record_idx];
            attributes.push([r.shape_attr, r.type1_attr, r.type2_attr]);
            record_indices.push(spec.record_idx);
        }
        Ok(Batch {
            pixels: Tensor::from_vec(&[hi - lo, 3, side, side], pixels)?,
            provenance,
            attributes,
            record_indices,
        })
    }
}
