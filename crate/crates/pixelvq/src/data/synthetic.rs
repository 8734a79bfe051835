//! Procedural pixel-art corpus: symmetric blocky bodies, a small random
//! palette, alpha background, and random attribute labels. Stands in for
//! licensed sprite sets at desk scale; real corpora plug in via the manifest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{ManifestRow, Split};
use crate::data::raster::Rgba8Image;
use crate::error::{Error, Result};

pub const SHAPE_LABELS: [&str; 4] = ["blob", "quadruped", "tall", "winged"];
pub const TYPE_LABELS: [&str; 8] =
    ["dark", "electric", "fire", "grass", "metal", "none", "rock", "water"];

pub struct SyntheticCorpus {
    pub rows: Vec<ManifestRow>,
    pub images: Vec<Rgba8Image>,
}

/// Deterministic per seed: same arguments produce byte-identical sprites,
/// labels, and split assignment.
pub fn make_synthetic_corpus(
    n_entities: usize,
    image_size: usize,
    palette_size: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if palette_size < 2 {
        return Err(Error::invalid("palette_size must be >= 2"));
    }
    if image_size < 4 {
        return Err(Error::invalid("image_size must be >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // entity -> split: deterministic shuffle, then 80/10/10 by position
    let mut order: Vec<usize> = (0..n_entities).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = n_entities / 10;
    let n_test = n_entities / 10;
    let split_of = |pos: usize| -> Split {
        if pos < n_entities - n_val - n_test {
            Split::Train
        } else if pos < n_entities - n_test {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut splits = vec![Split::Train; n_entities];
    for (pos, &e) in order.iter().enumerate() {
        splits[e] = split_of(pos);
    }

    let mut rows = Vec::with_capacity(n_entities);
    let mut images = Vec::with_capacity(n_entities);
    for e in 0..n_entities {
        let image = generate_sprite(image_size, palette_size, &mut rng);
        let entity_id = format!("synth-{e:05}");
        rows.push(ManifestRow {
            entity_id: entity_id.clone(),
            image_path: format!("images/{entity_id}.png"),
            shape: SHAPE_LABELS[rng.random_range(0..SHAPE_LABELS.len())].to_string(),
            type1: TYPE_LABELS[rng.random_range(0..TYPE_LABELS.len())].to_string(),
            type2: TYPE_LABELS[rng.random_range(0..TYPE_LABELS.len())].to_string(),
            split: splits[e],
        });
        images.push(image);
    }
    Ok(SyntheticCorpus { rows, images })
}

fn generate_sprite(size: usize, palette_size: usize, rng: &mut ChaCha8Rng) -> Rgba8Image {
    // palette quantized to 6 levels per channel, pixel-art style
    let palette: Vec<[u8; 3]> = (0..palette_size)
        .map(|_| {
            [
                rng.random_range(0..6u8) * 51,
                rng.random_range(0..6u8) * 51,
                rng.random_range(0..6u8) * 51,
            ]
        })
        .collect();

    // body mask in half-width, mirrored for left/right symmetry
    let half = size / 2;
    let mut mask = vec![false; half * size];
    let cx = 0.0; // mirror axis sits at the right edge of the half grid
    let cy = (size as f32 - 1.0) / 2.0;
    let density = rng.random_range(0.55..0.8);
    for y in 0..size {
        for x in 0..half {
            // distance from the mirror axis and vertical center, normalized
            let dx = (half - 1 - x) as f32 - cx;
            let dy = (y as f32 - cy).abs();
            let r = (dx / half as f32).hypot(dy / (size as f32 / 2.0));
            let p = (density - r * 0.9).clamp(0.02, 0.98);
            mask[y * half + x] = rng.random_range(0.0..1.0) < p;
        }
    }
    // one majority-smoothing pass to clump pixels into blocky regions
    let snapshot = mask.clone();
    for y in 0..size {
        for x in 0..half {
            let mut on = 0;
            let mut total = 0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    if nx >= 0 && (nx as usize) < half && ny >= 0 && (ny as usize) < size {
                        total += 1;
                        if snapshot[ny as usize * half + nx as usize] {
                            on += 1;
                        }
                    }
                }
            }
            mask[y * half + x] = on * 2 > total;
        }
    }

    // color regions: horizontal bands with jitter, all colors from the palette
    let band = (size / palette_size.min(size)).max(1);
    let mut img = Rgba8Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let hx = if x < half { x } else { size - 1 - x };
            let hx = hx.min(half.saturating_sub(1));
            if mask[y * half + hx] {
                let jitter = rng.random_range(0..2usize);
                let idx = (y / band + jitter) % palette_size;
                let c = palette[idx];
                img.set_pixel(x, y, [c[0], c[1], c[2], 255]);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn zero_entities_gives_empty_corpus() {
        let c = make_synthetic_corpus(0, 16, 4, 1).unwrap();
        assert!(c.rows.is_empty());
        assert!(c.images.is_empty());
    }

    #[test]
    fn palette_size_two_census() {
        let c = make_synthetic_corpus(20, 16, 2, 7).unwrap();
        for img in &c.images {
            let mut colors = BTreeSet::new();
            for y in 0..img.height {
                for x in 0..img.width {
                    let p = img.pixel(x, y);
                    if p[3] == 255 {
                        colors.insert([p[0], p[1], p[2]]);
                    } else {
                        assert_eq!(p[3], 0, "alpha must be fully on or off");
                    }
                }
            }
            assert!(colors.len() <= 2, "sprite uses {} opaque colors", colors.len());
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = make_synthetic_corpus(12, 16, 4, 99).unwrap();
        let b = make_synthetic_corpus(12, 16, 4, 99).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }
        let ra = serde_json::to_string(&a.rows.iter().collect::<Vec<_>>()).unwrap();
        let rb = serde_json::to_string(&b.rows.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn hundred_entities_split_80_10_10() {
        // independent recount: group rows by split and count distinct entities
        let c = make_synthetic_corpus(100, 16, 4, 5).unwrap();
        let count = |s: Split| {
            c.rows
                .iter()
                .filter(|r| r.split == s)
                .map(|r| r.entity_id.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert_eq!(count(Split::Train), 80);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 10);
    }

    #[test]
    fn sprites_are_left_right_symmetric_in_coverage() {
        let c = make_synthetic_corpus(3, 16, 3, 11).unwrap();
        for img in &c.images {
            for y in 0..img.height {
                for x in 0..img.width / 2 {
                    let l = img.pixel(x, y)[3];
                    let r = img.pixel(img.width - 1 - x, y)[3];
                    assert_eq!(l, r, "alpha asymmetry at ({x},{y})");
                }
            }
        }
    }
}
