//! Sprite corpus: JSON-lines manifest, PNG decode, attribute vocabularies,
//! and the entity-safe split invariant.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::raster::Rgba8Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row, exactly as serialized on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub entity_id: String,
    pub image_path: String,
    pub shape: String,
    pub type1: String,
    pub type2: String,
    pub split: Split,
}

/// A sprite with decoded pixels and dense attribute ids.
#[derive(Debug, Clone)]
pub struct SpriteRecord {
    pub entity_id: String,
    pub image: Rgba8Image,
    pub shape_attr: usize,
    pub type1_attr: usize,
    pub type2_attr: usize,
    pub split: Split,
}

/// Dense id tables per attribute, built from sorted distinct labels so the
/// assignment is reproducible from the manifest alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocab {
    pub shape: Vec<String>,
    pub type1: Vec<String>,
    pub type2: Vec<String>,
}

impl AttributeVocab {
    fn id_of(table: &[String], label: &str) -> Option<usize> {
        table.iter().position(|l| l == label)
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.shape.len(), self.type1.len(), self.type2.len()]
    }

    /// FNV-1a over the sorted label tables; checkpoints carry this to detect
    /// conditioning-vocabulary drift.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for table in [&self.shape, &self.type1, &self.type2] {
            for label in table {
                eat(label.as_bytes());
                eat(&[0xff]);
            }
            eat(&[0xfe]);
        }
        h
    }

    /// Sidecar format: attribute name -> label -> dense id.
    pub fn to_sidecar_json(&self) -> serde_json::Value {
        let table = |labels: &[String]| -> BTreeMap<String, usize> {
            labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect()
        };
        serde_json::json!({
            "shape": table(&self.shape),
            "type1": table(&self.type1),
            "type2": table(&self.type2),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<SpriteRecord>,
    pub vocab: AttributeVocab,
}

impl Corpus {
    pub fn split_records(&self, split: Split) -> Vec<&SpriteRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn entity_count(&self, split: Split) -> usize {
        let mut ids: Vec<&str> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.entity_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

fn sorted_distinct(labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = labels.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Builds vocabularies and validates split integrity over parsed rows.
pub fn rows_to_corpus<FImg>(rows: &[ManifestRow], mut load_image: FImg) -> Result<Corpus>
where
    FImg: FnMut(&str) -> Result<Rgba8Image>,
{
    let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
    for row in rows {
        match split_of.get(row.entity_id.as_str()) {
            Some(&s) if s != row.split => {
                return Err(Error::ManifestIntegrity(format!(
                    "entity '{}' appears in both {} and {}",
                    row.entity_id,
                    s.as_str(),
                    row.split.as_str()
                )));
            }
            _ => {
                split_of.insert(&row.entity_id, row.split);
            }
        }
    }
    let vocab = AttributeVocab {
        shape: sorted_distinct(rows.iter().map(|r| r.shape.clone())),
        type1: sorted_distinct(rows.iter().map(|r| r.type1.clone())),
        type2: sorted_distinct(rows.iter().map(|r| r.type2.clone())),
    };
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let image = load_image(&row.image_path)?;
        records.push(SpriteRecord {
            entity_id: row.entity_id.clone(),
            image,
            shape_attr: AttributeVocab::id_of(&vocab.shape, &row.shape).unwrap(),
            type1_attr: AttributeVocab::id_of(&vocab.type1, &row.type1).unwrap(),
            type2_attr: AttributeVocab::id_of(&vocab.type2, &row.type2).unwrap(),
            split: row.split,
        });
    }
    Ok(Corpus { records, vocab })
}

pub fn load_png_rgba(path: &Path) -> Result<Rgba8Image> {
    let file_err = |detail: String| Error::File { path: path.to_path_buf(), detail };
    let img = image::open(path).map_err(|e| file_err(e.to_string()))?.to_rgba8();
    Ok(Rgba8Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

pub fn save_png_rgba(path: &Path, img: &Rgba8Image) -> Result<()> {
    let buf: image::RgbaImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| Error::invalid("raster buffer size mismatch"))?;
    buf.save(path).map_err(|e| Error::File { path: path.to_path_buf(), detail: e.to_string() })
}

pub fn save_png_rgb(path: &Path, img: &crate::data::raster::Rgb8Image) -> Result<()> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| Error::invalid("raster buffer size mismatch"))?;
    buf.save(path).map_err(|e| Error::File { path: path.to_path_buf(), detail: e.to_string() })
}

/// Reads a JSON-lines manifest and decodes every referenced PNG. Image paths
/// resolve relative to the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let file = fs::File::open(manifest_path)
        .map_err(|e| Error::File { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| {
            Error::ManifestIntegrity(format!(
                "{}:{}: {}",
                manifest_path.display(),
                lineno + 1,
                e
            ))
        })?;
        rows.push(row);
    }
    rows_to_corpus(&rows, |rel| load_png_rgba(&dir.join(rel)))
}

/// Writes manifest + PNGs + vocabulary sidecar under `dir`.
pub fn write_corpus(dir: &Path, rows: &[ManifestRow], images: &[Rgba8Image]) -> Result<PathBuf> {
    debug_assert_eq!(rows.len(), images.len());
    fs::create_dir_all(dir.join("images"))?;
    for (row, img) in rows.iter().zip(images) {
        save_png_rgba(&dir.join(&row.image_path), img)?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)?;
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    let corpus = rows_to_corpus(rows, |_| Ok(Rgba8Image::new(1, 1)))?;
    let sidecar = serde_json::to_string_pretty(&corpus.vocab.to_sidecar_json())?;
    fs::write(dir.join("vocab.json"), sidecar)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(entity: &str, split: Split) -> ManifestRow {
        ManifestRow {
            entity_id: entity.into(),
            image_path: format!("images/{entity}.png"),
            shape: "blob".into(),
            type1: "fire".into(),
            type2: "none".into(),
            split,
        }
    }

    #[test]
    fn empty_manifest_gives_empty_corpus() {
        let corpus = rows_to_corpus(&[], |_| Ok(Rgba8Image::new(1, 1))).unwrap();
        assert!(corpus.records.is_empty());
        assert_eq!(corpus.vocab.sizes(), [0, 0, 0]);
    }

    #[test]
    fn entity_in_two_splits_is_rejected() {
        let rows = vec![row("e1", Split::Train), row("e1", Split::Test)];
        let err = rows_to_corpus(&rows, |_| Ok(Rgba8Image::new(1, 1))).unwrap_err();
        assert!(matches!(err, Error::ManifestIntegrity(_)), "{err}");
    }

    #[test]
    fn same_entity_same_split_is_fine() {
        let rows = vec![row("e1", Split::Train), row("e1", Split::Train)];
        let corpus = rows_to_corpus(&rows, |_| Ok(Rgba8Image::new(1, 1))).unwrap();
        assert_eq!(corpus.records.len(), 2);
    }

    #[test]
    fn vocab_ids_are_dense_and_sorted() {
        let mut rows = vec![row("a", Split::Train), row("b", Split::Train)];
        rows[0].shape = "tall".into();
        rows[1].shape = "blob".into();
        rows[0].type1 = "water".into();
        let corpus = rows_to_corpus(&rows, |_| Ok(Rgba8Image::new(1, 1))).unwrap();
        assert_eq!(corpus.vocab.shape, vec!["blob".to_string(), "tall".to_string()]);
        assert_eq!(corpus.records[0].shape_attr, 1);
        assert_eq!(corpus.records[1].shape_attr, 0);
        assert_eq!(corpus.vocab.type1, vec!["fire".to_string(), "water".to_string()]);
    }

    #[test]
    fn vocab_hash_tracks_content() {
        let a = AttributeVocab {
            shape: vec!["x".into()],
            type1: vec!["y".into()],
            type2: vec![],
        };
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.type2.push("z".into());
        assert_ne!(a.hash(), b.hash());
    }
}
