//! Single-file checkpoint container: magic + version, a JSON metadata header
//! with an offset table, then raw tensor payloads. The header is readable
//! with `head -c`; payloads round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::corpus::AttributeVocab;
use crate::error::{Error, Result};
use crate::model::vae::{VaeModel, VaeVariant};
use crate::model::vqvae::VqVae;
use crate::model::HyperParams;
use crate::prior::{PixelCnn, PriorConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PXVQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vqvae,
    Vae,
    PixelVae,
    Pixelcnn,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    /// Final loss components by name.
    pub final_losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset from the start of the payload region.
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
    pub seed: u64,
    pub metadata: TrainMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<AttributeVocab>,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: header fields plus named tensors in write order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub hyper: Option<HyperParams>,
    pub prior: Option<PriorConfig>,
    pub seed: u64,
    pub metadata: TrainMeta,
    pub vocab_hash: Option<u64>,
    pub vocab: Option<AttributeVocab>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = t.payload_len() as u64;
            entries.push(TensorEntry { name: clone_name(name), offset, byte_len: len });
            offset += len;
        }
        let header = CheckpointHeader {
            model_kind: self.model_kind,
            hyper: self.hyper,
            prior: self.prior.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
            vocab_hash: self.vocab_hash,
            vocab: self.vocab.clone(),
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, t) in &self.tensors {
            t.write_payload(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        cur.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::CheckpointFormat(format!(
                "version {version} unsupported (expected {VERSION})"
            )));
        }
        let mut b8 = [0u8; 8];
        cur.read_exact(&mut b8)?;
        let header_len = u64::from_le_bytes(b8) as usize;
        let mut header_json = vec![0u8; header_len];
        cur.read_exact(&mut header_json)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
        let payload_start = cur.position() as usize;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let start = payload_start + entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > bytes.len() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor '{}' extends past end of file",
                    entry.name
                )));
            }
            let t = Tensor::<f32>::read_payload(&mut &bytes[start..end])?;
            tensors.push((entry.name.clone(), t));
        }
        Ok(Checkpoint {
            model_kind: header.model_kind,
            hyper: header.hyper,
            prior: header.prior,
            seed: header.seed,
            metadata: header.metadata,
            vocab_hash: header.vocab_hash,
            vocab: header.vocab,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)
            .map_err(|e| Error::File { path: path.to_path_buf(), detail: e.to_string() })?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::File { path: path.to_path_buf(), detail: e.to_string() })?;
        Self::from_bytes(&bytes)
    }
}

fn clone_name(n: &str) -> String {
    n.to_string()
}

struct StateFiller<'a> {
    map: BTreeMap<&'a str, &'a Tensor<f32>>,
    missing: Vec<String>,
    mismatched: Vec<String>,
}

impl<'a> StateFiller<'a> {
    fn new(tensors: &'a [(String, Tensor<f32>)]) -> Self {
        StateFiller {
            map: tensors.iter().map(|(n, t)| (n.as_str(), t)).collect(),
            missing: Vec::new(),
            mismatched: Vec::new(),
        }
    }

    fn fill(&mut self, name: String, t: &mut Tensor<f32>) {
        match self.map.get(name.as_str()) {
            Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
            Some(_) => self.mismatched.push(name),
            None => self.missing.push(name),
        }
    }

    fn finish(self) -> Result<()> {
        if !self.missing.is_empty() || !self.mismatched.is_empty() {
            return Err(Error::CheckpointFormat(format!(
                "state mismatch; missing: {:?}, wrong shape: {:?}",
                self.missing, self.mismatched
            )));
        }
        Ok(())
    }
}

impl VqVae<f32> {
    pub fn state_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut m = self.clone();
        let mut out = Vec::new();
        m.for_each_param(&mut |n, t| out.push((n, t.clone())));
        m.for_each_buffer(&mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn to_checkpoint(&self, seed: u64, metadata: TrainMeta, vocab_hash: Option<u64>) -> Checkpoint {
        Checkpoint {
            model_kind: ModelKind::Vqvae,
            hyper: Some(self.hyper),
            prior: None,
            seed,
            metadata,
            vocab_hash,
            vocab: None,
            tensors: self.state_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model_kind != ModelKind::Vqvae {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {:?}, expected a quantized autoencoder",
                ckpt.model_kind
            )));
        }
        let hyper = ckpt.hyper.ok_or_else(|| Error::CheckpointFormat("missing hyper".into()))?;
        let mut model = VqVae::<f32>::new(hyper, ckpt.seed)?;
        let mut filler = StateFiller::new(&ckpt.tensors);
        model.for_each_param(&mut |n, t| filler.fill(n, t));
        model.for_each_buffer(&mut |n, t| filler.fill(n, t));
        filler.finish()?;
        Ok(model)
    }
}

impl VaeModel<f32> {
    pub fn state_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut m = self.clone();
        let mut out = Vec::new();
        m.for_each_param(&mut |n, t| out.push((n, t.clone())));
        m.for_each_buffer(&mut |n, t| out.push((n, t.clone())));
        out
    }

    pub fn to_checkpoint(&self, seed: u64, metadata: TrainMeta) -> Checkpoint {
        Checkpoint {
            model_kind: match self.variant {
                VaeVariant::Plain => ModelKind::Vae,
                VaeVariant::PixelVae => ModelKind::PixelVae,
            },
            hyper: Some(self.hyper),
            prior: None,
            seed,
            metadata,
            vocab_hash: None,
            vocab: None,
            tensors: self.state_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let variant = match ckpt.model_kind {
            ModelKind::Vae => VaeVariant::Plain,
            ModelKind::PixelVae => VaeVariant::PixelVae,
            other => {
                return Err(Error::Incompatible(format!(
                    "checkpoint holds {other:?}, expected a continuous-latent baseline"
                )))
            }
        };
        let hyper = ckpt.hyper.ok_or_else(|| Error::CheckpointFormat("missing hyper".into()))?;
        let mut model = VaeModel::<f32>::new(variant, hyper, ckpt.seed)?;
        let mut filler = StateFiller::new(&ckpt.tensors);
        model.for_each_param(&mut |n, t| filler.fill(n, t));
        model.for_each_buffer(&mut |n, t| filler.fill(n, t));
        filler.finish()?;
        Ok(model)
    }
}

impl PixelCnn<f32> {
    pub fn to_checkpoint(&self, seed: u64, metadata: TrainMeta, vocab: Option<AttributeVocab>) -> Checkpoint {
        let mut m = self.clone();
        let mut tensors = Vec::new();
        m.for_each_param(&mut |name, t| tensors.push((name, t.clone())));
        Checkpoint {
            model_kind: ModelKind::Pixelcnn,
            hyper: None,
            prior: Some(self.config.clone()),
            seed,
            metadata,
            vocab_hash: vocab.as_ref().map(|v| v.hash()),
            vocab,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model_kind != ModelKind::Pixelcnn {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {:?}, expected an autoregressive prior",
                ckpt.model_kind
            )));
        }
        let config = ckpt
            .prior
            .clone()
            .ok_or_else(|| Error::CheckpointFormat("missing prior config".into()))?;
        let mut model = PixelCnn::<f32>::new(config, ckpt.seed)?;
        let mut filler = StateFiller::new(&ckpt.tensors);
        model.for_each_param(&mut |n, t| filler.fill(n, t));
        filler.finish()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_hyper() -> HyperParams {
        HyperParams {
            input_size: 8,
            scaling_blocks: 1,
            codebook_size: 4,
            embed_dim: 2,
            filters: 4,
            pixelsight: true,
            adapter: true,
        }
    }

    #[test]
    fn vqvae_round_trip_is_bit_exact() {
        let model = VqVae::<f32>::new(toy_hyper(), 3).unwrap();
        let ckpt = model.to_checkpoint(3, TrainMeta::default(), Some(42));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let bytes2 = back.to_bytes().unwrap();
        assert_eq!(bytes, bytes2, "save -> load -> save must be byte-identical");
        let restored = VqVae::<f32>::from_checkpoint(&back).unwrap();
        assert_eq!(restored.hyper, model.hyper);
        let a = model.codebook.embeddings.data();
        let b = restored.codebook.embeddings.data();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = VqVae::<f32>::new(toy_hyper(), 3).unwrap();
        let mut bytes = model.to_checkpoint(3, TrainMeta::default(), None).to_bytes().unwrap();
        bytes[4] = 99; // clobber version
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn wrong_kind_is_incompatible() {
        let model = VqVae::<f32>::new(toy_hyper(), 3).unwrap();
        let ckpt = model.to_checkpoint(3, TrainMeta::default(), None);
        assert!(matches!(
            VaeModel::<f32>::from_checkpoint(&ckpt),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn header_is_human_inspectable_json() {
        let model = VqVae::<f32>::new(toy_hyper(), 3).unwrap();
        let bytes = model.to_checkpoint(3, TrainMeta::default(), None).to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header["model_kind"], "vqvae");
        assert!(header["tensors"].as_array().unwrap().len() > 4);
    }
}
