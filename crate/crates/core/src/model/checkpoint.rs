//! Binary model container.
//!
//! Layout: 8 magic bytes, format version (u32 LE), header length (u32 LE),
//! a JSON header, then every tensor as little-endian f32 in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Float;
use crate::transform::TransformConfig;
use crate::vocab::{FieldLayout, Vocabularies};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"INTENTR\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: FieldLayout,
    transform: TransformConfig,
    vocab_rows: Vec<usize>,
    embeddings_trainable: bool,
    /// sha256 of each active field's serialized vocabulary.
    vocab_digests: BTreeMap<String, String>,
    tensors: Vec<(String, usize)>,
}

/// A model together with the preprocessing it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub transform: TransformConfig,
    pub vocab_digests: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new<T: Float>(model: &Model<T>, transform: TransformConfig, vocabs: &Vocabularies) -> Self {
        let vocab_digests = model
            .layout
            .fields
            .iter()
            .map(|(f, _)| (f.name().to_string(), vocabs.get(*f).digest()))
            .collect();
        Checkpoint {
            model: model.cast(),
            transform,
            vocab_digests,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let tensors = m.tensors();
        let header = Header {
            config: m.config.clone(),
            layout: m.layout.clone(),
            transform: self.transform.clone(),
            vocab_rows: m.vocab_rows(),
            embeddings_trainable: m.embeddings_trainable(),
            vocab_digests: self.vocab_digests.clone(),
            tensors: tensors.iter().map(|(n, _, s)| (n.clone(), s.len())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * m.param_count().total());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, s) in tensors {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not an intentr checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut model = Model::<f32>::zeros(header.config, header.layout, &header.vocab_rows)?;
        model.set_embeddings_trainable(header.embeddings_trainable);
        let mut rest = &bytes[16 + hlen..];
        {
            let tensors = model.tensors_mut();
            if tensors.len() != header.tensors.len() {
                return Err(bad("tensor count differs from the declared architecture"));
            }
            for ((name, _, dst), (hname, hlen)) in tensors.into_iter().zip(&header.tensors) {
                if name != *hname || dst.len() != *hlen {
                    return Err(bad(&format!("tensor {hname} ({hlen}) does not match {name} ({})", dst.len())));
                }
                let need = 4 * dst.len();
                if rest.len() < need {
                    return Err(bad("truncated tensor data"));
                }
                for (d, chunk) in dst.iter_mut().zip(rest[..need].chunks_exact(4)) {
                    *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                rest = &rest[need..];
            }
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model,
            transform: header.transform,
            vocab_digests: header.vocab_digests,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a checkpoint without checking vocabularies.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reads a checkpoint and refuses it unless every active field's
    /// vocabulary hashes to the recorded digest.
    pub fn load(path: &Path, vocabs: &Vocabularies) -> Result<Self> {
        let ck = Self::load_unchecked(path)?;
        ck.verify_vocabs(vocabs)?;
        Ok(ck)
    }

    pub fn verify_vocabs(&self, vocabs: &Vocabularies) -> Result<()> {
        for (f, _) in &self.model.layout.fields {
            let actual = vocabs.get(*f).digest();
            match self.vocab_digests.get(f.name()) {
                Some(expected) if *expected == actual => {}
                other => {
                    return Err(Error::VocabMismatch {
                        field: f.name().to_string(),
                        expected: other.cloned().unwrap_or_else(|| "<missing>".into()),
                        actual,
                    })
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ClickEvent, Label, Session};
    use crate::nn::CellKind;
    use crate::vocab::ItemCatalog;

    fn vocabs(items: &[u64]) -> Vocabularies {
        let s = Session {
            session_id: 1,
            events: items
                .iter()
                .map(|&i| ClickEvent {
                    session_id: 1,
                    timestamp_ms: 0,
                    item_id: i,
                    category: "1".into(),
                })
                .collect(),
            label: Label::Buyer,
            purchases: vec![],
        };
        Vocabularies::build(&[s], &ItemCatalog::default())
    }

    #[test]
    fn round_trip_and_vocab_guard() {
        let v = vocabs(&[1, 2, 3]);
        let layout = FieldLayout::with_widths([4, 2, 2, 2, 2]);
        let m = Model::<f32>::for_vocabs(ModelConfig::new(CellKind::Gru, 2, 3), layout, &v, 9).unwrap();
        let ck = Checkpoint::new(&m, TransformConfig::default(), &v);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        back.verify_vocabs(&v).unwrap();
        let other = vocabs(&[1, 2, 4]);
        assert!(matches!(back.verify_vocabs(&other), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello world, not a model").is_err());
        let v = vocabs(&[1]);
        let m = Model::<f32>::for_vocabs(ModelConfig::new(CellKind::Rnn, 1, 2), FieldLayout::default(), &v, 1).unwrap();
        let bytes = Checkpoint::new(&m, TransformConfig::default(), &v).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
