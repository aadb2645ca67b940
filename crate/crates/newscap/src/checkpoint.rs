//! Versioned parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` values in header order.

use std::path::Path;

use newscap_core::corpus::Vocabulary;
use newscap_core::decoder::CaptionModel;
use newscap_core::nee::JointEmbeddingTable;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: [u8; 8] = *b"NEWSCAP\0";
pub const FORMAT_VERSION: u32 = 1;

const NEE_PREFIX: &str = "nee.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Joint word/entity table only.
    Nee,
    /// Captioner plus the table its entity features came from.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value, counted in `f64`s from the payload start.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    pub config: RunConfig,
    pub step: usize,
    pub val_loss: Option<f64>,
    /// Full token list, reserved markers first.
    pub vocab: Vec<String>,
    pub nee_words: Vec<String>,
    pub nee_entities: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    fn new(kind: Kind, config: &RunConfig, table: &JointEmbeddingTable) -> Self {
        let mut c = Checkpoint {
            header: Header {
                kind,
                config: config.clone(),
                step: 0,
                val_loss: None,
                vocab: Vec::new(),
                nee_words: table.words.clone(),
                nee_entities: table.entities.clone(),
                tensors: Vec::new(),
            },
            values: Vec::new(),
        };
        let d = table.dim;
        c.push("nee.word_vectors", vec![table.words.len(), d], table.word_vectors.clone());
        c.push("nee.entity_vectors", vec![table.entities.len(), d], table.entity_vectors.clone());
        c.push("nee.nep_weight", vec![d, d], table.nep_weight.clone());
        c.push("nee.nep_bias", vec![d], table.nep_bias.clone());
        c
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        let offset = self.header.tensors.last().map_or(0, |t| t.offset + t.shape.iter().product::<usize>());
        self.header.tensors.push(TensorEntry { name: name.into(), shape, offset });
        self.values.push(values);
    }

    fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.header
            .tensors
            .iter()
            .zip(&self.values)
            .find(|(t, _)| t.name == name)
            .map(|(t, v)| (t.shape.as_slice(), v.as_slice()))
            .ok_or_else(|| CliError::Data(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn nee_only(config: &RunConfig, table: &JointEmbeddingTable) -> Self {
        Checkpoint::new(Kind::Nee, config, table)
    }

    pub fn model(
        config: &RunConfig,
        model: &CaptionModel,
        vocab: &Vocabulary,
        table: &JointEmbeddingTable,
        step: usize,
        val_loss: Option<f64>,
    ) -> Self {
        let mut c = Checkpoint::new(Kind::Model, config, table);
        c.header.vocab = vocab.tokens().to_vec();
        c.header.step = step;
        c.header.val_loss = val_loss;
        for (name, t) in model.store.iter() {
            c.push(name, t.shape().to_vec(), t.values().to_vec());
        }
        c
    }

    pub fn table(&self) -> Result<JointEmbeddingTable> {
        let (shape, bias) = self.tensor("nee.nep_bias")?;
        let dim = shape[0];
        let mut table = JointEmbeddingTable::new(self.header.nee_words.clone(), self.header.nee_entities.clone(), dim)?;
        table.word_vectors = self.tensor("nee.word_vectors")?.1.to_vec();
        table.entity_vectors = self.tensor("nee.entity_vectors")?.1.to_vec();
        table.nep_weight = self.tensor("nee.nep_weight")?.1.to_vec();
        table.nep_bias = bias.to_vec();
        table.reindex()?;
        Ok(table)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = &self.header.vocab;
        let reserved = Vocabulary::RESERVED;
        let fresh = Vocabulary::from_tokens(Vec::new())?;
        if v.len() < reserved || v[..reserved] != fresh.tokens()[..] {
            return Err(CliError::Data("checkpoint vocabulary lacks the reserved markers".into()));
        }
        Ok(Vocabulary::from_tokens(v[reserved..].to_vec())?)
    }

    /// Rebuilds the captioner; every parameter must be present exactly once.
    pub fn caption_model(&self) -> Result<CaptionModel> {
        if self.header.kind != Kind::Model {
            return Err(CliError::Data("checkpoint holds an entity table, not a captioner".into()));
        }
        let config = self.header.config.model(self.header.vocab.len());
        let mut model = CaptionModel::new(&config, 0)?;
        let mut seen = 0;
        for (t, v) in self.header.tensors.iter().zip(&self.values) {
            if t.name.starts_with(NEE_PREFIX) {
                continue;
            }
            model.store.set_values(&t.name, &t.shape, v.clone())?;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(CliError::Data(format!(
                "checkpoint has {seen} captioner tensors, the configured model has {}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serialises");
        let payload: usize = self.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| CliError::Data(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || bytes[..8] != MAGIC {
            return Err(bad("not a newscap checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CliError::Version { path: path.into(), found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| CliError::Parse { path: path.into(), line: e.line(), message: e.to_string() })?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut values = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset != expected_offset || t.offset + n > floats.len() {
                return Err(bad(&format!("tensor `{}` lies outside the payload", t.name)));
            }
            values.push(floats[t.offset..t.offset + n].to_vec());
            expected_offset += n;
        }
        if expected_offset != floats.len() {
            return Err(bad("payload has trailing values"));
        }
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RunConfig, JointEmbeddingTable, Vocabulary, CaptionModel) {
        let mut cfg = RunConfig::default();
        cfg.d_model = 8;
        cfg.d_text = 8;
        cfg.num_heads = 2;
        cfg.ff_width = 16;
        cfg.head_hidden = 8;
        cfg.nee_dim = 4;
        cfg.image_dim = 6;
        let mut table = JointEmbeddingTable::new(vec!["a".into(), "b".into()], vec!["E1".into()], 4).unwrap();
        table.word_vectors = (0..8).map(|i| i as f64 * 0.1).collect();
        let vocab = Vocabulary::from_tokens(vec!["x".into(), "y".into()]).unwrap();
        let model = CaptionModel::new(&cfg.model(vocab.len()), 5).unwrap();
        (cfg, table, vocab, model)
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let (cfg, table, vocab, model) = small();
        let c = Checkpoint::model(&cfg, &model, &vocab, &table, 7, Some(1.5));
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("m")).unwrap();
        assert_eq!(back, c);
        let restored = back.caption_model().unwrap();
        for ((n1, t1), (n2, t2)) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(n1, n2);
            let a: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{n1}");
        }
        assert_eq!(back.table().unwrap(), table);
        assert_eq!(back.vocabulary().unwrap(), vocab);
    }

    #[test]
    fn other_versions_are_refused() {
        let (cfg, table, _, _) = small();
        let mut bytes = Checkpoint::nee_only(&cfg, &table).to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("n")),
            Err(CliError::Version { found: 2, expected: 1, .. })
        ));
    }

    #[test]
    fn truncation_and_foreign_files_are_rejected() {
        let (cfg, table, _, _) = small();
        let bytes = Checkpoint::nee_only(&cfg, &table).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("n")).is_err());
        assert!(Checkpoint::from_bytes(b"PK\x03\x04 not ours at all", Path::new("n")).is_err());
    }

    #[test]
    fn table_checkpoint_is_not_a_model() {
        let (cfg, table, _, _) = small();
        assert!(Checkpoint::nee_only(&cfg, &table).caption_model().is_err());
    }
}
