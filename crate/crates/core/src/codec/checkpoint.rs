//! Binary model container: magic, format version, a JSON header describing
//! every tensor, then the raw little-endian `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Receiver, Transmitter};
use super::vocab::Vocabulary;
use super::CodecError;
use crate::diffcore::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"SEMLINK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocabulary: Vocabulary,
    pub transmitter: Transmitter,
    pub receivers: Vec<Receiver>,
    /// Free-form run information (resolved config, cycle counters).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    group: u32,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab_hash: String,
    vocabulary: Vocabulary,
    model: ModelConfig,
    metadata: serde_json::Value,
    encoder: StoreHeader,
    quantizer: StoreHeader,
    receivers: Vec<StoreHeader>,
}

fn store_header(s: &ParamStore) -> StoreHeader {
    StoreHeader {
        group: s.group(),
        names: s.names().to_vec(),
        shapes: s.tensors().iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn io_err(e: std::io::Error) -> CodecError {
    CodecError::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn model(&self) -> &ModelConfig {
        self.transmitter.config()
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let header = Header {
            vocab_hash: self.vocabulary.hash(),
            vocabulary: self.vocabulary.clone(),
            model: self.model().clone(),
            metadata: self.metadata.clone(),
            encoder: store_header(self.transmitter.encoder()),
            quantizer: store_header(self.transmitter.quantizer()),
            receivers: self.receivers.iter().map(|r| store_header(r.store())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CodecError::Checkpoint(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&json).map_err(io_err)?;
        let stores = [self.transmitter.encoder(), self.transmitter.quantizer()]
            .into_iter()
            .chain(self.receivers.iter().map(Receiver::store));
        for s in stores {
            for t in s.tensors() {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads a checkpoint without checking its vocabulary.
    pub fn read(path: &Path) -> Result<Self, CodecError> {
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(CodecError::Checkpoint("not a model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io_err)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CodecError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io_err)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| CodecError::Checkpoint(e.to_string()))?;
        if header.vocabulary.hash() != header.vocab_hash {
            return Err(CodecError::Checkpoint("stored vocabulary does not match its hash".into()));
        }

        let mut read_store = |h: &StoreHeader| -> Result<ParamStore, CodecError> {
            let mut s = ParamStore::new(h.group);
            for (name, shape) in h.names.iter().zip(&h.shapes) {
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    r.read_exact(&mut b8).map_err(io_err)?;
                    data.push(f64::from_le_bytes(b8));
                }
                s.add(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            Ok(s)
        };
        let encoder = read_store(&header.encoder)?;
        let quantizer = read_store(&header.quantizer)?;
        let receivers = header
            .receivers
            .iter()
            .map(|h| read_store(h).and_then(|s| Receiver::from_store(&header.model, s)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io_err)?;
        if !rest.is_empty() {
            return Err(CodecError::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            vocabulary: header.vocabulary,
            transmitter: Transmitter::from_stores(&header.model, encoder, quantizer)?,
            receivers,
            metadata: header.metadata,
        })
    }

    /// Reads a checkpoint and rejects it unless it was trained on `vocabulary`.
    pub fn load(path: &Path, vocabulary: &Vocabulary) -> Result<Self, CodecError> {
        let c = Self::read(path)?;
        let (expected, found) = (vocabulary.hash(), c.vocabulary.hash());
        if expected != found {
            return Err(CodecError::VocabularyMismatch { expected, found });
        }
        Ok(c)
    }
}
