use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CodecError;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Dense token dictionary. Ids `0..4` are the reserved markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CodecError;
    fn try_from(tokens: Vec<String>) -> Result<Self, CodecError> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved markers followed by `words` in order; duplicates are dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len() as u32);
                v.tokens.push(w);
            }
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CodecError> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CodecError::BadVocabulary("reserved markers missing".into()));
        }
        let v = Self::new(tokens[RESERVED.len()..].iter().cloned());
        if v.tokens.len() != tokens.len() {
            return Err(CodecError::BadVocabulary("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str, CodecError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(CodecError::OutOfVocabulary { id, size: self.len() })
    }

    /// Whitespace tokenization; unknown words map to the unknown marker.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn check(&self, ids: &[u32]) -> Result<(), CodecError> {
        match ids.iter().find(|&&i| i as usize >= self.len()) {
            Some(&id) => Err(CodecError::OutOfVocabulary { id, size: self.len() }),
            None => Ok(()),
        }
    }
}

/// Content token ids of one sentence, without markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    ids: Vec<u32>,
}

impl Sentence {
    pub fn new(ids: Vec<u32>, min_len: usize, max_len: usize) -> Result<Self, CodecError> {
        if ids.len() < min_len || ids.len() > max_len {
            return Err(CodecError::SentenceLength {
                len: ids.len(),
                min: min_len,
                max: max_len,
            });
        }
        if let Some(&m) = ids.iter().find(|&&i| i == PAD || i == SOS || i == EOS) {
            return Err(CodecError::MarkerInContent(m));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content followed by the end marker, as fed to the encoder.
    pub fn with_eos(&self) -> Vec<u32> {
        let mut v = self.ids.clone();
        v.push(EOS);
        v
    }

    /// Content padded with zeros to `width` (after the end marker).
    pub fn padded(&self, width: usize) -> Vec<u32> {
        let mut v = self.with_eos();
        v.resize(width.max(v.len()), PAD);
        v
    }
}
