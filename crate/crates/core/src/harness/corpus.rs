use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::codec::{Sentence, Vocabulary};

/// Where sentences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// Template grammar over `vocab` words.
    Synthetic { vocab: usize, sentences: usize },
    /// Plain text, one sentence per line.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// Most frequent words kept from a file corpus; the rest map to `<unk>`.
    pub vocab_cap: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            source: CorpusSource::Synthetic {
                vocab: 100,
                sentences: 1000,
            },
            vocab_cap: 32_000,
            min_len: 4,
            max_len: 30,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.min_len < 1 || self.max_len > 64 || self.min_len > self.max_len {
            return Err(HarnessError::Config(format!(
                "length bounds {}..={} must satisfy 1 <= min <= max <= 64",
                self.min_len, self.max_len
            )));
        }
        if let CorpusSource::Synthetic { vocab, sentences } = self.source {
            if vocab < MIN_SYNTHETIC_VOCAB {
                return Err(HarnessError::Config(format!(
                    "synthetic vocabulary needs at least {MIN_SYNTHETIC_VOCAB} words, got {vocab}"
                )));
            }
            if sentences == 0 {
                return Err(HarnessError::Config("synthetic corpus needs sentences".into()));
            }
        }
        Ok(())
    }
}

/// Tokenized corpus split 4:1 into training and test sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
    /// Lines dropped by the length filter.
    pub excluded: usize,
    pub max_len: usize,
}

impl Dataset {
    /// Training sentences zero-padded to a common width after the end marker.
    pub fn padded_train(&self) -> Vec<Vec<u32>> {
        self.train.iter().map(|s| s.padded(self.max_len + 1)).collect()
    }
}

const DETERMINERS: [&str; 4] = ["the", "a", "this", "every"];
const PREPOSITIONS: [&str; 6] = ["in", "on", "near", "with", "under", "behind"];
const PRONOUNS: [&str; 4] = ["she", "he", "they", "we"];
const ADVERBS: [&str; 6] = ["quickly", "slowly", "often", "rarely", "quietly", "again"];
const FUNCTION_WORDS: usize = DETERMINERS.len() + PREPOSITIONS.len() + PRONOUNS.len() + ADVERBS.len();
pub const MIN_SYNTHETIC_VOCAB: usize = FUNCTION_WORDS + 12;

const NOUNS: [&str; 48] = [
    "cat", "dog", "river", "house", "teacher", "garden", "bird", "child", "city", "window", "letter", "road",
    "market", "doctor", "farmer", "boat", "mountain", "table", "school", "forest", "lamp", "train", "bridge", "song",
    "painter", "horse", "field", "tower", "student", "island", "kitchen", "clock", "village", "soldier", "cloud",
    "engine", "library", "sailor", "orchard", "castle", "baker", "wolf", "station", "mirror", "harbor", "poet",
    "valley", "camera",
];
const VERBS: [&str; 24] = [
    "sees", "finds", "likes", "carries", "watches", "follows", "paints", "builds", "cleans", "moves", "visits",
    "opens", "draws", "helps", "reads", "hears", "meets", "holds", "calls", "guards", "fixes", "leaves", "feeds",
    "greets",
];
const ADJECTIVES: [&str; 24] = [
    "red", "old", "small", "quiet", "bright", "tall", "happy", "cold", "green", "young", "dark", "busy", "gentle",
    "heavy", "clever", "empty", "brave", "soft", "loud", "tired", "warm", "narrow", "famous", "wooden",
];

#[derive(Clone, Copy)]
enum Slot {
    Det,
    Noun,
    Verb,
    Adj,
    Prep,
    Pron,
    Adv,
}

const TEMPLATES: [&[Slot]; 9] = {
    use Slot::*;
    [
        &[Pron, Verb, Det, Noun],
        &[Det, Noun, Verb, Adv],
        &[Det, Noun, Verb, Det, Noun],
        &[Det, Adj, Noun, Verb, Det, Noun],
        &[Pron, Verb, Det, Adj, Noun, Adv],
        &[Det, Adj, Noun, Verb, Det, Adj, Noun],
        &[Det, Noun, Verb, Adv, Prep, Det, Noun],
        &[Det, Noun, Verb, Det, Noun, Prep, Det, Noun],
        &[Pron, Adv, Verb, Det, Adj, Noun, Prep, Det, Noun],
    ]
};

fn pseudo_word(prefix: char, i: usize) -> String {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "sa", "no", "vi", "de", "po", "zu", "ge"];
    format!("{prefix}{}{}", SYL[i % SYL.len()], SYL[(i / SYL.len()) % SYL.len()])
}

fn word_pool(names: &[&str], n: usize, prefix: char) -> Vec<String> {
    (0..n)
        .map(|i| names.get(i).map_or_else(|| pseudo_word(prefix, i), |w| w.to_string()))
        .collect()
}

/// Content words of a synthetic corpus: half nouns, a quarter verbs, a quarter
/// adjectives, after the fixed function words.
fn synthetic_lexicon(vocab: usize) -> [Vec<String>; 7] {
    let content = vocab - FUNCTION_WORDS;
    let verbs = content / 4;
    let adjs = content / 4;
    let nouns = content - verbs - adjs;
    let fixed = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    [
        fixed(&DETERMINERS),
        word_pool(&NOUNS, nouns, 'n'),
        word_pool(&VERBS, verbs, 'v'),
        word_pool(&ADJECTIVES, adjs, 'j'),
        fixed(&PREPOSITIONS),
        fixed(&PRONOUNS),
        fixed(&ADVERBS),
    ]
}

/// Lines of a template-grammar corpus. Only templates whose length falls in
/// `min_len..=max_len` are used.
pub fn synthesize(
    vocab: usize,
    sentences: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<String>, HarnessError> {
    let lexicon = synthetic_lexicon(vocab);
    let templates: Vec<&[Slot]> = TEMPLATES
        .iter()
        .copied()
        .filter(|t| (min_len..=max_len).contains(&t.len()))
        .collect();
    if templates.is_empty() {
        return Err(HarnessError::Config(format!(
            "no synthetic template has a length in {min_len}..={max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..sentences)
        .map(|_| {
            let t = templates[rng.random_range(0..templates.len())];
            t.iter()
                .map(|&slot| {
                    let pool = &lexicon[slot as usize];
                    pool[rng.random_range(0..pool.len())].as_str()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Builds a dataset from raw lines: length filter, capped vocabulary by
/// descending frequency (ties alphabetical), seeded 4:1 split.
pub fn build_dataset(
    lines: &[String],
    vocab_cap: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Dataset, HarnessError> {
    let tokenized: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).filter(|t| !t.is_empty()).collect();
    let total = tokenized.len();
    let kept: Vec<Vec<String>> = tokenized
        .into_iter()
        .filter(|t| (min_len..=max_len).contains(&t.len()))
        .collect();
    let excluded = total - kept.len();
    if kept.is_empty() {
        return Err(HarnessError::EmptyCorpus { total, excluded });
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for t in &kept {
        for w in t {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words.truncate(vocab_cap);
    let mut chosen: Vec<&str> = words.into_iter().map(|(w, _)| w).collect();
    chosen.sort_unstable();
    let vocabulary = Vocabulary::new(chosen);
    let mut sentences = kept
        .iter()
        .map(|t| Sentence::new(vocabulary.encode_text(&t.join(" ")), min_len, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sentences.shuffle(&mut rng);
    let n_train = (sentences.len() * 4).div_ceil(5);
    let test = sentences.split_off(n_train);
    Ok(Dataset {
        vocabulary,
        train: sentences,
        test,
        excluded,
        max_len,
    })
}

/// Reads or synthesizes the corpus described by `config`.
pub fn ingest_corpus(config: &CorpusConfig, seed: u64) -> Result<Dataset, HarnessError> {
    config.validate()?;
    let lines = match &config.source {
        CorpusSource::Synthetic { vocab, sentences } => {
            synthesize(*vocab, *sentences, config.min_len, config.max_len, seed)?
        }
        CorpusSource::File { path } => std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?
            .lines()
            .map(str::to_string)
            .collect(),
    };
    build_dataset(&lines, config.vocab_cap, config.min_len, config.max_len, seed)
}
