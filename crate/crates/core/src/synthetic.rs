//! Deterministic toy corpus for smoke tests and the overfitting check: two
//! entity classes (`PER`, `LOC`), a 30-token vocabulary, random 16-dim
//! embeddings and a matching run config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TOY_SEED: u64 = 2017;
pub const TOY_TRAIN_SENTENCES: usize = 50;
pub const TOY_DEV_SENTENCES: usize = 25;
pub const TOY_EMBED_DIM: usize = 16;
const SENTENCES_PER_DOC: usize = 10;

const PERSONS: [&str; 5] = ["Alice", "Bruno", "Chen", "Dana", "Emil"];
const SURNAME: &str = "Smith";
const PLACES: [&str; 5] = ["Paris", "Oslo", "Lima", "Cairo", "Delhi"];
const PLACE_SUFFIX: &str = "City";
const FILLERS: [&str; 18] = [
    "lives", "in", "visited", "met", "and", "from", "went", "to", "yesterday", "today", ".", "left", "the", "near",
    "saw", "he", "she", "river",
];

/// `P` and `L` are person and place slots.
const TEMPLATES: [&str; 9] = [
    "P lives in L .",
    "P visited L yesterday .",
    "P and P met in L .",
    "P went to L today .",
    "P left L .",
    "he saw P near the river .",
    "she went from L to L .",
    "P saw P in L today .",
    "the river near L .",
];

pub const TOY_CONFIG: &str = "\
# Toy corpus run: small layers, long schedule, no early stop.
train_file = train.conll
dev_file = dev.conll
embeddings_file = embeddings.txt
fragment_layers = 32
context_layers = 32
shared_layers = 32
char_embed_dim = 8
conv_widths = 2,3
conv_filters = 8
max_fragment_len = 3
learning_rate = 0.05
batch_size = 16
dropout = 0.1
max_epochs = 200
patience = 200
neg_ratio = 2
seed = 1
";

/// Every token of the toy vocabulary.
pub fn toy_vocabulary() -> Vec<&'static str> {
    PERSONS
        .iter()
        .chain([SURNAME].iter())
        .chain(PLACES.iter())
        .chain([PLACE_SUFFIX].iter())
        .chain(FILLERS.iter())
        .copied()
        .collect()
}

/// File name and contents of every toy file.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub train: String,
    pub dev: String,
    pub embeddings: String,
    pub config: String,
}

impl ToyCorpus {
    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            ("train.conll", &self.train),
            ("dev.conll", &self.dev),
            ("embeddings.txt", &self.embeddings),
            ("toy.cfg", &self.config),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in self.files() {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn mention<R: Rng>(rng: &mut R, names: &[&'static str], suffix: &'static str) -> Vec<&'static str> {
    let mut out = vec![*names.choose(rng).expect("non-empty")];
    if rng.gen_bool(0.3) {
        out.push(suffix);
    }
    out
}

/// One sentence as `(token, tag)` pairs.
fn sentence<R: Rng>(rng: &mut R) -> Vec<(&'static str, String)> {
    let template = TEMPLATES.choose(rng).expect("non-empty");
    let mut out = Vec::new();
    for slot in template.split(' ') {
        let (tokens, class) = match slot {
            "P" => (mention(rng, &PERSONS, SURNAME), "PER"),
            "L" => (mention(rng, &PLACES, PLACE_SUFFIX), "LOC"),
            word => {
                out.push((FILLERS.iter().find(|f| **f == word).copied().expect("filler"), "O".to_string()));
                continue;
            }
        };
        for (i, t) in tokens.into_iter().enumerate() {
            let prefix = if i == 0 { "B" } else { "I" };
            out.push((t, format!("{prefix}-{class}")));
        }
    }
    out
}

fn render(sentences: &[Vec<(&str, String)>]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i % SENTENCES_PER_DOC == 0 {
            out.push_str("-DOCSTART- O\n\n");
        }
        for (token, tag) in s {
            let _ = writeln!(out, "{token} {tag}");
        }
        out.push('\n');
    }
    out
}

/// Generates the corpus; the dev split shares no sentence with training.
pub fn toy_corpus() -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = sentence(rng);
            let key: Vec<String> = s.iter().map(|(t, tag)| format!("{t}/{tag}")).collect();
            if seen.insert(key) {
                out.push(s);
            }
        }
        out
    };
    let train = draw(TOY_TRAIN_SENTENCES, &mut rng);
    let dev = draw(TOY_DEV_SENTENCES, &mut rng);

    let vocab = toy_vocabulary();
    let mut embeddings = format!("{} {}\n", vocab.len(), TOY_EMBED_DIM);
    for token in vocab {
        embeddings.push_str(token);
        for _ in 0..TOY_EMBED_DIM {
            let _ = write!(embeddings, " {:.6}", rng.gen_range(-1.0..1.0));
        }
        embeddings.push('\n');
    }
    ToyCorpus {
        train: render(&train),
        dev: render(&dev),
        embeddings,
        config: TOY_CONFIG.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conll::parse_conll_str;

    #[test]
    fn vocabulary_has_thirty_tokens() {
        let v = toy_vocabulary();
        assert_eq!(v.len(), 30);
        assert_eq!(v.iter().collect::<HashSet<_>>().len(), 30);
    }

    #[test]
    fn corpus_shape() {
        let toy = toy_corpus();
        let train = parse_conll_str(&toy.train).unwrap();
        let dev = parse_conll_str(&toy.dev).unwrap();
        let count = |p: &crate::conll::ConllParse| p.documents.iter().map(|d| d.sentences.len()).sum::<usize>();
        assert_eq!(count(&train), TOY_TRAIN_SENTENCES);
        assert_eq!(count(&dev), TOY_DEV_SENTENCES);
        let classes: HashSet<_> = train.documents.iter().flat_map(|d| &d.entities).map(|e| e.class.as_str()).collect();
        assert_eq!(classes, HashSet::from(["PER", "LOC"]));
        let vocab: HashSet<_> = toy_vocabulary().into_iter().collect();
        for d in train.documents.iter().chain(&dev.documents) {
            for s in &d.sentences {
                assert!(s.tokens().iter().all(|t| vocab.contains(t.as_str())));
            }
        }
        assert!(train.repairs.is_empty());
    }

    #[test]
    fn shipped_files_match_generator() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
        for (name, text) in toy_corpus().files() {
            let shipped = std::fs::read_to_string(dir.join(name)).unwrap();
            assert_eq!(shipped, text, "{name} differs from the generator output");
        }
    }
}
