//! Text embedding files.
//!
//! The first line is `<count> <dim>`; each following line is a token and
//! `dim` whitespace-separated floats. The cased table keeps file rows as
//! they are; the uncased table averages the rows of every token sharing a
//! lowercase form. Tokens not in the file get rows drawn from
//! `U[-0.5/dim, 0.5/dim]`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{random_rows, EmbeddingMatrix};
use crate::fofe::Vocabulary;

/// What to add on top of the file's tokens.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VocabPolicy {
    /// Cased tokens (typically from the training corpus) to include even
    /// when the file lacks them.
    pub extra_tokens: Vec<String>,
    /// Seed for the rows of tokens absent from the file.
    pub seed: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    pub cased: EmbeddingMatrix,
    pub uncased: EmbeddingMatrix,
}

fn header(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace();
    let parse = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok());
    match (parse(it.next()), parse(it.next()), it.next()) {
        (Some(count), Some(dim), None) if dim > 0 => Ok((count, dim)),
        _ => Err(Error::BadHeader(format!("expected \"<count> <dim>\", got {line:?}"))),
    }
}

pub fn load_embeddings(path: &Path, policy: &VocabPolicy) -> Result<WordEmbeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), policy)
}

pub fn parse_embeddings<R: BufRead>(reader: R, policy: &VocabPolicy) -> Result<WordEmbeddings> {
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.ok_or_else(|| Error::BadHeader("empty file".into()))?;
    let (count, dim) = header(&first)?;

    let mut tokens: Vec<String> = Vec::with_capacity(count);
    let mut values: Vec<f64> = Vec::with_capacity(count * dim);
    let mut seen: HashMap<String, ()> = HashMap::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line").to_string();
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedLine {
                line: i + 2,
                message: e.to_string(),
            })?;
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        if seen.insert(token.clone(), ()).is_some() {
            return Err(Error::DuplicateToken(token));
        }
        tokens.push(token);
        values.extend(row);
    }
    if tokens.len() != count {
        return Err(Error::BadHeader(format!(
            "header announces {count} rows, file has {}",
            tokens.len()
        )));
    }
    build(tokens, values, dim, policy)
}

fn build(file_tokens: Vec<String>, values: Vec<f64>, dim: usize, policy: &VocabPolicy) -> Result<WordEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let file_rows = file_tokens.len();

    let mut cased_tokens = file_tokens;
    let mut known: HashMap<String, ()> = cased_tokens.iter().map(|t| (t.clone(), ())).collect();
    for t in &policy.extra_tokens {
        if known.insert(t.clone(), ()).is_none() {
            cased_tokens.push(t.clone());
        }
    }
    let cased_vocab = Vocabulary::with_reserved(cased_tokens.iter().cloned())?;
    let mut cased = random_rows(cased_vocab.len(), dim, &mut rng);
    cased
        .slice_mut(ndarray::s![..file_rows, ..])
        .assign(&Array2::from_shape_vec((file_rows, dim), values).expect("rows checked"));

    // Uncased: mean of the file rows per lowercase form, first-seen order.
    let mut lower_tokens: Vec<String> = Vec::new();
    let mut lower_index: HashMap<String, usize> = HashMap::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (i, token) in cased_tokens.iter().enumerate().take(file_rows) {
        let lower = token.to_lowercase();
        let slot = *lower_index.entry(lower.clone()).or_insert_with(|| {
            lower_tokens.push(lower);
            sums.push(vec![0.0; dim]);
            counts.push(0);
            sums.len() - 1
        });
        for (s, v) in sums[slot].iter_mut().zip(cased.row(i)) {
            *s += v;
        }
        counts[slot] += 1;
    }
    let averaged = lower_tokens.len();
    for t in &cased_tokens[file_rows..] {
        let lower = t.to_lowercase();
        if !lower_index.contains_key(&lower) {
            lower_index.insert(lower.clone(), lower_tokens.len());
            lower_tokens.push(lower);
        }
    }
    let uncased_vocab = Vocabulary::with_reserved(lower_tokens)?;
    let mut uncased = random_rows(uncased_vocab.len(), dim, &mut rng);
    for slot in 0..averaged {
        let n = counts[slot] as f64;
        for (u, s) in uncased.row_mut(slot).iter_mut().zip(&sums[slot]) {
            *u = s / n;
        }
    }

    Ok(WordEmbeddings {
        cased: EmbeddingMatrix::new(cased_vocab, cased, policy.trainable)?,
        uncased: EmbeddingMatrix::new(uncased_vocab, uncased, policy.trainable)?,
    })
}

/// Random tables over the given tokens, for runs without an embedding file.
pub fn random_embeddings(tokens: &[String], dim: usize, seed: u64) -> Result<WordEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cased_tokens: Vec<String> = Vec::new();
    let mut lower_tokens: Vec<String> = Vec::new();
    let mut seen_c = HashMap::new();
    let mut seen_l = HashMap::new();
    for t in tokens {
        if seen_c.insert(t.clone(), ()).is_none() {
            cased_tokens.push(t.clone());
        }
        let l = t.to_lowercase();
        if seen_l.insert(l.clone(), ()).is_none() {
            lower_tokens.push(l);
        }
    }
    let cv = Vocabulary::with_reserved(cased_tokens)?;
    let uv = Vocabulary::with_reserved(lower_tokens)?;
    Ok(WordEmbeddings {
        cased: EmbeddingMatrix::random(cv, dim, &mut rng)?,
        uncased: EmbeddingMatrix::random(uv, dim, &mut rng)?,
    })
}
