//! Versioned binary model files.
//!
//! Layout: the 8-byte magic `FOFENER\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! every tensor as row-major little-endian `f64` in header order. The header
//! records each vocabulary with its SHA-256 fingerprint and a SHA-256 of the
//! tensor payload, both checked on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{CharConv, CharConvConfig, EmbeddingMatrix, FeatureExtractor};
use crate::fofe::{ForgettingFactor, Vocabulary};
use crate::model::{NerModel, Tokenization};
use crate::network::{GroupedNetwork, NetworkSpec};
use crate::pipeline::LabelSet;

pub const MAGIC: [u8; 8] = *b"FOFENER\0";
pub const FORMAT_VERSION: u32 = 1;

/// Header sizes beyond this are rejected before allocation.
const MAX_HEADER: u64 = 1 << 30;

#[derive(Debug, Serialize, Deserialize)]
struct VocabHeader {
    tokens: Vec<String>,
    unknown: String,
    sha256: String,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvHeader {
    widths: Vec<usize>,
    filters_per_width: usize,
    char_embed_dim: usize,
    pad: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    labels: Vec<String>,
    tokenization: String,
    max_fragment_len: usize,
    threshold: f64,
    alpha_word: f64,
    alpha_char: f64,
    word_cased: VocabHeader,
    word_uncased: VocabHeader,
    chars: VocabHeader,
    conv: ConvHeader,
    network: NetworkSpec,
    tensors: Vec<TensorHeader>,
    payload_sha256: String,
}

fn vocab_header(m: &EmbeddingMatrix) -> VocabHeader {
    VocabHeader {
        tokens: m.vocab.tokens().to_vec(),
        unknown: m.vocab.token(m.vocab.unknown_index()).to_string(),
        sha256: m.vocab.fingerprint(),
        trainable: m.trainable,
    }
}

fn restore_vocab(name: &str, h: &VocabHeader) -> Result<Vocabulary> {
    let vocab = Vocabulary::new(h.tokens.iter().cloned(), &h.unknown)?;
    if vocab.len() != h.tokens.len() || vocab.fingerprint() != h.sha256 {
        return Err(Error::ModelFormat(format!("{name} vocabulary fingerprint mismatch")));
    }
    Ok(vocab)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tensors in file order with their names and shapes.
fn tensors(model: &NerModel) -> Vec<(String, Vec<usize>, &[f64])> {
    fn two(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
        (name, vec![a.nrows(), a.ncols()], a.as_slice().expect("standard layout"))
    }
    fn one(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
        (name, vec![a.len()], a.as_slice().expect("standard layout"))
    }
    let f = &model.features;
    let mut list = vec![
        two("word_cased".into(), &f.word_cased.weights),
        two("word_uncased".into(), &f.word_uncased.weights),
        two("chars".into(), &f.chars.weights),
    ];
    for (i, bank) in f.conv.banks.iter().enumerate() {
        list.push(two(format!("conv.{i}.weights"), &bank.weights));
        list.push(one(format!("conv.{i}.bias"), &bank.bias));
    }
    for (i, layer) in model.network.layers().enumerate() {
        list.push(two(format!("layer.{i}.weights"), &layer.weights));
        list.push(one(format!("layer.{i}.bias"), &layer.bias));
    }
    list
}

pub fn write_model<W: Write>(model: &NerModel, mut out: W) -> Result<()> {
    let list = tensors(model);
    let mut payload = Vec::with_capacity(list.iter().map(|t| t.2.len() * 8).sum());
    for (_, _, values) in &list {
        for v in *values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let f = &model.features;
    let header = Header {
        labels: model.labels.names().to_vec(),
        tokenization: model.tokenization.to_string(),
        max_fragment_len: model.max_fragment_len,
        threshold: model.threshold,
        alpha_word: f.alpha_word.value(),
        alpha_char: f.alpha_char.value(),
        word_cased: vocab_header(&f.word_cased),
        word_uncased: vocab_header(&f.word_uncased),
        chars: vocab_header(&f.chars),
        conv: ConvHeader {
            widths: f.conv.config.widths.clone(),
            filters_per_width: f.conv.config.filters_per_width,
            char_embed_dim: f.conv.config.char_embed_dim,
            pad: f.conv.config.pad,
        },
        network: model.network.spec().clone(),
        tensors: list
            .iter()
            .map(|(name, shape, _)| TensorHeader {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::ModelFormat(e.to_string()))?;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn save_model(model: &NerModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, BufWriter::new(file))
}

struct Payload<'a> {
    bytes: &'a [u8],
    tensors: std::slice::Iter<'a, TensorHeader>,
}

impl Payload<'_> {
    fn next(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .next()
            .ok_or_else(|| Error::ModelFormat(format!("missing tensor {name}")))?;
        if t.name != name || t.shape != shape {
            return Err(Error::ModelFormat(format!(
                "expected tensor {name} {shape:?}, found {} {:?}",
                t.name, t.shape
            )));
        }
        let n: usize = shape.iter().product();
        if self.bytes.len() < n * 8 {
            return Err(Error::ModelFormat(format!("tensor {name} is truncated")));
        }
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        Ok(head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.next(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.next(name, &[len])?))
    }
}

pub fn read_model<R: Read>(mut input: R) -> Result<NerModel> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::ModelFormat("not a model file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::ModelFormat("header too large".into()));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::ModelFormat("tensor payload checksum mismatch".into()));
    }

    let labels = LabelSet::from_names(header.labels.clone())?;
    let cased = restore_vocab("word_cased", &header.word_cased)?;
    let uncased = restore_vocab("word_uncased", &header.word_uncased)?;
    let chars = restore_vocab("chars", &header.chars)?;
    let conv_config = CharConvConfig {
        widths: header.conv.widths.clone(),
        filters_per_width: header.conv.filters_per_width,
        char_embed_dim: header.conv.char_embed_dim,
        pad: header.conv.pad,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut conv = CharConv::init(conv_config, &mut rng)?;
    let mut network = GroupedNetwork::init(&header.network, 0)?;
    if network.classes() != labels.len() {
        return Err(Error::ModelFormat("label count does not match the output layer".into()));
    }

    let mut p = Payload {
        bytes: &payload,
        tensors: header.tensors.iter(),
    };
    let word_dim = header.tensors.first().and_then(|t| t.shape.get(1)).copied().unwrap_or(0);
    let uncased_dim = header.tensors.get(1).and_then(|t| t.shape.get(1)).copied().unwrap_or(0);
    let wc = p.matrix("word_cased", cased.len(), word_dim)?;
    let wu = p.matrix("word_uncased", uncased.len(), uncased_dim)?;
    let ch = p.matrix("chars", chars.len(), conv.config.char_embed_dim)?;
    for (i, bank) in conv.banks.iter_mut().enumerate() {
        bank.weights = p.matrix(&format!("conv.{i}.weights"), bank.weights.nrows(), bank.weights.ncols())?;
        bank.bias = p.vector(&format!("conv.{i}.bias"), bank.bias.len())?;
    }
    for (i, layer) in network.layers_mut().enumerate() {
        layer.weights = p.matrix(&format!("layer.{i}.weights"), layer.weights.nrows(), layer.weights.ncols())?;
        layer.bias = p.vector(&format!("layer.{i}.bias"), layer.bias.len())?;
    }
    if p.tensors.next().is_some() || !p.bytes.is_empty() {
        return Err(Error::ModelFormat("trailing tensors".into()));
    }

    let features = FeatureExtractor::new(
        EmbeddingMatrix::new(cased, wc, header.word_cased.trainable)?,
        EmbeddingMatrix::new(uncased, wu, header.word_uncased.trainable)?,
        EmbeddingMatrix::new(chars, ch, header.chars.trainable)?,
        conv,
        ForgettingFactor::new(header.alpha_word)?,
        ForgettingFactor::new(header.alpha_char)?,
    )?;
    let layout = features.layout();
    if layout.fragment_dim() != network.fragment_input_dim() || layout.context_dim() != network.context_input_dim() {
        return Err(Error::ModelFormat("feature layout does not match the network inputs".into()));
    }
    let tokenization: Tokenization = header.tokenization.parse()?;
    Ok(NerModel {
        labels,
        features,
        network,
        max_fragment_len: header.max_fragment_len,
        threshold: header.threshold,
        tokenization,
    })
}

pub fn load_model(path: &Path) -> Result<NerModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(file))
}
