//! Fragment and context features.
//!
//! Every candidate fragment becomes two real vectors: the fragment group
//! (bag-of-words in both casings, character FOFE in both directions and a
//! character convolution) and the context group (eight word-level FOFE codes
//! of the left and right contexts, with and without the fragment, in both
//! casings). Codes are projected through embedding matrices as a weighted
//! row sum over their nonzero entries.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fofe::{self, ForgettingFactor, SparseCode, Vocabulary};

/// A tokenized sentence with its lowercased view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    tokens: Vec<String>,
    lowercased: Vec<String>,
}

impl Sentence {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let lowercased = tokens.iter().map(|t| t.to_lowercase()).collect();
        Self { tokens, lowercased }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lowercased(&self) -> &[String] {
        &self.lowercased
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens of `[start, end)` joined by single spaces.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..end].join(" ")
    }
}

/// Token span `[start, end)` of sentence number `sentence`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fragment {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

impl Fragment {
    pub fn new(sentence: usize, start: usize, end: usize) -> Self {
        Self { sentence, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Fragment) -> bool {
        self.sentence == other.sentence && self.start < other.end && other.start < self.end
    }

    pub fn check(&self, sentence_len: usize) -> Result<()> {
        if self.start < self.end && self.end <= sentence_len {
            Ok(())
        } else {
            Err(Error::InvalidFragment {
                start: self.start,
                end: self.end,
                len: sentence_len,
            })
        }
    }
}

/// `|V| x D` projection table indexed by a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub weights: Array2<f64>,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, weights: Array2<f64>, trainable: bool) -> Result<Self> {
        if weights.nrows() != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                found: weights.nrows(),
            });
        }
        if weights.ncols() == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        Ok(Self {
            vocab,
            weights,
            trainable,
        })
    }

    /// Rows drawn from `U[-0.5/D, 0.5/D]`.
    pub fn random<R: Rng>(vocab: Vocabulary, dim: usize, rng: &mut R) -> Result<Self> {
        let weights = random_rows(vocab.len(), dim, rng);
        Self::new(vocab, weights, true)
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }
}

pub(crate) fn random_rows<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let bound = 0.5 / dim as f64;
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn((rows, dim), || dist.sample(rng))
}

/// Row-wise sparse gradient of an embedding table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn add_scaled(&mut self, row: usize, scale: f64, values: &[f64]) {
        let dim = self.dim;
        let target = self.rows.entry(row).or_insert_with(|| vec![0.0; dim]);
        for (t, v) in target.iter_mut().zip(values) {
            *t += scale * v;
        }
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            for v in row {
                *v *= factor;
            }
        }
    }
}

/// Matrix-vector product of a sparse code with the table.
pub fn project(code: &SparseCode, matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut out = vec![0.0; matrix.dim()];
    project_into(code, matrix, &mut out)?;
    Ok(out)
}

/// Dense-code variant of [`project`]; the code length must equal `|V|`.
pub fn project_dense(code: &[f64], matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if code.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: matrix.rows(),
            found: code.len(),
        });
    }
    let sparse = SparseCode {
        entries: code
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect(),
    };
    project(&sparse, matrix)
}

fn project_into(code: &SparseCode, matrix: &EmbeddingMatrix, out: &mut [f64]) -> Result<()> {
    for &(row, coef) in &code.entries {
        if row >= matrix.rows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows(),
                found: row + 1,
            });
        }
        for (o, w) in out.iter_mut().zip(matrix.weights.row(row)) {
            *o += coef * w;
        }
    }
    Ok(())
}

/// Accumulates `d(out)/d(rows)` for one projection: row `i` receives
/// `coef_i * d_out`.
pub fn project_backward(code: &SparseCode, d_out: &[f64], grads: &mut SparseRows) {
    for &(row, coef) in &code.entries {
        grads.add_scaled(row, coef, d_out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharConvConfig {
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
    pub char_embed_dim: usize,
    /// Pad short strings with the reserved padding character.
    pub pad: bool,
}

impl Default for CharConvConfig {
    fn default() -> Self {
        Self {
            widths: vec![2, 3],
            filters_per_width: 32,
            char_embed_dim: 64,
            pad: true,
        }
    }
}

impl CharConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("filter widths must be >= 1".into()));
        }
        if self.filters_per_width == 0 || self.char_embed_dim == 0 {
            return Err(Error::Config(
                "filter count and character embedding size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    pub fn output_dim(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }
}

/// Filters of one width: `weights` is `(width * char_dim) x filters`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub width: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharConv {
    pub config: CharConvConfig,
    pub banks: Vec<FilterBank>,
}

impl CharConv {
    /// Glorot-uniform filter weights, zero biases.
    pub fn init<R: Rng>(config: CharConvConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let banks = config
            .widths
            .iter()
            .map(|&width| {
                let fan_in = width * config.char_embed_dim;
                FilterBank {
                    width,
                    weights: crate::network::glorot(fan_in, config.filters_per_width, rng),
                    bias: Array1::zeros(config.filters_per_width),
                }
            })
            .collect();
        Ok(Self { config, banks })
    }

    pub fn output_dim(&self) -> usize {
        self.banks.iter().map(|b| b.bias.len()).sum()
    }
}

/// Which window won the max-pool for each filter, for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub chars: Vec<usize>,
    /// Per bank, per filter: `Some(window start)` when the pooled value is
    /// positive, `None` when ReLU clipped it to zero.
    pub winners: Vec<Vec<Option<usize>>>,
}

fn pad_chars(mut chars: Vec<usize>, embed: &EmbeddingMatrix, conv: &CharConv) -> Result<Vec<usize>> {
    let width = conv.config.max_width();
    if chars.len() < width {
        if !conv.config.pad {
            return Err(Error::FragmentTooShort {
                len: chars.len(),
                width,
            });
        }
        let pad = embed
            .vocab
            .padding_index()
            .unwrap_or_else(|| embed.vocab.unknown_index());
        chars.resize(width, pad);
    }
    Ok(chars)
}

/// Sliding-window convolution, ReLU, max-pool over positions.
fn char_conv_indexed(chars: Vec<usize>, embed: &EmbeddingMatrix, conv: &CharConv) -> Result<(Vec<f64>, ConvTrace)> {
    if embed.dim() != conv.config.char_embed_dim {
        return Err(Error::DimensionMismatch {
            expected: conv.config.char_embed_dim,
            found: embed.dim(),
        });
    }
    let chars = pad_chars(chars, embed, conv)?;
    let dim = embed.dim();
    let mut out = Vec::with_capacity(conv.output_dim());
    let mut winners = Vec::with_capacity(conv.banks.len());
    for bank in &conv.banks {
        let filters = bank.bias.len();
        let mut best = vec![f64::NEG_INFINITY; filters];
        let mut best_at = vec![0usize; filters];
        for start in 0..=(chars.len() - bank.width) {
            let mut pre = bank.bias.to_vec();
            for k in 0..bank.width {
                let row = embed.weights.row(chars[start + k]);
                for (d, x) in row.iter().enumerate() {
                    let w = bank.weights.row(k * dim + d);
                    for (p, wf) in pre.iter_mut().zip(w) {
                        *p += x * wf;
                    }
                }
            }
            for f in 0..filters {
                if pre[f] > best[f] {
                    best[f] = pre[f];
                    best_at[f] = start;
                }
            }
        }
        let mut bank_winners = Vec::with_capacity(filters);
        for f in 0..filters {
            if best[f] > 0.0 {
                out.push(best[f]);
                bank_winners.push(Some(best_at[f]));
            } else {
                out.push(0.0);
                bank_winners.push(None);
            }
        }
        winners.push(bank_winners);
    }
    Ok((out, ConvTrace { chars, winners }))
}

/// Character-convolution features of `surface`.
pub fn char_conv(surface: &str, embed: &EmbeddingMatrix, conv: &CharConv) -> Result<Vec<f64>> {
    let chars = surface
        .chars()
        .map(|c| embed.vocab.lookup(c.encode_utf8(&mut [0; 4])))
        .collect();
    Ok(char_conv_indexed(chars, embed, conv)?.0)
}

/// Gradients of the convolution parameters and the character table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl ConvGrads {
    pub fn zeros(conv: &CharConv) -> Self {
        Self {
            weights: conv.banks.iter().map(|b| Array2::zeros(b.weights.raw_dim())).collect(),
            bias: conv.banks.iter().map(|b| Array1::zeros(b.bias.len())).collect(),
        }
    }
}

pub fn char_conv_backward(
    trace: &ConvTrace,
    d_out: &[f64],
    embed: &EmbeddingMatrix,
    conv: &CharConv,
    grads: &mut ConvGrads,
    char_grads: &mut SparseRows,
) {
    let dim = embed.dim();
    let mut offset = 0;
    for (b, bank) in conv.banks.iter().enumerate() {
        for (f, winner) in trace.winners[b].iter().enumerate() {
            let g = d_out[offset + f];
            let Some(start) = *winner else { continue };
            if g == 0.0 {
                continue;
            }
            grads.bias[b][f] += g;
            for k in 0..bank.width {
                let c = trace.chars[start + k];
                let row = embed.weights.row(c);
                let mut d_row = vec![0.0; dim];
                for d in 0..dim {
                    grads.weights[b][[k * dim + d, f]] += g * row[d];
                    d_row[d] = g * bank.weights[[k * dim + d, f]];
                }
                char_grads.add_scaled(c, 1.0, &d_row);
            }
        }
        offset += bank.bias.len();
    }
}

pub const FRAGMENT_SLICES: [&str; 5] = [
    "fragment.bow.cased",
    "fragment.bow.uncased",
    "fragment.char_fofe.l2r",
    "fragment.char_fofe.r2l",
    "fragment.char_conv",
];

pub const CONTEXT_SLICES: [&str; 8] = [
    "context.left_excl.cased",
    "context.left_excl.uncased",
    "context.left_incl.cased",
    "context.left_incl.uncased",
    "context.right_excl.cased",
    "context.right_excl.uncased",
    "context.right_incl.cased",
    "context.right_incl.uncased",
];

/// Offsets of every named slice inside the two group vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub fragment: Vec<(&'static str, Range<usize>)>,
    pub context: Vec<(&'static str, Range<usize>)>,
}

impl FeatureLayout {
    fn build(fragment_dims: [usize; 5], context_dims: [usize; 8]) -> Self {
        fn lay<const N: usize>(names: [&'static str; N], dims: [usize; N]) -> Vec<(&'static str, Range<usize>)> {
            let mut at = 0;
            names
                .into_iter()
                .zip(dims)
                .map(|(n, d)| {
                    let r = at..at + d;
                    at += d;
                    (n, r)
                })
                .collect()
        }
        Self {
            fragment: lay(FRAGMENT_SLICES, fragment_dims),
            context: lay(CONTEXT_SLICES, context_dims),
        }
    }

    pub fn fragment_dim(&self) -> usize {
        self.fragment.last().map_or(0, |(_, r)| r.end)
    }

    pub fn context_dim(&self) -> usize {
        self.context.last().map_or(0, |(_, r)| r.end)
    }

    pub fn slice(&self, name: &str) -> Option<Range<usize>> {
        self.fragment
            .iter()
            .chain(&self.context)
            .find(|(n, _)| *n == name)
            .map(|(_, r)| r.clone())
    }
}

/// The two concatenated input groups of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub fragment_group: Vec<f64>,
    pub context_group: Vec<f64>,
    pub layout: Arc<FeatureLayout>,
}

impl FeatureBundle {
    /// Named view into either group.
    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        let range = self.layout.slice(name)?;
        if name.starts_with("fragment.") {
            Some(&self.fragment_group[range])
        } else {
            Some(&self.context_group[range])
        }
    }
}

/// Sparse codes and pooling winners behind one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrace {
    pub bow_cased: SparseCode,
    pub bow_uncased: SparseCode,
    pub char_l2r: SparseCode,
    pub char_r2l: SparseCode,
    pub conv: ConvTrace,
    /// In `CONTEXT_SLICES` order.
    pub context: [SparseCode; 8],
}

/// Gradients of every trainable feature parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrads {
    pub word_cased: SparseRows,
    pub word_uncased: SparseRows,
    pub chars: SparseRows,
    pub conv: ConvGrads,
}

/// Sentence tokens resolved against the word vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedSentence {
    pub cased: Vec<usize>,
    pub uncased: Vec<usize>,
}

/// Feature parameters: word tables in both casings, the character table
/// and the convolution filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub word_cased: EmbeddingMatrix,
    pub word_uncased: EmbeddingMatrix,
    pub chars: EmbeddingMatrix,
    pub conv: CharConv,
    pub alpha_word: ForgettingFactor,
    pub alpha_char: ForgettingFactor,
    layout: Arc<FeatureLayout>,
}

impl FeatureExtractor {
    pub fn new(
        word_cased: EmbeddingMatrix,
        word_uncased: EmbeddingMatrix,
        chars: EmbeddingMatrix,
        conv: CharConv,
        alpha_word: ForgettingFactor,
        alpha_char: ForgettingFactor,
    ) -> Result<Self> {
        if chars.dim() != conv.config.char_embed_dim {
            return Err(Error::DimensionMismatch {
                expected: conv.config.char_embed_dim,
                found: chars.dim(),
            });
        }
        let (dc, du, dch) = (word_cased.dim(), word_uncased.dim(), chars.dim());
        let layout = Arc::new(FeatureLayout::build(
            [dc, du, dch, dch, conv.output_dim()],
            [dc, du, dc, du, dc, du, dc, du],
        ));
        Ok(Self {
            word_cased,
            word_uncased,
            chars,
            conv,
            alpha_word,
            alpha_char,
            layout,
        })
    }

    pub fn layout(&self) -> &Arc<FeatureLayout> {
        &self.layout
    }

    pub fn index_sentence(&self, sentence: &Sentence) -> IndexedSentence {
        IndexedSentence {
            cased: sentence.tokens().iter().map(|t| self.word_cased.vocab.lookup(t)).collect(),
            uncased: sentence
                .lowercased()
                .iter()
                .map(|t| self.word_uncased.vocab.lookup(t))
                .collect(),
        }
    }

    fn fragment_chars(&self, sentence: &Sentence, frag: &Fragment) -> Vec<usize> {
        let mut buf = [0u8; 4];
        sentence
            .surface(frag.start, frag.end)
            .chars()
            .map(|c| self.chars.vocab.lookup(c.encode_utf8(&mut buf)))
            .collect()
    }

    /// Fragment-group vector in `FRAGMENT_SLICES` order.
    #[allow(clippy::type_complexity)]
    pub fn fragment_features(
        &self,
        sentence: &Sentence,
        indexed: &IndexedSentence,
        frag: &Fragment,
    ) -> Result<(Vec<f64>, (SparseCode, SparseCode, SparseCode, SparseCode, ConvTrace))> {
        frag.check(sentence.len())?;
        let bow_cased = fofe::bag_of_words(&indexed.cased[frag.start..frag.end]);
        let bow_uncased = fofe::bag_of_words(&indexed.uncased[frag.start..frag.end]);
        let chars = self.fragment_chars(sentence, frag);
        let char_l2r = fofe::encode_sparse(&chars, self.alpha_char);
        let char_r2l = fofe::encode_sparse_reversed(&chars, self.alpha_char);
        let (conv_out, conv_trace) = char_conv_indexed(chars, &self.chars, &self.conv)?;

        let mut out = vec![0.0; self.layout.fragment_dim()];
        let slots = &self.layout.fragment;
        project_into(&bow_cased, &self.word_cased, &mut out[slots[0].1.clone()])?;
        project_into(&bow_uncased, &self.word_uncased, &mut out[slots[1].1.clone()])?;
        project_into(&char_l2r, &self.chars, &mut out[slots[2].1.clone()])?;
        project_into(&char_r2l, &self.chars, &mut out[slots[3].1.clone()])?;
        out[slots[4].1.clone()].copy_from_slice(&conv_out);
        Ok((out, (bow_cased, bow_uncased, char_l2r, char_r2l, conv_trace)))
    }

    /// Context-group vector in `CONTEXT_SLICES` order. Left contexts are
    /// read left to right, right contexts right to left, so the words next
    /// to the fragment carry the largest weights.
    pub fn context_features(
        &self,
        sentence: &Sentence,
        indexed: &IndexedSentence,
        frag: &Fragment,
    ) -> Result<(Vec<f64>, [SparseCode; 8])> {
        frag.check(sentence.len())?;
        let a = self.alpha_word;
        let (s, e) = (frag.start, frag.end);
        let (c, u) = (&indexed.cased, &indexed.uncased);
        let codes = [
            fofe::encode_sparse(&c[..s], a),
            fofe::encode_sparse(&u[..s], a),
            fofe::encode_sparse(&c[..e], a),
            fofe::encode_sparse(&u[..e], a),
            fofe::encode_sparse_reversed(&c[e..], a),
            fofe::encode_sparse_reversed(&u[e..], a),
            fofe::encode_sparse_reversed(&c[s..], a),
            fofe::encode_sparse_reversed(&u[s..], a),
        ];
        let mut out = vec![0.0; self.layout.context_dim()];
        for (i, (code, (_, range))) in codes.iter().zip(&self.layout.context).enumerate() {
            let table = if i % 2 == 0 { &self.word_cased } else { &self.word_uncased };
            project_into(code, table, &mut out[range.clone()])?;
        }
        Ok((out, codes))
    }

    pub fn extract(
        &self,
        sentence: &Sentence,
        indexed: &IndexedSentence,
        frag: &Fragment,
    ) -> Result<(FeatureBundle, FeatureTrace)> {
        let (fragment_group, (bow_cased, bow_uncased, char_l2r, char_r2l, conv)) =
            self.fragment_features(sentence, indexed, frag)?;
        let (context_group, context) = self.context_features(sentence, indexed, frag)?;
        Ok((
            FeatureBundle {
                fragment_group,
                context_group,
                layout: Arc::clone(&self.layout),
            },
            FeatureTrace {
                bow_cased,
                bow_uncased,
                char_l2r,
                char_r2l,
                conv,
                context,
            },
        ))
    }

    pub fn zero_grads(&self) -> FeatureGrads {
        FeatureGrads {
            word_cased: SparseRows::new(self.word_cased.dim()),
            word_uncased: SparseRows::new(self.word_uncased.dim()),
            chars: SparseRows::new(self.chars.dim()),
            conv: ConvGrads::zeros(&self.conv),
        }
    }

    /// Pushes the gradients of both group vectors back into the tables and
    /// filters. Frozen tables receive nothing.
    pub fn backward(&self, trace: &FeatureTrace, d_fragment: &[f64], d_context: &[f64], grads: &mut FeatureGrads) {
        let f = &self.layout.fragment;
        if self.word_cased.trainable {
            project_backward(&trace.bow_cased, &d_fragment[f[0].1.clone()], &mut grads.word_cased);
        }
        if self.word_uncased.trainable {
            project_backward(&trace.bow_uncased, &d_fragment[f[1].1.clone()], &mut grads.word_uncased);
        }
        let mut char_grads = std::mem::take(&mut grads.chars);
        char_grads.dim = self.chars.dim();
        project_backward(&trace.char_l2r, &d_fragment[f[2].1.clone()], &mut char_grads);
        project_backward(&trace.char_r2l, &d_fragment[f[3].1.clone()], &mut char_grads);
        char_conv_backward(
            &trace.conv,
            &d_fragment[f[4].1.clone()],
            &self.chars,
            &self.conv,
            &mut grads.conv,
            &mut char_grads,
        );
        if self.chars.trainable {
            grads.chars = char_grads;
        } else {
            grads.chars = SparseRows::new(self.chars.dim());
        }

        for (i, (code, (_, range))) in trace.context.iter().zip(&self.layout.context).enumerate() {
            let (table, g) = if i % 2 == 0 {
                (&self.word_cased, &mut grads.word_cased)
            } else {
                (&self.word_uncased, &mut grads.word_uncased)
            };
            if table.trainable {
                project_backward(code, &d_context[range.clone()], g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_chars() -> EmbeddingMatrix {
        // A, B, <unk>, <pad>; identity on the named characters.
        let vocab = Vocabulary::with_reserved(["A", "B"]).unwrap();
        let w = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        EmbeddingMatrix::new(vocab, w, true).unwrap()
    }

    fn one_hot_words(tokens: &[&str]) -> EmbeddingMatrix {
        let vocab = Vocabulary::with_reserved(tokens.iter().copied()).unwrap();
        let n = vocab.len();
        EmbeddingMatrix::new(vocab, Array2::eye(n), true).unwrap()
    }

    fn extractor(words: &[&str], conv: CharConv, chars: EmbeddingMatrix) -> FeatureExtractor {
        FeatureExtractor::new(
            one_hot_words(words),
            one_hot_words(&words.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>()),
            chars,
            conv,
            ForgettingFactor::new(0.5).unwrap(),
            ForgettingFactor::new(0.8).unwrap(),
        )
        .unwrap()
    }

    fn small_conv(dim: usize) -> CharConv {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        CharConv::init(
            CharConvConfig {
                widths: vec![1],
                filters_per_width: 1,
                char_embed_dim: dim,
                pad: true,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn char_fofe_single_character() {
        let fx = extractor(&["A", "B"], small_conv(2), identity_chars());
        let s = Sentence::new(["A"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 0, 1)).unwrap();
        assert_eq!(bundle.slice("fragment.char_fofe.l2r").unwrap(), &[1.0, 0.0]);
        assert_eq!(bundle.slice("fragment.char_fofe.r2l").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn char_fofe_two_characters() {
        let fx = extractor(&["AB"], small_conv(2), identity_chars());
        let s = Sentence::new(["AB"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 0, 1)).unwrap();
        let l2r = bundle.slice("fragment.char_fofe.l2r").unwrap();
        let r2l = bundle.slice("fragment.char_fofe.r2l").unwrap();
        assert!((l2r[0] - 0.8).abs() < 1e-15 && l2r[1] == 1.0);
        assert!(r2l[0] == 1.0 && (r2l[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn bag_of_words_is_sum_of_one_hots() {
        let fx = extractor(&["New", "York", "in"], small_conv(2), identity_chars());
        let s = Sentence::new(["in", "New", "York"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 1, 3)).unwrap();
        let bow = bundle.slice("fragment.bow.cased").unwrap();
        let v = &fx.word_cased.vocab;
        let mut expected = vec![0.0; v.len()];
        expected[v.lookup("New")] += 1.0;
        expected[v.lookup("York")] += 1.0;
        assert_eq!(bow, expected.as_slice());
    }

    #[test]
    fn context_codes_match_direct_recursion() {
        let fx = extractor(&["a", "b", "c"], small_conv(2), identity_chars());
        let s = Sentence::new(["a", "b", "c"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 1, 2)).unwrap();
        let v = &fx.word_cased.vocab;
        let a = ForgettingFactor::new(0.5).unwrap();
        let left_incl = fofe::encode(&["a", "b"], v, a).values;
        let right_incl = fofe::encode_reversed(&["b", "c"], v, a).values;
        assert_eq!(bundle.slice("context.left_incl.cased").unwrap(), left_incl.as_slice());
        assert_eq!(bundle.slice("context.right_incl.cased").unwrap(), right_incl.as_slice());
        // Hand values: a=0.5, b=1 on the left; read right to left, b=1, c=0.5.
        assert_eq!(left_incl[v.lookup("a")], 0.5);
        assert_eq!(right_incl[v.lookup("b")], 1.0);
        assert_eq!(right_incl[v.lookup("c")], 0.5);
        // All-lowercase text with identical tables: casings agree.
        assert_eq!(
            bundle.slice("context.left_incl.cased").unwrap(),
            bundle.slice("context.left_incl.uncased").unwrap()
        );
    }

    #[test]
    fn whole_sentence_fragment_has_empty_exclusive_contexts() {
        let fx = extractor(&["a", "b"], small_conv(2), identity_chars());
        let s = Sentence::new(["a", "b"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 0, 2)).unwrap();
        for name in [
            "context.left_excl.cased",
            "context.left_excl.uncased",
            "context.right_excl.cased",
            "context.right_excl.uncased",
        ] {
            assert!(bundle.slice(name).unwrap().iter().all(|v| *v == 0.0), "{name}");
        }
    }

    #[test]
    fn layout_covers_groups_without_gaps() {
        let fx = extractor(&["a"], small_conv(2), identity_chars());
        for slices in [&fx.layout().fragment, &fx.layout().context] {
            let mut at = 0;
            for (_, r) in slices.iter() {
                assert_eq!(r.start, at);
                at = r.end;
            }
        }
        let s = Sentence::new(["a"]);
        let idx = fx.index_sentence(&s);
        let (bundle, _) = fx.extract(&s, &idx, &Fragment::new(0, 0, 1)).unwrap();
        assert_eq!(bundle.fragment_group.len(), fx.layout().fragment_dim());
        assert_eq!(bundle.context_group.len(), fx.layout().context_dim());
    }

    #[test]
    fn project_examples() {
        let vocab = Vocabulary::new(["x", "y", "z"], "z").unwrap();
        let m = EmbeddingMatrix::new(vocab, array![[1.0, 2.0], [3.0, 5.0], [7.0, 11.0]], true).unwrap();
        assert_eq!(project(&SparseCode::default(), &m).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_dense(&[0.0, 1.0, 0.0], &m).unwrap(), vec![3.0, 5.0]);
        assert_eq!(project_dense(&[0.5, 1.0, 0.0], &m).unwrap(), vec![3.5, 6.0]);
        assert!(matches!(
            project_dense(&[1.0, 0.0], &m),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn width_one_filter_takes_max_over_characters() {
        // 1-dim embeddings A=0.3, B=0.9, weight 1, bias 0.
        let vocab = Vocabulary::with_reserved(["A", "B"]).unwrap();
        let chars = EmbeddingMatrix::new(vocab, array![[0.3], [0.9], [0.0], [0.0]], true).unwrap();
        let mut conv = small_conv(1);
        conv.banks[0].weights.fill(1.0);
        assert_eq!(char_conv("ABA", &chars, &conv).unwrap(), vec![0.9]);
        conv.banks[0].weights.fill(0.0);
        assert_eq!(char_conv("ABA", &chars, &conv).unwrap(), vec![0.0]);
    }

    #[test]
    fn width_two_filter_on_two_chars_is_one_window() {
        let chars = identity_chars();
        let mut conv = CharConv::init(
            CharConvConfig {
                widths: vec![2],
                filters_per_width: 1,
                char_embed_dim: 2,
                pad: false,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        // Window rows: [A0, A1, B0, B1]; "AB" embeds to [1, 0, 0, 1].
        conv.banks[0].weights = array![[0.5], [2.0], [-1.0], [0.25]];
        conv.banks[0].bias = array![0.1];
        let out = char_conv("AB", &chars, &conv).unwrap();
        assert!((out[0] - (0.5 + 0.25 + 0.1)).abs() < 1e-15);
        assert!(matches!(
            char_conv("A", &chars, &conv),
            Err(Error::FragmentTooShort { len: 1, width: 2 })
        ));
        conv.config.pad = true;
        assert_eq!(char_conv("A", &chars, &conv).unwrap().len(), 1);
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn project_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = Vocabulary::with_reserved(["p", "q", "r"]).unwrap();
        let m = EmbeddingMatrix::new(vocab, random_rows(5, 3, &mut rng) * 50.0, true).unwrap();
        let code = fofe::encode_sparse(&[0, 2, 0, 1], ForgettingFactor::new(0.5).unwrap());
        let d_out = [0.7, -1.3, 0.4];
        let objective = |m: &EmbeddingMatrix| -> f64 {
            project(&code, m).unwrap().iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        let mut g = SparseRows::new(3);
        project_backward(&code, &d_out, &mut g);
        for row in 0..5 {
            for col in 0..3 {
                let fd = central_difference(
                    |x| {
                        let mut m2 = m.clone();
                        m2.weights[[row, col]] = x;
                        objective(&m2)
                    },
                    m.weights[[row, col]],
                    1e-4,
                );
                let an = g.get(row).map_or(0.0, |r| r[col]);
                assert!(rel_err(an, fd) < 1e-4, "row {row} col {col}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn char_conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = Vocabulary::with_reserved(["a", "b", "c"]).unwrap();
        let chars = EmbeddingMatrix::new(vocab, random_rows(5, 3, &mut rng) * 100.0, true).unwrap();
        let conv = CharConv::init(
            CharConvConfig {
                widths: vec![1, 2],
                filters_per_width: 3,
                char_embed_dim: 3,
                pad: true,
            },
            &mut rng,
        )
        .unwrap();
        let d_out: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let objective = |chars: &EmbeddingMatrix, conv: &CharConv| -> f64 {
            char_conv("abcab", chars, conv).unwrap().iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        let surface: Vec<usize> = "abcab".chars().map(|c| chars.vocab.lookup(&c.to_string())).collect();
        let (_, trace) = char_conv_indexed(surface, &chars, &conv).unwrap();
        let mut g = ConvGrads::zeros(&conv);
        let mut cg = SparseRows::new(3);
        char_conv_backward(&trace, &d_out, &chars, &conv, &mut g, &mut cg);

        for b in 0..conv.banks.len() {
            for ((r, c), &w) in conv.banks[b].weights.indexed_iter() {
                let fd = central_difference(
                    |x| {
                        let mut c2 = conv.clone();
                        c2.banks[b].weights[[r, c]] = x;
                        objective(&chars, &c2)
                    },
                    w,
                    1e-4,
                );
                assert!(rel_err(g.weights[b][[r, c]], fd) < 1e-4);
            }
            for f in 0..conv.banks[b].bias.len() {
                let fd = central_difference(
                    |x| {
                        let mut c2 = conv.clone();
                        c2.banks[b].bias[f] = x;
                        objective(&chars, &c2)
                    },
                    conv.banks[b].bias[f],
                    1e-4,
                );
                assert!(rel_err(g.bias[b][f], fd) < 1e-4);
            }
        }
        for row in 0..chars.rows() {
            for col in 0..3 {
                let fd = central_difference(
                    |x| {
                        let mut ch = chars.clone();
                        ch.weights[[row, col]] = x;
                        objective(&ch, &conv)
                    },
                    chars.weights[[row, col]],
                    1e-4,
                );
                let an = cg.get(row).map_or(0.0, |r| r[col]);
                assert!(rel_err(an, fd) < 1e-4, "char row {row} col {col}: {an} vs {fd}");
            }
        }
    }
}
