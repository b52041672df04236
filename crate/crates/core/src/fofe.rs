//! Fixed-size ordinally forgetting encoding.
//!
//! A token sequence `w_1 .. w_N` over a vocabulary `V` is folded into a
//! `|V|`-dimensional vector by `z_n = alpha * z_(n-1) + e_n` with `z_0 = 0`,
//! where `e_n` is the one-hot vector of `w_n`. For `alpha <= 0.5` the map is
//! injective and [`decode`] recovers the sequence exactly.

use std::collections::{HashMap, VecDeque};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const PADDING_TOKEN: &str = "<pad>";

/// Tolerance used by [`decode`] when matching components against 1 and 0.
pub const DECODE_TOLERANCE: f64 = 1e-6;

/// Component-wise tolerance under which two codes are reported as colliding.
pub const COLLISION_TOLERANCE: f64 = 1e-9;

/// An ordered set of distinct tokens with a designated unknown entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unknown: usize,
}

impl Vocabulary {
    /// Builds a vocabulary whose out-of-vocabulary lookups resolve to
    /// `unknown`. The unknown token is appended when not already listed.
    pub fn new<I, S>(tokens: I, unknown: &str) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            unknown: 0,
        };
        for token in tokens {
            vocab.push(token.into())?;
        }
        vocab.unknown = match vocab.index.get(unknown) {
            Some(&i) => i,
            None => vocab.push_unchecked(unknown.to_string()),
        };
        Ok(vocab)
    }

    /// Builds a vocabulary with the reserved `<unk>` and `<pad>` entries
    /// appended (unless already present).
    pub fn with_reserved<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new(tokens, UNKNOWN_TOKEN)?;
        if !vocab.index.contains_key(PADDING_TOKEN) {
            vocab.push_unchecked(PADDING_TOKEN.to_string());
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<usize> {
        if self.index.contains_key(&token) {
            return Err(Error::DuplicateToken(token));
        }
        Ok(self.push_unchecked(token))
    }

    fn push_unchecked(&mut self, token: String) -> usize {
        let i = self.tokens.len();
        self.index.insert(token.clone(), i);
        self.tokens.push(token);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, or of the unknown entry when absent.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.unknown)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unknown_index(&self) -> usize {
        self.unknown
    }

    pub fn padding_index(&self) -> Option<usize> {
        self.get(PADDING_TOKEN)
    }

    /// SHA-256 over the token list and the unknown designation, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update((self.unknown as u64).to_le_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// The constant `alpha` of the encoding recursion, restricted to `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ForgettingFactor(f64);

impl ForgettingFactor {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidForgettingFactor(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Whether the encoding is guaranteed injective (and hence decodable).
    pub fn is_unique(self) -> bool {
        self.0 <= 0.5
    }
}

/// Dense code `z_N` of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FofeCode {
    pub values: Vec<f64>,
    pub alpha: ForgettingFactor,
    /// Number of encoded tokens.
    pub length: usize,
}

impl FofeCode {
    pub fn zeros(dim: usize, alpha: ForgettingFactor) -> Self {
        Self {
            values: vec![0.0; dim],
            alpha,
            length: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Nonzero components in index order.
    pub fn sparse(&self) -> SparseCode {
        SparseCode {
            entries: self
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    /// Appends one token: `alpha * z + e_index`.
    pub fn push(&mut self, index: usize) {
        let alpha = self.alpha.value();
        for v in &mut self.values {
            *v *= alpha;
        }
        self.values[index] += 1.0;
        self.length += 1;
    }

    /// Geometric mass `(1 - alpha^N) / (1 - alpha)` every valid code carries.
    pub fn expected_mass(alpha: ForgettingFactor, length: usize) -> f64 {
        let a = alpha.value();
        (1.0 - a.powi(length as i32)) / (1.0 - a)
    }
}

/// Index/coefficient view of a code; only nonzero entries are stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub entries: Vec<(usize, f64)>,
}

impl SparseCode {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(i, v) in &self.entries {
            out[i] += v;
        }
        out
    }
}

/// Runs the recursion over `indices` with an arbitrary decay. `decay = 1`
/// gives the count-weighted bag of words.
pub(crate) fn fold_sparse<I>(indices: I, decay: f64) -> SparseCode
where
    I: IntoIterator<Item = usize>,
{
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for index in indices {
        for entry in &mut entries {
            entry.1 *= decay;
        }
        match entries.iter_mut().find(|(i, _)| *i == index) {
            Some(entry) => entry.1 += 1.0,
            None => entries.push((index, 1.0)),
        }
    }
    entries.sort_unstable_by_key(|(i, _)| *i);
    SparseCode { entries }
}

/// Sparse code of an index sequence, left to right.
pub fn encode_sparse(indices: &[usize], alpha: ForgettingFactor) -> SparseCode {
    fold_sparse(indices.iter().copied(), alpha.value())
}

/// Sparse code of an index sequence read right to left.
pub fn encode_sparse_reversed(indices: &[usize], alpha: ForgettingFactor) -> SparseCode {
    fold_sparse(indices.iter().rev().copied(), alpha.value())
}

/// Count-weighted bag of words.
pub fn bag_of_words(indices: &[usize]) -> SparseCode {
    fold_sparse(indices.iter().copied(), 1.0)
}

pub fn encode_indices(indices: &[usize], dim: usize, alpha: ForgettingFactor) -> Result<FofeCode> {
    let mut code = FofeCode::zeros(dim, alpha);
    for &i in indices {
        if i >= dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: i + 1,
            });
        }
        code.push(i);
    }
    Ok(code)
}

/// Encodes `sequence` left to right; unknown tokens map to the unknown entry.
pub fn encode<S: AsRef<str>>(sequence: &[S], vocab: &Vocabulary, alpha: ForgettingFactor) -> FofeCode {
    let mut code = FofeCode::zeros(vocab.len(), alpha);
    for token in sequence {
        code.push(vocab.lookup(token.as_ref()));
    }
    code
}

/// Same as `encode` on the reversed sequence.
pub fn encode_reversed<S: AsRef<str>>(
    sequence: &[S],
    vocab: &Vocabulary,
    alpha: ForgettingFactor,
) -> FofeCode {
    let mut code = FofeCode::zeros(vocab.len(), alpha);
    for token in sequence.iter().rev() {
        code.push(vocab.lookup(token.as_ref()));
    }
    code
}

/// Recovers the index sequence behind `values` for `alpha <= 0.5`.
///
/// Peels tokens off the end: the last token is the single component at or
/// above 1; remove it and divide by alpha to expose the previous code.
pub fn decode_indices(values: &[f64], alpha: ForgettingFactor) -> Result<Vec<usize>> {
    if !alpha.is_unique() {
        return Err(Error::MalformedCode(format!(
            "decoding needs alpha <= 0.5, got {}",
            alpha.value()
        )));
    }
    let a = alpha.value();
    let mass: f64 = values.iter().sum();
    let ratio = 1.0 - mass * (1.0 - a);
    // Longest sequence the mass allows; bounds the loop on garbage input.
    let max_len = if ratio <= 0.0 {
        return Err(Error::MalformedCode(format!(
            "mass {mass} exceeds any finite sequence at alpha {a}"
        )));
    } else if ratio >= 1.0 {
        0
    } else {
        (ratio.ln() / a.ln()).round() as usize + 1
    };

    let mut z = values.to_vec();
    let mut out = VecDeque::new();
    // Each peel divides by alpha, so rounding error grows by 1/alpha too.
    let mut rounding = 4.0 * f64::EPSILON * mass.max(1.0);
    loop {
        let eps = DECODE_TOLERANCE.max(rounding);
        if let Some(v) = z.iter().find(|v| **v < -eps) {
            return Err(Error::MalformedCode(format!("negative component {v}")));
        }
        if z.iter().all(|v| v.abs() < eps) {
            break;
        }
        if out.len() >= max_len {
            return Err(Error::MalformedCode(
                "residual does not vanish within the sequence length implied by the mass".into(),
            ));
        }
        let mut last = None;
        for (i, v) in z.iter().enumerate() {
            if *v >= 1.0 - eps {
                if last.is_some() {
                    return Err(Error::MalformedCode(
                        "several components at or above 1".into(),
                    ));
                }
                last = Some(i);
            }
        }
        let Some(last) = last else {
            return Err(Error::MalformedCode("no component at or above 1".into()));
        };
        out.push_front(last);
        z[last] -= 1.0;
        for v in &mut z {
            *v /= a;
        }
        rounding = (rounding + f64::EPSILON) / a;
    }
    Ok(out.into())
}

/// Decodes a code back to its token sequence.
pub fn decode(code: &FofeCode, vocab: &Vocabulary) -> Result<Vec<String>> {
    if code.dim() != vocab.len() {
        return Err(Error::DimensionMismatch {
            expected: vocab.len(),
            found: code.dim(),
        });
    }
    Ok(decode_indices(&code.values, code.alpha)?
        .into_iter()
        .map(|i| vocab.token(i).to_string())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub total_sequences: usize,
    /// Pairs of index sequences whose codes agree within [`COLLISION_TOLERANCE`].
    pub collisions: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Encodes every sequence over `vocab_size` symbols with length `0..=max_len`
/// and reports all colliding pairs.
pub fn uniqueness_check(vocab_size: usize, max_len: usize, alpha: ForgettingFactor) -> UniquenessReport {
    let mut sequences: Vec<Vec<usize>> = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * vocab_size);
        for prefix in &frontier {
            for w in 0..vocab_size {
                let mut seq = prefix.clone();
                seq.push(w);
                next.push(seq);
            }
        }
        sequences.extend(next.iter().cloned());
        frontier = next;
    }

    let codes: Vec<Vec<f64>> = sequences
        .iter()
        .map(|s| {
            encode_indices(s, vocab_size, alpha)
                .expect("enumerated indices are in range")
                .values
        })
        .collect();

    // Sweep in order of the first component; only codes whose first
    // components are within tolerance can collide.
    let mut order: Vec<usize> = (0..codes.len()).collect();
    let key = |i: usize| codes[i].first().copied().unwrap_or(0.0);
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));

    let mut collisions = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if key(j) - key(i) > COLLISION_TOLERANCE {
                break;
            }
            let close = codes[i]
                .iter()
                .zip(&codes[j])
                .all(|(x, y)| (x - y).abs() <= COLLISION_TOLERANCE);
            if close {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                collisions.push((sequences[a].clone(), sequences[b].clone()));
            }
        }
    }
    collisions.sort();
    UniquenessReport {
        total_sequences: sequences.len(),
        collisions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::new(["A", "B", "C"], "C").unwrap()
    }

    fn half() -> ForgettingFactor {
        ForgettingFactor::new(0.5).unwrap()
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = Vocabulary::with_reserved(["x", "y"]).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.lookup(t), i);
        }
        assert_eq!(v.lookup("zzz"), v.unknown_index());
        assert_eq!(v.token(v.unknown_index()), UNKNOWN_TOKEN);
        assert_eq!(v.len(), 4);
        assert!(matches!(
            Vocabulary::with_reserved(["x", "x"]),
            Err(Error::DuplicateToken(_))
        ));
    }

    #[test]
    fn forgetting_factor_bounds() {
        for bad in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(ForgettingFactor::new(bad).is_err(), "{bad}");
        }
        assert!(ForgettingFactor::new(0.999).is_ok());
    }

    #[test]
    fn encode_examples() {
        let v = abc();
        let empty: [&str; 0] = [];
        let z = encode(&empty, &v, half());
        assert_eq!(z.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(z.length, 0);
        assert_eq!(encode(&["A"], &v, half()).values, vec![1.0, 0.0, 0.0]);
        let z = encode(&["A", "B", "A"], &v, half());
        assert_eq!(z.values, vec![1.25, 0.5, 0.0]);
        assert_eq!(z.length, 3);
    }

    #[test]
    fn encode_reversed_examples() {
        let v = abc();
        assert_eq!(encode_reversed(&["A", "B", "A"], &v, half()).values, vec![1.25, 0.5, 0.0]);
        assert_eq!(encode_reversed(&["A", "B"], &v, half()).values, vec![1.0, 0.5, 0.0]);
        let empty: [&str; 0] = [];
        assert_eq!(encode_reversed(&empty, &v, half()).values, vec![0.0; 3]);
    }

    #[test]
    fn decode_examples() {
        let v = abc();
        let code = |values: Vec<f64>| FofeCode {
            values,
            alpha: half(),
            length: 0,
        };
        assert_eq!(decode(&code(vec![1.0, 0.0, 0.0]), &v).unwrap(), ["A"]);
        assert_eq!(decode(&code(vec![1.25, 0.5, 0.0]), &v).unwrap(), ["A", "B", "A"]);
        assert!(matches!(
            decode(&code(vec![0.5, 0.5, 0.0]), &v),
            Err(Error::MalformedCode(_))
        ));
        assert!(decode(&code(vec![0.0; 3]), &v).unwrap().is_empty());
    }

    #[test]
    fn decode_rejects_bad_codes() {
        let a = half();
        // Two components at 1.
        assert!(decode_indices(&[1.0, 1.0], a).is_err());
        // Limit of an infinite run of A: never terminates without the mass bound.
        assert!(decode_indices(&[2.0, 0.0], a).is_err());
        assert!(decode_indices(&[1.0, -0.1], a).is_err());
        let big = ForgettingFactor::new(0.7).unwrap();
        assert!(decode_indices(&[1.0, 0.0], big).is_err());
    }

    #[test]
    fn decode_tolerates_small_noise() {
        let z = [1.25 + 3e-8, 0.5 - 2e-8, 1e-9];
        assert_eq!(decode_indices(&z, half()).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn sparse_matches_dense_bitwise() {
        let a = ForgettingFactor::new(0.3).unwrap();
        let seq = [3, 1, 3, 0, 3, 2];
        let dense = encode_indices(&seq, 5, a).unwrap();
        assert_eq!(encode_sparse(&seq, a).to_dense(5), dense.values);
        assert_eq!(encode_sparse(&seq, a), dense.sparse());
        let mut rev = seq;
        rev.reverse();
        assert_eq!(
            encode_sparse_reversed(&seq, a).to_dense(5),
            encode_indices(&rev, 5, a).unwrap().values
        );
        assert_eq!(bag_of_words(&seq).entries, vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 3.0)]);
    }

    #[test]
    fn uniqueness_examples() {
        let r = uniqueness_check(2, 5, half());
        assert_eq!(r.total_sequences, 63);
        assert!(r.collisions.is_empty());
        let r = uniqueness_check(2, 3, ForgettingFactor::new(0.25).unwrap());
        assert!(r.collisions.is_empty());
    }

    #[test]
    fn golden_ratio_alpha_collides() {
        // alpha^2 + alpha = 1: [A,A,B] and [B,B,A] both encode to (1, 1).
        let alpha = ForgettingFactor::new((5f64.sqrt() - 1.0) / 2.0).unwrap();
        let r = uniqueness_check(2, 3, alpha);
        assert_eq!(r.collisions, vec![(vec![0, 0, 1], vec![1, 1, 0])]);
    }
}
