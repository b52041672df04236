//! Local-detection NER: candidate enumeration, span supervision, greedy
//! decoding and exact-match scoring.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::features::{Fragment, Sentence};

pub const NONE_LABEL: &str = "NONE";

/// Entity classes followed by the reserved `NONE` class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(classes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = Vec::new();
        for class in classes {
            let class = class.into();
            if class == NONE_LABEL {
                return Err(Error::Config(format!("{NONE_LABEL} is reserved")));
            }
            if names.contains(&class) {
                return Err(Error::DuplicateToken(class));
            }
            names.push(class);
        }
        names.push(NONE_LABEL.to_string());
        Ok(Self { names })
    }

    /// Rebuilds a set from its full name list (as stored in a model file).
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        match names.split_last() {
            Some((last, rest)) if last == NONE_LABEL => Self::new(rest.iter().cloned()),
            _ => Err(Error::Config(format!("label list must end with {NONE_LABEL}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn none_index(&self) -> usize {
        self.names.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn entity_classes(&self) -> &[String] {
        &self.names[..self.names.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledFragment {
    pub fragment: Fragment,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePrediction {
    pub fragment: Fragment,
    /// Probabilities over the label set, `NONE` last.
    pub distribution: Vec<f64>,
}

/// An entity mention; never of class `NONE`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    pub class: String,
}

impl EntitySpan {
    pub fn new(sentence: usize, start: usize, end: usize, class: impl Into<String>) -> Self {
        Self {
            sentence,
            start,
            end,
            class: class.into(),
        }
    }

    pub fn fragment(&self) -> Fragment {
        Fragment::new(self.sentence, self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEntity {
    pub span: EntitySpan,
    pub probability: f64,
}

/// All spans of up to `max_len` tokens, ordered by start then length.
pub fn enumerate_fragments(sentence_index: usize, sentence_len: usize, max_len: usize) -> Vec<Fragment> {
    let max_len = max_len.min(sentence_len);
    let mut out = Vec::new();
    for start in 0..sentence_len {
        for len in 1..=max_len {
            if start + len > sentence_len {
                break;
            }
            out.push(Fragment::new(sentence_index, start, start + len));
        }
    }
    out
}

/// Fails on two gold spans of one sentence sharing a token.
pub fn check_non_overlapping(gold: &[EntitySpan]) -> Result<()> {
    let mut sorted: Vec<&EntitySpan> = gold.iter().collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.sentence == b.sentence && b.start < a.end {
            return Err(Error::OverlappingGold {
                sentence: a.sentence,
                a_start: a.start,
                a_end: a.end,
                b_start: b.start,
                b_end: b.end,
            });
        }
    }
    Ok(())
}

/// Exact matches get the gold class, everything else `NONE`.
pub fn label_candidates(fragments: &[Fragment], gold: &[EntitySpan], labels: &LabelSet) -> Result<Vec<LabeledFragment>> {
    check_non_overlapping(gold)?;
    let mut by_span = HashMap::with_capacity(gold.len());
    for span in gold {
        let label = labels
            .index_of(&span.class)
            .ok_or_else(|| Error::UnknownLabel(span.class.clone()))?;
        by_span.insert(span.fragment(), label);
    }
    Ok(fragments
        .iter()
        .map(|f| LabeledFragment {
            fragment: *f,
            label: by_span.get(f).copied().unwrap_or(labels.none_index()),
        })
        .collect())
}

/// Best entity class of a distribution and its probability.
pub fn best_entity(distribution: &[f64], labels: &LabelSet) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &p) in distribution[..labels.none_index()].iter().enumerate() {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

/// Candidates that may become entities: best entity probability at least
/// `threshold` and at least `p(NONE)`.
pub fn surviving_candidates(predictions: &[CandidatePrediction], labels: &LabelSet, threshold: f64) -> Vec<DecodedEntity> {
    let none = labels.none_index();
    predictions
        .iter()
        .filter_map(|c| {
            let (class, p) = best_entity(&c.distribution, labels);
            (p >= threshold && p >= c.distribution[none]).then(|| DecodedEntity {
                span: EntitySpan::new(c.fragment.sentence, c.fragment.start, c.fragment.end, labels.name(class)),
                probability: p,
            })
        })
        .collect()
}

/// Greedy non-overlapping decoding.
///
/// Survivors are visited by descending probability (ties: longer span,
/// then smaller start) and kept unless they overlap an already kept span
/// of the same sentence. Output is in textual order.
pub fn decode(predictions: &[CandidatePrediction], labels: &LabelSet, threshold: f64) -> Vec<DecodedEntity> {
    let mut survivors = surviving_candidates(predictions, labels, threshold);
    survivors.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then((b.span.end - b.span.start).cmp(&(a.span.end - a.span.start)))
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.sentence.cmp(&b.span.sentence))
    });
    let mut taken: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    let mut accepted = Vec::new();
    for cand in survivors {
        let occupied = taken.entry(cand.span.sentence).or_default();
        if occupied.iter().any(|&(s, e)| cand.span.start < e && s < cand.span.end) {
            continue;
        }
        occupied.push((cand.span.start, cand.span.end));
        accepted.push(cand);
    }
    accepted.sort_by(|a, b| a.span.cmp(&b.span));
    accepted
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScores {
    fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        // Equal to 2PR/(P+R) but with a single rounding.
        let f1 = ratio(2 * correct, predicted + gold);
        Self {
            correct,
            predicted,
            gold,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub overall: ClassScores,
    pub per_class: BTreeMap<String, ClassScores>,
}

impl Evaluation {
    pub fn precision(&self) -> f64 {
        self.overall.precision
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1
    }
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}", "class", "precision", "recall", "f1", "correct", "pred", "gold")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &ClassScores| {
            writeln!(
                f,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, s.precision, s.recall, s.f1, s.correct, s.predicted, s.gold
            )
        };
        for (name, s) in &self.per_class {
            row(f, name, s)?;
        }
        row(f, "overall", &self.overall)
    }
}

/// Exact-match precision, recall and F1; a prediction counts when sentence,
/// boundaries and class all agree with a gold span.
pub fn evaluate(predicted: &[EntitySpan], gold: &[EntitySpan]) -> Evaluation {
    let mut gold_counts: HashMap<&EntitySpan, usize> = HashMap::new();
    for g in gold {
        *gold_counts.entry(g).or_default() += 1;
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for g in gold {
        counts.entry(&g.class).or_default().2 += 1;
    }
    for p in predicted {
        let c = counts.entry(&p.class).or_default();
        c.1 += 1;
        if let Some(n) = gold_counts.get_mut(p) {
            if *n > 0 {
                *n -= 1;
                c.0 += 1;
            }
        }
    }
    let (mut correct, mut pred, mut gold_total) = (0, 0, 0);
    let mut per_class = BTreeMap::new();
    for (class, (c, p, g)) in counts {
        correct += c;
        pred += p;
        gold_total += g;
        per_class.insert(class.to_string(), ClassScores::from_counts(c, p, g));
    }
    Evaluation {
        overall: ClassScores::from_counts(correct, pred, gold_total),
        per_class,
    }
}

/// One tagging output line: document id, sentence, start, end, class and
/// probability, tab separated.
pub fn format_tag_line(document: &str, entity: &DecodedEntity) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{:.6}",
        document, entity.span.sentence, entity.span.start, entity.span.end, entity.span.class, entity.probability
    )
}

/// Sentences of one or more documents with gold spans indexed by the flat
/// sentence position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub gold: Vec<EntitySpan>,
    /// `(document id, first sentence, sentence count)`.
    pub documents: Vec<(String, usize, usize)>,
}

impl Dataset {
    pub fn push_document(&mut self, id: &str, sentences: &[Sentence], entities: &[EntitySpan]) {
        let offset = self.sentences.len();
        self.sentences.extend(sentences.iter().cloned());
        self.gold.extend(entities.iter().map(|e| EntitySpan {
            sentence: e.sentence + offset,
            ..e.clone()
        }));
        self.documents.push((id.to_string(), offset, sentences.len()));
    }

    /// Distinct entity classes in first-seen order.
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.gold {
            if !out.contains(&g.class) {
                out.push(g.class.clone());
            }
        }
        out
    }

    /// Every fragment of every sentence labeled against the gold spans.
    pub fn candidates(&self, labels: &LabelSet, max_len: usize) -> Result<Vec<LabeledFragment>> {
        let fragments: Vec<Fragment> = self
            .sentences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| enumerate_fragments(i, s.len(), max_len))
            .collect();
        label_candidates(&fragments, &self.gold, labels)
    }
}
