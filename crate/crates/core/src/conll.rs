//! CoNLL column format: one token per line with the BIO tag in the last
//! column, blank lines between sentences and `-DOCSTART-` lines between
//! documents.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::features::Sentence;
use crate::pipeline::{check_non_overlapping, EntitySpan};

#[derive(Debug, Clone, PartialEq)]
pub struct ConllDocument {
    pub id: String,
    pub sentences: Vec<Sentence>,
    /// Gold spans; `sentence` indexes `sentences`.
    pub entities: Vec<EntitySpan>,
}

impl ConllDocument {
    pub fn spans_in(&self, sentence: usize) -> impl Iterator<Item = &EntitySpan> {
        self.entities.iter().filter(move |e| e.sentence == sentence)
    }
}

/// An `I-X` tag that did not continue an `X` span and was treated as `B-X`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub line: usize,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConllParse {
    pub documents: Vec<ConllDocument>,
    pub repairs: Vec<Repair>,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, class) = tag.split_once('-')?;
    if class.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(class)),
        "I" => Some(Tag::Inside(class)),
        _ => None,
    }
}

#[derive(Default)]
struct Builder {
    documents: Vec<ConllDocument>,
    repairs: Vec<Repair>,
    sentences: Vec<Sentence>,
    entities: Vec<EntitySpan>,
    tokens: Vec<String>,
    open: Option<(String, usize)>,
}

impl Builder {
    fn close_span(&mut self) {
        if let Some((class, start)) = self.open.take() {
            let sentence = self.sentences.len();
            self.entities.push(EntitySpan::new(sentence, start, self.tokens.len(), class));
        }
    }

    fn end_sentence(&mut self) {
        self.close_span();
        if !self.tokens.is_empty() {
            self.sentences.push(Sentence::new(std::mem::take(&mut self.tokens)));
        }
    }

    fn end_document(&mut self) {
        self.end_sentence();
        if !self.sentences.is_empty() {
            let id = format!("doc-{}", self.documents.len());
            self.documents.push(ConllDocument {
                id,
                sentences: std::mem::take(&mut self.sentences),
                entities: std::mem::take(&mut self.entities),
            });
        }
    }

    fn token(&mut self, line: usize, token: &str, tag: &str) -> Result<()> {
        let parsed = parse_tag(tag).ok_or_else(|| Error::MalformedLine {
            line,
            message: format!("unrecognized tag {tag:?}"),
        })?;
        match parsed {
            Tag::Outside => self.close_span(),
            Tag::Begin(class) => {
                self.close_span();
                self.open = Some((class.to_string(), self.tokens.len()));
            }
            Tag::Inside(class) => {
                let continues = matches!(&self.open, Some((open, _)) if open == class);
                if !continues {
                    self.close_span();
                    log::debug!("line {line}: {tag} does not continue a span, opening a new one");
                    self.repairs.push(Repair {
                        line,
                        tag: tag.to_string(),
                    });
                    self.open = Some((class.to_string(), self.tokens.len()));
                }
            }
        }
        self.tokens.push(token.to_string());
        Ok(())
    }
}

/// Parses column-format text into documents with gold spans.
pub fn parse_conll<R: BufRead>(reader: R) -> Result<ConllParse> {
    let mut b = Builder::default();
    let mut columns: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            b.end_sentence();
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            b.end_document();
            continue;
        }
        let expected = *columns.get_or_insert(fields.len());
        if fields.len() < 2 || fields.len() != expected {
            return Err(Error::MalformedLine {
                line: number,
                message: format!("expected {} columns, found {}", expected.max(2), fields.len()),
            });
        }
        b.token(number, fields[0], fields[fields.len() - 1])?;
    }
    b.end_document();
    for doc in &b.documents {
        check_non_overlapping(&doc.entities)?;
    }
    Ok(ConllParse {
        documents: b.documents,
        repairs: b.repairs,
    })
}

pub fn parse_conll_str(text: &str) -> Result<ConllParse> {
    parse_conll(text.as_bytes())
}

/// Two-column BIO2 rendering that [`parse_conll`] reads back to the same spans.
pub fn write_conll(documents: &[ConllDocument]) -> String {
    let mut out = String::new();
    for doc in documents {
        out.push_str("-DOCSTART- O\n\n");
        for (s, sentence) in doc.sentences.iter().enumerate() {
            let mut tags = vec!["O".to_string(); sentence.len()];
            for span in doc.spans_in(s) {
                tags[span.start] = format!("B-{}", span.class);
                for tag in &mut tags[span.start + 1..span.end] {
                    *tag = format!("I-{}", span.class);
                }
            }
            for (token, tag) in sentence.tokens().iter().zip(&tags) {
                let _ = writeln!(out, "{token} {tag}");
            }
            out.push('\n');
        }
    }
    out
}

/// Re-tokenizes every sentence into single characters, moving span
/// boundaries to character offsets.
pub fn to_character_level(doc: &ConllDocument) -> ConllDocument {
    let mut sentences = Vec::with_capacity(doc.sentences.len());
    let mut offsets = Vec::with_capacity(doc.sentences.len());
    for sentence in &doc.sentences {
        let mut chars = Vec::new();
        let mut starts = Vec::with_capacity(sentence.len() + 1);
        for token in sentence.tokens() {
            starts.push(chars.len());
            chars.extend(token.chars().map(String::from));
        }
        starts.push(chars.len());
        sentences.push(Sentence::new(chars));
        offsets.push(starts);
    }
    let entities = doc
        .entities
        .iter()
        .map(|e| {
            let o = &offsets[e.sentence];
            EntitySpan::new(e.sentence, o[e.start], o[e.end], e.class.clone())
        })
        .collect();
    ConllDocument {
        id: doc.id.clone(),
        sentences,
        entities,
    }
}

/// Pre-tokenized raw text: one sentence per line, whitespace between
/// tokens, blank lines between documents.
pub fn parse_raw<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<Sentence>)>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            if !current.is_empty() {
                docs.push((format!("doc-{}", docs.len()), std::mem::take(&mut current)));
            }
        } else {
            current.push(Sentence::new(tokens));
        }
    }
    if !current.is_empty() {
        docs.push((format!("doc-{}", docs.len()), current));
    }
    Ok(docs)
}
