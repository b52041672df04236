//! A complete tagger: label set, feature extractor and grouped network.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::embeddings::WordEmbeddings;
use crate::error::{Error, Result};
use crate::features::{CharConv, CharConvConfig, EmbeddingMatrix, FeatureExtractor, FeatureGrads, FeatureTrace, Fragment, IndexedSentence, Sentence};
use crate::fofe::{ForgettingFactor, Vocabulary};
use crate::network::{self, GroupedNetwork, Mode, NetGrads, NetworkSpec};
use crate::pipeline::{self, CandidatePrediction, DecodedEntity, LabelSet, LabeledFragment};

/// Candidates scored per forward pass at inference time.
const INFERENCE_CHUNK: usize = 512;

/// How raw text is split into the units the model labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tokenization {
    #[default]
    Word,
    /// Every character is a token.
    Character,
}

impl FromStr for Tokenization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "character" | "char" => Ok(Self::Character),
            other => Err(Error::Config(format!("unknown tokenization {other:?}"))),
        }
    }
}

impl fmt::Display for Tokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Word => "word",
            Self::Character => "character",
        })
    }
}

/// Hidden layer sizes of the three stacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSizes {
    pub fragment: Vec<usize>,
    pub context: Vec<usize>,
    pub shared: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub net: NetGrads,
    pub features: FeatureGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerModel {
    pub labels: LabelSet,
    pub features: FeatureExtractor,
    pub network: GroupedNetwork,
    pub max_fragment_len: usize,
    pub threshold: f64,
    pub tokenization: Tokenization,
}

/// Feature matrices for a batch plus the traces needed to backpropagate
/// into the embedding tables.
pub struct BatchFeatures {
    pub fragment: Array2<f64>,
    pub context: Array2<f64>,
    pub traces: Vec<FeatureTrace>,
}

impl NerModel {
    pub fn new(
        labels: LabelSet,
        features: FeatureExtractor,
        sizes: &LayerSizes,
        max_fragment_len: usize,
        threshold: f64,
        seed: u64,
    ) -> Result<Self> {
        if max_fragment_len == 0 {
            return Err(Error::Config("max_fragment_len must be >= 1".into()));
        }
        let spec = NetworkSpec {
            fragment_input: features.layout().fragment_dim(),
            context_input: features.layout().context_dim(),
            fragment_layers: sizes.fragment.clone(),
            context_layers: sizes.context.clone(),
            shared_layers: sizes.shared.clone(),
            classes: labels.len(),
        };
        let network = GroupedNetwork::init(&spec, seed)?;
        Ok(Self {
            labels,
            features,
            network,
            max_fragment_len,
            threshold,
            tokenization: Tokenization::Word,
        })
    }

    /// Builds a freshly initialised model from run settings. Character
    /// embeddings and filters are drawn from `seed`, the network from
    /// `seed + 1`.
    pub fn from_config(config: &RunConfig, labels: LabelSet, words: WordEmbeddings, chars: &[String]) -> Result<Self> {
        let t = &config.training;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let mut char_table = EmbeddingMatrix::random(
            Vocabulary::with_reserved(chars.iter().cloned())?,
            config.char_embed_dim,
            &mut rng,
        )?;
        char_table.trainable = !config.freeze_embeddings;
        let conv = CharConv::init(
            CharConvConfig {
                widths: config.conv_widths.clone(),
                filters_per_width: config.conv_filters,
                char_embed_dim: config.char_embed_dim,
                pad: true,
            },
            &mut rng,
        )?;
        let (mut cased, mut uncased) = (words.cased, words.uncased);
        cased.trainable = !config.freeze_embeddings;
        uncased.trainable = !config.freeze_embeddings;
        let features = FeatureExtractor::new(
            cased,
            uncased,
            char_table,
            conv,
            ForgettingFactor::new(t.alpha_word)?,
            ForgettingFactor::new(t.alpha_char)?,
        )?;
        let mut model = Self::new(
            labels,
            features,
            &config.layers,
            config.max_fragment_len,
            config.threshold,
            t.seed.wrapping_add(1),
        )?;
        model.tokenization = config.tokenization;
        Ok(model)
    }

    /// Extracts features of `fragments`; `fragment.sentence` indexes `sentences`.
    pub fn featurize(&self, sentences: &[Sentence], fragments: &[Fragment]) -> Result<BatchFeatures> {
        let layout = self.features.layout();
        let (fd, cd) = (layout.fragment_dim(), layout.context_dim());
        let mut fragment = Array2::zeros((fragments.len(), fd));
        let mut context = Array2::zeros((fragments.len(), cd));
        let mut traces = Vec::with_capacity(fragments.len());
        let mut indexed: HashMap<usize, IndexedSentence> = HashMap::new();
        for (row, frag) in fragments.iter().enumerate() {
            let sentence = sentences.get(frag.sentence).ok_or(Error::InvalidFragment {
                start: frag.start,
                end: frag.end,
                len: 0,
            })?;
            let idx = indexed
                .entry(frag.sentence)
                .or_insert_with(|| self.features.index_sentence(sentence));
            let (bundle, trace) = self.features.extract(sentence, idx, frag)?;
            fragment.row_mut(row).assign(&ndarray::ArrayView1::from(&bundle.fragment_group));
            context.row_mut(row).assign(&ndarray::ArrayView1::from(&bundle.context_group));
            traces.push(trace);
        }
        Ok(BatchFeatures {
            fragment,
            context,
            traces,
        })
    }

    /// Class distributions of the given fragments in inference mode.
    pub fn predict(&self, sentences: &[Sentence], fragments: &[Fragment]) -> Result<Vec<CandidatePrediction>> {
        let mut out = Vec::with_capacity(fragments.len());
        for chunk in fragments.chunks(INFERENCE_CHUNK) {
            let batch = self.featurize(sentences, chunk)?;
            let probs = self.network.predict(&batch.fragment, &batch.context)?;
            for (frag, row) in chunk.iter().zip(probs.rows()) {
                out.push(CandidatePrediction {
                    fragment: *frag,
                    distribution: row.to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Enumerates, scores and decodes every sentence; spans carry the index
    /// of their sentence within `sentences`.
    pub fn tag(&self, sentences: &[Sentence]) -> Result<Vec<DecodedEntity>> {
        let fragments: Vec<Fragment> = sentences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| pipeline::enumerate_fragments(i, s.len(), self.max_fragment_len))
            .collect();
        let predictions = self.predict(sentences, &fragments)?;
        Ok(pipeline::decode(&predictions, &self.labels, self.threshold))
    }

    /// Mean cross-entropy of a labeled batch and its gradients with respect
    /// to every trainable parameter.
    pub fn loss_and_grads<R: Rng>(
        &self,
        sentences: &[Sentence],
        batch: &[LabeledFragment],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, ModelGrads)> {
        let fragments: Vec<Fragment> = batch.iter().map(|c| c.fragment).collect();
        let gold: Vec<usize> = batch.iter().map(|c| c.label).collect();
        let feats = self.featurize(sentences, &fragments)?;
        let (probs, cache) = self.network.forward(&feats.fragment, &feats.context, mode, rng)?;
        let loss = network::loss(&probs, &gold);
        let net = self.network.backward(&cache, &gold)?;
        let mut features = self.features.zero_grads();
        for (i, trace) in feats.traces.iter().enumerate() {
            let df = net.d_fragment_input.row(i);
            let dc = net.d_context_input.row(i);
            self.features.backward(
                trace,
                df.as_slice().expect("row-major"),
                dc.as_slice().expect("row-major"),
                &mut features,
            );
        }
        Ok((loss, ModelGrads { net, features }))
    }

    /// Mean cross-entropy of a labeled batch in inference mode.
    pub fn batch_loss(&self, sentences: &[Sentence], batch: &[LabeledFragment]) -> Result<f64> {
        let fragments: Vec<Fragment> = batch.iter().map(|c| c.fragment).collect();
        let gold: Vec<usize> = batch.iter().map(|c| c.label).collect();
        let feats = self.featurize(sentences, &fragments)?;
        let probs = self.network.predict(&feats.fragment, &feats.context)?;
        Ok(network::loss(&probs, &gold))
    }
}

/// Distinct tokens in order of first appearance.
pub fn corpus_tokens(sentences: &[Sentence]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    sentences
        .iter()
        .flat_map(|s| s.tokens())
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect()
}

/// Distinct characters in order of first appearance.
pub fn corpus_chars(sentences: &[Sentence]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    sentences
        .iter()
        .flat_map(|s| s.tokens())
        .flat_map(|t| t.chars())
        .chain(std::iter::once(' '))
        .filter(|c| seen.insert(*c))
        .map(String::from)
        .collect()
}
