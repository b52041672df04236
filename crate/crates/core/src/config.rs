//! Run configuration: a flat `key = value` text file, named hyper-parameter
//! profiles, and per-key overrides.
//!
//! Precedence, lowest first: built-in defaults, the selected profile, keys
//! in the config file, command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{LayerSizes, Tokenization};
use crate::trainer::TrainingConfig;

/// Learning rate and layer sizes of one published setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub name: &'static str,
    pub learning_rate: f64,
    pub fragment_layers: Vec<usize>,
    pub context_layers: Vec<usize>,
    pub shared_layers: Vec<usize>,
    pub tokenization: Tokenization,
}

pub const PROFILE_NAMES: [&str; 7] = [
    "conll2003",
    "ontonotes-eng",
    "ontonotes-zh",
    "conll2002",
    "kbp-eng",
    "kbp-cmn",
    "kbp-spa",
];

/// Two dedicated layers per group and one shared layer, except KBP English
/// (three context layers) and OntoNotes Chinese (two shared layers).
pub fn profile(name: &str) -> Result<Profile> {
    let (lr, frag, ctx, shared, frag_n, ctx_n, shared_n, tok) = match name {
        "conll2003" => (0.256, 412, 512, 512, 2, 2, 1, Tokenization::Word),
        "ontonotes-eng" => (0.128, 412, 412, 612, 2, 2, 1, Tokenization::Word),
        "ontonotes-zh" => (0.128, 512, 512, 512, 2, 2, 2, Tokenization::Character),
        "conll2002" => (0.126, 412, 512, 512, 2, 2, 1, Tokenization::Word),
        "kbp-eng" => (0.128, 512, 412, 512, 2, 3, 1, Tokenization::Word),
        "kbp-cmn" => (0.128, 512, 512, 512, 2, 2, 1, Tokenization::Character),
        "kbp-spa" => (0.064, 412, 412, 512, 2, 2, 1, Tokenization::Word),
        other => return Err(Error::UnknownProfile(other.to_string())),
    };
    let name = PROFILE_NAMES.iter().find(|n| **n == name).expect("matched above");
    Ok(Profile {
        name,
        learning_rate: lr,
        fragment_layers: vec![frag; frag_n],
        context_layers: vec![ctx; ctx_n],
        shared_layers: vec![shared; shared_n],
        tokenization: tok,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub layers: LayerSizes,
    pub max_fragment_len: usize,
    pub threshold: f64,
    pub tokenization: Tokenization,
    pub char_embed_dim: usize,
    /// Word table size when no embedding file is given.
    pub word_embed_dim: usize,
    pub conv_widths: Vec<usize>,
    pub conv_filters: usize,
    pub freeze_embeddings: bool,
    pub profile: Option<String>,
    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub embeddings_file: Option<PathBuf>,
    /// One entity class per line; defaults to the classes seen in training.
    pub labels_file: Option<PathBuf>,
    /// Where `train` writes the model, log and resolved config.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            layers: LayerSizes {
                fragment: vec![512, 512],
                context: vec![512, 512],
                shared: vec![512],
            },
            max_fragment_len: 7,
            threshold: 0.5,
            tokenization: Tokenization::Word,
            char_embed_dim: 64,
            word_embed_dim: 256,
            conv_widths: vec![2, 3],
            conv_filters: 32,
            freeze_embeddings: false,
            profile: None,
            train_file: None,
            dev_file: None,
            test_file: None,
            embeddings_file: None,
            labels_file: None,
            output_dir: None,
        }
    }
}

pub const KEYS: [&str; 29] = [
    "profile",
    "learning_rate",
    "momentum",
    "batch_size",
    "dropout",
    "decay_factor",
    "max_epochs",
    "patience",
    "alpha_word",
    "alpha_char",
    "max_fragment_len",
    "threshold",
    "fragment_layers",
    "context_layers",
    "shared_layers",
    "char_embed_dim",
    "neg_ratio",
    "seed",
    "tokenization",
    "word_embed_dim",
    "conv_widths",
    "conv_filters",
    "freeze_embeddings",
    "train_file",
    "dev_file",
    "test_file",
    "embeddings_file",
    "labels_file",
    "output_dir",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = value
        .split(',')
        .map(|v| num::<usize>(key, v.trim()))
        .collect::<Result<_>>()?;
    if out.contains(&0) {
        return Err(Error::Config(format!("{key}: sizes must be positive")));
    }
    Ok(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        let p = profile(name)?;
        self.training.learning_rate = p.learning_rate;
        self.layers = LayerSizes {
            fragment: p.fragment_layers,
            context: p.context_layers,
            shared: p.shared_layers,
        };
        self.tokenization = p.tokenization;
        self.profile = Some(name.to_string());
        Ok(())
    }

    /// Sets one key. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = |v: &str| Some(base.join(v));
        let t = &mut self.training;
        match key {
            "profile" => self.apply_profile(value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "dropout" => t.dropout = num(key, value)?,
            "decay_factor" => t.decay_factor = parse_fraction(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "alpha_word" => t.alpha_word = num(key, value)?,
            "alpha_char" => t.alpha_char = num(key, value)?,
            "neg_ratio" => t.neg_ratio = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "max_fragment_len" => self.max_fragment_len = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "fragment_layers" => self.layers.fragment = sizes(key, value)?,
            "context_layers" => self.layers.context = sizes(key, value)?,
            "shared_layers" => self.layers.shared = sizes(key, value)?,
            "char_embed_dim" => self.char_embed_dim = num(key, value)?,
            "word_embed_dim" => self.word_embed_dim = num(key, value)?,
            "conv_widths" => self.conv_widths = sizes(key, value)?,
            "conv_filters" => self.conv_filters = num(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = num(key, value)?,
            "tokenization" => self.tokenization = value.parse()?,
            "train_file" => self.train_file = path(value),
            "dev_file" => self.dev_file = path(value),
            "test_file" => self.test_file = path(value),
            "embeddings_file" => self.embeddings_file = path(value),
            "labels_file" => self.labels_file = path(value),
            "output_dir" => self.output_dir = path(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Builds a config from file pairs and overrides. A `profile` among the
    /// overrides replaces the file's profile; profiles apply before any
    /// other key.
    pub fn from_pairs(file: &[(String, String)], base: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let last_profile = |pairs: &[(String, String)]| {
            pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.clone())
        };
        let profile = last_profile(overrides).or_else(|| last_profile(file));
        if let Some(p) = &profile {
            cfg.apply_profile(p)?;
        }
        let cwd = Path::new(".");
        for (k, v) in file.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v, base)?;
        }
        for (k, v) in overrides.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v, cwd)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_pairs(&parse_pairs(&text)?, base, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        crate::fofe::ForgettingFactor::new(self.training.alpha_word)?;
        crate::fofe::ForgettingFactor::new(self.training.alpha_char)?;
        if self.max_fragment_len == 0 {
            return Err(Error::Config("max_fragment_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        if self.char_embed_dim == 0 || self.word_embed_dim == 0 || self.conv_filters == 0 || self.conv_widths.is_empty() {
            return Err(Error::Config("embedding sizes and filter counts must be positive".into()));
        }
        Ok(())
    }

    /// Renders every key, suitable for [`parse_pairs`].
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let mut out = String::new();
        if let Some(p) = &self.profile {
            let _ = writeln!(out, "# profile = {p}");
        }
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("learning_rate", t.learning_rate.to_string());
        kv("momentum", t.momentum.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("dropout", t.dropout.to_string());
        kv("decay_factor", t.decay_factor.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("alpha_word", t.alpha_word.to_string());
        kv("alpha_char", t.alpha_char.to_string());
        kv("neg_ratio", t.neg_ratio.to_string());
        kv("seed", t.seed.to_string());
        kv("max_fragment_len", self.max_fragment_len.to_string());
        kv("threshold", self.threshold.to_string());
        kv("fragment_layers", join(&self.layers.fragment));
        kv("context_layers", join(&self.layers.context));
        kv("shared_layers", join(&self.layers.shared));
        kv("char_embed_dim", self.char_embed_dim.to_string());
        kv("word_embed_dim", self.word_embed_dim.to_string());
        kv("conv_widths", join(&self.conv_widths));
        kv("conv_filters", self.conv_filters.to_string());
        kv("freeze_embeddings", self.freeze_embeddings.to_string());
        kv("tokenization", self.tokenization.to_string());
        for (k, p) in [
            ("train_file", &self.train_file),
            ("dev_file", &self.dev_file),
            ("test_file", &self.test_file),
            ("embeddings_file", &self.embeddings_file),
            ("labels_file", &self.labels_file),
            ("output_dir", &self.output_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        out
    }
}

/// Accepts `0.0625` as well as `1/16`.
fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((n, d)) => Ok(num::<f64>(key, n.trim())? / num::<f64>(key, d.trim())?),
        None => num(key, value),
    }
}
