//! Command-line surface: `train`, `eval`, `tag`, `fofe-inspect`, `synth`
//! and `profiles`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{self, RunConfig};
use crate::conll::{self, ConllDocument};
use crate::embeddings::{self, VocabPolicy};
use crate::error::{Error, Result};
use crate::features::Sentence;
use crate::fofe::{self, ForgettingFactor, Vocabulary};
use crate::model::{self, NerModel, Tokenization};
use crate::model_io;
use crate::pipeline::{self, Dataset, Evaluation, LabelSet};
use crate::synthetic;
use crate::trainer::{self, TrainOutcome};

pub const MODEL_FILE: &str = "model.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "run.cfg";

#[derive(Parser, Debug)]
#[command(name = "fofe-ner", version, about = "FOFE-based local-detection named entity recognition")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes the best checkpoint, a JSON-lines log and the resolved config.
    Train(Box<TrainArgs>),
    /// Score a model on a column-format file.
    Eval(EvalArgs),
    /// Tag tokenized text, one entity per output line.
    Tag(TagArgs),
    /// Encode, decode or check uniqueness of FOFE codes.
    #[command(name = "fofe-inspect", subcommand)]
    FofeInspect(InspectCommand),
    /// Write the bundled toy corpus, embeddings and config to a directory.
    Synth {
        #[arg(long, short)]
        output: PathBuf,
    },
    /// List the built-in hyper-parameter profiles.
    Profiles,
}

macro_rules! config_flags {
    ($($field:ident),* $(,)?) => {
        /// One optional flag per config key.
        #[derive(Args, Debug, Clone, Default)]
        pub struct ConfigFlags {
            $(
                #[arg(long, value_name = "VALUE", help_heading = "Config keys")]
                pub $field: Option<String>,
            )*
        }

        impl ConfigFlags {
            pub fn pairs(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field).to_string(), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

config_flags!(
    profile,
    learning_rate,
    momentum,
    batch_size,
    dropout,
    decay_factor,
    max_epochs,
    patience,
    alpha_word,
    alpha_char,
    max_fragment_len,
    threshold,
    fragment_layers,
    context_layers,
    shared_layers,
    char_embed_dim,
    neg_ratio,
    seed,
    tokenization,
    word_embed_dim,
    conv_widths,
    conv_filters,
    freeze_embeddings,
    train_file,
    dev_file,
    test_file,
    embeddings_file,
    labels_file,
    output_dir,
);

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override any key; repeatable, applied after the dedicated flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Column-format file with gold tags.
    #[arg(long, short)]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One tokenized sentence per line, blank lines between documents.
    Raw,
    /// Column format; tags are ignored.
    Conll,
}

#[derive(Args, Debug)]
pub struct TagArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Input file; standard input when omitted.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "raw")]
    pub format: InputFormat,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct VocabArgs {
    /// Comma-separated vocabulary.
    #[arg(long, conflicts_with = "vocab_file")]
    pub vocab: Option<String>,
    /// One token per line.
    #[arg(long)]
    pub vocab_file: Option<PathBuf>,
    /// Token that absorbs out-of-vocabulary input; without it unknown tokens
    /// are an error.
    #[arg(long)]
    pub unknown: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum InspectCommand {
    /// Print the code of a token sequence.
    Encode {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        alpha: f64,
        /// Encode right to left.
        #[arg(long)]
        reverse: bool,
        tokens: Vec<String>,
    },
    /// Recover the token sequence of a code (alpha <= 0.5).
    Decode {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        alpha: f64,
        #[arg(allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Enumerate all sequences up to a length and report code collisions.
    Uniqueness {
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        max_len: usize,
        #[arg(long)]
        alpha: f64,
        /// Collisions to print.
        #[arg(long, default_value_t = 5)]
        show: usize,
    },
}

fn parse_set(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

/// Resolves defaults, profile, config file and overrides into one config.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut overrides = args.flags.pairs();
    overrides.extend(parse_set(&args.set)?);
    match &args.config {
        Some(path) => RunConfig::load(path, &overrides),
        None => RunConfig::from_pairs(&[], Path::new("."), &overrides),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Reads a column-format file into documents, re-tokenized per `tokenization`.
pub fn read_documents(path: &Path, tokenization: Tokenization) -> Result<Vec<ConllDocument>> {
    let parsed = conll::parse_conll(open(path)?)?;
    if !parsed.repairs.is_empty() {
        log::warn!(
            "{}: {} I- tags did not continue a span and opened new ones",
            path.display(),
            parsed.repairs.len()
        );
    }
    Ok(match tokenization {
        Tokenization::Word => parsed.documents,
        Tokenization::Character => parsed.documents.iter().map(conll::to_character_level).collect(),
    })
}

pub fn to_dataset(documents: &[ConllDocument]) -> Dataset {
    let mut data = Dataset::default();
    for d in documents {
        data.push_document(&d.id, &d.sentences, &d.entities);
    }
    data
}

pub fn load_dataset(path: &Path, tokenization: Tokenization) -> Result<Dataset> {
    Ok(to_dataset(&read_documents(path, tokenization)?))
}

/// Entity classes, one per line; `#` comments and blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<LabelSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelSet::new(
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty()),
    )
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is required")))
}

/// Builds an untrained model for `train_data` as `config` describes.
pub fn build_model(config: &RunConfig, train_data: &Dataset) -> Result<NerModel> {
    let labels = match &config.labels_file {
        Some(path) => read_labels(path)?,
        None => LabelSet::new(train_data.classes())?,
    };
    let tokens = model::corpus_tokens(&train_data.sentences);
    let seed = config.training.seed;
    let words = match &config.embeddings_file {
        Some(path) => embeddings::load_embeddings(
            path,
            &VocabPolicy {
                extra_tokens: tokens,
                seed,
                trainable: !config.freeze_embeddings,
            },
        )?,
        None => embeddings::random_embeddings(&tokens, config.word_embed_dim, seed)?,
    };
    NerModel::from_config(config, labels, words, &model::corpus_chars(&train_data.sentences))
}

pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub test: Option<Evaluation>,
}

/// Trains per `config`, writing the best checkpoint, the epoch log and the
/// resolved config to `output_dir`.
pub fn run_train(config: &RunConfig) -> Result<TrainReport> {
    let out_dir = required(&config.output_dir, "output_dir")?;
    let train_data = load_dataset(required(&config.train_file, "train_file")?, config.tokenization)?;
    let dev = load_dataset(required(&config.dev_file, "dev_file")?, config.tokenization)?;
    if dev.gold.is_empty() {
        return Err(Error::Config("the development set has no gold entities".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let model = build_model(config, &train_data)?;
    log::info!(
        "{} training sentences, {} dev sentences, {} labels, {} network parameters",
        train_data.sentences.len(),
        dev.sentences.len(),
        model.labels.len(),
        model.network.parameter_count()
    );
    let model_path = out_dir.join(MODEL_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut best: Option<f64> = None;
    let outcome = trainer::train_with(model, &train_data, &dev, &config.training, |record, model| {
        writeln!(log_file, "{}", record.to_line())?;
        log_file.flush()?;
        if best.is_none_or(|b| record.dev_f1 > b) {
            best = Some(record.dev_f1);
            model_io::save_model(model, &model_path)?;
        }
        Ok(())
    })?;
    log::info!("best dev F1 {:.4} at epoch {}", best.unwrap_or(0.0), outcome.best_epoch);

    let test = match &config.test_file {
        Some(path) => Some(trainer::evaluate_dataset(&outcome.model, &load_dataset(path, config.tokenization)?)?),
        None => None,
    };
    Ok(TrainReport {
        outcome,
        model_path,
        log_path,
        test,
    })
}

fn with_threshold(mut model: NerModel, threshold: Option<f64>) -> Result<NerModel> {
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        model.threshold = t;
    }
    Ok(model)
}

/// Splits raw lines per the model's tokenization.
fn tokenize_raw(docs: Vec<(String, Vec<Sentence>)>, tokenization: Tokenization) -> Vec<(String, Vec<Sentence>)> {
    match tokenization {
        Tokenization::Word => docs,
        Tokenization::Character => docs
            .into_iter()
            .map(|(id, sentences)| {
                let chars = sentences
                    .iter()
                    .map(|s| Sentence::new(s.tokens().iter().flat_map(|t| t.chars().map(String::from))))
                    .collect();
                (id, chars)
            })
            .collect(),
    }
}

/// Tags documents; lines are `doc, sentence, start, end, class, probability,
/// surface`, tab separated, sentence indices local to the document.
pub fn tag_documents<W: Write>(model: &NerModel, docs: &[(String, Vec<Sentence>)], out: &mut W) -> Result<usize> {
    let mut count = 0;
    for (id, sentences) in docs {
        for entity in model.tag(sentences)? {
            let sentence = &sentences[entity.span.sentence];
            let surface = sentence.surface(entity.span.start, entity.span.end);
            writeln!(out, "{}\t{}", pipeline::format_tag_line(id, &entity), surface)?;
            count += 1;
        }
    }
    Ok(count)
}

fn inspect_vocab(args: &VocabArgs) -> Result<Vocabulary> {
    let tokens: Vec<String> = match (&args.vocab, &args.vocab_file) {
        (Some(list), _) => list.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, None) => return Err(Error::Config("--vocab or --vocab-file is required".into())),
    };
    let last = tokens
        .last()
        .cloned()
        .ok_or_else(|| Error::Config("the vocabulary is empty".into()))?;
    // Without --unknown the last token is designated so no extra entry is added.
    Vocabulary::new(tokens, args.unknown.as_deref().unwrap_or(&last))
}

fn format_values(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn run_inspect<W: Write>(command: &InspectCommand, out: &mut W) -> Result<()> {
    match command {
        InspectCommand::Encode {
            vocab,
            alpha,
            reverse,
            tokens,
        } => {
            let v = inspect_vocab(vocab)?;
            if vocab.unknown.is_none() {
                if let Some(t) = tokens.iter().find(|t| !v.contains(t)) {
                    return Err(Error::UnknownLabel(format!("{t:?} is not in the vocabulary (pass --unknown)")));
                }
            }
            let alpha = ForgettingFactor::new(*alpha)?;
            let code = if *reverse {
                fofe::encode_reversed(tokens, &v, alpha)
            } else {
                fofe::encode(tokens, &v, alpha)
            };
            writeln!(out, "{}", format_values(&code.values))?;
        }
        InspectCommand::Decode { vocab, alpha, values } => {
            let v = inspect_vocab(vocab)?;
            if values.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    expected: v.len(),
                    found: values.len(),
                });
            }
            let indices = fofe::decode_indices(values, ForgettingFactor::new(*alpha)?)?;
            let tokens: Vec<&str> = indices.iter().map(|&i| v.token(i)).collect();
            writeln!(out, "{}", tokens.join(" "))?;
        }
        InspectCommand::Uniqueness {
            vocab_size,
            max_len,
            alpha,
            show,
        } => {
            let report = fofe::uniqueness_check(*vocab_size, *max_len, ForgettingFactor::new(*alpha)?);
            writeln!(out, "sequences {} collisions {}", report.total_sequences, report.collisions.len())?;
            for (a, b) in report.collisions.iter().take(*show) {
                writeln!(out, "{a:?} ~ {b:?}")?;
            }
        }
    }
    Ok(())
}

fn output_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = resolve_config(&args)?;
            if args.dry_run {
                print!("{}", config.to_text());
                return Ok(());
            }
            let report = run_train(&config)?;
            println!("model: {}", report.model_path.display());
            println!("log: {}", report.log_path.display());
            let best = &report.outcome.log[report.outcome.best_epoch];
            println!(
                "best epoch {}: dev precision {:.4} recall {:.4} f1 {:.4}",
                best.epoch, best.dev_precision, best.dev_recall, best.dev_f1
            );
            if let Some(test) = report.test {
                print!("test\n{test}");
            }
        }
        Command::Eval(args) => {
            let model = with_threshold(model_io::load_model(&args.model)?, args.threshold)?;
            let data = load_dataset(&args.data, model.tokenization)?;
            print!("{}", trainer::evaluate_dataset(&model, &data)?);
        }
        Command::Tag(args) => {
            let model = with_threshold(model_io::load_model(&args.model)?, args.threshold)?;
            let reader: Box<dyn BufRead> = match &args.input {
                Some(p) => Box::new(open(p)?),
                None => Box::new(io::stdin().lock()),
            };
            let docs = match args.format {
                InputFormat::Raw => tokenize_raw(conll::parse_raw(reader)?, model.tokenization),
                InputFormat::Conll => {
                    let parsed = conll::parse_conll(reader)?;
                    let docs = match model.tokenization {
                        Tokenization::Word => parsed.documents,
                        Tokenization::Character => parsed.documents.iter().map(conll::to_character_level).collect(),
                    };
                    docs.into_iter().map(|d| (d.id, d.sentences)).collect()
                }
            };
            let mut out = output_writer(args.output.as_deref())?;
            let n = tag_documents(&model, &docs, &mut out)?;
            out.flush()?;
            log::info!("tagged {n} entities");
        }
        Command::FofeInspect(cmd) => {
            let mut out = io::stdout().lock();
            run_inspect(&cmd, &mut out)?;
        }
        Command::Synth { output } => {
            synthetic::toy_corpus().write_to(&output)?;
            println!("wrote toy corpus to {}", output.display());
        }
        Command::Profiles => {
            for name in config::PROFILE_NAMES {
                let p = config::profile(name)?;
                let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
                println!(
                    "{name:<14} lr {:<6} fragment {:<8} context {:<12} shared {:<8} {}",
                    p.learning_rate,
                    join(&p.fragment_layers),
                    join(&p.context_layers),
                    join(&p.shared_layers),
                    p.tokenization
                );
            }
        }
    }
    Ok(())
}
