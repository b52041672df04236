//! Mini-batch SGD with classical momentum, exponential learning-rate decay
//! over the epoch budget, and early stopping on development-set F1.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{EmbeddingMatrix, SparseRows};
use crate::model::{ModelGrads, NerModel};
use crate::network::Mode;
use crate::pipeline::{self, Dataset, LabelSet, LabeledFragment};

/// Velocities below this magnitude are dropped from sparse embedding state.
const VELOCITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Ratio between the last and the first epoch's learning rate.
    pub decay_factor: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Negatives drawn per positive.
    pub neg_ratio: f64,
    pub seed: u64,
    pub alpha_word: f64,
    pub alpha_char: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.128,
            momentum: 0.9,
            batch_size: 128,
            dropout: 0.5,
            decay_factor: 1.0 / 16.0,
            max_epochs: 30,
            patience: 5,
            neg_ratio: 2.0,
            seed: 1,
            alpha_word: 0.5,
            alpha_char: 0.8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.neg_ratio.is_nan() || self.neg_ratio <= 0.0 {
            return bad("neg_ratio must be > 0");
        }
        Ok(())
    }
}

/// `lr0 * decay^(epoch / (max_epochs - 1))`: the last epoch runs at
/// `lr0 * decay`.
pub fn lr_at(epoch: usize, config: &TrainingConfig) -> f64 {
    if config.max_epochs <= 1 {
        return config.learning_rate;
    }
    let t = epoch as f64 / (config.max_epochs - 1) as f64;
    config.learning_rate * config.decay_factor.powf(t)
}

/// Momentum buffers mirroring every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub conv: Vec<(Array2<f64>, Array1<f64>)>,
    pub word_cased: SparseRows,
    pub word_uncased: SparseRows,
    pub chars: SparseRows,
}

impl OptimizerState {
    pub fn new(model: &NerModel) -> Self {
        Self {
            layers: model
                .network
                .layers()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
            conv: model
                .features
                .conv
                .banks
                .iter()
                .map(|b| (Array2::zeros(b.weights.raw_dim()), Array1::zeros(b.bias.len())))
                .collect(),
            word_cased: SparseRows::new(model.features.word_cased.dim()),
            word_uncased: SparseRows::new(model.features.word_uncased.dim()),
            chars: SparseRows::new(model.features.chars.dim()),
        }
    }
}

/// `v <- momentum * v - lr * g; theta <- theta + v` on one tensor.
pub fn momentum_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

fn update_dense2(param: &mut Array2<f64>, grad: &Array2<f64>, vel: &mut Array2<f64>, lr: f64, momentum: f64) {
    momentum_update(
        param.as_slice_mut().expect("contiguous"),
        grad.as_slice().expect("contiguous"),
        vel.as_slice_mut().expect("contiguous"),
        lr,
        momentum,
    );
}

fn update_dense1(param: &mut Array1<f64>, grad: &Array1<f64>, vel: &mut Array1<f64>, lr: f64, momentum: f64) {
    momentum_update(
        param.as_slice_mut().expect("contiguous"),
        grad.as_slice().expect("contiguous"),
        vel.as_slice_mut().expect("contiguous"),
        lr,
        momentum,
    );
}

/// Momentum on an embedding table, touching only rows with a gradient or a
/// live velocity.
fn update_table(table: &mut EmbeddingMatrix, grads: &SparseRows, vel: &mut SparseRows, lr: f64, momentum: f64) {
    if !table.trainable {
        return;
    }
    let dim = table.dim();
    let zeros = vec![0.0; dim];
    for row in grads.rows.keys() {
        vel.rows.entry(*row).or_insert_with(|| vec![0.0; dim]);
    }
    vel.rows.retain(|row, v| {
        let g = grads.get(*row).unwrap_or(&zeros);
        let mut param = table.weights.row_mut(*row);
        momentum_update(param.as_slice_mut().expect("contiguous"), g, v, lr, momentum);
        v.iter().any(|x| x.abs() >= VELOCITY_FLOOR)
    });
}

/// Applies one momentum step to every parameter tensor of `model`.
pub fn sgd_step(model: &mut NerModel, grads: &ModelGrads, state: &mut OptimizerState, lr: f64, momentum: f64) {
    for ((layer, g), (vw, vb)) in model.network.layers_mut().zip(grads.net.layers()).zip(state.layers.iter_mut()) {
        update_dense2(&mut layer.weights, &g.weights, vw, lr, momentum);
        update_dense1(&mut layer.bias, &g.bias, vb, lr, momentum);
    }
    let conv_grads = &grads.features.conv;
    for (b, bank) in model.features.conv.banks.iter_mut().enumerate() {
        let (vw, vb) = &mut state.conv[b];
        update_dense2(&mut bank.weights, &conv_grads.weights[b], vw, lr, momentum);
        update_dense1(&mut bank.bias, &conv_grads.bias[b], vb, lr, momentum);
    }
    update_table(&mut model.features.word_cased, &grads.features.word_cased, &mut state.word_cased, lr, momentum);
    update_table(&mut model.features.word_uncased, &grads.features.word_uncased, &mut state.word_uncased, lr, momentum);
    update_table(&mut model.features.chars, &grads.features.chars, &mut state.chars, lr, momentum);
}

/// Labeled candidates split into entities and `NONE` fragments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool {
    pub positives: Vec<LabeledFragment>,
    pub negatives: Vec<LabeledFragment>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<LabeledFragment>, labels: &LabelSet) -> Self {
        let (negatives, positives) = candidates.into_iter().partition(|c| c.label == labels.none_index());
        Self { positives, negatives }
    }

    pub fn from_dataset(data: &Dataset, labels: &LabelSet, max_len: usize) -> Result<Self> {
        Ok(Self::new(data.candidates(labels, max_len)?, labels))
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, i: usize) -> &LabeledFragment {
        if i < self.positives.len() {
            &self.positives[i]
        } else {
            &self.negatives[i - self.positives.len()]
        }
    }

    /// Probability of keeping a negative so that about `ratio` negatives
    /// are drawn per positive.
    fn negative_acceptance(&self, ratio: f64) -> f64 {
        if self.positives.is_empty() || self.negatives.is_empty() {
            1.0
        } else {
            (ratio * self.positives.len() as f64 / self.negatives.len() as f64).min(1.0)
        }
    }

    /// Expected number of candidates drawn in one epoch.
    pub fn epoch_size(&self, ratio: f64) -> usize {
        let negatives = (self.negatives.len() as f64 * self.negative_acceptance(ratio)).round() as usize;
        self.positives.len() + negatives
    }
}

/// Walks a shuffled pool, keeping every positive and each negative with a
/// fixed acceptance probability; reshuffles whenever the pool is exhausted.
pub struct BatchSampler<'a> {
    pool: &'a CandidatePool,
    order: Vec<usize>,
    cursor: usize,
    accept_negative: f64,
    batch_size: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new<R: Rng>(pool: &'a CandidatePool, batch_size: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(rng);
        Ok(Self {
            pool,
            order,
            cursor: 0,
            accept_negative: pool.negative_acceptance(ratio),
            batch_size: batch_size.max(1),
        })
    }

    pub fn next_batch<R: Rng>(&mut self, rng: &mut R) -> Vec<LabeledFragment> {
        let positives = self.pool.positives.len();
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            if i < positives || self.accept_negative >= 1.0 || rng.gen::<f64>() < self.accept_negative {
                batch.push(*self.pool.get(i));
            }
        }
        batch
    }
}

/// Draws one batch from a freshly shuffled pool.
pub fn sample_batch<R: Rng>(pool: &CandidatePool, config: &TrainingConfig, rng: &mut R) -> Result<Vec<LabeledFragment>> {
    Ok(BatchSampler::new(pool, config.batch_size, config.neg_ratio, rng)?.next_batch(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
}

impl EpochRecord {
    /// One JSON object per line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

pub struct TrainOutcome {
    /// Snapshot with the best development F1.
    pub model: NerModel,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Decodes `data` and scores it against its gold spans.
pub fn evaluate_dataset(model: &NerModel, data: &Dataset) -> Result<pipeline::Evaluation> {
    let predicted: Vec<_> = model.tag(&data.sentences)?.into_iter().map(|e| e.span).collect();
    Ok(pipeline::evaluate(&predicted, &data.gold))
}

pub fn train(model: NerModel, train_data: &Dataset, dev: &Dataset, config: &TrainingConfig) -> Result<TrainOutcome> {
    train_with(model, train_data, dev, config, |_, _| Ok(()))
}

/// Trains until `max_epochs` or until `patience` consecutive epochs pass
/// without a strict dev-F1 improvement. `on_epoch` sees every record and
/// the current parameters.
pub fn train_with<F>(
    mut model: NerModel,
    train_data: &Dataset,
    dev: &Dataset,
    config: &TrainingConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &NerModel) -> Result<()>,
{
    config.validate()?;
    let pool = CandidatePool::from_dataset(train_data, &model.labels, model.max_fragment_len)?;
    if pool.positives.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(&model);
    let steps = pool.epoch_size(config.neg_ratio).div_ceil(config.batch_size).max(1);
    let mode = Mode::Train {
        dropout: config.dropout,
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, NerModel)> = None;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        let mut sampler = BatchSampler::new(&pool, config.batch_size, config.neg_ratio, &mut rng)?;
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch(&mut rng);
            let (loss, grads) = model.loss_and_grads(&train_data.sentences, &batch, mode, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sgd_step(&mut model, &grads, &mut state, lr, config.momentum);
            total += loss;
        }
        let scores = evaluate_dataset(&model, dev)?;
        let record = EpochRecord {
            epoch,
            loss: total / steps as f64,
            lr,
            dev_precision: scores.precision(),
            dev_recall: scores.recall(),
            dev_f1: scores.f1(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.5} dev P {:.4} R {:.4} F1 {:.4}",
            record.loss,
            lr,
            record.dev_precision,
            record.dev_recall,
            record.dev_f1
        );
        on_epoch(&record, &model)?;
        let improved = best.as_ref().is_none_or(|(f1, _, _)| record.dev_f1 > *f1);
        log.push(record);
        if improved {
            best = Some((log[epoch].dev_f1, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, best_epoch, log })
}

/// Count of candidates per label, for logging.
pub fn label_histogram(pool: &CandidatePool, labels: &LabelSet) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for c in pool.positives.iter().chain(&pool.negatives) {
        *out.entry(labels.name(c.label).to_string()).or_default() += 1;
    }
    out
}
