#![allow(dead_code)]

use fofe_ner::cli::{build_model, to_dataset};
use fofe_ner::config::RunConfig;
use fofe_ner::conll::parse_conll_str;
use fofe_ner::model::NerModel;
use fofe_ner::network::{GroupedNetwork, Mode, NetworkSpec};
use fofe_ner::pipeline::Dataset;
use fofe_ner::synthetic::toy_corpus;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors, so gradients that are both
/// near zero compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;
/// Instances with a ReLU pre-activation closer than this to zero are
/// redrawn, keeping finite differences away from kinks.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn toy_data() -> (Dataset, Dataset) {
    let toy = toy_corpus();
    let train = to_dataset(&parse_conll_str(&toy.train).unwrap().documents);
    let dev = to_dataset(&parse_conll_str(&toy.dev).unwrap().documents);
    (train, dev)
}

/// The bundled toy config with paths made absolute.
pub fn toy_config() -> RunConfig {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
    RunConfig::load(&dir.join("toy.cfg"), &[]).unwrap()
}

pub fn toy_model(config: &RunConfig) -> (NerModel, Dataset, Dataset) {
    let (train, dev) = toy_data();
    let model = build_model(config, &train).unwrap();
    (model, train, dev)
}

pub struct NetInstance {
    pub net: GroupedNetwork,
    pub fragment: Array2<f64>,
    pub context: Array2<f64>,
    pub gold: Vec<usize>,
}

fn layers<R: Rng>(rng: &mut R) -> Vec<usize> {
    let n = rng.gen_range(0..=2);
    (0..n).map(|_| rng.gen_range(1..=8)).collect()
}

fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

fn min_pre_activation(inst: &NetInstance) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = inst
        .net
        .forward(&inst.fragment, &inst.context, Mode::Infer, &mut rng)
        .unwrap();
    cache
        .fragment
        .iter()
        .chain(&cache.context)
        .chain(&cache.shared)
        .flat_map(|c| c.pre.iter().copied())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// A random grouped network with every size at most 8 and a batch of at
/// most 4, redrawn until no ReLU sits within [`KINK_MARGIN`] of its kink.
pub fn random_instance(seed: u64) -> NetInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let spec = NetworkSpec {
            fragment_input: rng.gen_range(1..=8),
            context_input: rng.gen_range(1..=8),
            fragment_layers: layers(&mut rng),
            context_layers: layers(&mut rng),
            shared_layers: layers(&mut rng),
            classes: rng.gen_range(2..=8),
        };
        let mut net = GroupedNetwork::init_with(&spec, &mut rng).unwrap();
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let batch = rng.gen_range(1..=4);
        let inst = NetInstance {
            fragment: uniform(batch, spec.fragment_input, 1.0, &mut rng),
            context: uniform(batch, spec.context_input, 1.0, &mut rng),
            gold: (0..batch).map(|_| rng.gen_range(0..spec.classes)).collect(),
            net,
        };
        if min_pre_activation(&inst) > KINK_MARGIN {
            return inst;
        }
    }
}

pub struct CheckSummary {
    pub parameters: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Copy)]
enum Target {
    Weight(usize, usize, usize),
    Bias(usize, usize),
    Fragment(usize, usize),
    Context(usize, usize),
}

fn value_mut(inst: &mut NetInstance, target: Target) -> &mut f64 {
    match target {
        Target::Weight(l, r, c) => &mut inst.net.layers_mut().nth(l).unwrap().weights[[r, c]],
        Target::Bias(l, b) => &mut inst.net.layers_mut().nth(l).unwrap().bias[b],
        Target::Fragment(r, c) => &mut inst.fragment[[r, c]],
        Target::Context(r, c) => &mut inst.context[[r, c]],
    }
}

fn instance_loss(inst: &NetInstance) -> f64 {
    let probs = inst.net.predict(&inst.fragment, &inst.context).unwrap();
    fofe_ner::network::loss(&probs, &inst.gold)
}

fn central_difference(inst: &mut NetInstance, target: Target) -> f64 {
    let orig = *value_mut(inst, target);
    *value_mut(inst, target) = orig + FD_STEP;
    let up = instance_loss(inst);
    *value_mut(inst, target) = orig - FD_STEP;
    let down = instance_loss(inst);
    *value_mut(inst, target) = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Compares every weight, bias and input gradient of `inst` with central
/// finite differences.
pub fn check_network(inst: &mut NetInstance) -> CheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = inst
        .net
        .forward(&inst.fragment, &inst.context, Mode::Train { dropout: 0.0 }, &mut rng)
        .unwrap();
    let grads = inst.net.backward(&cache, &inst.gold).unwrap();

    let mut checks: Vec<(Target, f64)> = Vec::new();
    for (l, g) in grads.layers().enumerate() {
        checks.extend(g.weights.indexed_iter().map(|((r, c), v)| (Target::Weight(l, r, c), *v)));
        checks.extend(g.bias.iter().enumerate().map(|(b, v)| (Target::Bias(l, b), *v)));
    }
    checks.extend(grads.d_fragment_input.indexed_iter().map(|((r, c), v)| (Target::Fragment(r, c), *v)));
    checks.extend(grads.d_context_input.indexed_iter().map(|((r, c), v)| (Target::Context(r, c), *v)));

    let mut summary = CheckSummary {
        parameters: checks.len(),
        max_rel_error: 0.0,
    };
    for (target, analytic) in checks {
        let numeric = central_difference(inst, target);
        summary.max_rel_error = summary.max_rel_error.max(rel_error(analytic, numeric));
    }
    summary
}

/// `(sentence, start, end, probability)` of every candidate whose best
/// entity class reaches `threshold` and beats `NONE` (the last column).
pub fn oracle_survivors(predictions: &[fofe_ner::pipeline::CandidatePrediction], threshold: f64) -> Vec<(usize, usize, usize, f64)> {
    predictions
        .iter()
        .filter_map(|c| {
            let (none, entities) = c.distribution.split_last().unwrap();
            let best = entities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (best >= threshold && best >= *none).then_some((c.fragment.sentence, c.fragment.start, c.fragment.end, best))
        })
        .collect()
}

/// Largest total probability of a pairwise non-overlapping subset, by
/// exhaustive enumeration.
pub fn brute_force_best(spans: &[(usize, usize, usize, f64)]) -> f64 {
    assert!(spans.len() <= 20);
    let overlap = |a: &(usize, usize, usize, f64), b: &(usize, usize, usize, f64)| a.0 == b.0 && a.1 < b.2 && b.1 < a.2;
    let mut best = 0.0f64;
    'subsets: for mask in 0u32..(1 << spans.len()) {
        let chosen: Vec<_> = (0..spans.len()).filter(|i| mask & (1 << i) != 0).collect();
        for (x, &i) in chosen.iter().enumerate() {
            for &j in &chosen[x + 1..] {
                if overlap(&spans[i], &spans[j]) {
                    continue 'subsets;
                }
            }
        }
        best = best.max(chosen.iter().map(|&i| spans[i].3).sum());
    }
    best
}
