mod common;

use common::{check_network, random_instance, rel_error, toy_config, toy_model, FD_STEP, FD_TOLERANCE, KINK_MARGIN};
use fofe_ner::features::Sentence;
use fofe_ner::model::NerModel;
use fofe_ner::network::Mode;
use fofe_ner::pipeline::{Dataset, LabelSet, LabeledFragment};
use fofe_ner::trainer::CandidatePool;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn network_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut inst = random_instance(1000 + seed);
        let s = check_network(&mut inst);
        assert!(s.max_rel_error < FD_TOLERANCE, "seed {seed}: {}", s.max_rel_error);
    }
}

enum Param {
    Layer { index: usize, weight: Option<(usize, usize)>, bias: Option<usize> },
    Conv { bank: usize, weight: Option<(usize, usize)>, bias: Option<usize> },
    Cased(usize, usize),
    Uncased(usize, usize),
    Chars(usize, usize),
}

fn value_mut<'a>(model: &'a mut NerModel, p: &Param) -> &'a mut f64 {
    match *p {
        Param::Layer { index, weight, bias } => {
            let l = model.network.layers_mut().nth(index).unwrap();
            match (weight, bias) {
                (Some(rc), _) => &mut l.weights[rc],
                (_, Some(b)) => &mut l.bias[b],
                _ => unreachable!(),
            }
        }
        Param::Conv { bank, weight, bias } => {
            let b = &mut model.features.conv.banks[bank];
            match (weight, bias) {
                (Some(rc), _) => &mut b.weights[rc],
                (_, Some(i)) => &mut b.bias[i],
                _ => unreachable!(),
            }
        }
        Param::Cased(r, c) => &mut model.features.word_cased.weights[[r, c]],
        Param::Uncased(r, c) => &mut model.features.word_uncased.weights[[r, c]],
        Param::Chars(r, c) => &mut model.features.chars.weights[[r, c]],
    }
}

fn batch(train: &Dataset, labels: &LabelSet, max_len: usize, seed: u64) -> Vec<LabeledFragment> {
    let pool = CandidatePool::from_dataset(train, labels, max_len).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<LabeledFragment> = pool.positives.choose_multiple(&mut rng, 3).copied().collect();
    out.extend(pool.negatives.choose_multiple(&mut rng, 3).copied());
    out
}

/// Smallest distance of any ReLU input from zero and of any max-pool winner
/// from the runner-up window, recomputed independently of the library.
fn kink_margin(model: &NerModel, sentences: &[Sentence], batch: &[LabeledFragment]) -> f64 {
    let mut margin = f64::INFINITY;
    let chars = &model.features.chars;
    let conv = &model.features.conv;
    let dim = chars.dim();
    for c in batch {
        let f = c.fragment;
        let surface = sentences[f.sentence].surface(f.start, f.end);
        let mut ids: Vec<usize> = surface.chars().map(|ch| chars.vocab.lookup(&ch.to_string())).collect();
        let pad = chars.vocab.padding_index().unwrap();
        while ids.len() < conv.config.max_width() {
            ids.push(pad);
        }
        for bank in &conv.banks {
            for filter in 0..bank.bias.len() {
                let mut values: Vec<f64> = (0..=ids.len() - bank.width)
                    .map(|start| {
                        let mut v = bank.bias[filter];
                        for k in 0..bank.width {
                            for d in 0..dim {
                                v += chars.weights[[ids[start + k], d]] * bank.weights[[k * dim + d, filter]];
                            }
                        }
                        v
                    })
                    .collect();
                values.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(values[0].abs());
                // Identical windows tie exactly and move together under any
                // perturbation, so only distinct values count.
                if let Some(next) = values.iter().find(|v| **v != values[0]) {
                    margin = margin.min(values[0] - next);
                }
            }
        }
    }
    let fragments: Vec<_> = batch.iter().map(|c| c.fragment).collect();
    let feats = model.featurize(sentences, &fragments).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = model.network.forward(&feats.fragment, &feats.context, Mode::Infer, &mut rng).unwrap();
    for layer in cache.fragment.iter().chain(&cache.context).chain(&cache.shared) {
        margin = layer.pre.iter().fold(margin, |m, v| m.min(v.abs()));
    }
    margin
}

/// Every network and filter parameter, and every coordinate of every
/// embedding row the batch touches, against central differences of the
/// batch loss.
#[test]
fn full_model_gradients_match_finite_differences() {
    let mut config = toy_config();
    config.layers.fragment = vec![5];
    config.layers.context = vec![4];
    config.layers.shared = vec![3];
    config.char_embed_dim = 3;
    config.conv_filters = 2;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut instances = 0;
    for seed in 0..50 {
        if instances == 3 {
            break;
        }
        config.training.seed = seed;
        let (mut model, train, _) = toy_model(&config);
        // Larger character rows spread the pooled windows apart.
        model.features.chars.weights *= 20.0;
        let b = batch(&train, &model.labels, model.max_fragment_len, seed);
        if kink_margin(&model, &train.sentences, &b) < KINK_MARGIN {
            continue;
        }
        instances += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = model
            .loss_and_grads(&train.sentences, &b, Mode::Train { dropout: 0.0 }, &mut rng)
            .unwrap();

        let mut params: Vec<(Param, f64)> = Vec::new();
        for (i, g) in grads.net.layers().enumerate() {
            for (rc, v) in g.weights.indexed_iter() {
                params.push((Param::Layer { index: i, weight: Some(rc), bias: None }, *v));
            }
            for (j, v) in g.bias.iter().enumerate() {
                params.push((Param::Layer { index: i, weight: None, bias: Some(j) }, *v));
            }
        }
        let conv = &grads.features.conv;
        for (k, (w, bias)) in conv.weights.iter().zip(&conv.bias).enumerate() {
            for (rc, v) in w.indexed_iter() {
                params.push((Param::Conv { bank: k, weight: Some(rc), bias: None }, *v));
            }
            for (j, v) in bias.iter().enumerate() {
                params.push((Param::Conv { bank: k, weight: None, bias: Some(j) }, *v));
            }
        }
        let f = &grads.features;
        for (row, g) in &f.word_cased.rows {
            params.extend(g.iter().enumerate().map(|(c, v)| (Param::Cased(*row, c), *v)));
        }
        for (row, g) in &f.word_uncased.rows {
            params.extend(g.iter().enumerate().map(|(c, v)| (Param::Uncased(*row, c), *v)));
        }
        for (row, g) in &f.chars.rows {
            params.extend(g.iter().enumerate().map(|(c, v)| (Param::Chars(*row, c), *v)));
        }
        assert!(!f.word_cased.rows.is_empty() && !f.chars.rows.is_empty());

        for (p, analytic) in &params {
            let orig = *value_mut(&mut model, p);
            *value_mut(&mut model, p) = orig + FD_STEP;
            let up = model.batch_loss(&train.sentences, &b).unwrap();
            *value_mut(&mut model, p) = orig - FD_STEP;
            let down = model.batch_loss(&train.sentences, &b).unwrap();
            *value_mut(&mut model, p) = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(*analytic, numeric));
        }
        checked += params.len();
    }
    assert_eq!(instances, 3, "too few instances clear of kinks");
    assert!(checked > 1000);
    assert!(worst < FD_TOLERANCE, "max relative error {worst}");
}
