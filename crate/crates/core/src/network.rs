//! Grouped feed-forward classifier.
//!
//! The fragment group and the context group each pass through their own
//! stack of ReLU layers. The two stack outputs are concatenated and fed to
//! the shared stack, followed by a linear layer and a softmax over classes.
//! Forward and backward passes are written out by hand.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Fully connected layer `act(x W + b)`, `W` is `input x output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

impl Dense {
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        Self {
            weights: glorot(spec.input, spec.output, rng),
            bias: Array1::zeros(spec.output),
            spec,
        }
    }

    fn pre_activation(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        input.dot(&self.weights) + &self.bias
    }
}

/// Layer sizes of every stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub fragment_input: usize,
    pub context_input: usize,
    pub fragment_layers: Vec<usize>,
    pub context_layers: Vec<usize>,
    pub shared_layers: Vec<usize>,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fragment_input, self.context_input, self.classes]
            .into_iter()
            .chain(self.fragment_layers.iter().copied())
            .chain(self.context_layers.iter().copied())
            .chain(self.shared_layers.iter().copied());
        for d in all {
            if d == 0 {
                return Err(Error::Config("layer sizes and class count must be positive".into()));
            }
        }
        Ok(())
    }
}

fn stack_specs(input: usize, sizes: &[usize]) -> Vec<LayerSpec> {
    let mut at = input;
    sizes
        .iter()
        .map(|&out| {
            let spec = LayerSpec {
                input: at,
                output: out,
                activation: Activation::Relu,
            };
            at = out;
            spec
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedNetwork {
    spec: NetworkSpec,
    pub fragment: Vec<Dense>,
    pub context: Vec<Dense>,
    pub shared: Vec<Dense>,
    pub output: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Inverted dropout with drop probability `dropout` on every hidden layer output.
    Train { dropout: f64 },
    Infer,
}

/// Per-layer values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    /// Entries are `0` or `1 / (1 - p)`.
    pub mask: Option<Array2<f64>>,
}

impl LayerCache {
    /// Layer output after activation and dropout.
    pub fn activation(&self) -> Array2<f64> {
        let mut a = self.pre.mapv(|v| v.max(0.0));
        if let Some(mask) = &self.mask {
            a *= mask;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub fragment: Vec<LayerCache>,
    pub context: Vec<LayerCache>,
    pub shared: Vec<LayerCache>,
    pub output_input: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.probs.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// `dL/dθ` for every layer plus the gradients reaching both input groups.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub fragment: Vec<DenseGrad>,
    pub context: Vec<DenseGrad>,
    pub shared: Vec<DenseGrad>,
    pub output: DenseGrad,
    pub d_fragment_input: Array2<f64>,
    pub d_context_input: Array2<f64>,
}

impl NetGrads {
    /// Layer gradients in the same order as [`GroupedNetwork::layers`].
    pub fn layers(&self) -> impl Iterator<Item = &DenseGrad> {
        self.fragment
            .iter()
            .chain(&self.context)
            .chain(&self.shared)
            .chain(std::iter::once(&self.output))
    }

    pub fn norm_squared(&self) -> f64 {
        self.layers()
            .map(|g| g.weights.iter().chain(&g.bias).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean categorical cross-entropy of `gold` under `probs`. NaN
/// probabilities propagate instead of being clamped.
pub fn loss(probs: &Array2<f64>, gold: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), gold.len(), "prediction and label counts differ");
    if gold.is_empty() {
        return 0.0;
    }
    let total: f64 = gold
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[[i, y]];
            if p.is_nan() {
                f64::NAN
            } else {
                -p.max(PROB_FLOOR).ln()
            }
        })
        .sum();
    total / gold.len() as f64
}

fn dropout_mask<R: Rng>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { scale } else { 0.0 })
}

impl GroupedNetwork {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut stack = |input, sizes: &[usize]| -> Vec<Dense> {
            stack_specs(input, sizes).into_iter().map(|s| Dense::init(s, rng)).collect()
        };
        let fragment = stack(spec.fragment_input, &spec.fragment_layers);
        let context = stack(spec.context_input, &spec.context_layers);
        let frag_out = spec.fragment_layers.last().copied().unwrap_or(spec.fragment_input);
        let ctx_out = spec.context_layers.last().copied().unwrap_or(spec.context_input);
        let shared = stack(frag_out + ctx_out, &spec.shared_layers);
        let out_in = spec.shared_layers.last().copied().unwrap_or(frag_out + ctx_out);
        let output = Dense::init(
            LayerSpec {
                input: out_in,
                output: spec.classes,
                activation: Activation::Identity,
            },
            rng,
        );
        Ok(Self {
            spec: spec.clone(),
            fragment,
            context,
            shared,
            output,
        })
    }

    /// Reassembles a network from stored layers; shapes must agree with `spec`.
    pub fn from_parts(
        spec: NetworkSpec,
        fragment: Vec<Dense>,
        context: Vec<Dense>,
        shared: Vec<Dense>,
        output: Dense,
    ) -> Result<Self> {
        let template = Self::init_with(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let same = |a: &[Dense], b: &[Dense]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.spec == y.spec && x.weights.dim() == y.weights.dim() && x.bias.len() == y.bias.len()
                })
        };
        if !same(&template.fragment, &fragment)
            || !same(&template.context, &context)
            || !same(&template.shared, &shared)
            || !same(std::slice::from_ref(&template.output), std::slice::from_ref(&output))
        {
            return Err(Error::ModelFormat("layer shapes do not match the network spec".into()));
        }
        Ok(Self {
            spec,
            fragment,
            context,
            shared,
            output,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.output.spec.output
    }

    pub fn fragment_input_dim(&self) -> usize {
        self.spec.fragment_input
    }

    pub fn context_input_dim(&self) -> usize {
        self.spec.context_input
    }

    /// Every layer: fragment stack, context stack, shared stack, output.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.fragment
            .iter()
            .chain(&self.context)
            .chain(&self.shared)
            .chain(std::iter::once(&self.output))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.fragment
            .iter_mut()
            .chain(self.context.iter_mut())
            .chain(self.shared.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn run_stack<R: Rng>(
        layers: &[Dense],
        input: Array2<f64>,
        mode: Mode,
        rng: &mut R,
        caches: &mut Vec<LayerCache>,
    ) -> Array2<f64> {
        let mut x = input;
        for layer in layers {
            let pre = layer.pre_activation(&x.view());
            let mut a = pre.mapv(|v| v.max(0.0));
            let mask = match mode {
                Mode::Train { dropout } if dropout > 0.0 => {
                    let m = dropout_mask(a.dim(), dropout, rng);
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            caches.push(LayerCache { input: x, pre, mask });
            x = a;
        }
        x
    }

    fn check_inputs(&self, fragment: &Array2<f64>, context: &Array2<f64>) -> Result<()> {
        let spec = &self.spec;
        if fragment.ncols() != spec.fragment_input {
            return Err(Error::DimensionMismatch {
                expected: spec.fragment_input,
                found: fragment.ncols(),
            });
        }
        if context.ncols() != spec.context_input {
            return Err(Error::DimensionMismatch {
                expected: spec.context_input,
                found: context.ncols(),
            });
        }
        if fragment.nrows() != context.nrows() {
            return Err(Error::DimensionMismatch {
                expected: fragment.nrows(),
                found: context.nrows(),
            });
        }
        Ok(())
    }

    /// Class distributions for a batch (one row per candidate) plus the
    /// cache needed by [`GroupedNetwork::backward`].
    pub fn forward<R: Rng>(
        &self,
        fragment: &Array2<f64>,
        context: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(fragment, context)?;
        let mut frag_cache = Vec::with_capacity(self.fragment.len());
        let mut ctx_cache = Vec::with_capacity(self.context.len());
        let mut shared_cache = Vec::with_capacity(self.shared.len());
        let f = Self::run_stack(&self.fragment, fragment.clone(), mode, rng, &mut frag_cache);
        let c = Self::run_stack(&self.context, context.clone(), mode, rng, &mut ctx_cache);
        let merged = concatenate(Axis(1), &[f.view(), c.view()]).expect("row counts checked");
        let h = Self::run_stack(&self.shared, merged, mode, rng, &mut shared_cache);
        let probs = softmax_rows(&self.output.pre_activation(&h.view()));
        Ok((
            probs.clone(),
            ForwardCache {
                fragment: frag_cache,
                context: ctx_cache,
                shared: shared_cache,
                output_input: h,
                probs,
            },
        ))
    }

    /// Inference-mode forward pass; no dropout, no cache.
    pub fn predict(&self, fragment: &Array2<f64>, context: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(fragment, context)?;
        let mut x = fragment.clone();
        for l in &self.fragment {
            x = l.pre_activation(&x.view()).mapv(|v| v.max(0.0));
        }
        let mut y = context.clone();
        for l in &self.context {
            y = l.pre_activation(&y.view()).mapv(|v| v.max(0.0));
        }
        let mut h = concatenate(Axis(1), &[x.view(), y.view()]).expect("row counts checked");
        for l in &self.shared {
            h = l.pre_activation(&h.view()).mapv(|v| v.max(0.0));
        }
        Ok(softmax_rows(&self.output.pre_activation(&h.view())))
    }

    fn back_stack(layers: &[Dense], caches: &[LayerCache], d_out: Array2<f64>) -> (Vec<DenseGrad>, Array2<f64>) {
        let mut grads = Vec::with_capacity(layers.len());
        let mut d = d_out;
        for (layer, cache) in layers.iter().zip(caches).rev() {
            if let Some(mask) = &cache.mask {
                d *= mask;
            }
            d.zip_mut_with(&cache.pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            grads.push(DenseGrad {
                weights: cache.input.t().dot(&d),
                bias: d.sum_axis(Axis(0)),
            });
            d = d.dot(&layer.weights.t());
        }
        grads.reverse();
        (grads, d)
    }

    /// Gradients of the mean cross-entropy for `gold` given a training cache.
    pub fn backward(&self, cache: &ForwardCache, gold: &[usize]) -> Result<NetGrads> {
        let batch = cache.batch();
        if gold.len() != batch {
            return Err(Error::StaleCache(format!(
                "{} labels for a batch of {batch}",
                gold.len()
            )));
        }
        if cache.fragment.len() != self.fragment.len()
            || cache.context.len() != self.context.len()
            || cache.shared.len() != self.shared.len()
            || cache.probs.ncols() != self.classes()
        {
            return Err(Error::StaleCache("cache shape differs from the network".into()));
        }
        if let Some(&y) = gold.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::StaleCache(format!("label {y} out of range")));
        }

        // Softmax + cross-entropy: dL/dz = (p - onehot) / batch.
        let mut d_logits = cache.probs.clone();
        for (i, &y) in gold.iter().enumerate() {
            d_logits[[i, y]] -= 1.0;
        }
        d_logits /= batch as f64;

        let output = DenseGrad {
            weights: cache.output_input.t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        };
        let d_h = d_logits.dot(&self.output.weights.t());
        let (shared, d_merged) = Self::back_stack(&self.shared, &cache.shared, d_h);

        let split = self
            .fragment
            .last()
            .map(|l| l.spec.output)
            .unwrap_or_else(|| self.fragment_input_dim());
        let d_frag_out = d_merged.slice(s![.., ..split]).to_owned();
        let d_ctx_out = d_merged.slice(s![.., split..]).to_owned();
        let (fragment, d_fragment_input) = Self::back_stack(&self.fragment, &cache.fragment, d_frag_out);
        let (context, d_context_input) = Self::back_stack(&self.context, &cache.context, d_ctx_out);

        Ok(NetGrads {
            fragment,
            context,
            shared,
            output,
            d_fragment_input,
            d_context_input,
        })
    }

    /// Zero gradients shaped like this network.
    pub fn zero_grads(&self, batch: usize) -> NetGrads {
        NetGrads {
            fragment: self.fragment.iter().map(DenseGrad::zeros_like).collect(),
            context: self.context.iter().map(DenseGrad::zeros_like).collect(),
            shared: self.shared.iter().map(DenseGrad::zeros_like).collect(),
            output: DenseGrad::zeros_like(&self.output),
            d_fragment_input: Array2::zeros((batch, self.fragment_input_dim())),
            d_context_input: Array2::zeros((batch, self.context_input_dim())),
        }
    }
}
