//! Named parameter storage and deterministic initialization.
//!
//! Names are stable and double as checkpoint keys:
//!
//! | prefix | contents |
//! |---|---|
//! | `audio_enc.{1..10}` / `video_enc.{1..10}` | `conv.weight`, `conv.bias`, `bn.gamma`, `bn.beta` |
//! | `fusion.{i}` | `ca.m_conv.*`, `ca.fc1.*`, `ca.fc2.*`, `ca.n_conv.*`, `sa.conv1.*`, `sa.conv2.*` |
//! | `bottleneck` | `sa.conv1.*`, `sa.conv2.*`, `lstm.{1,2}.{w_ih,w_hh,bias}` |
//! | `decoder.{1..10}` | `skip.*` or `fusion.*` (strategy dependent), `deconv.*`, `bn.*` |
//!
//! Batch-norm running statistics live next to the weights under the same
//! `….bn` prefix.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::schedule::{Architecture, Branch, FusionStrategy, LAYERS};
use crate::scalar::Scalar;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    /// LSTM bias: zero except the forget-gate block, which is one.
    LstmBias { hidden: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Trainable tensors keyed by name, in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundParams {
        BoundParams { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v))).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds names to variables that are already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Running statistics for every batch-norm layer, keyed by layer prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStore<T: Scalar> {
    stats: IndexMap<String, RunningStats<T>>,
}

impl<T: Scalar> BnStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, s: RunningStats<T>) {
        self.stats.insert(name.into(), s);
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.stats.get_mut(name).ok_or_else(|| Error::MissingParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.stats.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> BnStore<U> {
        BnStore {
            stats: self
                .stats
                .iter()
                .map(|(k, s)| (k.clone(), RunningStats { mean: s.mean.cast(), var: s.var.cast() }))
                .collect(),
        }
    }
}

/// Every learned and running quantity of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct MffcnParams<T: Scalar> {
    pub weights: ParamStore<T>,
    pub running: BnStore<T>,
}

impl<T: Scalar> MffcnParams<T> {
    pub fn cast<U: Scalar>(&self) -> MffcnParams<U> {
        MffcnParams { weights: self.weights.cast(), running: self.running.cast() }
    }
}

fn conv_params(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: (usize, usize)) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        dims: vec![cout, cin, k.0, k.1],
        init: Init::Uniform { fan_in: cin * k.0 * k.1 },
    });
    out.push(ParamSpec { name: format!("{prefix}.bias"), dims: vec![cout], init: Init::Zeros });
}

fn fc_params(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize) {
    out.push(ParamSpec { name: format!("{prefix}.weight"), dims: vec![cout, cin], init: Init::Uniform { fan_in: cin } });
    out.push(ParamSpec { name: format!("{prefix}.bias"), dims: vec![cout], init: Init::Zeros });
}

fn bn_params(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec { name: format!("{prefix}.gamma"), dims: vec![c], init: Init::Ones });
    out.push(ParamSpec { name: format!("{prefix}.beta"), dims: vec![c], init: Init::Zeros });
}

/// Parameters of one channel + spectral attention fusion block on `c` channels.
pub fn fusion_block_params(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    conv_params(out, &format!("{prefix}.ca.m_conv"), c, 2 * c, (1, 1));
    fc_params(out, &format!("{prefix}.ca.fc1"), c, c);
    fc_params(out, &format!("{prefix}.ca.fc2"), c, c);
    conv_params(out, &format!("{prefix}.ca.n_conv"), c, 2 * c, (1, 1));
    spectral_params(out, &format!("{prefix}.sa"), c);
}

pub fn spectral_params(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    conv_params(out, &format!("{prefix}.conv1"), c, c, (1, 1));
    conv_params(out, &format!("{prefix}.conv2"), c, c, (1, 1));
}

pub fn lstm_params(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    out.push(ParamSpec { name: format!("{prefix}.w_ih"), dims: vec![4 * hidden, input], init: Init::Uniform { fan_in: input } });
    out.push(ParamSpec { name: format!("{prefix}.w_hh"), dims: vec![4 * hidden, hidden], init: Init::Uniform { fan_in: hidden } });
    out.push(ParamSpec { name: format!("{prefix}.bias"), dims: vec![4 * hidden], init: Init::LstmBias { hidden } });
}

/// Encoder layers that own a fusion block (encoder-side strategies).
pub fn encoder_fusion_layers(strategy: FusionStrategy) -> Vec<usize> {
    match strategy {
        FusionStrategy::MultiLayer => (1..=LAYERS).collect(),
        FusionStrategy::EarlyFusion => vec![1],
        FusionStrategy::LateFusion | FusionStrategy::IntermediateBottleneck => vec![LAYERS],
        FusionStrategy::IntermediateDecoder => vec![],
    }
}

impl Architecture {
    /// Complete ordered parameter layout for this topology.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let video_layers = self.video_layers();
        for (branch, prefix, layers) in [(Branch::Audio, "audio_enc", LAYERS), (Branch::Video, "video_enc", video_layers)] {
            for l in 1..=layers {
                let spec = self.conv_spec(branch, l);
                conv_params(&mut out, &format!("{prefix}.{l}.conv"), spec.out_channels, self.channels(branch, l - 1), spec.kernel);
                bn_params(&mut out, &format!("{prefix}.{l}.bn"), spec.out_channels);
            }
        }
        for l in encoder_fusion_layers(self.strategy) {
            fusion_block_params(&mut out, &format!("fusion.{l}"), self.channels(Branch::Audio, l));
        }
        let c = self.channels(Branch::Audio, LAYERS);
        spectral_params(&mut out, "bottleneck.sa", c);
        lstm_params(&mut out, "bottleneck.lstm.1", c, c);
        lstm_params(&mut out, "bottleneck.lstm.2", c, c);
        for j in 1..=LAYERS {
            let e = LAYERS + 1 - j;
            let ce = self.channels(Branch::Audio, e);
            let prefix = format!("decoder.{j}");
            if self.has_skips() {
                conv_params(&mut out, &format!("{prefix}.skip"), ce, 2 * ce, (1, 1));
            }
            if self.strategy == FusionStrategy::IntermediateDecoder {
                fusion_block_params(&mut out, &format!("{prefix}.fusion"), ce);
            }
            let spec = self.conv_spec(Branch::Audio, e);
            let cout = self.channels(Branch::Audio, e - 1);
            let fan_in = (ce * spec.kernel.0 * spec.kernel.1).div_ceil(spec.stride.0 * spec.stride.1);
            out.push(ParamSpec {
                name: format!("{prefix}.deconv.weight"),
                dims: vec![ce, cout, spec.kernel.0, spec.kernel.1],
                init: Init::Uniform { fan_in },
            });
            out.push(ParamSpec { name: format!("{prefix}.deconv.bias"), dims: vec![cout], init: Init::Zeros });
            if j < LAYERS {
                bn_params(&mut out, &format!("{prefix}.bn"), cout);
            }
        }
        out
    }

    /// Batch-norm layer prefixes and channel counts, in layout order.
    pub fn bn_layout(&self) -> Vec<(String, usize)> {
        self.param_layout()
            .into_iter()
            .filter_map(|p| p.name.strip_suffix(".gamma").map(|n| (n.to_string(), p.dims[0])))
            .collect()
    }

    /// Deterministic initialization from a 64-bit seed. Values are drawn in
    /// `f64` and rounded, so `f32` and `f64` builds share the same parameters
    /// up to rounding.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> MffcnParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamStore::new();
        for p in self.param_layout() {
            let t = match p.init {
                Init::Uniform { fan_in } => Tensor::<f64>::uniform(&p.dims, (6.0 / fan_in as f64).sqrt(), &mut rng).cast(),
                Init::Zeros => Tensor::zeros(&p.dims),
                Init::Ones => Tensor::ones(&p.dims),
                Init::LstmBias { hidden } => {
                    let mut t = Tensor::zeros(&p.dims);
                    t.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
                    t
                }
            };
            weights.insert(p.name, t.with_grad());
        }
        let mut running = BnStore::default();
        for (name, c) in self.bn_layout() {
            running.insert(name, RunningStats::new(c));
        }
        MffcnParams { weights, running }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let arch = Architecture::new(FusionStrategy::MultiLayer, 16).unwrap();
        let a = arch.init_params::<f32>(7);
        let b = arch.init_params::<f32>(7);
        assert_eq!(a, b);
        let c = arch.init_params::<f32>(8);
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn init_respects_bounds_and_constants() {
        let arch = Architecture::new(FusionStrategy::MultiLayer, 16).unwrap();
        let p = arch.init_params::<f64>(3);
        for spec in arch.param_layout() {
            let t = p.weights.get(&spec.name).unwrap();
            assert_eq!(t.dims(), spec.dims.as_slice());
            match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() <= bound), "{}", spec.name);
                }
                Init::Zeros => assert!(t.data().iter().all(|&v| v == 0.0)),
                Init::Ones => assert!(t.data().iter().all(|&v| v == 1.0)),
                Init::LstmBias { hidden } => {
                    assert!(t.data()[hidden..2 * hidden].iter().all(|&v| v == 1.0));
                    assert_eq!(t.sum_f64(), hidden as f64);
                }
            }
        }
    }

    #[test]
    fn fusion_block_counts_per_strategy() {
        for s in FusionStrategy::ALL {
            let arch = Architecture::new(s, 16).unwrap();
            let blocks = arch
                .param_layout()
                .iter()
                .filter(|p| p.name.ends_with("ca.fc1.weight"))
                .count();
            assert_eq!(blocks, arch.fusion_block_count(), "{s}");
        }
    }

    #[test]
    fn fusion_fc_layers_are_square() {
        let arch = Architecture::new(FusionStrategy::MultiLayer, 8).unwrap();
        for p in arch.param_layout() {
            if p.name.contains(".fc") && p.name.ends_with("weight") {
                assert_eq!(p.dims[0], p.dims[1], "{}", p.name);
            }
        }
    }

    #[test]
    fn multilayer_has_more_parameters_than_late() {
        let count = |s| {
            let a = Architecture::new(s, 1).unwrap();
            a.param_layout().iter().map(|p| p.dims.iter().product::<usize>()).sum::<usize>()
        };
        let multi = count(FusionStrategy::MultiLayer);
        let late = count(FusionStrategy::LateFusion);
        assert!(multi > late);
    }
}
