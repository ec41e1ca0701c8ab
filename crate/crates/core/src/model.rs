//! Shared feature extractor plus a bank of domain-specific linear heads.
//!
//! Every trainable scalar is addressed by a [`ParamKey`]. Keys are grouped
//! into [`ParamGroup`]s so optimizers can update a subset (for test-time
//! adaptation only the batch-norm affine parameters move).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{batchnorm_forward, BatchNormState, BatchStats, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Offset added to the model seed for head `d`'s initialization stream.
pub const HEAD_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Source domain each head is trained on. Several heads may share an
    /// owner (paired or single-source mode).
    pub head_owners: Vec<usize>,
}

impl Architecture {
    /// One head per source domain.
    pub fn per_domain(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
        num_domains: usize,
        heads_per_domain: usize,
    ) -> Self {
        let head_owners = (0..num_domains)
            .flat_map(|d| std::iter::repeat_n(d, heads_per_domain))
            .collect();
        Self {
            input_dim,
            hidden_dims,
            feature_dim,
            num_classes,
            head_owners,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.head_owners.len()
    }

    pub fn num_domains(&self) -> usize {
        self.head_owners.iter().max().map_or(0, |m| m + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.feature_dim == 0
            || self.num_classes == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::Config("all layer widths must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.num_heads() < 2 {
            return Err(Error::Config(
                "need at least two classifier heads; disagreement is undefined with one".into(),
            ));
        }
        Ok(())
    }
}

/// affine → batch-norm → (ReLU on hidden layers).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBnLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNormState,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<DenseBnLayer>,
}

impl FeatureExtractor {
    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bn.width())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    pub heads: Vec<Head>,
    pub owners: Vec<usize>,
}

impl ClassifierBank {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Heads not trained on `domain`.
    pub fn heads_excluding(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&h| self.owners[h] != domain)
            .collect()
    }

    /// Heads trained on `domain`.
    pub fn heads_owned_by(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&h| self.owners[h] == domain)
            .collect()
    }
}

/// Address of one trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    LayerWeight(usize),
    LayerBias(usize),
    BnScale(usize),
    BnShift(usize),
    HeadWeight(usize),
    HeadBias(usize),
}

impl ParamKey {
    pub fn is_bn_affine(self) -> bool {
        matches!(self, ParamKey::BnScale(_) | ParamKey::BnShift(_))
    }

    pub fn is_extractor(self) -> bool {
        !matches!(self, ParamKey::HeadWeight(_) | ParamKey::HeadBias(_))
    }

    pub fn head(self) -> Option<usize> {
        match self {
            ParamKey::HeadWeight(h) | ParamKey::HeadBias(h) => Some(h),
            _ => None,
        }
    }

    /// Name of the disjoint partition this key belongs to:
    /// `extractor_dense`, `extractor_bn_affine` or `head_<d>`.
    pub fn partition(self) -> String {
        match self {
            ParamKey::LayerWeight(_) | ParamKey::LayerBias(_) => "extractor_dense".into(),
            ParamKey::BnScale(_) | ParamKey::BnShift(_) => "extractor_bn_affine".into(),
            ParamKey::HeadWeight(h) | ParamKey::HeadBias(h) => format!("head_{h}"),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::LayerWeight(l) => write!(f, "extractor.{l}.weight"),
            ParamKey::LayerBias(l) => write!(f, "extractor.{l}.bias"),
            ParamKey::BnScale(l) => write!(f, "extractor.{l}.bn.scale"),
            ParamKey::BnShift(l) => write!(f, "extractor.{l}.bn.shift"),
            ParamKey::HeadWeight(h) => write!(f, "head.{h}.weight"),
            ParamKey::HeadBias(h) => write!(f, "head.{h}.bias"),
        }
    }
}

/// Named parameter subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ExtractorAll,
    ExtractorBnAffine,
    Head(usize),
}

impl ParamGroup {
    pub fn contains(self, key: ParamKey) -> bool {
        match self {
            ParamGroup::ExtractorAll => key.is_extractor(),
            ParamGroup::ExtractorBnAffine => key.is_bn_affine(),
            ParamGroup::Head(h) => key.head() == Some(h),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::ExtractorAll => f.write_str("extractor_all"),
            ParamGroup::ExtractorBnAffine => f.write_str("extractor_bn_affine"),
            ParamGroup::Head(h) => write!(f, "head_{h}"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extractor_all" => Ok(ParamGroup::ExtractorAll),
            "extractor_bn_affine" => Ok(ParamGroup::ExtractorBnAffine),
            _ => s
                .strip_prefix("head_")
                .and_then(|d| d.parse().ok())
                .map(ParamGroup::Head)
                .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`"))),
        }
    }
}

/// Tape handles for every parameter of a model, aligned with
/// [`Model::param_keys`].
pub struct Binding {
    keys: Vec<ParamKey>,
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, key: ParamKey) -> Var {
        let i = self
            .keys
            .iter()
            .position(|&k| k == key)
            .expect("binding covers every model parameter");
        self.vars[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        self.keys.iter().copied().zip(self.vars.iter().copied())
    }
}

/// One gradient tensor per model parameter, aligned with
/// [`Model::param_keys`]. Parameters that received no gradient hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    keys: Vec<ParamKey>,
    grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(model: &Model) -> Self {
        let keys = model.param_keys();
        let grads = keys
            .iter()
            .map(|&k| Tensor::zeros(&model.param_shape(k)))
            .collect();
        Self { keys, grads }
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        let i = self
            .keys
            .iter()
            .position(|&k| k == key)
            .expect("gradient set covers every model parameter");
        &self.grads[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.keys.iter().copied().zip(self.grads.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub extractor: FeatureExtractor,
    pub bank: ClassifierBank,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// Builds the extractor and `num_heads` heads, one owned by each domain.
pub fn build_model(
    input_dim: usize,
    hidden_dims: &[usize],
    feature_dim: usize,
    num_classes: usize,
    num_heads: usize,
    seed: u64,
) -> Result<Model> {
    let arch = Architecture::per_domain(
        input_dim,
        hidden_dims.to_vec(),
        feature_dim,
        num_classes,
        num_heads,
        1,
    );
    Model::new(arch, seed)
}

impl Model {
    /// Deterministic He-uniform initialization from `seed`; head `d` draws
    /// from seed `seed + HEAD_SEED_OFFSET + d`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = std::iter::once(arch.input_dim)
            .chain(arch.hidden_dims.iter().copied())
            .chain(std::iter::once(arch.feature_dim))
            .collect();
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| DenseBnLayer {
                weight: he_uniform(&mut rng, w[0], w[1]),
                bias: Tensor::zeros(&[w[1]]),
                bn: BatchNormState::new(w[1]),
                relu: l + 1 < n_layers,
            })
            .collect();
        let heads = (0..arch.num_heads())
            .map(|d| {
                let mut hr = ChaCha8Rng::seed_from_u64(seed + HEAD_SEED_OFFSET + d as u64);
                Head {
                    weight: he_uniform(&mut hr, arch.feature_dim, arch.num_classes),
                    bias: Tensor::zeros(&[arch.num_classes]),
                }
            })
            .collect();
        Ok(Self {
            bank: ClassifierBank {
                heads,
                owners: arch.head_owners.clone(),
            },
            extractor: FeatureExtractor { layers },
            arch,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.bank.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Every parameter key in canonical order: extractor layers first, then
    /// heads.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for l in 0..self.extractor.layers.len() {
            keys.extend([
                ParamKey::LayerWeight(l),
                ParamKey::LayerBias(l),
                ParamKey::BnScale(l),
                ParamKey::BnShift(l),
            ]);
        }
        for h in 0..self.num_heads() {
            keys.extend([ParamKey::HeadWeight(h), ParamKey::HeadBias(h)]);
        }
        keys
    }

    /// Members of `group`, in canonical order.
    pub fn select_params(&self, group: ParamGroup) -> Result<Vec<ParamKey>> {
        if let ParamGroup::Head(h) = group {
            if h >= self.num_heads() {
                return Err(Error::Config(format!(
                    "unknown parameter group `{group}` ({} heads)",
                    self.num_heads()
                )));
            }
        }
        Ok(self
            .param_keys()
            .into_iter()
            .filter(|&k| group.contains(k))
            .collect())
    }

    /// Like [`Model::select_params`] but from a group name such as
    /// `extractor_bn_affine` or `head_2`.
    pub fn select_params_by_name(&self, name: &str) -> Result<Vec<ParamKey>> {
        self.select_params(name.parse()?)
    }

    pub fn param(&self, key: ParamKey) -> &[f64] {
        match key {
            ParamKey::LayerWeight(l) => self.extractor.layers[l].weight.data(),
            ParamKey::LayerBias(l) => self.extractor.layers[l].bias.data(),
            ParamKey::BnScale(l) => &self.extractor.layers[l].bn.scale,
            ParamKey::BnShift(l) => &self.extractor.layers[l].bn.shift,
            ParamKey::HeadWeight(h) => self.bank.heads[h].weight.data(),
            ParamKey::HeadBias(h) => self.bank.heads[h].bias.data(),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut [f64] {
        match key {
            ParamKey::LayerWeight(l) => self.extractor.layers[l].weight.data_mut(),
            ParamKey::LayerBias(l) => self.extractor.layers[l].bias.data_mut(),
            ParamKey::BnScale(l) => &mut self.extractor.layers[l].bn.scale,
            ParamKey::BnShift(l) => &mut self.extractor.layers[l].bn.shift,
            ParamKey::HeadWeight(h) => self.bank.heads[h].weight.data_mut(),
            ParamKey::HeadBias(h) => self.bank.heads[h].bias.data_mut(),
        }
    }

    pub fn param_shape(&self, key: ParamKey) -> Vec<usize> {
        match key {
            ParamKey::LayerWeight(l) => self.extractor.layers[l].weight.shape().to_vec(),
            ParamKey::LayerBias(l) => self.extractor.layers[l].bias.shape().to_vec(),
            ParamKey::BnScale(l) | ParamKey::BnShift(l) => {
                vec![self.extractor.layers[l].bn.width()]
            }
            ParamKey::HeadWeight(h) => self.bank.heads[h].weight.shape().to_vec(),
            ParamKey::HeadBias(h) => self.bank.heads[h].bias.shape().to_vec(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_keys().iter().map(|&k| self.param(k).len()).sum()
    }

    /// Records every parameter on `tape`; keys for which `trainable` is false
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamKey) -> bool) -> Binding {
        let keys = self.param_keys();
        let vars = keys
            .iter()
            .map(|&k| {
                let t = Tensor::new(self.param_shape(k), self.param(k).to_vec())
                    .expect("parameter shape matches data");
                if trainable(k) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Binding { keys, vars }
    }

    /// Collects gradients for every bound parameter.
    pub fn collect_grads(&self, grads: &crate::diffnet::Gradients, binding: &Binding) -> GradSet {
        let mut set = GradSet::zeros_like(self);
        for (i, (key, var)) in binding.iter().enumerate() {
            debug_assert_eq!(set.keys[i], key);
            if let Some(g) = grads.get(var) {
                set.grads[i] = g.clone();
            }
        }
        set
    }

    /// Extractor forward. Returns features and, in train mode, the batch
    /// statistics observed at each layer.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let xv = tape.value(x);
        if xv.cols() != self.arch.input_dim {
            return Err(Error::Dimension {
                op: "forward_features",
                left: xv.shape().to_vec(),
                right: vec![self.arch.input_dim],
            });
        }
        let mut h = x;
        let mut stats = Vec::new();
        for (l, layer) in self.extractor.layers.iter().enumerate() {
            let z = tape.affine(
                h,
                binding.var(ParamKey::LayerWeight(l)),
                binding.var(ParamKey::LayerBias(l)),
            )?;
            let (n, st) = batchnorm_forward(
                tape,
                z,
                binding.var(ParamKey::BnScale(l)),
                binding.var(ParamKey::BnShift(l)),
                &layer.bn,
                mode,
            )?;
            stats.extend(st);
            h = if layer.relu { tape.relu(n) } else { n };
        }
        Ok((h, stats))
    }

    /// Logits of head `d`.
    pub fn forward_head(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        d: usize,
        s: Var,
    ) -> Result<Var> {
        if d >= self.num_heads() {
            return Err(Error::Index {
                what: "classifier head",
                index: d,
                len: self.num_heads(),
            });
        }
        tape.affine(
            s,
            binding.var(ParamKey::HeadWeight(d)),
            binding.var(ParamKey::HeadBias(d)),
        )
    }

    /// Folds train-mode batch statistics (one per layer, in order) into the
    /// running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        debug_assert_eq!(stats.len(), self.extractor.layers.len());
        for (layer, st) in self.extractor.layers.iter_mut().zip(stats) {
            layer.bn.update_running(st);
        }
    }

    /// Gradient-free feature computation.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let (s, _) = self.forward_features(&mut tape, &binding, xv, mode)?;
        Ok(tape.value(s).clone())
    }

    /// Gradient-free logits of every head.
    pub fn all_logits(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        Ok(self.features_and_logits(x, mode)?.1)
    }

    /// Gradient-free features together with every head's logits.
    pub fn features_and_logits(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let (s, _) = self.forward_features(&mut tape, &binding, xv, mode)?;
        let logits = (0..self.num_heads())
            .map(|d| {
                let z = self.forward_head(&mut tape, &binding, d, s)?;
                Ok(tape.value(z).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(s).clone(), logits))
    }

    /// Parameters whose bits differ from `other`'s, or `None` if the two
    /// models have different layouts.
    pub fn bitwise_diff_keys(&self, other: &Model) -> Option<Vec<ParamKey>> {
        if self.param_keys() != other.param_keys() {
            return None;
        }
        Some(
            self.param_keys()
                .into_iter()
                .filter(|&k| {
                    let (a, b) = (self.param(k), other.param(k));
                    a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
                })
                .collect(),
        )
    }
}
