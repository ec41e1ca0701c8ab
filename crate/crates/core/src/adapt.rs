//! One-pass test-time adaptation over a stream of unlabeled batches.
//!
//! Each batch is seen once: the method's unsupervised loss is minimized for
//! `steps_per_batch` iterations over the unmasked parameters, then the batch
//! is predicted by the aggregate rule. Labels travel alongside each batch
//! only so the harness can score predictions; no loss receives them.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_plan, LabeledSet};
use crate::diffnet::{Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ParamKey};
use crate::objectives::{ds_test, prediction_entropy, pseudo_label_loss, DsMetric};
use crate::train::{aggregate_argmax, Sgd, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen model, predictions only.
    None,
    /// Disagreement minimization over all head pairs.
    #[default]
    Adaodm,
    /// Entropy of the aggregate prediction.
    Tent,
    /// Confident pseudo-label cross-entropy.
    Pl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Adaodm, Method::Tent, Method::Pl];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::None => "none",
            Method::Adaodm => "adaodm",
            Method::Tent => "tent",
            Method::Pl => "pl",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Method::None),
            "adaodm" => Ok(Method::Adaodm),
            "tent" => Ok(Method::Tent),
            "pl" => Ok(Method::Pl),
            other => Err(Error::Config(format!(
                "unknown adaptation method `{other}`"
            ))),
        }
    }
}

/// Normalization statistics used by batch norm at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnStats {
    /// Statistics of the current test batch (running ones when it has a
    /// single row).
    #[default]
    Batch,
    /// Running statistics accumulated during training.
    Running,
}

impl BnStats {
    pub fn mode(self) -> Mode {
        match self {
            BnStats::Batch => Mode::Adapt,
            BnStats::Running => Mode::Eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    pub test_batch_size: usize,
    pub steps_per_batch: usize,
    /// Adaptation learning rate as a multiple of the training one.
    pub lr_multiplier: f64,
    pub reset_per_batch: bool,
    pub bn_stats: BnStats,
    pub ds_metric: DsMetric,
    pub pl_threshold: f64,
    /// Optimizer momentum; the training momentum when absent.
    pub momentum: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Adaodm,
            test_batch_size: 64,
            steps_per_batch: 1,
            lr_multiplier: 1.0,
            reset_per_batch: false,
            bn_stats: BnStats::Batch,
            ds_metric: DsMetric::L1,
            pl_threshold: 0.9,
            momentum: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_batch < 1 {
            return Err(Error::Config("steps_per_batch must be at least 1".into()));
        }
        if self.test_batch_size < 1 {
            return Err(Error::Config("test_batch_size must be at least 1".into()));
        }
        if !(self.lr_multiplier >= 0.0 && self.lr_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "lr_multiplier must be finite and non-negative, got {}",
                self.lr_multiplier
            )));
        }
        if !(0.0..=1.0).contains(&self.pl_threshold) {
            return Err(Error::Config(format!(
                "pl_threshold must lie in [0, 1], got {}",
                self.pl_threshold
            )));
        }
        Ok(())
    }
}

/// Parameter partitions excluded from test-time updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenMask {
    pub frozen: BTreeSet<String>,
}

impl FrozenMask {
    /// `adaodm` and `tent` move only `extractor_bn_affine`; `pl` moves
    /// everything; `none` moves nothing.
    pub fn for_method(method: Method, model: &Model) -> Self {
        let all: BTreeSet<String> = model
            .param_keys()
            .into_iter()
            .map(ParamKey::partition)
            .collect();
        let frozen = match method {
            Method::None => all,
            Method::Adaodm | Method::Tent => all
                .into_iter()
                .filter(|g| g != "extractor_bn_affine")
                .collect(),
            Method::Pl => BTreeSet::new(),
        };
        Self { frozen }
    }

    pub fn is_trainable(&self, key: ParamKey) -> bool {
        !self.frozen.contains(&key.partition())
    }

    pub fn trainable_keys(&self, model: &Model) -> Vec<ParamKey> {
        model
            .param_keys()
            .into_iter()
            .filter(|&k| self.is_trainable(k))
            .collect()
    }
}

/// One test batch. `labels` are read only when scoring predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct TestBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Cuts `set` into a shuffled stream of batches (short tail kept).
pub fn make_stream(set: &LabeledSet, batch_size: usize, seed: u64) -> Vec<TestBatch> {
    batch_plan(set.len(), batch_size, seed, false)
        .into_iter()
        .map(|idx| {
            let part = set.subset(&idx);
            TestBatch {
                x: part.x,
                labels: part.y,
            }
        })
        .collect()
}

/// SHA-256 over the bits of every input and label, in stream order.
pub fn stream_checksum(stream: &[TestBatch]) -> String {
    let mut h = Sha256::new();
    for b in stream {
        h.update((b.x.rows() as u64).to_le_bytes());
        for v in b.x.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &y in &b.labels {
            h.update((y as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Disagreement of all head pairs on `x`, without gradients or state
/// changes.
pub fn ds_monitor(model: &Model, x: &Tensor, mode: Mode, metric: DsMetric) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let (s, _) = model.forward_features(&mut tape, &binding, xv, mode)?;
    let ds = ds_test(&mut tape, model, &binding, s, metric)?;
    Ok(tape.value(ds).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub size: usize,
    pub ds_before: f64,
    pub ds_after: f64,
    /// Adaptation loss at the last step (zero for `none`).
    pub loss: f64,
    pub accuracy_so_far: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub batches_seen: usize,
    pub samples_seen: usize,
    pub correct: usize,
    pub running_accuracy: f64,
    pub batches: Vec<BatchRecord>,
}

impl StreamStats {
    pub fn per_batch_ds_before(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.ds_before).collect()
    }

    pub fn per_batch_ds_after(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.ds_after).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub stats: StreamStats,
    pub model: Model,
    /// Predictions in stream order.
    pub predictions: Vec<usize>,
    /// Features of every sample from the prediction forward pass, stacked
    /// in stream order.
    pub features: Tensor,
}

fn adaptation_loss(
    model: &Model,
    mask: &FrozenMask,
    x: &Tensor,
    cfg: &AdaptConfig,
) -> Result<(f64, crate::model::GradSet)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, |k| mask.is_trainable(k));
    let xv = tape.constant(x.clone());
    let (s, _) = model.forward_features(&mut tape, &binding, xv, cfg.bn_stats.mode())?;
    let loss = match cfg.method {
        Method::Adaodm => ds_test(&mut tape, model, &binding, s, cfg.ds_metric)?,
        Method::Tent | Method::Pl => {
            let mut sum = model.forward_head(&mut tape, &binding, 0, s)?;
            for h in 1..model.num_heads() {
                let z = model.forward_head(&mut tape, &binding, h, s)?;
                sum = tape.add(sum, z)?;
            }
            let p = tape.softmax(sum)?;
            if cfg.method == Method::Tent {
                prediction_entropy(&mut tape, p)?
            } else {
                pseudo_label_loss(&mut tape, p, cfg.pl_threshold)?.0
            }
        }
        Method::None => unreachable!("the frozen method takes no steps"),
    };
    let grads = tape.backward(loss);
    Ok((
        tape.value(loss).item(),
        model.collect_grads(&grads, &binding),
    ))
}

/// Adapts `model` on `stream`, consuming each batch exactly once.
///
/// The optimizer is SGD at `train.lr × lr_multiplier` without weight decay,
/// using the training momentum unless `cfg.momentum` is set. Its state persists across batches
/// unless `reset_per_batch`, which also restores the incoming parameters
/// before every batch.
pub fn adapt_stream<I>(
    mut model: Model,
    stream: I,
    cfg: &AdaptConfig,
    train: &TrainConfig,
) -> Result<AdaptOutcome>
where
    I: IntoIterator<Item = TestBatch>,
{
    cfg.validate()?;
    let mode = cfg.bn_stats.mode();
    let mask = FrozenMask::for_method(cfg.method, &model);
    let keys = mask.trainable_keys(&model);
    let initial = cfg.reset_per_batch.then(|| model.clone());
    let momentum = cfg.momentum.unwrap_or(train.momentum);
    let mut opt = Sgd::new(train.lr * cfg.lr_multiplier, momentum, 0.0);
    let mut stats = StreamStats::default();
    let mut predictions = Vec::new();
    let mut feature_parts = Vec::new();

    for (batch_index, batch) in stream.into_iter().enumerate() {
        let TestBatch { x, labels } = batch;
        if let Some(init) = &initial {
            model.clone_from(init);
            opt.reset();
        }
        let ds_before = ds_monitor(&model, &x, mode, cfg.ds_metric)?;
        let mut loss = 0.0;
        if cfg.method != Method::None {
            for _ in 0..cfg.steps_per_batch {
                let (l, grads) = adaptation_loss(&model, &mask, &x, cfg)?;
                if !l.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFinite {
                        step: batch_index,
                        detail: format!("{} adaptation loss {l}", cfg.method),
                    });
                }
                opt.step(&mut model, &grads, &keys)?;
                loss = l;
            }
        }
        let (features, logits) = model.features_and_logits(&x, mode)?;
        let pred = aggregate_argmax(&logits);
        let ds_after = ds_monitor(&model, &x, mode, cfg.ds_metric)?;

        stats.batches_seen += 1;
        stats.samples_seen += labels.len();
        stats.correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        stats.running_accuracy = stats.correct as f64 / stats.samples_seen as f64;
        stats.batches.push(BatchRecord {
            batch_index,
            size: labels.len(),
            ds_before,
            ds_after,
            loss,
            accuracy_so_far: stats.running_accuracy,
        });
        predictions.extend(pred);
        feature_parts.push(features);
    }
    let refs: Vec<&Tensor> = feature_parts.iter().collect();
    let features = if refs.is_empty() {
        Tensor::zeros(&[0, model.arch.feature_dim])
    } else {
        Tensor::vstack(&refs)?
    };
    Ok(AdaptOutcome {
        stats,
        model,
        predictions,
        features,
    })
}

/// Writes `batch_index,ds_before,ds_after,loss,accuracy_so_far`.
pub fn write_batches_csv(path: &Path, stats: &StreamStats) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "batch_index,ds_before,ds_after,loss,accuracy_so_far")?;
        for b in &stats.batches {
            writeln!(
                w,
                "{},{},{},{},{}",
                b.batch_index, b.ds_before, b.ds_after, b.loss, b.accuracy_so_far
            )?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub method: Method,
    pub config: AdaptConfig,
    pub batches_seen: usize,
    pub samples_seen: usize,
    pub final_accuracy: f64,
    pub stream_checksum: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture};

    fn model() -> Model {
        Model::new(Architecture::per_domain(2, vec![8], 4, 2, 2, 2), 9).unwrap()
    }

    fn batch(rows: usize, seed: u64) -> TestBatch {
        let x = Tensor::new(
            vec![rows, 2],
            (0..rows * 2)
                .map(|i| ((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 250.0 - 2.0)
                .collect(),
        )
        .unwrap();
        TestBatch {
            x,
            labels: (0..rows).map(|i| i % 2).collect(),
        }
    }

    fn run(method: Method, stream: Vec<TestBatch>) -> AdaptOutcome {
        let cfg = AdaptConfig {
            method,
            steps_per_batch: 2,
            ..AdaptConfig::default()
        };
        adapt_stream(model(), stream, &cfg, &TrainConfig::default()).unwrap()
    }

    #[test]
    fn masks_follow_method() {
        let m = model();
        let bn: Vec<ParamKey> = m
            .param_keys()
            .into_iter()
            .filter(|k| k.is_bn_affine())
            .collect();
        for method in [Method::Adaodm, Method::Tent] {
            assert_eq!(FrozenMask::for_method(method, &m).trainable_keys(&m), bn);
        }
        assert_eq!(
            FrozenMask::for_method(Method::Pl, &m).trainable_keys(&m),
            m.param_keys()
        );
        assert!(FrozenMask::for_method(Method::None, &m)
            .trainable_keys(&m)
            .is_empty());
    }

    #[test]
    fn none_leaves_model_untouched() {
        let out = run(Method::None, vec![batch(16, 1), batch(16, 2)]);
        assert_eq!(out.model, model());
        assert!(out.stats.batches.iter().all(|b| b.ds_before == b.ds_after));
    }

    #[test]
    fn bn_methods_only_move_bn_affine() {
        for method in [Method::Adaodm, Method::Tent] {
            let out = run(method, vec![batch(16, 1), batch(16, 2)]);
            let diff = model().bitwise_diff_keys(&out.model).unwrap();
            assert!(!diff.is_empty());
            assert!(diff.iter().all(|k| k.is_bn_affine()), "{method}: {diff:?}");
            for (a, b) in model()
                .extractor
                .layers
                .iter()
                .zip(&out.model.extractor.layers)
            {
                assert_eq!(a.bn.running_mean, b.bn.running_mean);
                assert_eq!(a.bn.running_var, b.bn.running_var);
            }
        }
    }

    #[test]
    fn counts_every_sample_once() {
        let stream: Vec<TestBatch> = (0..10).map(|i| batch(1, i)).collect();
        let cfg = AdaptConfig {
            test_batch_size: 1,
            ..AdaptConfig::default()
        };
        let out = adapt_stream(model(), stream, &cfg, &TrainConfig::default()).unwrap();
        assert_eq!(out.stats.batches_seen, 10);
        assert_eq!(out.stats.samples_seen, 10);
        assert_eq!(out.predictions.len(), 10);
        assert_eq!(out.features.shape(), &[10, 4]);
    }

    #[test]
    fn identical_heads_read_zero() {
        let mut m = build_model(2, &[4], 3, 2, 3, 0).unwrap();
        for h in 1..3 {
            m.bank.heads[h] = m.bank.heads[0].clone();
        }
        let x = batch(8, 3).x;
        for metric in DsMetric::ALL {
            assert_eq!(ds_monitor(&m, &x, Mode::Eval, metric).unwrap(), 0.0);
        }
    }

    #[test]
    fn stream_covers_set_in_seeded_order() {
        let set = LabeledSet::new(batch(10, 4).x, (0..10).map(|i| i % 2).collect()).unwrap();
        let a = make_stream(&set, 3, 5);
        let sizes: Vec<usize> = a.iter().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        assert_eq!(
            stream_checksum(&a),
            stream_checksum(&make_stream(&set, 3, 5))
        );
        assert_ne!(
            stream_checksum(&a),
            stream_checksum(&make_stream(&set, 3, 6))
        );
    }

    #[test]
    fn parse_methods() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("shot".parse::<Method>().is_err());
    }
}
