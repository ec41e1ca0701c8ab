//! Multi-source adversarial training with momentum SGD and
//! training-domain validation selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batch_plan, split, LabeledSet, SplitDataset, Standardizer};
use crate::diffnet::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::model::{GradSet, Model, ParamKey};
use crate::objectives::{argmax, total_training_loss, DomainBatch, DsMetric, ObjectiveConfig};

/// Seed stride between source domains for epoch reshuffles.
const DOMAIN_SHUFFLE_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDg {
    #[default]
    Erm,
    Coral,
}

impl fmt::Display for BaseDg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseDg::Erm => "erm",
            BaseDg::Coral => "coral",
        })
    }
}

impl FromStr for BaseDg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(BaseDg::Erm),
            "coral" => Ok(BaseDg::Coral),
            other => Err(Error::Config(format!("unknown base algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub ds_metric: DsMetric,
    pub base_dg: BaseDg,
    /// Used only when `base_dg` is `coral`.
    pub coral_weight: f64,
    pub seed: u64,
    /// Steps between validation checkpoints.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 0.5,
            gamma: 0.01,
            eta: 1.0,
            ds_metric: DsMetric::L1,
            base_dg: BaseDg::Erm,
            coral_weight: 1.0,
            seed: 0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("coral_weight", self.coral_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            eta: self.eta,
            metric: self.ds_metric,
            coral_weight: match self.base_dg {
                BaseDg::Erm => 0.0,
                BaseDg::Coral => self.coral_weight,
            },
        }
    }
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v`, elementwise.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension {
            op: "sgd_step",
            left: vec![params.len()],
            right: vec![grads.len(), velocity.len()],
        });
    }
    for ((theta, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *theta;
        *theta -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD with one velocity buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates the parameters named in `keys`; all others are untouched.
    pub fn step(&mut self, model: &mut Model, grads: &GradSet, keys: &[ParamKey]) -> Result<()> {
        for &key in keys {
            let g = grads.get(key);
            let v = self
                .velocity
                .entry(key)
                .or_insert_with(|| vec![0.0; g.len()]);
            sgd_step(
                model.param_mut(key),
                g.data(),
                v,
                self.lr,
                self.momentum,
                self.weight_decay,
            )?;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// How a class is chosen from the heads' logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Argmax of the sum of every head's logits.
    #[default]
    Aggregate,
    Head(usize),
}

/// Row-wise argmax of the summed logits; ties go to the lowest class.
pub fn aggregate_argmax(logits: &[Tensor]) -> Vec<usize> {
    let Some(first) = logits.first() else {
        return Vec::new();
    };
    let mut sum = first.clone();
    for z in &logits[1..] {
        sum.add_assign(z);
    }
    (0..sum.rows()).map(|i| argmax(sum.row(i)).0).collect()
}

pub fn predict(model: &Model, x: &Tensor, rule: Prediction, mode: Mode) -> Result<Vec<usize>> {
    let logits = model.all_logits(x, mode)?;
    match rule {
        Prediction::Aggregate => Ok(aggregate_argmax(&logits)),
        Prediction::Head(h) => {
            let z = logits.get(h).ok_or(Error::Index {
                what: "classifier head",
                index: h,
                len: logits.len(),
            })?;
            Ok((0..z.rows()).map(|i| argmax(z.row(i)).0).collect())
        }
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Eval-mode accuracy of `model` on `set`.
pub fn evaluate(model: &Model, set: &LabeledSet, rule: Prediction) -> Result<f64> {
    let pred = predict(model, &set.x, rule, Mode::Eval)?;
    Ok(accuracy(&pred, &set.y))
}

/// Splits every source domain into train/validation parts and standardizes
/// all of them with statistics of the pooled training parts.
pub fn prepare_sources(
    domains: &[LabeledSet],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SplitDataset>, Standardizer)> {
    if domains.is_empty() {
        return Err(Error::Input("no source domains".into()));
    }
    let splits = domains
        .iter()
        .enumerate()
        .map(|(d, set)| split(set, fraction, seed.wrapping_add(d as u64)))
        .collect::<Result<Vec<_>>>()?;
    let train_parts: Vec<&LabeledSet> = splits.iter().map(|s| &s.train).collect();
    let st = Standardizer::fit(&train_parts)?;
    let splits = splits
        .into_iter()
        .map(|s| SplitDataset {
            train: st.apply(&s.train),
            val: st.apply(&s.val),
            fraction: s.fraction,
        })
        .collect();
    Ok((splits, st))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub erm: f64,
    pub ds: f64,
    pub et: f64,
    pub coral: f64,
    pub total: f64,
    /// Aggregate accuracy of each domain's own heads on its current batch.
    pub per_domain_acc: Vec<f64>,
    /// Aggregate eval-mode accuracy on the pooled validation splits, after
    /// this step's update.
    pub val_acc: f64,
    pub per_pair_ds: BTreeMap<(usize, usize), f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation checkpoint.
    pub model: Model,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub records: Vec<TrainRecord>,
}

/// Cycles through seeded per-epoch permutations of one domain.
struct DomainSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    plan: Vec<Vec<usize>>,
    next: usize,
}

impl DomainSampler {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            plan: Vec::new(),
            next: 0,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.next >= self.plan.len() {
            self.plan = batch_plan(self.n, self.batch_size, self.seed ^ self.epoch, true);
            self.epoch += 1;
            self.next = 0;
        }
        self.next += 1;
        &self.plan[self.next - 1]
    }
}

/// Runs the full training loop on `model` and returns the parameters with
/// the best aggregate validation accuracy, checked every `eval_every` steps
/// and at the final step.
///
/// Each step draws one batch per source domain; domain `d` of `datasets`
/// feeds the heads owned by `d`.
pub fn train_source_model(
    datasets: &[SplitDataset],
    mut model: Model,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let domains = model.arch.num_domains();
    if datasets.len() != domains {
        return Err(Error::Input(format!(
            "model has heads for {domains} source domain(s) but {} dataset(s) were given",
            datasets.len()
        )));
    }
    for (d, s) in datasets.iter().enumerate() {
        if s.train.len() < cfg.batch_size {
            return Err(Error::Input(format!(
                "source domain {d} has {} training rows, fewer than batch size {}",
                s.train.len(),
                cfg.batch_size
            )));
        }
        if s.val.is_empty() {
            return Err(Error::Input(format!(
                "source domain {d} has no validation rows"
            )));
        }
    }
    let val_parts: Vec<&LabeledSet> = datasets.iter().map(|s| &s.val).collect();
    let val = LabeledSet::concat(&val_parts)?;
    let objective = cfg.objective();
    let keys = model.param_keys();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut samplers: Vec<DomainSampler> = datasets
        .iter()
        .enumerate()
        .map(|(d, s)| {
            let seed = cfg
                .seed
                .wrapping_add((d as u64).wrapping_mul(DOMAIN_SHUFFLE_STRIDE));
            DomainSampler::new(s.train.len(), cfg.batch_size, seed)
        })
        .collect();

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for step in 1..=cfg.steps {
        let batches: Vec<DomainBatch> = samplers
            .iter_mut()
            .zip(datasets)
            .enumerate()
            .map(|(d, (sampler, s))| {
                let part = s.train.subset(sampler.next_batch());
                DomainBatch {
                    domain: d,
                    x: part.x,
                    y: part.y,
                }
            })
            .collect();
        let out = total_training_loss(&model, &batches, &objective)?;
        let b = &out.breakdown;
        if !b.total.is_finite() || !out.grads.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "erm={} ds={} et={} coral={} total={} max|grad|={}",
                    b.erm,
                    b.ds,
                    b.et,
                    b.coral,
                    b.total,
                    out.grads.max_abs()
                ),
            });
        }
        opt.step(&mut model, &out.grads, &keys)?;
        for st in &out.batch_stats {
            model.update_running_stats(st);
        }

        if step == 1 || step % cfg.eval_every == 0 || step == cfg.steps {
            let val_acc = evaluate(&model, &val, Prediction::Aggregate)?;
            records.push(TrainRecord {
                step,
                erm: b.erm,
                ds: b.ds,
                et: b.et,
                coral: b.coral,
                total: b.total,
                per_domain_acc: out.batch_accuracy.clone(),
                val_acc,
                per_pair_ds: b.per_pair_ds.clone(),
            });
            if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
                best = Some((val_acc, step, model.clone()));
            }
        }
    }
    let (best_val_acc, best_step, model) = best.expect("at least one checkpoint is evaluated");
    Ok(TrainOutcome {
        model,
        best_step,
        best_val_acc,
        records,
    })
}

/// Writes `step,erm,ds,et,coral,total,val_acc,acc_d0,...`.
pub fn write_records_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let domains = records.first().map_or(0, |r| r.per_domain_acc.len());
    let mut header = String::from("step,erm,ds,et,coral,total,val_acc");
    for d in 0..domains {
        header.push_str(&format!(",acc_d{d}"));
    }
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{header}")?;
        for r in records {
            write!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.erm, r.ds, r.et, r.coral, r.total, r.val_acc
            )?;
            for a in &r.per_domain_acc {
                write!(w, ",{a}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DomainSpec, Family};
    use crate::model::Architecture;

    #[test]
    fn sgd_examples() {
        let mut theta = [1.0];
        let mut v = [0.0];
        sgd_step(&mut theta, &[2.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);

        let mut theta = [0.3, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut theta, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(theta, [0.3, -2.0]);

        let mut theta = [0.0];
        let mut v = [0.0];
        sgd_step(&mut theta, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((theta[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut theta, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((theta[0] + 0.29).abs() < 1e-15);

        assert!(sgd_step(&mut [0.0; 2], &[1.0], &mut [0.0; 2], 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn aggregate_prediction_examples() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(aggregate_argmax(&[a, b]), vec![0, 0]);
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                steps: 0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 1,
                ..ok.clone()
            },
            TrainConfig {
                lambda: -0.1,
                ..ok.clone()
            },
            TrainConfig {
                eta: f64::NAN,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn moons_sources(angles: &[f64], n: usize) -> Vec<LabeledSet> {
        angles
            .iter()
            .enumerate()
            .map(|(d, &a)| {
                generate(&DomainSpec {
                    family: Family::RotatedMoons,
                    domain_param: a,
                    n_samples: n,
                    noise_sigma: 0.1,
                    seed: 10 + d as u64,
                })
                .unwrap()
            })
            .collect()
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (splits, _) = prepare_sources(&moons_sources(&[0.0, 30.0], 200), 0.8, 1).unwrap();
        let run = || {
            let m = paired(16, 8, 3);
            train_source_model(&splits, m, &small_cfg(30)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.records, b.records);
        assert!(a.model.bitwise_diff_keys(&b.model).unwrap().is_empty());
    }

    fn paired(hidden: usize, feature: usize, seed: u64) -> Model {
        Model::new(
            Architecture::per_domain(2, vec![hidden], feature, 2, 2, 2),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn every_group_moves_during_training() {
        let (splits, _) = prepare_sources(&moons_sources(&[0.0, 30.0], 200), 0.8, 1).unwrap();
        let m0 = paired(16, 8, 0);
        let cfg = small_cfg(10);
        let mut m = m0.clone();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        let keys = m.param_keys();
        for _ in 0..10 {
            let batches: Vec<DomainBatch> = splits
                .iter()
                .enumerate()
                .map(|(d, s)| {
                    let p = s.train.subset(&(0..32).collect::<Vec<_>>());
                    DomainBatch {
                        domain: d,
                        x: p.x,
                        y: p.y,
                    }
                })
                .collect();
            let st = total_training_loss(&m, &batches, &cfg.objective()).unwrap();
            assert!(st
                .grads
                .iter()
                .all(|(_, g)| g.data().iter().any(|&v| v != 0.0)));
            opt.step(&mut m, &st.grads, &keys).unwrap();
        }
        assert_eq!(m0.bitwise_diff_keys(&m).unwrap(), keys);
    }

    #[test]
    fn selected_model_is_best_checkpoint() {
        let (splits, _) = prepare_sources(&moons_sources(&[0.0, 30.0], 200), 0.8, 2).unwrap();
        let m = paired(16, 8, 4);
        let out = train_source_model(&splits, m, &small_cfg(60)).unwrap();
        assert!(out.records.iter().all(|r| out.best_val_acc >= r.val_acc));
        let steps: Vec<usize> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, [1, 10, 20, 30, 40, 50, 60]);
        let val: Vec<&LabeledSet> = splits.iter().map(|s| &s.val).collect();
        let val = LabeledSet::concat(&val).unwrap();
        let acc = evaluate(&out.model, &val, Prediction::Aggregate).unwrap();
        assert_eq!(acc, out.best_val_acc);
    }

    #[test]
    fn too_few_rows_is_an_input_error() {
        let (splits, _) = prepare_sources(&moons_sources(&[0.0, 30.0], 40), 0.8, 1).unwrap();
        let m = paired(4, 3, 0);
        let cfg = TrainConfig {
            batch_size: 64,
            ..small_cfg(5)
        };
        let err = train_source_model(&splits, m, &cfg).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn records_csv_has_domain_columns() {
        let (splits, _) = prepare_sources(&moons_sources(&[0.0, 30.0], 200), 0.8, 1).unwrap();
        let m = paired(8, 4, 0);
        let out = train_source_model(&splits, m, &small_cfg(20)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.csv");
        write_records_csv(&p, &out.records).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,erm,ds,et,coral,total,val_acc,acc_d0,acc_d1"
        );
        assert_eq!(lines.count(), out.records.len());
    }
}
