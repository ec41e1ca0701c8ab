//! Losses: cross-entropy risk, disagreement between heads (test-time and
//! meta-target variants, three distance metrics), the batch-mean entropy
//! regularizer, the combined adversarial training objective, the baseline
//! adaptation losses, and the mean/covariance feature distance.
//!
//! Disagreement sums run over unordered head pairs `j < k`; the ordered
//! double sum is exactly twice this and is absorbed by the weight λ.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnet::{cross_entropy, BatchStats, Mode, Tape, Tensor, Var, EPS_LOG};
use crate::error::{Error, Result};
use crate::model::{Binding, GradSet, Model, ParamKey};

/// Distance between two heads' softmax outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsMetric {
    #[default]
    L1,
    L2,
    /// Symmetrized: ½(KL(p‖q) + KL(q‖p)).
    Kl,
}

impl DsMetric {
    pub const ALL: [DsMetric; 3] = [DsMetric::L1, DsMetric::L2, DsMetric::Kl];
}

impl fmt::Display for DsMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DsMetric::L1 => "l1",
            DsMetric::L2 => "l2",
            DsMetric::Kl => "kl",
        })
    }
}

impl FromStr for DsMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DsMetric::L1),
            "l2" => Ok(DsMetric::L2),
            "kl" => Ok(DsMetric::Kl),
            _ => Err(Error::Config(format!("unknown disagreement metric `{s}`"))),
        }
    }
}

/// Batch-mean distance between two probability matrices.
pub fn ds_pair(tape: &mut Tape, p: Var, q: Var, metric: DsMetric) -> Result<Var> {
    let rows = tape.value(p).rows() as f64;
    let diff = tape.sub(p, q)?;
    let per_entry = match metric {
        DsMetric::L1 => tape.abs(diff),
        DsMetric::L2 => tape.square(diff),
        DsMetric::Kl => {
            // ½Σ p(log p − log q) + q(log q − log p) = ½Σ (p − q)(log p − log q)
            let lp = tape.log_clamp(p, EPS_LOG);
            let lq = tape.log_clamp(q, EPS_LOG);
            let dlog = tape.sub(lp, lq)?;
            let prod = tape.mul(diff, dlog)?;
            tape.scale(prod, 0.5)
        }
    };
    let total = tape.sum(per_entry);
    Ok(tape.scale(total, 1.0 / rows))
}

/// Unordered pairs `(j, k)`, `j < k`, drawn from `heads`.
pub fn head_pairs(heads: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (a, &j) in heads.iter().enumerate() {
        for &k in &heads[a + 1..] {
            pairs.push((j.min(k), j.max(k)));
        }
    }
    pairs
}

/// Per-pair disagreement values, keyed by head pair.
pub type PairValues = Vec<((usize, usize), f64)>;

/// Sums [`ds_pair`] over `pairs`, where `probs[h]` holds head `h`'s softmax.
/// Also returns each pair's value.
pub fn ds_over_pairs(
    tape: &mut Tape,
    probs: &BTreeMap<usize, Var>,
    pairs: &[(usize, usize)],
    metric: DsMetric,
) -> Result<(Var, PairValues)> {
    let mut total: Option<Var> = None;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for &(j, k) in pairs {
        let v = ds_pair(tape, probs[&j], probs[&k], metric)?;
        per_pair.push(((j, k), tape.value(v).item()));
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((total, per_pair))
}

/// Softmax of every head on features `s`.
pub fn head_probs(
    tape: &mut Tape,
    model: &Model,
    binding: &Binding,
    s: Var,
    heads: &[usize],
) -> Result<BTreeMap<usize, Var>> {
    let mut out = BTreeMap::new();
    for &h in heads {
        let z = model.forward_head(tape, binding, h, s)?;
        out.insert(h, tape.softmax(z)?);
    }
    Ok(out)
}

/// Disagreement over all head pairs on features `s`.
pub fn ds_test(
    tape: &mut Tape,
    model: &Model,
    binding: &Binding,
    s: Var,
    metric: DsMetric,
) -> Result<Var> {
    if model.num_heads() < 2 {
        return Err(Error::Config(
            "disagreement needs at least two heads".into(),
        ));
    }
    let heads: Vec<usize> = (0..model.num_heads()).collect();
    let probs = head_probs(tape, model, binding, s, &heads)?;
    let (total, _) = ds_over_pairs(tape, &probs, &head_pairs(&heads), metric)?;
    Ok(total)
}

/// Meta-target heads for `meta_source`: every head not owned by it.
pub fn meta_target_heads(model: &Model, meta_source: usize) -> Result<Vec<usize>> {
    let heads = model.bank.heads_excluding(meta_source);
    if heads.len() < 2 {
        return Err(Error::Config(format!(
            "excluding domain {meta_source}'s heads leaves {} head(s); \
             use two differently initialized heads per domain",
            heads.len()
        )));
    }
    Ok(heads)
}

/// Logits of head `h` with its parameters routed through a gradient
/// reversal node, so the head receives `−eta` times its gradient while
/// `s` receives the ordinary one.
fn reversed_head_logits(
    tape: &mut Tape,
    binding: &Binding,
    h: usize,
    s: Var,
    eta: f64,
) -> Result<Var> {
    let w = tape.grad_reverse(binding.var(ParamKey::HeadWeight(h)), eta);
    let b = tape.grad_reverse(binding.var(ParamKey::HeadBias(h)), eta);
    tape.affine(s, w, b)
}

/// Meta-target disagreement on domain `meta_source`'s features `s`.
///
/// With `reversal = Some(eta)` the head parameters sit behind a gradient
/// reversal; with `None` all gradients are ordinary.
#[allow(clippy::too_many_arguments)]
pub fn ds_train(
    tape: &mut Tape,
    model: &Model,
    binding: &Binding,
    s: Var,
    meta_source: usize,
    metric: DsMetric,
    reversal: Option<f64>,
) -> Result<(Var, PairValues)> {
    let heads = meta_target_heads(model, meta_source)?;
    let mut probs = BTreeMap::new();
    for &h in &heads {
        let z = match reversal {
            Some(eta) => reversed_head_logits(tape, binding, h, s, eta)?,
            None => model.forward_head(tape, binding, h, s)?,
        };
        probs.insert(h, tape.softmax(z)?);
    }
    ds_over_pairs(tape, &probs, &head_pairs(&heads), metric)
}

/// `−(1/C) Σ_c log(mean_i p[i, c])`, minimized when the batch-mean
/// prediction is uniform.
pub fn entropy_reg(tape: &mut Tape, probs: Var) -> Var {
    let c = tape.value(probs).cols() as f64;
    let mean = tape.mean_rows(probs);
    let logs = tape.log_clamp(mean, EPS_LOG);
    let total = tape.sum(logs);
    tape.scale(total, -1.0 / c)
}

/// Mean over rows of the Shannon entropy `−Σ_c p log p`.
pub fn prediction_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let rows = tape.value(probs).rows() as f64;
    let logs = tape.log_clamp(probs, EPS_LOG);
    let plogp = tape.mul(probs, logs)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / rows))
}

/// Cross-entropy against argmax pseudo-labels over rows whose top
/// probability reaches `threshold`. Returns the loss and the number of kept
/// rows; with no kept rows the loss is a zero constant.
pub fn pseudo_label_loss(tape: &mut Tape, probs: Var, threshold: f64) -> Result<(Var, usize)> {
    let pv = tape.value(probs);
    let mut labels = Vec::with_capacity(pv.rows());
    let mut mask = Vec::with_capacity(pv.rows());
    for i in 0..pv.rows() {
        let (arg, max) = argmax(pv.row(i));
        labels.push(arg);
        mask.push(if max >= threshold { 1.0 } else { 0.0 });
    }
    let kept = mask.iter().filter(|&&m| m > 0.0).count();
    if kept == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), 0));
    }
    let picked = tape.gather(probs, &labels)?;
    let logs = tape.log_clamp(picked, EPS_LOG);
    let m = tape.constant(Tensor::new(vec![mask.len(), 1], mask)?);
    let masked = tape.mul(logs, m)?;
    let total = tape.sum(masked);
    Ok((tape.scale(total, -1.0 / kept as f64), kept))
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `‖μ_a − μ_b‖² + ‖Σ_a − Σ_b‖²_F` with unbiased covariances.
pub fn coral_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.rows() < 2 || bv.rows() < 2 {
        return Err(Error::Input(format!(
            "feature distance needs at least two rows per set, got {} and {}",
            av.rows(),
            bv.rows()
        )));
    }
    if av.cols() != bv.cols() {
        return Err(Error::Dimension {
            op: "coral_distance",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        });
    }
    let (mean_a, cov_a) = mean_and_cov(tape, a)?;
    let (mean_b, cov_b) = mean_and_cov(tape, b)?;
    let dm = tape.sub(mean_a, mean_b)?;
    let dm2 = tape.square(dm);
    let mean_term = tape.sum(dm2);
    let dc = tape.sub(cov_a, cov_b)?;
    let dc2 = tape.square(dc);
    let cov_term = tape.sum(dc2);
    tape.add(mean_term, cov_term)
}

fn mean_and_cov(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let n = tape.value(x).rows() as f64;
    let mean = tape.mean_rows(x);
    let centered = tape.sub_row(x, mean)?;
    let ct = tape.transpose(centered);
    let gram = tape.matmul(ct, centered)?;
    Ok((mean, tape.scale(gram, 1.0 / (n - 1.0))))
}

/// Gradient-free [`coral_distance`] on plain tensors.
pub fn coral_distance_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = coral_distance(&mut tape, av, bv)?;
    Ok(tape.value(d).item())
}

/// One labelled mini-batch drawn from source domain `domain`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub domain: usize,
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Weights of the combined training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub metric: DsMetric,
    /// Weight of the pairwise feature-distance penalty between source
    /// batches; zero for plain risk minimization.
    pub coral_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.01,
            eta: 1.0,
            metric: DsMetric::L1,
            coral_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub erm: f64,
    pub ds: f64,
    pub et: f64,
    pub coral: f64,
    pub total: f64,
    /// Disagreement per head pair, summed over the meta-source domains in
    /// which the pair appears.
    pub per_pair_ds: BTreeMap<(usize, usize), f64>,
}

/// Result of evaluating the training objective on one set of batches.
pub struct TrainingStep {
    pub breakdown: LossBreakdown,
    pub grads: GradSet,
    /// Train-mode batch statistics, one list of per-layer stats per batch.
    pub batch_stats: Vec<Vec<BatchStats>>,
    /// Aggregate-prediction accuracy on each input batch.
    pub batch_accuracy: Vec<f64>,
}

/// Whether the meta-target disagreement term can be formed: with a single
/// source domain there are no meta-target heads.
pub fn has_meta_targets(model: &Model) -> bool {
    model.arch.num_domains() > 1
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, v)?,
        None => v,
    }))
}

/// Per-batch ERM, entropy and meta-target disagreement, in the shared order
/// used by [`total_training_loss`].
struct Terms {
    erm: Var,
    et: Var,
    ds: Var,
    coral: Var,
    per_pair: BTreeMap<(usize, usize), f64>,
    stats: Vec<Vec<BatchStats>>,
    accuracy: Vec<f64>,
}

fn build_terms(
    tape: &mut Tape,
    model: &Model,
    binding: &Binding,
    batches: &[DomainBatch],
    cfg: &ObjectiveConfig,
    reversal: Option<f64>,
) -> Result<Terms> {
    if batches.is_empty() {
        return Err(Error::Input("no domain batches".into()));
    }
    let domains = model.arch.num_domains();
    for d in 0..domains {
        if !batches.iter().any(|b| b.domain == d) {
            return Err(Error::Input(format!("missing batch for source domain {d}")));
        }
    }
    let multi = has_meta_targets(model) && cfg.lambda != 0.0;
    let (mut erm, mut et, mut ds) = (None, None, None);
    let mut per_pair = BTreeMap::new();
    let mut stats = Vec::with_capacity(batches.len());
    let mut accuracy = Vec::with_capacity(batches.len());
    let mut features = Vec::with_capacity(batches.len());

    for batch in batches {
        if batch.domain >= domains {
            return Err(Error::Index {
                what: "source domain",
                index: batch.domain,
                len: domains,
            });
        }
        let x = tape.constant(batch.x.clone());
        let (s, st) = model.forward_features(tape, binding, x, Mode::Train)?;
        stats.push(st);
        features.push(s);

        let mut summed: Option<Tensor> = None;
        for h in model.bank.heads_owned_by(batch.domain) {
            let z = model.forward_head(tape, binding, h, s)?;
            let p = tape.softmax(z)?;
            let ce = cross_entropy(tape, p, &batch.y)?;
            erm = accumulate(tape, erm, ce)?;
            let reg = entropy_reg(tape, p);
            et = accumulate(tape, et, reg)?;
            let zv = tape.value(z);
            summed = Some(match summed {
                Some(mut acc) => {
                    acc.add_assign(zv);
                    acc
                }
                None => zv.clone(),
            });
        }
        if let Some(z) = summed {
            accuracy.push(accuracy_of(&z, &batch.y));
        }

        if multi {
            let (d, pairs) = ds_train(tape, model, binding, s, batch.domain, cfg.metric, reversal)?;
            for (pair, v) in pairs {
                *per_pair.entry(pair).or_insert(0.0) += v;
            }
            ds = accumulate(tape, ds, d)?;
        }
    }

    let mut coral = None;
    if cfg.coral_weight > 0.0 {
        for a in 0..features.len() {
            for b in a + 1..features.len() {
                let c = coral_distance(tape, features[a], features[b])?;
                coral = accumulate(tape, coral, c)?;
            }
        }
    }
    let zero = |t: &mut Tape| t.constant(Tensor::scalar(0.0));
    Ok(Terms {
        erm: erm.unwrap_or_else(|| zero(tape)),
        et: et.unwrap_or_else(|| zero(tape)),
        ds: ds.unwrap_or_else(|| zero(tape)),
        coral: coral.unwrap_or_else(|| zero(tape)),
        per_pair,
        stats,
        accuracy,
    })
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)).0 == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}

/// `ERM + γ·ET + λ·DS_meta-target (+ coral_weight·CORAL)`, with the head
/// parameters on the disagreement path behind a gradient reversal of
/// strength η: the extractor descends on the disagreement while the
/// meta-target heads ascend on it.
pub fn total_training_loss(
    model: &Model,
    batches: &[DomainBatch],
    cfg: &ObjectiveConfig,
) -> Result<TrainingStep> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, |_| true);
    let terms = build_terms(&mut tape, model, &binding, batches, cfg, Some(cfg.eta))?;
    let g_et = tape.scale(terms.et, cfg.gamma);
    let mut total = tape.add(terms.erm, g_et)?;
    let l_ds = tape.scale(terms.ds, cfg.lambda);
    total = tape.add(total, l_ds)?;
    if cfg.coral_weight > 0.0 {
        let c = tape.scale(terms.coral, cfg.coral_weight);
        total = tape.add(total, c)?;
    }
    let grads = tape.backward(total);
    let breakdown = LossBreakdown {
        erm: tape.value(terms.erm).item(),
        ds: tape.value(terms.ds).item(),
        et: tape.value(terms.et).item(),
        coral: tape.value(terms.coral).item(),
        total: tape.value(total).item(),
        per_pair_ds: terms.per_pair,
    };
    Ok(TrainingStep {
        breakdown,
        grads: model.collect_grads(&grads, &binding),
        batch_stats: terms.stats,
        batch_accuracy: terms.accuracy,
    })
}

/// Gradients of the meta-target disagreement term alone (weight 1), with
/// the head parameters behind a reversal of strength `eta` when `Some`, or
/// with ordinary gradients when `None`. Returns the term's value too.
pub fn ds_term_gradients(
    model: &Model,
    batches: &[DomainBatch],
    metric: DsMetric,
    reversal: Option<f64>,
) -> Result<(f64, GradSet)> {
    let cfg = ObjectiveConfig {
        metric,
        lambda: 1.0,
        ..ObjectiveConfig::default()
    };
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, |_| true);
    let terms = build_terms(&mut tape, model, &binding, batches, &cfg, reversal)?;
    let grads = tape.backward(terms.ds);
    Ok((
        tape.value(terms.ds).item(),
        model.collect_grads(&grads, &binding),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn pair_value(p: &[&[f64]], q: &[&[f64]], metric: DsMetric) -> f64 {
        let mut t = Tape::new();
        let (a, b) = (t.constant(probs(p)), t.constant(probs(q)));
        let v = ds_pair(&mut t, a, b, metric).unwrap();
        t.value(v).item()
    }

    #[test]
    fn ds_pair_examples() {
        for m in DsMetric::ALL {
            assert_eq!(pair_value(&[&[0.2, 0.8]], &[&[0.2, 0.8]], m), 0.0);
        }
        let l1 = pair_value(&[&[0.7, 0.3]], &[&[0.4, 0.6]], DsMetric::L1);
        assert!((l1 - 0.6).abs() < 1e-12);
        let l2 = pair_value(&[&[0.7, 0.3]], &[&[0.4, 0.6]], DsMetric::L2);
        assert!((l2 - 0.18).abs() < 1e-12);
        let kl = pair_value(&[&[0.7, 0.3]], &[&[0.4, 0.6]], DsMetric::Kl);
        let want = 0.5
            * (0.7 * (0.7f64 / 0.4).ln()
                + 0.3 * (0.3f64 / 0.6).ln()
                + 0.4 * (0.4f64 / 0.7).ln()
                + 0.6 * (0.6f64 / 0.3).ln());
        assert!((kl - want).abs() < 1e-12);
    }

    #[test]
    fn ds_pair_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(probs(&[&[0.5, 0.5]]));
        let b = t.constant(probs(&[&[0.5, 0.5], &[0.1, 0.9]]));
        assert!(matches!(
            ds_pair(&mut t, a, b, DsMetric::L1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pairs_are_unordered() {
        assert_eq!(head_pairs(&[0, 1, 2]), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(head_pairs(&[1, 2, 3]), vec![(1, 2), (1, 3), (2, 3)]);
        assert!(head_pairs(&[4]).is_empty());
    }

    #[test]
    fn ds_test_on_two_heads_single_row() {
        // F=1, C=2: pick head weights whose softmax outputs on s=[[1]] are
        // [0.7, 0.3] and [0.4, 0.6].
        let mut m = build_model(1, &[], 1, 2, 2, 0).unwrap();
        m.bank.heads[0].weight = Tensor::from_rows(&[vec![(0.7f64 / 0.3).ln(), 0.0]]).unwrap();
        m.bank.heads[1].weight = Tensor::from_rows(&[vec![(0.4f64 / 0.6).ln(), 0.0]]).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, |_| false);
        let s = t.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let v = ds_test(&mut t, &m, &b, s, DsMetric::L1).unwrap();
        assert!((t.value(v).item() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ds_train_excludes_meta_source() {
        let m = build_model(2, &[], 3, 2, 3, 0).unwrap();
        assert_eq!(meta_target_heads(&m, 0).unwrap(), vec![1, 2]);
        let m2 = build_model(2, &[], 3, 2, 2, 0).unwrap();
        assert!(matches!(meta_target_heads(&m2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_reg_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[&[0.9, 0.1], &[0.1, 0.9]]));
        let v = entropy_reg(&mut t, p);
        assert!((t.value(v).item() - 2f64.ln()).abs() < 1e-12);

        let p = t.constant(probs(&[&[1.0, 0.0]]));
        let v = entropy_reg(&mut t, p);
        let want = -0.5 * (1f64.ln() + EPS_LOG.ln());
        assert!((t.value(v).item() - want).abs() < 1e-12);

        let p = t.constant(probs(&[&[0.25; 4]]));
        let v = entropy_reg(&mut t, p);
        assert!((t.value(v).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prediction_entropy_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let v = prediction_entropy(&mut t, p).unwrap();
        assert_eq!(t.value(v).item(), 0.0);
        let p = t.constant(probs(&[&[0.5, 0.5]]));
        let v = prediction_entropy(&mut t, p).unwrap();
        assert!((t.value(v).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pseudo_label_examples() {
        let mut t = Tape::new();
        let p = t.constant(probs(&[&[0.95, 0.05], &[0.8, 0.2]]));
        let (v, kept) = pseudo_label_loss(&mut t, p, 0.9).unwrap();
        assert_eq!(kept, 1);
        assert!((t.value(v).item() + 0.95f64.ln()).abs() < 1e-15);

        let p = t.constant(probs(&[&[0.8, 0.2]]));
        let (v, kept) = pseudo_label_loss(&mut t, p, 0.9).unwrap();
        assert_eq!((kept, t.value(v).item()), (0, 0.0));

        let p = t.constant(probs(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let (v, kept) = pseudo_label_loss(&mut t, p, 0.9).unwrap();
        assert_eq!((kept, t.value(v).item()), (2, 0.0));
    }

    #[test]
    fn coral_examples() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert!((coral_distance_value(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(coral_distance_value(&a, &a).unwrap(), 0.0);

        let x = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        let mut shifted = x.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { 3.0 } else { -4.0 };
        }
        assert!((coral_distance_value(&x, &shifted).unwrap() - 25.0).abs() < 1e-12);

        let one = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            coral_distance_value(&one, &x),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0]).0, 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]).0, 1);
    }

    #[test]
    fn metric_parsing() {
        for m in DsMetric::ALL {
            assert_eq!(m.to_string().parse::<DsMetric>().unwrap(), m);
        }
        assert!("cosine".parse::<DsMetric>().is_err());
    }
}
