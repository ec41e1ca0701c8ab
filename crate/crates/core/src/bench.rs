//! Experiment runner: synthetic domains → source training → streaming
//! adaptation, plus the ablation grid and result writers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_stream, make_stream, stream_checksum, AdaptConfig, AdaptOutcome, Method};
use crate::data::{generate, split, DomainSpec, Family, LabeledSet, SplitDataset, Standardizer};
use crate::diffnet::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::objectives::{coral_distance_value, DsMetric};
use crate::train::{prepare_sources, train_source_model, TrainConfig, TrainOutcome};

const STREAM_SEED_OFFSET: u64 = 0x5EED_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub family: Family,
    /// One domain per entry (rotation in degrees, or blob shift).
    pub domain_params: Vec<f64>,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub target_domain: usize,
    /// Source domain indices; all non-target domains when absent.
    pub sources: Option<Vec<usize>>,
    /// Fraction of each source domain kept before splitting.
    pub source_fraction: f64,
    /// Training share of each source domain's train/validation split.
    pub train_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Heads per source domain; when absent, 1 with three or more sources,
    /// 2 with two sources and 3 with one.
    pub heads_per_domain: Option<usize>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub methods: Vec<AdaptConfig>,
    /// Parallel runs; 0 lets the thread pool decide.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "rotated_moons".into(),
            family: Family::RotatedMoons,
            domain_params: vec![0.0, 30.0, 60.0, 90.0],
            n_samples: 1000,
            noise_sigma: 0.15,
            target_domain: 3,
            sources: None,
            source_fraction: 1.0,
            train_fraction: 0.8,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            heads_per_domain: None,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            methods: Method::ALL
                .into_iter()
                .map(|method| AdaptConfig {
                    method,
                    ..AdaptConfig::default()
                })
                .collect(),
            workers: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn source_domains(&self) -> Vec<usize> {
        self.sources.clone().unwrap_or_else(|| {
            (0..self.domain_params.len())
                .filter(|&d| d != self.target_domain)
                .collect()
        })
    }

    pub fn heads_per_domain(&self) -> usize {
        self.heads_per_domain
            .unwrap_or(match self.source_domains().len() {
                0 | 1 => 3,
                2 => 2,
                _ => 1,
            })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::per_domain(
            self.family.input_dim(),
            self.hidden_dims.clone(),
            self.feature_dim,
            self.family.num_classes(),
            self.source_domains().len(),
            self.heads_per_domain(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.domain_params.len();
        if self.target_domain >= n {
            return bad(format!(
                "target_domain {} out of range for {n} domains",
                self.target_domain
            ));
        }
        let sources = self.source_domains();
        if sources.is_empty() {
            return bad("no source domains".into());
        }
        for (i, &s) in sources.iter().enumerate() {
            if s >= n {
                return bad(format!("source domain {s} out of range for {n} domains"));
            }
            if s == self.target_domain {
                return bad(format!("source domain {s} is the target domain"));
            }
            if sources[..i].contains(&s) {
                return bad(format!("source domain {s} listed twice"));
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        if self.methods.is_empty() {
            return bad("at least one adaptation method is required".into());
        }
        if !(self.source_fraction > 0.0 && self.source_fraction <= 1.0) {
            return bad(format!(
                "source_fraction must lie in (0, 1], got {}",
                self.source_fraction
            ));
        }
        self.train.validate()?;
        for m in &self.methods {
            m.validate()?;
        }
        Model::new(self.architecture(), 0).map(|_| ())
    }
}

/// Seed of domain `d`'s sample draw in run `seed`.
fn data_seed(seed: u64, d: usize) -> u64 {
    seed.wrapping_mul(10_007).wrapping_add(d as u64)
}

fn stream_seed(seed: u64) -> u64 {
    seed.wrapping_add(STREAM_SEED_OFFSET)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub target_domain: usize,
    pub sources: String,
    pub method: Method,
    pub test_batch_size: usize,
    pub steps_per_batch: usize,
    pub lr_multiplier: f64,
    pub seed: u64,
    pub frozen_accuracy: f64,
    pub adapted_accuracy: f64,
    pub gain: f64,
    pub mean_ds_target: f64,
    pub coral_indicator_before: f64,
    pub coral_indicator_after: f64,
    pub best_val_acc: f64,
    pub stream_checksum: String,
    pub failed: bool,
    pub error: String,
    /// Seconds spent training (shared by every row of a seed) and adapting.
    /// Kept out of serialized results so reruns compare bit-exactly.
    #[serde(skip)]
    pub wall_time: WallTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WallTime {
    pub train_s: f64,
    pub adapt_s: f64,
}

impl ResultRow {
    fn failed(spec: &ExperimentSpec, cfg: &AdaptConfig, seed: u64, err: &Error) -> Self {
        Self {
            experiment: spec.name.clone(),
            target_domain: spec.target_domain,
            sources: join_sources(&spec.source_domains()),
            method: cfg.method,
            test_batch_size: cfg.test_batch_size,
            steps_per_batch: cfg.steps_per_batch,
            lr_multiplier: cfg.lr_multiplier,
            seed,
            frozen_accuracy: f64::NAN,
            adapted_accuracy: f64::NAN,
            gain: f64::NAN,
            mean_ds_target: f64::NAN,
            coral_indicator_before: f64::NAN,
            coral_indicator_after: f64::NAN,
            best_val_acc: f64::NAN,
            stream_checksum: String::new(),
            failed: true,
            error: err.to_string(),
            wall_time: WallTime::default(),
        }
    }
}

fn join_sources(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Source splits, the target domain and the fitted standardizer of one run.
pub struct RunData {
    pub sources: Vec<SplitDataset>,
    pub target: LabeledSet,
    pub standardizer: Standardizer,
}

pub fn build_run_data(spec: &ExperimentSpec, seed: u64) -> Result<RunData> {
    let domain = |d: usize| {
        generate(&DomainSpec {
            family: spec.family.clone(),
            domain_param: spec.domain_params[d],
            n_samples: spec.n_samples,
            noise_sigma: spec.noise_sigma,
            seed: data_seed(seed, d),
        })
    };
    let mut raw = Vec::new();
    for d in spec.source_domains() {
        let set = domain(d)?;
        raw.push(if spec.source_fraction < 1.0 {
            split(&set, spec.source_fraction, data_seed(seed, d) ^ 0xF00D)?.train
        } else {
            set
        });
    }
    let (sources, standardizer) = prepare_sources(&raw, spec.train_fraction, seed)?;
    let target = standardizer.apply(&domain(spec.target_domain)?);
    Ok(RunData {
        sources,
        target,
        standardizer,
    })
}

pub fn train_run(spec: &ExperimentSpec, data: &RunData, seed: u64) -> Result<TrainOutcome> {
    let model = Model::new(spec.architecture(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    train_source_model(&data.sources, model, &cfg)
}

/// Features of every source validation split, each normalized as one batch
/// under `mode`, stacked. Computed with the same model as the target
/// features they are compared against.
fn source_reference_features(model: &Model, data: &RunData, mode: Mode) -> Result<Tensor> {
    let parts = data
        .sources
        .iter()
        .map(|s| model.features(&s.val.x, mode))
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Frozen and adapted passes over one seed's target stream, for each
/// configured method.
fn run_seed(spec: &ExperimentSpec, seed: u64) -> Vec<ResultRow> {
    let fail_all = |e: &Error| {
        spec.methods
            .iter()
            .map(|m| ResultRow::failed(spec, m, seed, e))
            .collect()
    };
    let start = Instant::now();
    let trained = build_run_data(spec, seed).and_then(|data| {
        let out = train_run(spec, &data, seed)?;
        Ok((data, out))
    });
    let train_s = start.elapsed().as_secs_f64();
    let (data, trained) = match trained {
        Ok(v) => v,
        Err(e) => return fail_all(&e),
    };
    let train_cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };

    // Frozen passes depend only on batch size and normalization mode.
    let mut frozen: BTreeMap<(usize, bool), Result<(AdaptOutcome, String)>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(spec.methods.len());
    for cfg in &spec.methods {
        let t0 = Instant::now();
        let key = (
            cfg.test_batch_size,
            cfg.bn_stats == crate::adapt::BnStats::Batch,
        );
        let base = frozen.entry(key).or_insert_with(|| {
            let stream = make_stream(&data.target, cfg.test_batch_size, stream_seed(seed));
            let checksum = stream_checksum(&stream);
            let none = AdaptConfig {
                method: Method::None,
                ..cfg.clone()
            };
            adapt_stream(trained.model.clone(), stream, &none, &train_cfg).map(|o| (o, checksum))
        });
        let row = match base {
            Err(e) => ResultRow::failed(spec, cfg, seed, e),
            Ok((base, checksum)) => {
                let result = (|| -> Result<ResultRow> {
                    let adapted = if cfg.method == Method::None {
                        base.clone()
                    } else {
                        let stream =
                            make_stream(&data.target, cfg.test_batch_size, stream_seed(seed));
                        adapt_stream(trained.model.clone(), stream, cfg, &train_cfg)?
                    };
                    let mode = cfg.bn_stats.mode();
                    let before = source_reference_features(&trained.model, &data, mode)?;
                    let after = source_reference_features(&adapted.model, &data, mode)?;
                    let frozen_acc = base.stats.running_accuracy;
                    let adapted_acc = adapted.stats.running_accuracy;
                    Ok(ResultRow {
                        experiment: spec.name.clone(),
                        target_domain: spec.target_domain,
                        sources: join_sources(&spec.source_domains()),
                        method: cfg.method,
                        test_batch_size: cfg.test_batch_size,
                        steps_per_batch: cfg.steps_per_batch,
                        lr_multiplier: cfg.lr_multiplier,
                        seed,
                        frozen_accuracy: frozen_acc,
                        adapted_accuracy: adapted_acc,
                        gain: adapted_acc - frozen_acc,
                        mean_ds_target: mean(&base.stats.per_batch_ds_before()),
                        coral_indicator_before: coral_distance_value(&before, &base.features)?,
                        coral_indicator_after: coral_distance_value(&after, &adapted.features)?,
                        best_val_acc: trained.best_val_acc,
                        stream_checksum: checksum.clone(),
                        failed: false,
                        error: String::new(),
                        wall_time: WallTime::default(),
                    })
                })();
                result.unwrap_or_else(|e| ResultRow::failed(spec, cfg, seed, &e))
            }
        };
        let mut row = row;
        row.wall_time = WallTime {
            train_s,
            adapt_s: t0.elapsed().as_secs_f64(),
        };
        rows.push(row);
    }
    rows
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains once per seed and runs every method on a clone of that model over
/// the same target stream. Rows come back in (seed, method) spec order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    with_workers(spec.workers, || {
        spec.seeds
            .par_iter()
            .map(|&seed| run_seed(spec, seed))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    DsMetric,
    BatchSize,
    Steps,
    LrMult,
    HeadsSingleSource,
    NumSourceDomains,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::Lambda,
        Axis::DsMetric,
        Axis::BatchSize,
        Axis::Steps,
        Axis::LrMult,
        Axis::HeadsSingleSource,
        Axis::NumSourceDomains,
    ];

    /// Values swept along this axis, as printed in result tables.
    pub fn values(self) -> Vec<String> {
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect();
        match self {
            Axis::Lambda => f(&[0.0, 0.3, 0.6, 0.9, 1.2, 1.5]),
            Axis::DsMetric => DsMetric::ALL.iter().map(ToString::to_string).collect(),
            Axis::BatchSize => vec!["1".into(), "64".into()],
            Axis::Steps => vec!["1".into(), "3".into(), "5".into(), "7".into()],
            Axis::LrMult => f(&[0.1, 1.0, 10.0]),
            Axis::HeadsSingleSource => vec!["2".into(), "3".into(), "4".into()],
            Axis::NumSourceDomains => vec!["2".into(), "3".into()],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Lambda => "lambda",
            Axis::DsMetric => "ds_metric",
            Axis::BatchSize => "batch_size",
            Axis::Steps => "steps",
            Axis::LrMult => "lr_mult",
            Axis::HeadsSingleSource => "heads_single_source",
            Axis::NumSourceDomains => "num_source_domains",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub row: ResultRow,
}

/// Sub-experiments for one axis, each paired with its axis value.
pub fn ablation_specs(base: &ExperimentSpec, axis: Axis) -> Result<Vec<(String, ExperimentSpec)>> {
    let sources = base.source_domains();
    let mut out = Vec::new();
    let adapt_axis = |f: &dyn Fn(&mut AdaptConfig, &str)| {
        axis.values()
            .into_iter()
            .map(|v| {
                let mut spec = base.clone();
                for m in &mut spec.methods {
                    f(m, &v);
                }
                spec.name = format!("{}/{axis}={v}", base.name);
                (v, spec)
            })
            .collect::<Vec<_>>()
    };
    match axis {
        Axis::Lambda => {
            for v in axis.values() {
                let mut spec = base.clone();
                spec.train.lambda = v.parse().expect("axis values parse");
                spec.name = format!("{}/{axis}={v}", base.name);
                out.push((v, spec));
            }
        }
        Axis::DsMetric => {
            for v in axis.values() {
                let metric: DsMetric = v.parse()?;
                let mut spec = base.clone();
                spec.train.ds_metric = metric;
                for m in &mut spec.methods {
                    m.ds_metric = metric;
                }
                spec.name = format!("{}/{axis}={v}", base.name);
                out.push((v, spec));
            }
        }
        Axis::BatchSize => out = adapt_axis(&|m, v| m.test_batch_size = v.parse().expect("int")),
        Axis::Steps => out = adapt_axis(&|m, v| m.steps_per_batch = v.parse().expect("int")),
        Axis::LrMult => out = adapt_axis(&|m, v| m.lr_multiplier = v.parse().expect("float")),
        Axis::HeadsSingleSource => {
            let source = *sources
                .first()
                .ok_or_else(|| Error::Config("no sources".into()))?;
            for v in axis.values() {
                let mut spec = base.clone();
                spec.sources = Some(vec![source]);
                spec.heads_per_domain = Some(v.parse().expect("int"));
                spec.name = format!("{}/{axis}={v}", base.name);
                out.push((v, spec));
            }
        }
        Axis::NumSourceDomains => {
            // Equal total source data: k sources at 1.8/k of each domain,
            // every k-subset of the base sources.
            for v in axis.values() {
                let k: usize = v.parse().expect("int");
                if k > sources.len() {
                    continue;
                }
                for subset in k_subsets(&sources, k) {
                    let mut spec = base.clone();
                    spec.source_fraction = (1.8 / k as f64).min(1.0) * base.source_fraction;
                    spec.name = format!("{}/{axis}={v}/{}", base.name, join_sources(&subset));
                    spec.sources = Some(subset);
                    spec.heads_per_domain = None;
                    out.push((v.clone(), spec));
                }
            }
        }
    }
    Ok(out)
}

fn k_subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut with: Vec<Vec<usize>> = k_subsets(&items[1..], k - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, items[0]);
            s
        })
        .collect();
    with.extend(k_subsets(&items[1..], k));
    with
}

/// Runs every sub-experiment of `axis` with the base seeds. Axes that only
/// change adaptation settings share one trained model per seed.
pub fn run_ablation_grid(base: &ExperimentSpec, axis: Axis) -> Result<Vec<AblationRow>> {
    let specs = ablation_specs(base, axis)?;
    for (_, s) in &specs {
        s.validate()?;
    }
    let adapt_only = matches!(axis, Axis::BatchSize | Axis::Steps | Axis::LrMult);
    if adapt_only {
        let mut merged = base.clone();
        merged.methods = specs.iter().flat_map(|(_, s)| s.methods.clone()).collect();
        let per_value = base.methods.len();
        let rows = with_workers(base.workers, || {
            merged
                .seeds
                .par_iter()
                .map(|&seed| run_seed(&merged, seed))
                .collect::<Vec<_>>()
        })?;
        let mut out = Vec::new();
        for (i, (value, spec)) in specs.iter().enumerate() {
            for seed_rows in &rows {
                out.extend(
                    seed_rows[i * per_value..(i + 1) * per_value]
                        .iter()
                        .map(|row| AblationRow {
                            axis,
                            value: value.clone(),
                            row: ResultRow {
                                experiment: spec.name.clone(),
                                ..row.clone()
                            },
                        }),
                );
            }
        }
        return Ok(out);
    }
    let rows = with_workers(base.workers, || {
        specs
            .par_iter()
            .flat_map_iter(|(_, s)| s.seeds.iter().map(move |&seed| (s, seed)))
            .map(|(s, seed)| run_seed(s, seed))
            .collect::<Vec<_>>()
    })?;
    let per_spec = base.seeds.len();
    let mut out = Vec::new();
    for (i, seed_rows) in rows.into_iter().enumerate() {
        let value = &specs[i / per_spec].0;
        out.extend(seed_rows.into_iter().map(|row| AblationRow {
            axis,
            value: value.clone(),
            row,
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub stderr: f64,
}

pub fn aggregate(xs: &[f64]) -> Aggregate {
    let n = xs.len();
    if n == 0 {
        return Aggregate {
            n,
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let m = mean(xs);
    let stderr = if n > 1 {
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { n, mean: m, stderr }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub group: String,
    pub frozen_accuracy: Aggregate,
    pub adapted_accuracy: Aggregate,
    pub gain: Aggregate,
    pub failed_rows: usize,
}

fn group_label(r: &ResultRow) -> String {
    format!(
        "{}|{}|b{}|s{}|lr{:?}",
        r.experiment, r.method, r.test_batch_size, r.steps_per_batch, r.lr_multiplier
    )
}

/// Mean and standard error over seeds for each experiment/method setting,
/// in first-appearance order. Failed rows are counted, not averaged.
pub fn summarize(rows: &[ResultRow]) -> Vec<MethodSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let g = group_label(r);
        if !groups.contains_key(&g) {
            order.push(g.clone());
        }
        groups.entry(g).or_default().push(r);
    }
    order
        .into_iter()
        .map(|g| {
            let rs = &groups[&g];
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| !r.failed).collect();
            let col = |f: fn(&ResultRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
            MethodSummary {
                frozen_accuracy: aggregate(&col(|r| r.frozen_accuracy)),
                adapted_accuracy: aggregate(&col(|r| r.adapted_accuracy)),
                gain: aggregate(&col(|r| r.gain)),
                failed_rows: rs.len() - ok.len(),
                group: g,
            }
        })
        .collect()
}

const ROW_HEADER: &str = "experiment,target_domain,sources,method,test_batch_size,\
steps_per_batch,lr_multiplier,seed,frozen_accuracy,adapted_accuracy,gain,mean_ds_target,\
coral_indicator_before,coral_indicator_after,best_val_acc,stream_checksum,failed,error";

fn row_fields(r: &ResultRow) -> String {
    format!(
        "{},{},{},{},{},{},{:?},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},\"{}\"",
        r.experiment,
        r.target_domain,
        r.sources,
        r.method,
        r.test_batch_size,
        r.steps_per_batch,
        r.lr_multiplier,
        r.seed,
        r.frozen_accuracy,
        r.adapted_accuracy,
        r.gain,
        r.mean_ds_target,
        r.coral_indicator_before,
        r.coral_indicator_after,
        r.best_val_acc,
        r.stream_checksum,
        r.failed,
        r.error.replace('"', "'"),
    )
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_lines(
        path,
        std::iter::once(ROW_HEADER.to_string()).chain(rows.iter().map(row_fields)),
    )
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_lines(
        path,
        std::iter::once(format!("axis,value,{ROW_HEADER}")).chain(
            rows.iter()
                .map(|a| format!("{},{},{}", a.axis, a.value, row_fields(&a.row))),
        ),
    )
}

/// Long format: one line per successful run.
pub fn write_gains_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_lines(
        path,
        std::iter::once("group,seed,gain".to_string()).chain(
            rows.iter()
                .filter(|r| !r.failed)
                .map(|r| format!("{},{},{:?}", group_label(r), r.seed, r.gain)),
        ),
    )
}

pub fn write_timings_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_lines(
        path,
        std::iter::once("group,seed,train_s,adapt_s".to_string()).chain(rows.iter().map(|r| {
            format!(
                "{},{},{},{}",
                group_label(r),
                r.seed,
                r.wall_time.train_s,
                r.wall_time.adapt_s
            )
        })),
    )
}

pub fn write_summary_json(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(&summarize(rows)).expect("summary serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `summary.json`, `gains.csv` and `timings.csv`.
pub fn write_outputs(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(&dir.join("results.csv"), rows)?;
    write_summary_json(&dir.join("summary.json"), rows)?;
    write_gains_csv(&dir.join("gains.csv"), rows)?;
    write_timings_csv(&dir.join("timings.csv"), rows)
}

/// Eval-mode features as `f0..f{F−1},label,domain` rows.
pub fn export_features(model: &Model, domains: &[(usize, &LabeledSet)], path: &Path) -> Result<()> {
    let mut lines = Vec::new();
    let width = model.arch.feature_dim;
    lines.push(
        (0..width)
            .map(|j| format!("f{j}"))
            .chain(["label".into(), "domain".into()])
            .collect::<Vec<_>>()
            .join(","),
    );
    for (d, set) in domains {
        let feats = model.features(&set.x, Mode::Eval)?;
        for i in 0..set.len() {
            let mut fields: Vec<String> = feats.row(i).iter().map(|v| format!("{v:?}")).collect();
            fields.push(set.y[i].to_string());
            fields.push(d.to_string());
            lines.push(fields.join(","));
        }
    }
    write_lines(path, lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSpec {
        ExperimentSpec {
            n_samples: 120,
            hidden_dims: vec![8],
            feature_dim: 4,
            seeds: vec![0, 1],
            train: TrainConfig {
                steps: 20,
                batch_size: 16,
                eval_every: 10,
                ..TrainConfig::default()
            },
            methods: Method::ALL
                .into_iter()
                .map(|method| AdaptConfig {
                    method,
                    test_batch_size: 16,
                    ..AdaptConfig::default()
                })
                .collect(),
            workers: 2,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn rows_cover_seeds_times_methods() {
        let spec = tiny();
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(!r.failed, "{}", r.error);
            assert_eq!(r.gain, r.adapted_accuracy - r.frozen_accuracy);
            if r.method == Method::None {
                assert_eq!(r.gain, 0.0);
            }
        }
        let sums: Vec<&str> = rows
            .iter()
            .filter(|r| r.seed == 0)
            .map(|r| r.stream_checksum.as_str())
            .collect();
        assert!(sums.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(rows[0].sources, "0;1;2");
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny();
        s.sources = Some(vec![0, 3]);
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.seeds = vec![1, 1];
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.target_domain = 9;
        assert!(s.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn default_heads_follow_source_count() {
        let mut s = ExperimentSpec::default();
        assert_eq!(s.architecture().head_owners, [0, 1, 2]);
        s.sources = Some(vec![0, 1]);
        assert_eq!(s.architecture().head_owners, [0, 0, 1, 1]);
        s.sources = Some(vec![0]);
        assert_eq!(s.architecture().head_owners, [0, 0, 0]);
    }

    #[test]
    fn spec_parses_from_toml() {
        let s = ExperimentSpec::from_toml(
            r#"
            name = "t"
            domain_params = [0.0, 45.0]
            target_domain = 1
            seeds = [4]

            [family]
            kind = "shifted_blobs"
            classes = 3
            dim = 5

            [train]
            steps = 10
            lambda = 0.9

            [[methods]]
            method = "tent"
            steps_per_batch = 3
            "#,
        )
        .unwrap();
        assert_eq!(s.family, Family::ShiftedBlobs { classes: 3, dim: 5 });
        assert_eq!(s.train.lambda, 0.9);
        assert_eq!(s.train.batch_size, 64);
        assert_eq!(s.methods.len(), 1);
        assert_eq!(s.methods[0].method, Method::Tent);
        assert!(ExperimentSpec::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn axis_values() {
        assert_eq!(
            Axis::Lambda.values(),
            ["0.0", "0.3", "0.6", "0.9", "1.2", "1.5"]
        );
        assert_eq!(Axis::DsMetric.values(), ["l1", "l2", "kl"]);
        for a in Axis::ALL {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        let subs = ablation_specs(&ExperimentSpec::default(), Axis::NumSourceDomains).unwrap();
        let names: Vec<Option<Vec<usize>>> = subs.iter().map(|(_, s)| s.sources.clone()).collect();
        assert_eq!(
            names,
            [
                Some(vec![0, 1]),
                Some(vec![0, 2]),
                Some(vec![1, 2]),
                Some(vec![0, 1, 2])
            ]
        );
        assert!((subs[0].1.source_fraction - 0.9).abs() < 1e-12);
        assert!((subs[3].1.source_fraction - 0.6).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_hand_values() {
        let a = aggregate(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((a.stderr - sd / 2.0).abs() < 1e-15);
        assert_eq!(aggregate(&[7.0]).stderr, 0.0);
    }

    #[test]
    fn feature_export_is_reproducible() {
        let spec = tiny();
        let data = build_run_data(&spec, 0).unwrap();
        let model = Model::new(spec.architecture(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let sets = [(0, &data.sources[0].val), (3, &data.target)];
        export_features(&model, &sets, &a).unwrap();
        export_features(&model, &sets, &b).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert_eq!(text, fs::read_to_string(&b).unwrap());
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap().split(',').count(),
            spec.feature_dim + 2
        );
        assert_eq!(lines.count(), data.sources[0].val.len() + data.target.len());
    }
}
