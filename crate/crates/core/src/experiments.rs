//! Experiment harness: dataset files, the factorized-normal baseline,
//! replicated runs, ablation grids and density-grid exports.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, ParamLayout, ParamVector, Tape, Var};
use crate::flow::{BoxDomain, DensityModel, FlowArchitecture, FlowError, FlowModel};
use crate::metrics::{self, MetricConfig, MetricError, MetricReport};
use crate::preference::{Observation, ObjectiveConfig, PreferenceDataset, PreferenceError};
use crate::rum::{CandidateSampler, RumError, RumExpert};
use crate::targets::{TargetDensity, TargetError, TargetName};
use crate::train::{self, TrainConfig, TrainError, TrainReport};

pub const DATASET_FORMAT: &str = "prefflow-v1";
pub const NORMAL_FORMAT: &str = "prefflow-normal-v1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Rum(#[from] RumError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Independent seed stream `stream` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed streams for [`derive_seed`].
pub const STREAM_DATA: u64 = 1;
pub const STREAM_HELDOUT: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_TRAIN: u64 = 4;
pub const STREAM_TARGET: u64 = 5;
pub const STREAM_EVAL: u64 = 6;

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub dim: usize,
    pub k: usize,
}

impl DatasetHeader {
    pub fn new(dim: usize, k: usize) -> Self {
        Self {
            format: DATASET_FORMAT.to_string(),
            dim,
            k,
        }
    }
}

pub fn header_line(header: &DatasetHeader) -> String {
    serde_json::to_string(header).expect("header serializes")
}

pub fn observation_line(obs: &Observation) -> String {
    serde_json::to_string(obs).expect("observation serializes")
}

pub fn write_dataset<W: Write>(mut w: W, dataset: &PreferenceDataset, k: usize) -> Result<(), ExperimentError> {
    let header = DatasetHeader::new(dataset.dim(), k);
    let io = |e| ExperimentError::Io {
        path: "<writer>".into(),
        source: e,
    };
    writeln!(w, "{}", header_line(&header)).map_err(io)?;
    for (i, obs) in dataset.observations().iter().enumerate() {
        if obs.k() != k {
            return Err(ExperimentError::Format {
                line: i + 2,
                reason: format!("choice set has {} points, header says {k}", obs.k()),
            });
        }
        writeln!(w, "{}", observation_line(obs)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, PreferenceDataset), ExperimentError> {
    let mut lines = r.lines().enumerate();
    let bad = |line: usize, reason: String| ExperimentError::Format { line, reason };
    let io = |e| ExperimentError::Io {
        path: "<reader>".into(),
        source: e,
    };
    let header: DatasetHeader = match lines.next() {
        Some((_, l)) => serde_json::from_str(&l.map_err(io)?).map_err(|e| bad(1, e.to_string()))?,
        None => return Err(bad(1, "missing header".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(bad(1, format!("unsupported format {:?}", header.format)));
    }
    let mut observations = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let obs: Observation = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        obs.validate(header.dim).map_err(|e| bad(i + 1, e))?;
        if obs.k() != header.k {
            return Err(bad(i + 1, format!("choice set has {} points, header says {}", obs.k(), header.k)));
        }
        observations.push(obs);
    }
    let dataset = PreferenceDataset::new(header.dim, observations)?;
    Ok((header, dataset))
}

pub fn save_dataset(path: &Path, dataset: &PreferenceDataset, k: usize) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_dataset(BufWriter::new(file), dataset, k).map_err(|e| with_path(e, path))
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, PreferenceDataset), ExperimentError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file)).map_err(|e| with_path(e, path))
}

fn with_path(e: ExperimentError, path: &Path) -> ExperimentError {
    match e {
        ExperimentError::Io { source, .. } => ExperimentError::Io {
            path: path.display().to_string(),
            source,
        },
        ExperimentError::Format { line, reason } => ExperimentError::Format {
            line,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

/// Gaussian-uniform mixture centered on the target mean.
pub fn target_sampler(target: &TargetDensity, w: f64) -> Result<CandidateSampler, ExperimentError> {
    Ok(CandidateSampler::centered_mixture(target.domain().clone(), target.mean(), w)?)
}

/// `n` simulated k-wise rankings of the target.
pub fn generate_dataset(
    target: &TargetDensity,
    sampler: &CandidateSampler,
    k: usize,
    n: usize,
    s_true: f64,
    seed: u64,
) -> Result<PreferenceDataset, ExperimentError> {
    let expert = RumExpert::from_target(target.clone(), s_true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observations = Vec::with_capacity(n);
    for _ in 0..n {
        let set = sampler.choice_set(k, &mut rng)?;
        let response = expert.respond(&set, &mut rng);
        observations.push(Observation::ranking(set.points, response.ranking));
    }
    Ok(PreferenceDataset::new(target.dim(), observations)?)
}

// ---------------------------------------------------------------- baseline

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormalCheckpoint {
    format: String,
    domain: BoxDomain,
    params: Vec<f64>,
}

/// Product of independent normals with free means and log standard deviations.
#[derive(Debug, Clone)]
pub struct FactorizedNormalModel {
    domain: BoxDomain,
    params: ParamVector,
}

impl FactorizedNormalModel {
    /// Starts at the same density as an identity-initialized flow on `domain`.
    pub fn new(domain: BoxDomain) -> Self {
        let bound = FlowArchitecture::default_for(domain.dim()).whiten_bound;
        let mut values = domain.center();
        values.extend((0..domain.dim()).map(|i| (domain.width(i) / (2.0 * bound)).ln()));
        Self::with_values(domain, values).expect("finite initial parameters")
    }

    fn with_values(domain: BoxDomain, values: Vec<f64>) -> Result<Self, DiffError> {
        let mut layout = ParamLayout::new();
        layout.push("mean", domain.dim());
        layout.push("log_sd", domain.dim());
        Ok(Self {
            params: layout.finish(values)?,
            domain,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.params.values()[..self.domain.dim()]
    }

    pub fn log_sd(&self) -> &[f64] {
        &self.params.values()[self.domain.dim()..]
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, FlowError> {
        let ck: NormalCheckpoint = serde_json::from_str(json)?;
        if ck.format != NORMAL_FORMAT {
            return Err(FlowError::Format(format!("expected {NORMAL_FORMAT}, got {}", ck.format)));
        }
        if ck.params.len() != 2 * ck.domain.dim() {
            return Err(FlowError::Format("parameter count does not match dimension".into()));
        }
        Ok(Self::with_values(ck.domain, ck.params)?)
    }
}

impl DensityModel for FactorizedNormalModel {
    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn set_params(&mut self, values: &[f64]) -> Result<(), DiffError> {
        self.params.set_values(values)
    }

    fn record_log_density(&self, tape: &mut Tape<'_>, x: &[f64]) -> Var {
        let d = self.domain.dim();
        let mean = tape.param(0..d);
        let log_sd = tape.param(d..2 * d);
        let xv = tape.constant(x);
        let diff = tape.sub(xv, mean);
        let inv_sd = {
            let neg = tape.neg(log_sd);
            tape.exp(neg)
        };
        let z = tape.mul(diff, inv_sd);
        let sq = tape.mul(z, z);
        let quad = tape.sum(sq);
        let quad = tape.scale(quad, -0.5);
        let logdet = tape.sum(log_sd);
        let lp = tape.sub(quad, logdet);
        tape.offset(lp, -0.5 * d as f64 * (2.0 * PI).ln())
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mean, log_sd) = (self.mean(), self.log_sd());
        Ok((0..n)
            .map(|_| {
                mean.iter()
                    .zip(log_sd)
                    .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect())
    }

    fn checkpoint_json(&self) -> Result<String, FlowError> {
        let ck = NormalCheckpoint {
            format: NORMAL_FORMAT.into(),
            domain: self.domain.clone(),
            params: self.params.values().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }
}

/// Loads either checkpoint format.
pub fn load_model(path: &Path) -> Result<Box<dyn DensityModel>, ExperimentError> {
    let json = fs::read_to_string(path).map_err(io_err(path))?;
    let probe: serde_json::Value = serde_json::from_str(&json)?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(NORMAL_FORMAT) => Ok(Box::new(FactorizedNormalModel::from_checkpoint_json(&json)?)),
        _ => Ok(Box::new(FlowModel::load(path)?)),
    }
}

// ---------------------------------------------------------------- experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Flow,
    FactorizedNormal,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Flow => "flow",
            ModelKind::FactorizedNormal => "factorized-normal",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flow" => Ok(ModelKind::Flow),
            "factorized-normal" | "normal" => Ok(ModelKind::FactorizedNormal),
            other => Err(ExperimentError::Spec(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub target: TargetName,
    /// Number of rankings.
    pub n: usize,
    pub k: usize,
    pub s_true: f64,
    pub s_lik: f64,
    /// Gaussian weight of the candidate mixture.
    pub w: f64,
    pub model: ModelKind,
    pub prior: bool,
    /// Overrides the default flow architecture for the target dimension.
    pub architecture: Option<FlowArchitecture>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub heldout_n: usize,
    pub metrics: MetricConfig,
}

impl ExperimentSpec {
    /// Defaults: `n = 100 d`, `k = 5`, `s = 1`, `w = 1/3`, five replicates.
    pub fn new(target: TargetName) -> Self {
        let dim = TargetDensity::new(target).dim();
        Self {
            target,
            n: 100 * dim,
            k: 5,
            s_true: 1.0,
            s_lik: 1.0,
            w: 1.0 / 3.0,
            model: ModelKind::Flow,
            prior: true,
            architecture: None,
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            heldout_n: 200,
            metrics: MetricConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Spec(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        for (name, s) in [("s_true", self.s_true), ("s_lik", self.s_lik)] {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("{name} must be positive, got {s}"));
            }
        }
        if !(0.0..=1.0).contains(&self.w) {
            return bad(format!("w must lie in [0, 1], got {}", self.w));
        }
        if self.seeds.is_empty() {
            return bad("at least one replicate seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("replicate seeds must be distinct".into());
        }
        if self.heldout_n == 0 {
            return bad("heldout_n must be at least 1".into());
        }
        let batch = self.train.batch_size.min(self.n);
        TrainConfig {
            batch_size: batch,
            ..self.train.clone()
        }
        .validate()?;
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            s_lik: self.s_lik,
            prior: self.prior,
        }
    }

    pub fn build_model(&self, domain: &BoxDomain, seed: u64) -> Result<Box<dyn DensityModel>, ExperimentError> {
        Ok(match self.model {
            ModelKind::Flow => {
                let arch = self
                    .architecture
                    .clone()
                    .unwrap_or_else(|| FlowArchitecture::default_for(domain.dim()));
                Box::new(FlowModel::new(domain.clone(), arch, seed)?)
            }
            ModelKind::FactorizedNormal => Box::new(FactorizedNormalModel::new(domain.clone())),
        })
    }
}

pub struct Replicate {
    pub seed: u64,
    pub model: Box<dyn DensityModel>,
    pub train: TrainReport,
    pub metrics: MetricReport,
}

/// Generates data, trains and evaluates one replicate.
pub fn run_replicate(spec: &ExperimentSpec, seed: u64) -> Result<Replicate, ExperimentError> {
    spec.validate()?;
    let target = TargetDensity::new(spec.target);
    let sampler = target_sampler(&target, spec.w)?;
    let data = generate_dataset(&target, &sampler, spec.k, spec.n, spec.s_true, derive_seed(seed, STREAM_DATA))?;
    let heldout = generate_dataset(
        &target,
        &sampler,
        spec.k,
        spec.heldout_n,
        spec.s_true,
        derive_seed(seed, STREAM_HELDOUT),
    )?;
    let mut model = spec.build_model(target.domain(), derive_seed(seed, STREAM_INIT))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, STREAM_TRAIN),
        batch_size: spec.train.batch_size.min(data.len()),
        ..spec.train.clone()
    };
    let report = train::train(model.as_mut(), &data, spec.objective(), &cfg)?;
    let target_samples = target.sample(spec.metrics.samples, derive_seed(seed, STREAM_TARGET))?;
    let metrics = metrics::evaluate(
        model.as_ref(),
        &target_samples,
        &heldout,
        spec.s_lik,
        &spec.metrics,
        derive_seed(seed, STREAM_EVAL),
    )?;
    Ok(Replicate {
        seed,
        model,
        train: report,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub seed: u64,
    pub metrics: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Some(Self { mean, sd, median })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub failed: usize,
    pub loglik: Option<Summary>,
    pub wasserstein: Option<Summary>,
    pub mmtv: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub replicates: Vec<ReplicateOutcome>,
    pub aggregate: Aggregate,
}

impl ExperimentResult {
    pub fn rows(&self) -> Vec<MetricRow> {
        self.replicates
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(|m| MetricRow::new(&self.spec, r.seed, m)))
            .collect()
    }
}

/// Runs every replicate. Failed replicates are recorded and left out of
/// the aggregate. With `out_dir`, writes `metrics.csv`, `summary.json` and
/// per-replicate checkpoints and training reports.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut replicates = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        match run_replicate(spec, seed) {
            Ok(rep) => {
                if let Some(dir) = out_dir {
                    let (model_path, train_path) = replicate_paths(dir, seed);
                    write_file(&model_path, &rep.model.checkpoint_json()?)?;
                    write_file(&train_path, &rep.train.to_json()?)?;
                }
                replicates.push(ReplicateOutcome {
                    seed,
                    metrics: Some(rep.metrics),
                    error: None,
                });
            }
            Err(e @ (ExperimentError::Train(_) | ExperimentError::Metric(_) | ExperimentError::Flow(_))) => {
                replicates.push(ReplicateOutcome {
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let done: Vec<&MetricReport> = replicates.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let pick = |f: fn(&MetricReport) -> f64| Summary::of(&done.iter().map(|m| f(m)).collect::<Vec<_>>());
    let aggregate = Aggregate {
        completed: done.len(),
        failed: replicates.len() - done.len(),
        loglik: pick(|m| m.loglik),
        wasserstein: pick(|m| m.wasserstein),
        mmtv: pick(|m| m.mmtv),
    };
    let result = ExperimentResult {
        spec: spec.clone(),
        replicates,
        aggregate,
    };
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("metrics.csv"), &result.rows())?;
        write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub target: String,
    pub model: String,
    pub n: usize,
    pub k: usize,
    pub s_true: f64,
    pub s_lik: f64,
    pub w: f64,
    pub seed: u64,
    pub loglik: f64,
    pub wasserstein: f64,
    pub mmtv: f64,
}

impl MetricRow {
    pub fn new(spec: &ExperimentSpec, seed: u64, m: &MetricReport) -> Self {
        Self {
            target: spec.target.as_str().into(),
            model: spec.model.as_str().into(),
            n: spec.n,
            k: spec.k,
            s_true: spec.s_true,
            s_lik: spec.s_lik,
            w: spec.w,
            seed,
            loglik: m.loglik,
            wasserstein: m.wasserstein,
            mmtv: m.mmtv,
        }
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record(["target", "model", "n", "k", "s_true", "s_lik", "w", "seed", "loglik", "wasserstein", "mmtv"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

// ---------------------------------------------------------------- ablations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    K(Vec<usize>),
    N(Vec<usize>),
    STrue(Vec<f64>),
    SLik(Vec<f64>),
    W(Vec<f64>),
}

impl AblationAxis {
    pub fn cells(&self, base: &ExperimentSpec) -> Vec<ExperimentSpec> {
        let with = |f: &dyn Fn(&mut ExperimentSpec)| {
            let mut s = base.clone();
            f(&mut s);
            s
        };
        match self {
            AblationAxis::K(v) => v.iter().map(|&k| with(&|s| s.k = k)).collect(),
            AblationAxis::N(v) => v.iter().map(|&n| with(&|s| s.n = n)).collect(),
            AblationAxis::STrue(v) => v.iter().map(|&x| with(&|s| s.s_true = x)).collect(),
            AblationAxis::SLik(v) => v.iter().map(|&x| with(&|s| s.s_lik = x)).collect(),
            AblationAxis::W(v) => v.iter().map(|&x| with(&|s| s.w = x)).collect(),
        }
    }
}

/// One experiment per grid cell; all completed rows go to `ablation.csv`.
pub fn run_ablation(
    base: &ExperimentSpec,
    axis: &AblationAxis,
    out_dir: Option<&Path>,
) -> Result<Vec<ExperimentResult>, ExperimentError> {
    let cells = axis.cells(base);
    if cells.is_empty() {
        return Err(ExperimentError::Spec("ablation grid is empty".into()));
    }
    for cell in &cells {
        cell.validate()?;
    }
    let mut results = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let dir = out_dir.map(|d| d.join(format!("cell-{i}")));
        results.push(run_experiment(cell, dir.as_deref())?);
    }
    if let Some(dir) = out_dir {
        let rows: Vec<MetricRow> = results.iter().flat_map(ExperimentResult::rows).collect();
        write_metrics_csv(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(results)
}

// ---------------------------------------------------------------- density grids

pub const MIN_RESOLUTION: usize = 16;
pub const HISTOGRAM_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMethod {
    /// Model density evaluated at cell midpoints.
    Exact,
    /// Normalized histogram of model samples.
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGrid {
    pub axes: [usize; 2],
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major over `(x, y)`: `values[ix * res + iy]`.
    pub values: Vec<f64>,
    pub method: GridMethod,
}

impl PairGrid {
    pub fn cell_area(&self) -> f64 {
        (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn argmax(&self) -> [f64; 2] {
        let res = self.y.len();
        let i = (0..self.values.len())
            .max_by(|&a, &b| self.values[a].total_cmp(&self.values[b]))
            .unwrap_or(0);
        [self.x[i / res], self.y[i % res]]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([format!("x{}", self.axes[0]), format!("x{}", self.axes[1]), "density".into()])?;
        let res = self.y.len();
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([self.x[i / res].to_string(), self.y[i % res].to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| ExperimentError::Io {
            path: "<writer>".into(),
            source: e,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub dim: usize,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn write_marginals_csv<W: Write>(marginals: &[Marginal], w: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["dim", "x", "density"])?;
    for m in marginals {
        for (x, p) in m.x.iter().zip(&m.density) {
            w.write_record([m.dim.to_string(), x.to_string(), p.to_string()])?;
        }
    }
    w.flush().map_err(|e| ExperimentError::Io {
        path: "<writer>".into(),
        source: e,
    })
}

fn midpoints(lo: f64, hi: f64, res: usize) -> Vec<f64> {
    let h = (hi - lo) / res as f64;
    (0..res).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

fn check_resolution(res: usize) -> Result<(), ExperimentError> {
    if res < MIN_RESOLUTION {
        return Err(ExperimentError::Spec(format!("resolution must be at least {MIN_RESOLUTION}, got {res}")));
    }
    Ok(())
}

fn bin_of(v: f64, lo: f64, hi: f64, res: usize) -> Option<usize> {
    if !(lo..=hi).contains(&v) {
        return None;
    }
    Some((((v - lo) / (hi - lo) * res as f64) as usize).min(res - 1))
}

/// Density over a pair of coordinates on the domain box. Two-dimensional
/// models are evaluated exactly; higher dimensions use a sample histogram
/// of the pair marginal.
pub fn pair_grid<M: DensityModel + ?Sized>(
    model: &M,
    axes: [usize; 2],
    res: usize,
    seed: u64,
) -> Result<PairGrid, ExperimentError> {
    check_resolution(res)?;
    let d = model.dim();
    let [i, j] = axes;
    if i >= d || j >= d || i == j {
        return Err(ExperimentError::Spec(format!("axes {i},{j} invalid for dimension {d}")));
    }
    let dom = model.domain();
    let (lx, hx, ly, hy) = (dom.lower()[i], dom.upper()[i], dom.lower()[j], dom.upper()[j]);
    let x = midpoints(lx, hx, res);
    let y = midpoints(ly, hy, res);
    let mut values = vec![0.0; res * res];
    let method = if d == 2 {
        let mut p = vec![0.0; 2];
        for (a, &xa) in x.iter().enumerate() {
            for (b, &yb) in y.iter().enumerate() {
                p[i] = xa;
                p[j] = yb;
                values[a * res + b] = model.log_density(&p)?.exp();
            }
        }
        GridMethod::Exact
    } else {
        let samples = model.sample(HISTOGRAM_SAMPLES, seed)?;
        let cell = (hx - lx) * (hy - ly) / (res * res) as f64;
        let unit = 1.0 / (samples.len() as f64 * cell);
        for s in &samples {
            if let (Some(a), Some(b)) = (bin_of(s[i], lx, hx, res), bin_of(s[j], ly, hy, res)) {
                values[a * res + b] += unit;
            }
        }
        GridMethod::Histogram
    };
    Ok(PairGrid {
        axes,
        x,
        y,
        values,
        method,
    })
}

/// Per-coordinate histograms of model samples over the domain box.
pub fn marginals<M: DensityModel + ?Sized>(model: &M, res: usize, seed: u64) -> Result<Vec<Marginal>, ExperimentError> {
    check_resolution(res)?;
    let samples = model.sample(HISTOGRAM_SAMPLES, seed)?;
    let dom = model.domain();
    Ok((0..model.dim())
        .map(|i| {
            let (lo, hi) = (dom.lower()[i], dom.upper()[i]);
            let unit = res as f64 / ((hi - lo) * samples.len() as f64);
            let mut density = vec![0.0; res];
            for s in &samples {
                if let Some(b) = bin_of(s[i], lo, hi, res) {
                    density[b] += unit;
                }
            }
            Marginal {
                dim: i,
                x: midpoints(lo, hi, res),
                density,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "snake_case")]
pub enum DensityView {
    Pair { axes: [usize; 2] },
    Marginals,
}

/// Writes the requested view as CSV.
pub fn export_density_grid<M: DensityModel + ?Sized>(
    model: &M,
    view: &DensityView,
    res: usize,
    seed: u64,
    path: &Path,
) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let w = BufWriter::new(file);
    match view {
        DensityView::Pair { axes } => pair_grid(model, *axes, res, seed)?.write_csv(w),
        DensityView::Marginals => write_marginals_csv(&marginals(model, res, seed)?, w),
    }
    .map_err(|e| with_path(e, path))
}

/// Output paths used by `run_experiment`.
pub fn replicate_paths(out_dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let stem = out_dir.join(format!("replicate-{seed}"));
    (stem.with_extension("model.json"), stem.with_extension("train.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum;

    #[test]
    fn derived_seeds_differ_by_stream() {
        let s: BTreeSet<u64> = (0..8).map(|k| derive_seed(42, k)).collect();
        assert_eq!(s.len(), 8);
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
        assert_ne!(derive_seed(1, 3), derive_seed(2, 3));
    }

    #[test]
    fn normal_baseline_gradient_matches_finite_differences() {
        let mut m = FactorizedNormalModel::new(BoxDomain::cube(3, 4.0));
        m.set_params(&[0.3, -0.2, 1.0, 0.1, -0.4, 0.2]).unwrap();
        let x = [0.5, 1.5, -0.7];
        let obj = |t: &mut Tape<'_>| m.record_log_density(t, &x);
        let p = m.params().values().to_vec();
        let (_, g) = diffnum::value_and_grad(&obj, &p).unwrap();
        for i in 0..p.len() {
            let h = 1e-6;
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (diffnum::value(&obj, &up).unwrap() - diffnum::value(&obj, &dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
        // closed form
        let lp = m.log_density(&x).unwrap();
        let oracle: f64 = (0..3)
            .map(|i| {
                let sd = p[3 + i].exp();
                -0.5 * ((x[i] - p[i]) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum();
        assert!((lp - oracle).abs() < 1e-12);
    }

    #[test]
    fn normal_baseline_matches_identity_flow_at_init() {
        let dom = BoxDomain::new(vec![-4.0, -3.0], vec![4.0, 3.0]).unwrap();
        let normal = FactorizedNormalModel::new(dom.clone());
        let flow = FlowModel::new(dom, FlowArchitecture::default_for(2), 0).unwrap();
        for x in [[0.0, 0.0], [1.0, -2.0], [-3.5, 2.5]] {
            let (a, b) = (normal.log_density(&x).unwrap(), flow.log_density(&x).unwrap());
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::new(TargetName::Onemoon2D);
        assert_eq!(spec.n, 200);
        spec.validate().unwrap();
        spec.k = 1;
        assert!(spec.validate().is_err());
        spec.k = 5;
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        spec.seeds = vec![1];
        spec.w = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.sd - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }
}
