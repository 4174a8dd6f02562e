//! Stochastic-gradient FS-MAP training.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffnum::{self, DiffError};
use crate::flow::{DensityModel, FlowError};
use crate::preference::{Diagnostics, FsMapObjective, ObjectiveConfig, PreferenceDataset, PreferenceError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds dataset size {n}")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("model dimension {model} does not match data dimension {data}")]
    Dimension { model: usize, data: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite objective or parameters at step {step}")]
    NonFinite { step: usize, diagnostics: Diagnostics },
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] FlowError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamax,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Observations per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub nan_guard: bool,
    /// Steps per trace point.
    pub trace_every: usize,
    /// Steps between checkpoints handed to the observer.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 1e-6,
            optimizer: OptimizerKind::Adamax,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            nan_guard: true,
            trace_every: 50,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive");
        }
        Ok(())
    }
}

/// Mean minibatch objective over the steps since the previous point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub trace: Vec<TracePoint>,
    /// SHA-256 of the final parameters as little-endian bytes.
    pub param_checksum: String,
    pub diagnostics: Diagnostics,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }
}

pub fn param_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hooks called from the training loop.
pub trait TrainObserver {
    fn on_trace(&mut self, _point: TracePoint, _total_steps: usize) {}

    /// `json` is the model's serialized checkpoint.
    fn on_checkpoint(&mut self, _step: usize, _json: &str) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes `step-NNNNNNNN.json` checkpoints into a directory.
pub struct CheckpointWriter {
    dir: PathBuf,
}

impl CheckpointWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step-{step:08}.json"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, step: usize, json: &str) -> Result<(), TrainError> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.path_for(step);
        std::fs::write(&path, json).map_err(io_err(&path))
    }
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `loss_grad`.
    fn step(&mut self, params: &mut [f64], loss_grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        match self.kind {
            OptimizerKind::Adamax => {
                let lr = cfg.learning_rate / c1;
                for i in 0..params.len() {
                    let g = loss_grad[i] + cfg.weight_decay * params[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = (b2 * self.v[i]).max(g.abs() + cfg.epsilon);
                    params[i] -= lr * self.m[i] / self.v[i];
                }
            }
            OptimizerKind::Adam => {
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = loss_grad[i] + cfg.weight_decay * params[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
                }
            }
        }
    }
}

/// Maximizes the minibatch FS-MAP objective in place.
pub fn train<M: DensityModel + ?Sized>(
    model: &mut M,
    dataset: &PreferenceDataset,
    objective: ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_with_observer(model, dataset, objective, cfg, &mut ())
}

pub fn train_with_observer<M: DensityModel + ?Sized>(
    model: &mut M,
    dataset: &PreferenceDataset,
    objective: ObjectiveConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    objective.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size > dataset.len() {
        return Err(TrainError::BatchTooLarge {
            batch: cfg.batch_size,
            n: dataset.len(),
        });
    }
    if model.dim() != dataset.dim() {
        return Err(TrainError::Dimension {
            model: model.dim(),
            data: dataset.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model.params().len());
    let mut params = model.params().values().to_vec();
    let mut diagnostics = Diagnostics::default();
    let mut trace = Vec::with_capacity(cfg.iterations / cfg.trace_every + 1);
    let (mut window_sum, mut window_len) = (0.0, 0usize);
    let obs = dataset.observations();

    for step in 1..=cfg.iterations {
        let batch: Vec<_> = index::sample(&mut rng, obs.len(), cfg.batch_size)
            .into_iter()
            .map(|i| &obs[i])
            .collect();
        let result = {
            let objective = FsMapObjective::new(&*model, batch, objective);
            let r = diffnum::value_and_grad(&objective, &params);
            diagnostics.merge(objective.diagnostics());
            r
        };
        let (value, grad) = match result {
            Ok(vg) if vg.0.is_finite() && vg.1.iter().all(|g| g.is_finite()) => vg,
            _ if cfg.nan_guard => return Err(TrainError::NonFinite { step, diagnostics }),
            _ => {
                diagnostics.non_finite_recoveries += 1;
                continue;
            }
        };
        let loss_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut next = params.clone();
        opt.step(&mut next, &loss_grad, cfg);
        if next.iter().any(|p| !p.is_finite()) {
            if cfg.nan_guard {
                return Err(TrainError::NonFinite { step, diagnostics });
            }
            diagnostics.non_finite_recoveries += 1;
            continue;
        }
        params = next;
        model.set_params(&params)?;

        window_sum += value;
        window_len += 1;
        if step % cfg.trace_every == 0 {
            let point = TracePoint {
                step,
                objective: window_sum / window_len.max(1) as f64,
            };
            trace.push(point);
            observer.on_trace(point, cfg.iterations);
            window_sum = 0.0;
            window_len = 0;
        }
        if cfg.checkpoint_every.is_some_and(|every| step % every == 0) {
            observer.on_checkpoint(step, &model.checkpoint_json()?)?;
        }
    }

    Ok(TrainReport {
        iterations: cfg.iterations,
        trace,
        param_checksum: param_checksum(model.params().values()),
        diagnostics,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{BoxDomain, FlowArchitecture, FlowModel};
    use crate::preference::Observation;
    use crate::rum::{CandidateSampler, RumExpert};
    use rand::Rng;
    use std::sync::Arc;

    fn toy_problem(n: usize, k: usize, seed: u64) -> (FlowModel, PreferenceDataset) {
        let dom = BoxDomain::cube(1, 5.0);
        // two-component belief: modes at -2 and 1.5
        let expert = RumExpert::new(
            Arc::new(|x: &[f64]| {
                let a = -0.5 * ((x[0] + 2.0) / 0.6).powi(2);
                let b = -0.5 * ((x[0] - 1.5) / 0.6).powi(2);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }),
            1.0,
        )
        .unwrap();
        let sampler = CandidateSampler::uniform(dom.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..n)
            .map(|_| {
                let set = sampler.choice_set(k, &mut rng).unwrap();
                let r = expert.respond(&set, &mut rng);
                Observation::ranking(set.points, r.ranking)
            })
            .collect();
        let model = FlowModel::new(dom, FlowArchitecture::spline(2, vec![4]), seed).unwrap();
        (model, PreferenceDataset::new(1, obs).unwrap())
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let (mut model, data) = toy_problem(10, 3, 1);
        let before = model.params().values().to_vec();
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let report = train(&mut model, &data, ObjectiveConfig::default(), &cfg).unwrap();
        assert_eq!(model.params().values(), &before[..]);
        assert!(report.trace.is_empty());
        assert_eq!(report.param_checksum, param_checksum(&before));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = TrainConfig {
            iterations: 200,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let (mut model, data) = toy_problem(20, 4, 2);
            let report = train(&mut model, &data, ObjectiveConfig::default(), &cfg).unwrap();
            (report, model.params().values().to_vec())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
        assert_eq!(r1.trace.len(), 200 / 50);
        assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
    }

    #[test]
    fn smoothed_objective_rises_on_toy_belief() {
        let (mut model, data) = toy_problem(50, 5, 3);
        let cfg = TrainConfig {
            iterations: 3000,
            batch_size: 50,
            learning_rate: 3e-3,
            seed: 4,
            ..Default::default()
        };
        let report = train(&mut model, &data, ObjectiveConfig::default(), &cfg).unwrap();
        let values: Vec<f64> = report.trace.iter().map(|p| p.objective).collect();
        // each trace point averages 50 steps; pairs give a 100-step window
        let smooth: Vec<f64> = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let start = smooth.len() / 5;
        for w in smooth[start..].windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{smooth:?}");
        }
        assert!(smooth.last().unwrap() > smooth.first().unwrap());
    }

    #[test]
    fn minibatch_gradient_is_unbiased_in_direction() {
        let (mut model, data) = toy_problem(12, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..model.params().len()).map(|_| rng.random_range(-0.2..0.2)).collect();
        model.set_params(&vals).unwrap();
        let cfg = ObjectiveConfig::default();
        let full = FsMapObjective::full(&model, &data, cfg);
        let (_, g_full) = diffnum::value_and_grad(&full, &vals).unwrap();
        let mut mean = vec![0.0; vals.len()];
        for _ in 0..1000 {
            let batch = index::sample(&mut rng, data.len(), 4)
                .into_iter()
                .map(|i| &data.observations()[i])
                .collect();
            let obj = FsMapObjective::new(&model, batch, cfg);
            let (_, g) = diffnum::value_and_grad(&obj, &vals).unwrap();
            for (m, gi) in mean.iter_mut().zip(g) {
                *m += gi / 1000.0;
            }
        }
        let dot: f64 = mean.iter().zip(&g_full).map(|(a, b)| a * b).sum();
        let na = mean.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = g_full.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot / (na * nb) >= 0.99, "{}", dot / (na * nb));
    }

    #[test]
    fn nan_guard_aborts_before_corrupting_parameters() {
        let (mut model, data) = toy_problem(10, 3, 7);
        let cfg = TrainConfig {
            iterations: 50,
            learning_rate: 1e300,
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        };
        let err = train(&mut model, &data, ObjectiveConfig::default(), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
        assert!(model.params().values().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn config_errors() {
        let (mut model, data) = toy_problem(3, 3, 8);
        let big = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut model, &data, ObjectiveConfig::default(), &big),
            Err(TrainError::BatchTooLarge { batch: 4, n: 3 })
        ));
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut model, &data, ObjectiveConfig::default(), &bad_lr),
            Err(TrainError::Config(_))
        ));
        let empty = PreferenceDataset::new(1, vec![]).unwrap();
        assert!(matches!(
            train(&mut model, &empty, ObjectiveConfig::default(), &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        let wrong_dim = PreferenceDataset::new(2, vec![Observation::comparison(vec![vec![0.0, 0.0]; 2], 0)]).unwrap();
        let one = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut model, &wrong_dim, ObjectiveConfig::default(), &one),
            Err(TrainError::Dimension { .. })
        ));
    }

    #[test]
    fn checkpoints_are_written_at_intervals() {
        let (mut model, data) = toy_problem(10, 3, 9);
        let dir = tempfile::tempdir().unwrap();
        let mut writer = CheckpointWriter::new(dir.path());
        let cfg = TrainConfig {
            iterations: 30,
            checkpoint_every: Some(10),
            ..Default::default()
        };
        train_with_observer(&mut model, &data, ObjectiveConfig::default(), &cfg, &mut writer).unwrap();
        for step in [10, 20, 30] {
            assert!(writer.path_for(step).exists());
        }
        let last = FlowModel::load(&writer.path_for(30)).unwrap();
        assert_eq!(last.params().values(), model.params().values());
    }
}
