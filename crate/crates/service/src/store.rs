//! Session state and on-disk layout.
//!
//! ```text
//! <root>/<id>/config.json
//! <root>/<id>/data.jsonl        dataset file, rewritten atomically
//! <root>/<id>/queries.jsonl     append-only log of issued and answered queries
//! <root>/<id>/checkpoints/latest.json, run-NNNN.json
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use prefflow_core::experiments::{self, derive_seed, DatasetHeader};
use prefflow_core::flow::{BoxDomain, DensityModel, FlowArchitecture, FlowModel};
use prefflow_core::metrics;
use prefflow_core::preference::{ObjectiveConfig, Observation, PreferenceDataset};
use prefflow_core::rum::{CandidateSampler, LambdaKind};
use prefflow_core::train::{self, TracePoint, TrainConfig, TrainError, TrainObserver};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{codes, ApiError};

pub const MAX_DIM: i64 = 32;
pub const K_RANGE: (i64, i64) = (2, 10);
const TRACE_TAIL: usize = 50;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub id: String,
    pub dim: usize,
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub k: usize,
    pub lambda: LambdaKind,
    pub s_lik: f64,
    pub seed: u64,
    pub architecture: FlowArchitecture,
}

impl SessionConfig {
    pub fn domain(&self) -> BoxDomain {
        BoxDomain::new(self.lower.clone(), self.upper.clone()).expect("validated at creation")
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub dim: i64,
    /// `[lower, upper]` per coordinate; defaults to `[-1, 1]`.
    pub bounds: Option<Vec<[f64; 2]>>,
    pub names: Option<Vec<String>>,
    pub k: i64,
    pub lambda: Option<LambdaKind>,
    pub s_lik: Option<f64>,
    pub seed: Option<u64>,
    pub architecture: Option<FlowArchitecture>,
}

impl CreateSession {
    pub fn into_config(self, id: String) -> Result<SessionConfig, ApiError> {
        if !(1..=MAX_DIM).contains(&self.dim) {
            return Err(ApiError::validation("dim", format!("dim must be in 1..={MAX_DIM}, got {}", self.dim)));
        }
        let (kmin, kmax) = K_RANGE;
        if !(kmin..=kmax).contains(&self.k) {
            return Err(ApiError::validation("k", format!("k must be in {kmin}..={kmax}, got {}", self.k)));
        }
        let dim = self.dim as usize;
        let bounds = self.bounds.unwrap_or_else(|| vec![[-1.0, 1.0]; dim]);
        if bounds.len() != dim {
            return Err(ApiError::validation("bounds", format!("expected {dim} bounds, got {}", bounds.len())));
        }
        if let Some(i) = bounds.iter().position(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(ApiError::validation("bounds", format!("bound {i} must satisfy lower < upper")));
        }
        let names = self.names.unwrap_or_else(|| (0..dim).map(|i| format!("x{i}")).collect());
        if names.len() != dim {
            return Err(ApiError::validation("names", format!("expected {dim} names, got {}", names.len())));
        }
        if names.iter().collect::<HashSet<_>>().len() != dim || names.iter().any(|n| n.is_empty()) {
            return Err(ApiError::validation("names", "names must be distinct and non-empty"));
        }
        let s_lik = self.s_lik.unwrap_or(1.0);
        if !(s_lik > 0.0 && s_lik.is_finite()) {
            return Err(ApiError::validation("s_lik", "s_lik must be positive"));
        }
        let architecture = self.architecture.unwrap_or_else(|| FlowArchitecture::default_for(dim));
        architecture
            .validate()
            .map_err(|e| ApiError::validation("architecture", e.to_string()))?;
        let lambda = self.lambda.unwrap_or(LambdaKind::Uniform);
        let config = SessionConfig {
            id,
            dim,
            names,
            lower: bounds.iter().map(|b| b[0]).collect(),
            upper: bounds.iter().map(|b| b[1]).collect(),
            k: self.k as usize,
            lambda,
            s_lik,
            seed: self.seed.unwrap_or(0),
            architecture,
        };
        CandidateSampler::new(config.domain(), config.lambda.clone())
            .map_err(|e| ApiError::validation("lambda", e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum QueryEvent {
    Issued { id: String, points: Vec<Vec<f64>> },
    Answered { id: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct Query {
    pub query_id: String,
    pub k: usize,
    pub names: Vec<String>,
    pub points: Vec<Vec<f64>>,
    pub named_points: Vec<BTreeMap<String, f64>>,
}

/// Mutable state, guarded by the session lock.
pub struct SessionData {
    pub dataset: PreferenceDataset,
    data_text: String,
    pending: HashMap<String, Vec<Vec<f64>>>,
    answered: HashSet<String>,
    issued: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStatus {
    pub state: JobState,
    pub step: usize,
    pub total: usize,
    pub trace_tail: Vec<TracePoint>,
    pub observations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_checksum: Option<String>,
    /// Mean ranking log-likelihood of the session data under the model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
    /// Same, under the untrained flow.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_loglik: Option<f64>,
}

impl TrainStatus {
    fn idle() -> Self {
        Self {
            state: JobState::Idle,
            step: 0,
            total: 0,
            trace_tail: Vec::new(),
            observations: 0,
            error: None,
            param_checksum: None,
            loglik: None,
            initial_loglik: None,
        }
    }
}

pub struct Session {
    pub config: SessionConfig,
    pub dir: PathBuf,
    sampler: CandidateSampler,
    pub data: tokio::sync::Mutex<SessionData>,
    model: RwLock<Option<Arc<FlowModel>>>,
    job: Arc<Mutex<TrainStatus>>,
}

impl Session {
    fn config_path(dir: &Path) -> PathBuf {
        dir.join("config.json")
    }

    fn data_path(&self) -> PathBuf {
        self.dir.join("data.jsonl")
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join("queries.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("latest.json")
    }

    fn create(root: &Path, config: SessionConfig) -> io::Result<Self> {
        let dir = root.join(&config.id);
        fs::create_dir_all(dir.join("checkpoints"))?;
        atomic_write(&Self::config_path(&dir), serde_json::to_string_pretty(&config)?.as_bytes())?;
        let header = experiments::header_line(&DatasetHeader::new(config.dim, config.k));
        let data_text = format!("{header}\n");
        atomic_write(&dir.join("data.jsonl"), data_text.as_bytes())?;
        fs::File::create(dir.join("queries.jsonl"))?;
        let data = SessionData {
            dataset: PreferenceDataset::new(config.dim, Vec::new()).expect("empty dataset"),
            data_text,
            pending: HashMap::new(),
            answered: HashSet::new(),
            issued: 0,
        };
        Ok(Self::assemble(config, dir, data, None))
    }

    fn open(dir: &Path) -> io::Result<Self> {
        let invalid = |e: String| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", dir.display()));
        let config: SessionConfig = serde_json::from_str(&fs::read_to_string(Self::config_path(dir))?)?;
        let data_text = fs::read_to_string(dir.join("data.jsonl"))?;
        let (header, dataset) = experiments::read_dataset(data_text.as_bytes()).map_err(|e| invalid(e.to_string()))?;
        if header != DatasetHeader::new(config.dim, config.k) {
            return Err(invalid("dataset header does not match config".into()));
        }
        let mut pending = HashMap::new();
        let mut answered = HashSet::new();
        let mut issued = 0;
        let log = fs::read_to_string(dir.join("queries.jsonl")).unwrap_or_default();
        for line in log.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<QueryEvent>(line) {
                Ok(QueryEvent::Issued { id, points }) => {
                    issued += 1;
                    pending.insert(id, points);
                }
                Ok(QueryEvent::Answered { id }) => {
                    pending.remove(&id);
                    answered.insert(id);
                }
                // a torn final line from a crash mid-append
                Err(_) => break,
            }
        }
        let latest = dir.join("checkpoints").join("latest.json");
        let model = if latest.exists() {
            Some(Arc::new(FlowModel::load(&latest).map_err(|e| invalid(e.to_string()))?))
        } else {
            None
        };
        let data = SessionData {
            dataset,
            data_text,
            pending,
            answered,
            issued,
        };
        Ok(Self::assemble(config, dir.to_path_buf(), data, model))
    }

    fn assemble(config: SessionConfig, dir: PathBuf, data: SessionData, model: Option<Arc<FlowModel>>) -> Self {
        let sampler = CandidateSampler::new(config.domain(), config.lambda.clone()).expect("validated at creation");
        let mut status = TrainStatus::idle();
        status.observations = data.dataset.len();
        Self {
            config,
            dir,
            sampler,
            data: tokio::sync::Mutex::new(data),
            model: RwLock::new(model),
            job: Arc::new(Mutex::new(status)),
        }
    }

    fn append_log(&self, event: &QueryEvent) -> io::Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.log_path())?;
        let line = format!("{}\n", serde_json::to_string(event)?);
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    /// Draws and registers a fresh choice set.
    pub fn next_query(&self, data: &mut SessionData) -> Result<Query, ApiError> {
        let n = data.issued;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, n));
        let set = self.sampler.choice_set(self.config.k, &mut rng).map_err(ApiError::internal)?;
        let id = format!("q{n}");
        self.append_log(&QueryEvent::Issued {
            id: id.clone(),
            points: set.points.clone(),
        })?;
        data.issued += 1;
        data.pending.insert(id.clone(), set.points.clone());
        let named_points = set
            .points
            .iter()
            .map(|p| self.config.names.iter().cloned().zip(p.iter().copied()).collect())
            .collect();
        Ok(Query {
            query_id: id,
            k: self.config.k,
            names: self.config.names.clone(),
            points: set.points,
            named_points,
        })
    }

    /// Appends a ranking for a pending query. Returns the new dataset size.
    pub fn submit(&self, data: &mut SessionData, query_id: &str, ranking: &[usize]) -> Result<usize, ApiError> {
        if data.answered.contains(query_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                codes::DUPLICATE_SUBMISSION,
                format!("query {query_id} was already answered"),
            )
            .with_field("query_id"));
        }
        let Some(points) = data.pending.get(query_id) else {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                codes::UNKNOWN_QUERY,
                format!("no pending query {query_id}"),
            )
            .with_field("query_id"));
        };
        let k = self.config.k;
        let mut seen = vec![false; k];
        let valid = ranking.len() == k && ranking.iter().all(|&i| i < k && !std::mem::replace(&mut seen[i], true));
        if !valid {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                codes::INVALID_PERMUTATION,
                format!("ranking must be a permutation of 0..{k}"),
            )
            .with_field("ranking"));
        }
        let obs = Observation::ranking(points.clone(), ranking.to_vec());
        let mut text = data.data_text.clone();
        text.push_str(&experiments::observation_line(&obs));
        text.push('\n');
        atomic_write(&self.data_path(), text.as_bytes())?;
        self.append_log(&QueryEvent::Answered { id: query_id.into() })?;
        data.data_text = text;
        data.dataset.push(obs).map_err(ApiError::internal)?;
        data.pending.remove(query_id);
        data.answered.insert(query_id.into());
        Ok(data.dataset.len())
    }

    pub fn export(&self, data: &SessionData) -> String {
        data.data_text.clone()
    }

    pub fn pending_count(data: &SessionData) -> usize {
        data.pending.len()
    }

    pub fn model(&self) -> Option<Arc<FlowModel>> {
        self.model.read().expect("model lock").clone()
    }

    pub fn status(&self) -> TrainStatus {
        self.job.lock().expect("job lock").clone()
    }

    /// Marks a job as running, or fails if one already is.
    pub fn begin_training(&self, total: usize, observations: usize) -> Result<(), ApiError> {
        let mut job = self.job.lock().expect("job lock");
        if job.state == JobState::Running {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                codes::TRAINING_IN_PROGRESS,
                "a training job is already running",
            ));
        }
        *job = TrainStatus {
            state: JobState::Running,
            total,
            observations,
            ..TrainStatus::idle()
        };
        Ok(())
    }

    /// Blocking training job body.
    pub fn run_training(&self, dataset: PreferenceDataset, cfg: TrainConfig, objective: ObjectiveConfig) {
        let outcome = self.train_and_store(&dataset, &cfg, objective);
        let mut job = self.job.lock().expect("job lock");
        match outcome {
            Ok(done) => {
                job.state = JobState::Done;
                job.step = cfg.iterations;
                job.param_checksum = Some(done.checksum);
                job.loglik = Some(done.loglik);
                job.initial_loglik = Some(done.initial_loglik);
            }
            Err(reason) => {
                job.state = JobState::Failed;
                job.error = Some(reason);
            }
        }
    }

    fn train_and_store(
        &self,
        dataset: &PreferenceDataset,
        cfg: &TrainConfig,
        objective: ObjectiveConfig,
    ) -> Result<TrainedModel, String> {
        let domain = self.config.domain();
        let arch = self.config.architecture.clone();
        let mut model = FlowModel::new(domain, arch, self.config.seed).map_err(|e| e.to_string())?;
        let score = |m: &FlowModel| metrics::heldout_loglik(m, dataset, objective.s_lik).map_err(|e| e.to_string());
        let initial_loglik = score(&model)?;
        let mut observer = Progress { job: self.job.clone() };
        let report = train::train_with_observer(&mut model, dataset, objective, cfg, &mut observer)
            .map_err(|e: TrainError| e.to_string())?;
        let loglik = score(&model)?;
        let json = model.checkpoint_json().map_err(|e| e.to_string())?;
        let ck_dir = self.checkpoint_dir();
        fs::create_dir_all(&ck_dir).map_err(|e| e.to_string())?;
        let runs = fs::read_dir(&ck_dir)
            .map_err(|e| e.to_string())?
            .filter(|e| e.as_ref().is_ok_and(|e| e.file_name().to_string_lossy().starts_with("run-")))
            .count();
        atomic_write(&ck_dir.join(format!("run-{:04}.json", runs + 1)), json.as_bytes()).map_err(|e| e.to_string())?;
        atomic_write(&self.latest_checkpoint(), json.as_bytes()).map_err(|e| e.to_string())?;
        *self.model.write().expect("model lock") = Some(Arc::new(model));
        Ok(TrainedModel {
            checksum: report.param_checksum,
            loglik,
            initial_loglik,
        })
    }
}

struct TrainedModel {
    checksum: String,
    loglik: f64,
    initial_loglik: f64,
}

struct Progress {
    job: Arc<Mutex<TrainStatus>>,
}

impl TrainObserver for Progress {
    fn on_trace(&mut self, point: TracePoint, _total: usize) {
        let mut job = self.job.lock().expect("job lock");
        job.step = point.step;
        job.trace_tail.push(point);
        if job.trace_tail.len() > TRACE_TAIL {
            job.trace_tail.remove(0);
        }
    }
}

/// All sessions under one data directory.
pub struct Store {
    root: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl Store {
    /// Opens `root`, reloading every session directory found there.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() && Session::config_path(&entry.path()).exists() {
                let s = Session::open(&entry.path())?;
                sessions.insert(s.config.id.clone(), Arc::new(s));
            }
        }
        Ok(Self {
            root,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self, req: CreateSession) -> Result<Arc<Session>, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let config = req.into_config(id.clone())?;
        let session = Arc::new(Session::create(&self.root, config)?);
        self.sessions.write().expect("store lock").insert(id, session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::session_not_found(id))
    }
}
