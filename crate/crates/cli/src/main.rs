//! `prefflow`: generate preference data, train and evaluate belief flows,
//! run ablations, export density grids and serve the elicitation API.

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prefflow_core::experiments::{
    self, derive_seed, AblationAxis, DensityView, ExperimentResult, ExperimentSpec, ModelKind,
};
use prefflow_core::flow::FlowArchitecture;
use prefflow_core::metrics;
use prefflow_core::targets::{TargetDensity, TargetName};
use prefflow_core::train::{self, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(name = "prefflow", version, about = "Belief densities as normalizing flows, learned from rankings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ranking dataset (and a held-out set) from a target.
    Generate(GenerateArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Score a trained model against its target.
    Eval(EvalArgs),
    /// Run a full multi-replicate experiment.
    Run(RunArgs),
    /// Run an experiment per value of one spec field.
    Ablate(AblateArgs),
    /// Write a density grid or marginals of a trained model as CSV.
    ExportGrid(ExportArgs),
    /// Start the HTTP elicitation service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunDir {
    /// Base seed; every random stream is derived from it.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    target: TargetName,
    /// Number of rankings (default 100 per dimension).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    s_true: f64,
    /// Gaussian weight of the candidate mixture.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    w: f64,
    #[arg(long, default_value_t = 200)]
    heldout_n: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adamax,
    Adam,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value = "flow")]
    model: ModelKind,
    /// Flow architecture, `affine:LAYERS:H,..` or `spline:LAYERS:H,..`.
    #[arg(long)]
    arch: Option<FlowArchitecture>,
    #[arg(long, default_value_t = 1.0)]
    s_lik: f64,
    /// Drop the functional prior from the objective.
    #[arg(long)]
    no_prior: bool,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = Optimizer::Adamax)]
    optimizer: Optimizer,
}

impl FitArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            optimizer: match self.optimizer {
                Optimizer::Adamax => OptimizerKind::Adamax,
                Optimizer::Adam => OptimizerKind::Adam,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunDir,
}

#[derive(Args)]
struct TrainArgs {
    /// Target whose box bounds the flow.
    #[arg(long)]
    target: TargetName,
    /// Dataset JSONL written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    /// Write a checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    run: RunDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    target: TargetName,
    /// Checkpoint written by `train` or `run`.
    #[arg(long)]
    model: PathBuf,
    /// Held-out dataset; generated from the target when absent.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 200)]
    heldout_n: usize,
    #[arg(long, default_value_t = 1.0)]
    s_true: f64,
    #[arg(long, default_value_t = 1.0)]
    s_lik: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    w: f64,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[command(flatten)]
    run: RunDir,
}

#[derive(Args)]
struct SpecArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 5)]
    replicates: u64,
    #[command(flatten)]
    run: RunDir,
}

impl SpecArgs {
    fn spec(&self) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(self.data.target);
        if let Some(n) = self.data.n {
            spec.n = n;
        }
        spec.k = self.data.k;
        spec.s_true = self.data.s_true;
        spec.s_lik = self.fit.s_lik;
        spec.w = self.data.w;
        spec.model = self.fit.model;
        spec.prior = !self.fit.no_prior;
        spec.architecture = self.fit.arch.clone();
        spec.train = self.fit.train_config();
        spec.seeds = (self.run.seed..self.run.seed + self.replicates).collect();
        spec.heldout_n = self.data.heldout_n;
        spec
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    K,
    N,
    STrue,
    SLik,
    W,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum View {
    Pair,
    Marginals,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = View::Pair)]
    view: View,
    /// Pair of axes for the pair view.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    axes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    res: usize,
    #[command(flatten)]
    run: RunDir,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    addr: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "prefflow-data")]
    data_dir: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportGrid(a) => export(a),
        Command::Serve(a) => serve(a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    ensure_dir(&a.run.out_dir)?;
    let target = TargetDensity::new(a.data.target);
    let sampler = experiments::target_sampler(&target, a.data.w)?;
    let n = a.data.n.unwrap_or(100 * target.dim());
    let seed = a.run.seed;
    for (name, size, stream) in [
        ("data.jsonl", n, experiments::STREAM_DATA),
        ("heldout.jsonl", a.data.heldout_n, experiments::STREAM_HELDOUT),
    ] {
        let data =
            experiments::generate_dataset(&target, &sampler, a.data.k, size, a.data.s_true, derive_seed(seed, stream))?;
        let path = a.run.out_dir.join(name);
        experiments::save_dataset(&path, &data, a.data.k)?;
        println!("wrote {} ({size} rankings)", path.display());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    ensure_dir(&a.run.out_dir)?;
    let target = TargetDensity::new(a.target);
    let (header, data) = experiments::load_dataset(&a.data)?;
    if header.dim != target.dim() {
        bail!("dataset has dimension {} but {} has {}", header.dim, a.target, target.dim());
    }
    let mut spec = ExperimentSpec::new(a.target);
    spec.model = a.fit.model;
    spec.architecture = a.fit.arch.clone();
    spec.s_lik = a.fit.s_lik;
    spec.prior = !a.fit.no_prior;
    let mut model = spec.build_model(target.domain(), derive_seed(a.run.seed, experiments::STREAM_INIT))?;
    let cfg = TrainConfig {
        seed: derive_seed(a.run.seed, experiments::STREAM_TRAIN),
        batch_size: a.fit.batch_size.min(data.len()),
        checkpoint_every: a.checkpoint_every,
        ..a.fit.train_config()
    };
    let report = match a.checkpoint_every {
        Some(_) => {
            let dir = a.run.out_dir.join("checkpoints");
            ensure_dir(&dir)?;
            let mut writer = train::CheckpointWriter::new(dir);
            train::train_with_observer(model.as_mut(), &data, spec.objective(), &cfg, &mut writer)?
        }
        None => train::train(model.as_mut(), &data, spec.objective(), &cfg)?,
    };
    let model_path = a.run.out_dir.join("model.json");
    fs::write(&model_path, model.checkpoint_json()?)?;
    fs::write(a.run.out_dir.join("train.json"), report.to_json()?)?;
    let last = report.trace.last().map(|p| p.objective).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps; final objective {last:.4}; checksum {}; wrote {}",
        spec.model.as_str(),
        report.iterations,
        report.param_checksum,
        model_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    ensure_dir(&a.run.out_dir)?;
    let target = TargetDensity::new(a.target);
    let model = experiments::load_model(&a.model)?;
    let heldout = match &a.heldout {
        Some(path) => experiments::load_dataset(path)?.1,
        None => {
            let sampler = experiments::target_sampler(&target, a.w)?;
            let seed = derive_seed(a.run.seed, experiments::STREAM_HELDOUT);
            experiments::generate_dataset(&target, &sampler, a.k, a.heldout_n, a.s_true, seed)?
        }
    };
    let cfg = metrics::MetricConfig {
        samples: a.samples,
        ..Default::default()
    };
    let samples = target.sample(cfg.samples, derive_seed(a.run.seed, experiments::STREAM_TARGET))?;
    let report = metrics::evaluate(
        model.as_ref(),
        &samples,
        &heldout,
        a.s_lik,
        &cfg,
        derive_seed(a.run.seed, experiments::STREAM_EVAL),
    )?;
    write_json(&a.run.out_dir.join("metrics.json"), &report)?;
    println!(
        "loglik {:.4}  wasserstein {:.4}  mmtv {:.4}",
        report.loglik, report.wasserstein, report.mmtv
    );
    Ok(())
}

fn print_result(label: &str, r: &ExperimentResult) {
    let a = &r.aggregate;
    let med = |s: &Option<experiments::Summary>| s.as_ref().map_or(f64::NAN, |s| s.median);
    println!(
        "{label}: {} completed, {} failed; median loglik {:.4}, wasserstein {:.4}, mmtv {:.4}",
        a.completed,
        a.failed,
        med(&a.loglik),
        med(&a.wasserstein),
        med(&a.mmtv)
    );
    for rep in r.replicates.iter().filter(|r| r.error.is_some()) {
        println!("  seed {} failed: {}", rep.seed, rep.error.as_deref().unwrap_or(""));
    }
}

fn run(a: RunArgs) -> Result<()> {
    let spec = a.spec.spec();
    let result = experiments::run_experiment(&spec, Some(&a.spec.run.out_dir))?;
    print_result(spec.target.as_str(), &result);
    Ok(())
}

fn parse_values<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>> {
    values
        .iter()
        .map(|v| v.trim().parse().map_err(|_| anyhow::anyhow!("cannot parse axis value {v:?}")))
        .collect()
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.spec.spec();
    let axis = match a.axis {
        Axis::K => AblationAxis::K(parse_values(&a.values)?),
        Axis::N => AblationAxis::N(parse_values(&a.values)?),
        Axis::STrue => AblationAxis::STrue(parse_values(&a.values)?),
        Axis::SLik => AblationAxis::SLik(parse_values(&a.values)?),
        Axis::W => AblationAxis::W(parse_values(&a.values)?),
    };
    let results = experiments::run_ablation(&base, &axis, Some(&a.spec.run.out_dir))?;
    for (value, r) in a.values.iter().zip(&results) {
        print_result(&format!("{}={value}", serde_json::to_value(&axis)?["axis"].as_str().unwrap_or("?")), r);
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    ensure_dir(&a.run.out_dir)?;
    let model = experiments::load_model(&a.model)?;
    let (view, name) = match a.view {
        View::Pair => {
            let [i, j] = a.axes[..] else {
                bail!("--axes needs exactly two indices");
            };
            (DensityView::Pair { axes: [i, j] }, format!("grid-{i}-{j}.csv"))
        }
        View::Marginals => (DensityView::Marginals, "marginals.csv".to_string()),
    };
    let path = a.run.out_dir.join(name);
    experiments::export_density_grid(model.as_ref(), &view, a.res, a.run.seed, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let addr = SocketAddr::new(a.addr, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    println!("serving on http://{addr} (data in {})", a.data_dir.display());
    rt.block_on(prefflow_service::serve(addr, a.data_dir))?;
    Ok(())
}
