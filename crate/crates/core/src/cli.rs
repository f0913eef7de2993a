//! Command-line interface. Every subcommand accepts `--seed`, `--config` and
//! `--out`; failures print a JSON error object on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraRig, GeometryError};
use crate::graph::{read_detections, Detection, GraphError};
use crate::gtn::{Gtn, GtnError};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{self, DetEvalConfig, EvalBox, MetricsError, TrackBox, DEFAULT_MOT_THRESHOLD};
use crate::motion_baseline::KalmanConfig;
use crate::pipeline::{self, FeatureProvider, MotionModel, PipelineConfig, PipelineError, TrackOutputRecord};
use crate::simulator::{self, GtRecord, MotionKind, ScenarioConfig, SimError, SimFeatureProvider};
use crate::training::{self, LossWeights, TrainConfig, TrainError, GRADCHECK_EPS, GRADCHECK_FLOOR};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Gtn(#[from] GtnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheck(f64),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Sim(_) => "simulator",
            CliError::Train(_) => "training",
            CliError::Pipeline(_) => "pipeline",
            CliError::Metrics(_) => "metrics",
            CliError::Geometry(_) => "geometry",
            CliError::Gtn(_) => "model",
            CliError::Graph(_) => "input",
            CliError::Jsonl(_) => "input",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mcmot", version, about = "Multi-camera 3D multi-object tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides the seed of the loaded config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file for the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MotionArg {
    Gtn,
    Kalman,
}

impl From<MotionArg> for MotionModel {
    fn from(m: MotionArg) -> Self {
        match m {
            MotionArg::Gtn => MotionModel::Gtn,
            MotionArg::Kalman => MotionModel::Kalman,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub motion: Option<MotionArg>,
    /// Scenario config whose simulator answers propagation feature queries.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Also write enhanced detections here.
    #[arg(long)]
    pub enhanced_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Loss curve CSV; defaults to `<out stem>.loss.csv` next to `--out`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Simulate(Common),
    /// Track detections and write TrackOutputRecords.
    Track(TrackArgs),
    /// Train a model on simulated chunks.
    Train(TrainArgs),
    /// Detection metrics report.
    EvalDet(EvalArgs),
    /// Tracking metrics report.
    EvalMot(EvalArgs),
    /// Finite-difference gradient check on the toy chunk.
    Gradcheck(Common),
    /// Run tracking and write the enhanced detection file.
    Enhance(TrackArgs),
    /// One-step motion error of the learned decoder against the Kalman filter.
    CompareMotion(CompareArgs),
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(c) => simulate(&c),
        Command::Track(a) => track(&a, false),
        Command::Enhance(a) => track(&a, true),
        Command::Train(a) => train(&a),
        Command::EvalDet(a) => eval_det(&a),
        Command::EvalMot(a) => eval_mot(&a),
        Command::Gradcheck(c) => gradcheck(&c),
        Command::CompareMotion(a) => compare_motion(&a),
    }
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}

fn required_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn simulate(c: &Common) -> Result<()> {
    let mut cfg: ScenarioConfig = load_json(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = required_out(c)?;
    let scenario = simulator::generate(&cfg)?;
    scenario.write(out)?;
    println!(
        "{}",
        serde_json::json!({
            "frames": scenario.frames(),
            "objects": scenario.tracks.len(),
            "detections": scenario.detections.len(),
            "gt_records": scenario.gt.len(),
        })
    );
    Ok(())
}

/// Detections, rig, model and optional simulator provider for a tracking run.
struct TrackInputs {
    detections: Vec<Detection>,
    rig: CameraRig,
    model: Gtn,
    cfg: PipelineConfig,
    provider: Option<SimFeatureProvider>,
    frames: Option<u64>,
}

fn track_inputs(a: &TrackArgs, enhance: bool) -> Result<TrackInputs> {
    let mut cfg: PipelineConfig = load_json(a.common.config.as_deref())?;
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(r) = &a.rig {
        cfg.rig = Some(r.clone());
    }
    if let Some(w) = &a.weights {
        cfg.weights = Some(w.clone());
    }
    if let Some(m) = a.motion {
        cfg.motion = m.into();
    }
    cfg.enhance_detections |= enhance || a.enhanced_out.is_some();
    cfg.validate()?;
    let rig_path = cfg.rig.clone().ok_or_else(|| CliError::Usage("--rig is required".into()))?;
    let weights = cfg.weights.clone().ok_or_else(|| CliError::Usage("--weights is required".into()))?;
    let rig = CameraRig::load(&rig_path)?;
    let model = Gtn::load(&weights)?;
    let detections = read_detections(&a.detections)?;
    let (provider, frames) = match &a.scenario {
        Some(path) => {
            let sc = ScenarioConfig::load(path)?;
            let scenario = simulator::generate(&sc)?;
            (Some(SimFeatureProvider::new(&scenario)), Some(scenario.frames() as u64))
        }
        None => (None, None),
    };
    Ok(TrackInputs {
        detections,
        rig,
        model,
        cfg,
        provider,
        frames,
    })
}

fn track(a: &TrackArgs, enhance: bool) -> Result<()> {
    let out = required_out(&a.common)?;
    let inputs = track_inputs(a, enhance)?;
    let provider = inputs.provider.as_ref().map(|p| p as &dyn FeatureProvider);
    let run = pipeline::run_tracking(
        &inputs.detections,
        inputs.frames,
        &inputs.rig,
        &inputs.model,
        &inputs.cfg,
        provider,
    )?;
    if enhance {
        jsonl::write(out, &run.enhanced)?;
    } else {
        jsonl::write(out, &run.records)?;
        if let Some(p) = &a.enhanced_out {
            jsonl::write(p, &run.enhanced)?;
        }
    }
    let ids: std::collections::BTreeSet<u64> = run.records.iter().map(|r| r.track_id.0).collect();
    println!(
        "{}",
        serde_json::json!({
            "records": run.records.len(),
            "tracks": ids.len(),
            "enhanced_detections": run.enhanced.len(),
        })
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match a.common.config.as_deref() {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    let out = required_out(&a.common)?;
    let (model, history) = training::train_from_config(&cfg)?;
    model.save(out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}.loss.csv"))
    });
    training::write_loss_csv(&csv, &history)?;
    let first = history.first().map_or(0.0, |l| l.total);
    let last = history.last().map_or(0.0, |l| l.total);
    println!(
        "{}",
        serde_json::json!({ "steps": cfg.steps, "initial_loss": first, "final_loss": last, "loss_csv": csv })
    );
    Ok(())
}

fn eval_det(a: &EvalArgs) -> Result<()> {
    let cfg: DetEvalConfig = load_json(a.common.config.as_deref())?;
    let out = required_out(&a.common)?;
    let gt: Vec<GtRecord> = jsonl::read(&a.gt)?;
    let pred: Vec<Detection> = jsonl::read(&a.pred)?;
    let gt: Vec<EvalBox> = gt.iter().map(EvalBox::from).collect();
    let pred: Vec<EvalBox> = pred.iter().map(EvalBox::from).collect();
    let report = metrics::eval_detection(&pred, &gt, &cfg)?;
    write_text(out, &report.to_json())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MotEvalConfig {
    /// Center distance gate in meters.
    pub threshold: f64,
}

impl Default for MotEvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_MOT_THRESHOLD,
        }
    }
}

fn eval_mot(a: &EvalArgs) -> Result<()> {
    let cfg: MotEvalConfig = load_json(a.common.config.as_deref())?;
    if !(cfg.threshold > 0.0) {
        return Err(CliError::Config("threshold must be positive".into()));
    }
    let out = required_out(&a.common)?;
    let gt: Vec<GtRecord> = jsonl::read(&a.gt)?;
    let pred: Vec<TrackOutputRecord> = jsonl::read(&a.pred)?;
    let pred: Vec<TrackBox> = pred.iter().map(TrackBox::from).collect();
    let report = metrics::eval_tracking(&pred, &metrics::gt_tracks(&gt), cfg.threshold);
    write_text(out, &report.to_json())?;
    Ok(())
}

fn gradcheck(c: &Common) -> Result<()> {
    let weights: LossWeights = load_json(c.config.as_deref())?;
    let seed = c.seed.unwrap_or(0);
    let (model, chunks) = training::toy_problem(seed)?;
    let report = training::grad_check(&model, &chunks, &weights, GRADCHECK_EPS)?;
    let json = serde_json::json!({
        "seed": seed,
        "eps": GRADCHECK_EPS,
        "floor": GRADCHECK_FLOOR,
        "max_relative_error": report.max_relative_error,
        "worst_parameter": report.worst_parameter,
        "worst_index": report.worst_index,
        "checked": report.checked,
    });
    if let Some(out) = &c.out {
        write_text(out, &serde_json::to_string_pretty(&json)?)?;
    }
    println!("max relative error {:e}", report.max_relative_error);
    if report.max_relative_error < 1e-4 {
        Ok(())
    } else {
        Err(CliError::GradCheck(report.max_relative_error))
    }
}

/// Default scene for the motion comparison: turning objects with noise.
pub fn motion_comparison_scenario() -> ScenarioConfig {
    ScenarioConfig {
        motion: MotionKind::Turning,
        ..ScenarioConfig::default()
    }
}

fn compare_motion(a: &CompareArgs) -> Result<()> {
    let mut cfg = match a.common.config.as_deref() {
        Some(p) => ScenarioConfig::load(p)?,
        None => motion_comparison_scenario(),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    let out = required_out(&a.common)?;
    let model = Gtn::load(&a.weights)?;
    let scenario = simulator::generate(&cfg)?;
    let cmp = pipeline::compare_motion_models(&model, &scenario, KalmanConfig::default(), cfg.seed)?;
    let table = cmp.table();
    write_text(out, &table)?;
    print!("{table}");
    Ok(())
}
