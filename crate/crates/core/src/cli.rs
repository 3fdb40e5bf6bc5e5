//! Command-line orchestration.
//!
//! Each command reads an optional TOML [`RunConfig`], applies flag overrides,
//! validates everything, then writes into a fresh output directory holding
//! `config.toml` (the effective config) and `manifest.json` (every produced
//! file). Nothing in an output directory carries a timestamp, so reruns with
//! the same inputs are byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, MetricsSummary, QdaClassifier, SingleHmmClassifier, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::hmm::ObservationSequence;
use crate::scenario::{self, build_dataset, ColumnMapping, DatasetConfig, Event, Situation, Stage};
use crate::scene::{self, GridSpec, SceneFitConfig, SceneModel, ScenarioAgent};
use crate::tlhmm::{self, PosteriorSeries, Roster, StateCount, TlhmmModel, TrainConfig, TransferMode};

#[derive(Parser, Debug)]
#[command(name = "tlhmm-scene", version, about = "Two-layer HMM situation recognition and scene prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created; must be empty if it exists).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// -v for progress, -vv for fitting details.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic merging dataset and its train/test split.
    Generate(GenerateArgs),
    /// Train the two-layer recognizer, the scene models and both baselines.
    Train(TrainArgs),
    /// Write posterior series for test events.
    Infer(InferArgs),
    /// Sample future scenes for one event and export ensemble and heatmaps.
    Rollout(RolloutArgs),
    /// Move a trained recognizer to a new dataset in all three setups.
    Transfer(TransferArgs),
    /// Recognition metrics of all three classifiers on the test split.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of events to generate.
    #[arg(long)]
    pub n_events: Option<usize>,
    /// Share of events in the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Start from the shipped transfer-target domain instead of the default.
    #[arg(long)]
    pub transfer_target: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Layer-1 window length in steps.
    #[arg(long)]
    pub t1: Option<usize>,
    /// Layer-2 window length in steps.
    #[arg(long)]
    pub t2: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Restrict to these event ids (default: the whole test split).
    #[arg(long = "event")]
    pub events: Vec<String>,
    /// Also write single-HMM and QDA posteriors, aligned step for step.
    #[arg(long)]
    pub baselines: bool,
    /// Permit events from the training split.
    #[arg(long)]
    pub allow_train: bool,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Event to predict (default: first test event).
    #[arg(long)]
    pub event: Option<String>,
    /// Rollout start step (default: start of the configured stage).
    #[arg(long)]
    pub start: Option<usize>,
    /// Steps predicted ahead.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of sampled trajectories.
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Target dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained `train` output (or a bare recognizer bundle).
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Recognition threshold, in (0.5, 1).
    #[arg(long)]
    pub theta: Option<f64>,
}

/// Baseline training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub single_hmm_states: StateCount,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            single_hmm_states: StateCount::default(),
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub fit: SceneFitConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            fit: SceneFitConfig::default(),
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Steps predicted ahead.
    pub horizon: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Default start: first step of this stage.
    pub start_stage: Stage,
    /// Heatmap cell sizes (m).
    pub cell_x: f64,
    pub cell_y: f64,
    /// Ellipse radius for the containment report, in standard deviations.
    pub k_sigma: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            n_samples: 1000,
            seed: 99,
            start_stage: Stage::Merging,
            cell_x: 0.25,
            cell_y: 1.0,
            k_sigma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub theta: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { theta: DEFAULT_THETA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub modes: Vec<TransferMode>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            modes: TransferMode::ALL.to_vec(),
        }
    }
}

/// Everything a command may need. Sections irrelevant to a command are
/// ignored but still validated and echoed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub roster: Roster,
    pub scene: SceneConfig,
    pub baselines: BaselineConfig,
    pub rollout: RolloutConfig,
    pub evaluate: EvaluateConfig,
    pub transfer: TransferConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.dataset.split_seed = seed;
        self.train.seed = seed;
        self.scene.seed = seed;
        self.baselines.seed = seed;
        self.rollout.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.dataset.validate().map_err(cfg)?;
        self.train.validate()?;
        self.roster.validate().map_err(cfg)?;
        let sc = &self.scene.fit;
        if sc.components == Some(0) || sc.max_components == 0 {
            return Err(Error::Config("scene component counts must be at least 1".into()));
        }
        let b = &self.baselines.single_hmm_states;
        if b.fixed == Some(0) || b.min == 0 || b.min > b.max {
            return Err(Error::Config("baseline state counts must satisfy 1 <= min <= max".into()));
        }
        let r = &self.rollout;
        if r.horizon == 0 || r.n_samples == 0 {
            return Err(Error::Config("rollout horizon and n_samples must be at least 1".into()));
        }
        if !(r.cell_x > 0.0 && r.cell_y > 0.0 && r.k_sigma > 0.0) {
            return Err(Error::Config("rollout cell sizes and k_sigma must be positive".into()));
        }
        let t = self.evaluate.theta;
        if !(t > 0.5 && t < 1.0) {
            return Err(Error::Config(format!("theta {t} must lie in (0.5, 1)")));
        }
        if self.transfer.modes.is_empty() {
            return Err(Error::Config("transfer.modes is empty".into()));
        }
        Ok(())
    }
}

/// Result of a command: per-event failures are reported, not fatal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub failures: Vec<EventFailure>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFailure {
    pub event_id: String,
    pub error: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a str,
    files: &'a [String],
    failed_events: Vec<&'a str>,
}

/// Output directory bookkeeping.
struct RunDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl RunDir {
    fn create(root: PathBuf) -> Result<Self> {
        if root.exists() {
            let mut it = fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
            if it.next().is_some() {
                return Err(Error::Config(format!("output directory {} is not empty", root.display())));
            }
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            files: BTreeSet::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.files.insert(rel.to_string());
        Ok(p)
    }

    fn writer(&mut self, rel: &str) -> Result<BufWriter<fs::File>> {
        let p = self.path(rel)?;
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok(BufWriter::new(f))
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    /// Registers files written by a library routine under `sub`.
    fn adopt(&mut self, sub: &str, names: &[String]) {
        for n in names {
            self.files.insert(format!("{sub}/{n}"));
        }
    }

    fn finish(mut self, command: &str, config: &RunConfig, failures: Vec<EventFailure>) -> Result<Outcome> {
        self.write_text("config.toml", &config.to_toml()?)?;
        self.files.insert("manifest.json".into());
        let files: Vec<String> = self.files.iter().cloned().collect();
        let manifest = Manifest {
            command,
            config: "config.toml",
            files: &files,
            failed_events: failures.iter().map(|f| f.event_id.as_str()).collect(),
        };
        let p = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(Outcome {
            out_dir: self.root,
            files,
            failures,
        })
    }
}

fn default_out(command: &str) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{command}-{secs}"))
}

/// Which split an event belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub id: String,
    pub situation: Situation,
    pub split: Split,
}

/// `split.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dt: f64,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub events: Vec<SplitEntry>,
}

/// Events of a dataset directory with their split assignment.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub events: Vec<Event>,
    pub split: SplitManifest,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let sp = dir.join("split.json");
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let split: SplitManifest = serde_json::from_str(&text)?;
        let report = scenario::load_events_csv(&dir.join("events.csv"), &ColumnMapping::default(), split.dt)?;
        if let Some(d) = report.diagnostics.first() {
            return Err(Error::invalid(format!("dataset {}: {d}", dir.display())));
        }
        Ok(Self {
            events: report.events,
            split,
        })
    }

    fn split_of(&self, id: &str) -> Option<Split> {
        self.split.events.iter().find(|e| e.id == id).map(|e| e.split)
    }

    pub fn of_split(&self, split: Split) -> Vec<Event> {
        self.events
            .iter()
            .filter(|e| self.split_of(&e.id) == Some(split))
            .cloned()
            .collect()
    }
}

/// Files of a `train` output directory.
pub struct TrainedModels {
    pub tlhmm: TlhmmModel,
    pub scene: Vec<SceneModel>,
    pub single_hmm: SingleHmmClassifier,
    pub qda: QdaClassifier,
}

impl TrainedModels {
    pub fn load(dir: &Path) -> Result<Self> {
        let scene = Situation::ALL
            .iter()
            .map(|s| SceneModel::load(&dir.join("scene").join(format!("{}.json", s.label()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tlhmm: TlhmmModel::load_bundle(&dir.join("tlhmm"))?,
            scene,
            single_hmm: SingleHmmClassifier::load(&dir.join("baselines").join("single_hmm.json"))?,
            qda: QdaClassifier::load(&dir.join("baselines").join("qda.json"))?,
        })
    }
}

fn recognizer_dir(path: &Path) -> PathBuf {
    let nested = path.join("tlhmm");
    if nested.join("manifest.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Parses arguments already split into `cli`, configures logging and runs.
pub fn run(cli: Cli) -> Result<Outcome> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.set_seed(s);
    }
    let name = command_name(&cli.command);
    let out = cli.out.clone().unwrap_or_else(|| default_out(name));
    match cli.command {
        Command::Generate(a) => {
            if a.transfer_target {
                let seed = cli.seed.map(|_| config.dataset.seed);
                config.dataset = DatasetConfig::transfer_target();
                if let Some(s) = seed {
                    config.dataset.seed = s;
                    config.dataset.split_seed = s;
                }
            }
            if let Some(n) = a.n_events {
                config.dataset.n_events = n;
            }
            if let Some(f) = a.train_fraction {
                config.dataset.train_fraction = f;
            }
            config.validate()?;
            cmd_generate(&config, out)
        }
        Command::Train(a) => {
            if let Some(t) = a.t1 {
                config.train.t1 = t;
            }
            if let Some(t) = a.t2 {
                config.train.t2 = t;
            }
            config.validate()?;
            cmd_train(&config, &a.data, out)
        }
        Command::Infer(a) => {
            config.validate()?;
            cmd_infer(&config, &a, out)
        }
        Command::Rollout(a) => {
            if let Some(h) = a.horizon {
                config.rollout.horizon = h;
            }
            if let Some(n) = a.n_samples {
                config.rollout.n_samples = n;
            }
            config.validate()?;
            cmd_rollout(&config, &a, out)
        }
        Command::Transfer(a) => {
            config.validate()?;
            cmd_transfer(&config, &a.model, &a.data, out)
        }
        Command::Evaluate(a) => {
            if let Some(t) = a.theta {
                config.evaluate.theta = t;
            }
            config.validate()?;
            cmd_evaluate(&config, &a.data, &a.model, out)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Rollout(_) => "rollout",
        Command::Transfer(_) => "transfer",
        Command::Evaluate(_) => "evaluate",
    }
}

pub fn cmd_generate(config: &RunConfig, out: PathBuf) -> Result<Outcome> {
    let mut dir = RunDir::create(out)?;
    let ds = build_dataset(&config.dataset)?;
    info!("generated {} events ({} train / {} test)", ds.events.len(), ds.train.len(), ds.test.len());
    scenario::write_events_csv(&ds.events, dir.writer("events.csv")?)?;
    scenario::write_events_csv(&ds.clean, dir.writer("clean_events.csv")?)?;
    let entries = ds
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| SplitEntry {
            id: e.id.clone(),
            situation: e.situation,
            split: if ds.train.binary_search(&i).is_ok() {
                Split::Train
            } else {
                Split::Test
            },
        })
        .collect();
    let manifest = SplitManifest {
        dt: config.dataset.generator.dt,
        split_seed: config.dataset.split_seed,
        train_fraction: config.dataset.train_fraction,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        events: entries,
    };
    dir.write_json("split.json", &manifest)?;
    dir.finish("generate", config, Vec::new())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    n_train_events: usize,
    recognizer: &'a tlhmm::TrainReport,
    scene: Vec<SceneFitSummary>,
    baselines: BaselineSummary,
}

#[derive(Serialize)]
struct SceneFitSummary {
    situation: Situation,
    components: usize,
    iterations: usize,
    log_likelihood: f64,
}

#[derive(Serialize)]
struct BaselineSummary {
    window: usize,
    single_hmm_states: Vec<usize>,
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: PathBuf) -> Result<Outcome> {
    let ds = LoadedDataset::load(data)?;
    let mut dir = RunDir::create(out)?;
    let train = ds.of_split(Split::Train);
    info!("training on {} events", train.len());
    let (model, report) = tlhmm::train(&train, &config.roster, &config.train)?;
    let files = model.save_bundle(&dir.root.join("tlhmm"))?;
    dir.adopt("tlhmm", &files);

    let fitted = scene::fit_scene_models(&train, &config.scene.fit, config.scene.seed)?;
    let mut scene_summary = Vec::new();
    for (m, r) in &fitted {
        let rel = format!("scene/{}.json", m.situation.label());
        let p = dir.path(&rel)?;
        m.save(&p)?;
        scene_summary.push(SceneFitSummary {
            situation: m.situation,
            components: m.gmm.n_components(),
            iterations: r.iterations,
            log_likelihood: r.final_log_likelihood(),
        });
    }

    let situations = config.roster.situations();
    let window = model.min_length();
    let single = SingleHmmClassifier::fit(
        &train,
        &situations,
        window,
        &config.baselines.single_hmm_states,
        &config.train.fit,
        config.baselines.seed,
    )?;
    single.save(&dir.path("baselines/single_hmm.json")?)?;
    let qda = QdaClassifier::fit(&train, &situations, window)?;
    qda.save(&dir.path("baselines/qda.json")?)?;

    let summary = TrainSummary {
        n_train_events: train.len(),
        recognizer: &report,
        scene: scene_summary,
        baselines: BaselineSummary {
            window,
            single_hmm_states: single.models.iter().map(|m| m.n_states()).collect(),
        },
    };
    dir.write_json("train_report.json", &summary)?;
    dir.finish("train", config, Vec::new())
}

/// Events named by `ids`, or the test split when empty. Train-split events
/// are refused unless `allow_train`.
fn select_events(ds: &LoadedDataset, ids: &[String], allow_train: bool) -> Result<Vec<Event>> {
    if ids.is_empty() {
        return Ok(ds.of_split(Split::Test));
    }
    ids.iter()
        .map(|id| {
            let ev = ds
                .events
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::invalid(format!("event {id} is not in the dataset")))?;
            if ds.split_of(id) == Some(Split::Train) && !allow_train {
                return Err(Error::invalid(format!(
                    "event {id} belongs to the training split; pass --allow-train to use it"
                )));
            }
            Ok(ev.clone())
        })
        .collect()
}

/// Posterior series of all three classifiers side by side.
fn write_aligned<W: std::io::Write>(runs: &[(&str, &PosteriorSeries)], writer: W) -> Result<()> {
    let first = runs[0].1;
    if runs.iter().any(|(_, s)| s.steps != first.steps) {
        return Err(Error::invalid("posterior series are not aligned"));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string(), "time_s".to_string()];
    for (name, s) in runs {
        header.extend(s.labels.iter().map(|l| format!("{name}:{l}")));
    }
    w.write_record(&header)?;
    for i in 0..first.len() {
        let mut rec = vec![first.steps[i].to_string(), first.times[i].to_string()];
        for (_, s) in runs {
            rec.extend(s.probabilities[i].iter().map(|p| p.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("aligned posterior csv", e))?;
    Ok(())
}

fn note_failure(failures: &mut Vec<EventFailure>, id: &str, err: &Error) {
    warn!("event {id}: {err}");
    failures.push(EventFailure {
        event_id: id.to_string(),
        error: err.to_string(),
    });
}

pub fn cmd_infer(config: &RunConfig, args: &InferArgs, out: PathBuf) -> Result<Outcome> {
    let ds = LoadedDataset::load(&args.data)?;
    let events = select_events(&ds, &args.events, args.allow_train)?;
    let mut dir = RunDir::create(out)?;
    let mut failures = Vec::new();
    let (tl, baselines) = if args.baselines {
        let m = TrainedModels::load(&args.model)?;
        (m.tlhmm, Some((m.single_hmm, m.qda)))
    } else {
        (TlhmmModel::load_bundle(&recognizer_dir(&args.model))?, None)
    };
    for ev in &events {
        let res = (|| -> Result<()> {
            let raw = scenario::extract_features(ev)?.raw;
            let post = tl.infer(&raw)?;
            let extra = match &baselines {
                Some((single, qda)) => Some((single.infer(&raw)?, qda.infer(&raw)?)),
                None => None,
            };
            post.write_csv(dir.writer(&format!("posteriors/tlhmm/{}.csv", ev.id))?)?;
            if let Some((s, q)) = extra {
                s.write_csv(dir.writer(&format!("posteriors/single_hmm/{}.csv", ev.id))?)?;
                q.write_csv(dir.writer(&format!("posteriors/qda/{}.csv", ev.id))?)?;
                let runs = [("tlhmm", &post), ("single_hmm", &s), ("qda", &q)];
                write_aligned(&runs, dir.writer(&format!("posteriors/aligned/{}.csv", ev.id))?)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            note_failure(&mut failures, &ev.id, &e);
        }
    }
    dir.write_json("failures.json", &failures)?;
    dir.finish("infer", config, failures)
}

#[derive(Serialize)]
struct EvaluateSummary<'a> {
    theta: f64,
    n_test_events: usize,
    models: Vec<MetricsSummary>,
    failures: &'a [EventFailure],
}

pub fn cmd_evaluate(config: &RunConfig, data: &Path, model: &Path, out: PathBuf) -> Result<Outcome> {
    let ds = LoadedDataset::load(data)?;
    let models = TrainedModels::load(model)?;
    let mut dir = RunDir::create(out)?;
    let test = ds.of_split(Split::Test);
    let mut failures = Vec::new();
    let names = ["tlhmm", "single_hmm", "qda"];
    let mut runs: [Vec<(String, PosteriorSeries)>; 3] = Default::default();
    let mut truth = Vec::new();
    for ev in &test {
        let res = (|| -> Result<[PosteriorSeries; 3]> {
            let raw: ObservationSequence = scenario::extract_features(ev)?.raw;
            Ok([
                models.tlhmm.infer(&raw)?,
                models.single_hmm.infer(&raw)?,
                models.qda.infer(&raw)?,
            ])
        })();
        match res {
            Ok(series) => {
                for (r, s) in runs.iter_mut().zip(series) {
                    r.push((ev.id.clone(), s));
                }
                truth.push(ev.situation);
            }
            Err(e) => note_failure(&mut failures, &ev.id, &e),
        }
    }
    let theta = config.evaluate.theta;
    let metrics = names
        .iter()
        .zip(&runs)
        .map(|(n, r)| baselines::evaluate(n, r, &truth, theta))
        .collect::<Result<Vec<_>>>()?;
    baselines::write_metrics_csv(&metrics, dir.writer("metrics.csv")?)?;
    let summary = EvaluateSummary {
        theta,
        n_test_events: test.len(),
        models: metrics.iter().map(MetricsSummary::from).collect(),
        failures: &failures,
    };
    dir.write_json("summary.json", &summary)?;
    dir.finish("evaluate", config, failures)
}

#[derive(Serialize)]
struct RolloutSummary {
    event_id: String,
    truth: Situation,
    start_step: usize,
    posterior_labels: Vec<String>,
    posterior: Vec<f64>,
    horizon: usize,
    n_samples: usize,
    n_truncated: usize,
    heatmap_clamped: [usize; 2],
    /// Steps with ground truth available, and how many of them fell inside
    /// the ellipse for both agents.
    steps_compared: usize,
    steps_contained: usize,
}

pub fn cmd_rollout(config: &RunConfig, args: &RolloutArgs, out: PathBuf) -> Result<Outcome> {
    let ds = LoadedDataset::load(&args.data)?;
    let models = TrainedModels::load(&args.model)?;
    let ids: Vec<String> = args.event.iter().cloned().collect();
    let ev = select_events(&ds, &ids, true)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid("the dataset has no test events"))?;
    let rc = &config.rollout;
    let feats = scenario::extract_features(&ev)?;
    let min_k = models.tlhmm.min_length() - 1;
    let k0 = match args.start {
        Some(k) => k,
        None => ev
            .stage_range(rc.start_stage)
            .map(|(s, _)| s)
            .unwrap_or(min_k)
            .max(min_k),
    };
    if k0 < min_k || k0 >= ev.len() {
        return Err(Error::Config(format!(
            "start step {k0} must lie in [{min_k}, {}) for event {}",
            ev.len(),
            ev.id
        )));
    }
    let post = models.tlhmm.infer(&feats.raw.slice(0, k0 + 1)?)?;
    let p = post
        .final_row()
        .ok_or_else(|| Error::invalid("empty posterior at rollout start"))?
        .to_vec();
    let mut dir = RunDir::create(out)?;
    let ens = scene::rollout(&models.scene, &p, &feats.states[k0], rc.horizon, rc.n_samples, ev.dt, rc.seed)?;
    ens.write_csv(dir.writer("ensemble.csv")?)?;
    let spec = GridSpec::covering(&ens, rc.cell_x, rc.cell_y);
    let grid = scene::occupancy_heatmap(&ens, spec)?.normalize();
    for agent in ScenarioAgent::BOTH {
        grid.write_csv(agent, dir.writer(&format!("heatmap_{}.csv", agent.label()))?)?;
    }
    scenario::write_events_csv(std::slice::from_ref(&ev), dir.writer("truth.csv")?)?;
    let end = (k0 + rc.horizon).min(ev.len() - 1);
    let contained = ens.containment(&feats.states[k0..=end], rc.k_sigma);
    let summary = RolloutSummary {
        event_id: ev.id.clone(),
        truth: ev.situation,
        start_step: k0,
        posterior_labels: post.labels.clone(),
        posterior: p,
        horizon: rc.horizon,
        n_samples: rc.n_samples,
        n_truncated: ens.truncated_at.iter().filter(|t| t.is_some()).count(),
        heatmap_clamped: grid.clamped,
        steps_compared: contained.len(),
        steps_contained: contained.iter().filter(|&&c| c).count(),
    };
    dir.write_json("rollout.json", &summary)?;
    dir.finish("rollout", config, Vec::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub mode: TransferMode,
    /// Baum-Welch updates summed over layer 2.
    pub layer2_iterations: usize,
    /// Including the mixture fits that initialize fresh layer-2 models.
    pub layer2_total_iterations: usize,
    pub test_accuracy: f64,
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    n_target_train: usize,
    n_target_test: usize,
    setups: &'a [TransferRow],
    failures: &'a [EventFailure],
}

pub fn cmd_transfer(config: &RunConfig, model: &Path, data: &Path, out: PathBuf) -> Result<Outcome> {
    let ds = LoadedDataset::load(data)?;
    let pretrained = TlhmmModel::load_bundle(&recognizer_dir(model))?;
    let mut dir = RunDir::create(out)?;
    let train = ds.of_split(Split::Train);
    let test = ds.of_split(Split::Test);
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut it = csv::Writer::from_writer(dir.writer("iterations.csv")?);
    it.write_record([
        "mode",
        "model",
        "n_states",
        "iterations",
        "init_iterations",
        "converged",
    ])?;
    for &mode in &config.transfer.modes {
        info!("transfer: {}", mode.label());
        let (m, report) = tlhmm::transfer(&pretrained, &train, mode, &config.train)?;
        let files = m.save_bundle(&dir.root.join(mode.label()))?;
        dir.adopt(mode.label(), &files);
        for r in report.layer1.iter().chain(&report.layer2) {
            it.write_record([
                mode.label().to_string(),
                r.label.clone(),
                r.n_states.to_string(),
                r.fit.iterations.to_string(),
                r.fit.init_iterations.to_string(),
                r.fit.converged.to_string(),
            ])?;
        }
        let mut runs = Vec::new();
        let mut truth = Vec::new();
        for ev in &test {
            match scenario::extract_features(ev).and_then(|f| m.infer(&f.raw)) {
                Ok(s) => {
                    runs.push((ev.id.clone(), s));
                    truth.push(ev.situation);
                }
                Err(e) => note_failure(&mut failures, &format!("{}:{}", mode.label(), ev.id), &e),
            }
        }
        let metrics = baselines::evaluate(mode.label(), &runs, &truth, config.evaluate.theta)?;
        rows.push(TransferRow {
            mode,
            layer2_iterations: report.layer2_iterations(),
            layer2_total_iterations: report.layer2_total_iterations(),
            test_accuracy: metrics.final_accuracy,
        });
    }
    it.flush().map_err(|e| Error::io("iterations.csv", e))?;
    drop(it);
    let summary = TransferSummary {
        n_target_train: train.len(),
        n_target_test: test.len(),
        setups: &rows,
        failures: &failures,
    };
    dir.write_json("transfer_report.json", &summary)?;
    dir.finish("transfer", config, failures)
}
