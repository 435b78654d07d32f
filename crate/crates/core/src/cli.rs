//! Command-line pipeline.
//!
//! Every command reads its inputs from the previous stage's directory under
//! `--out` unless told otherwise, and writes its artifacts together with the
//! effective `config.json` into its own subdirectory.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::connectome::{self, BrainGraph, FeatureMode, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{self, Aggregate, MetricsReport};
use crate::explain::{self, ShapLevel, ShapOptions, DEFAULT_SAMPLES};
use crate::ingest::{self, SyntheticCohortSpec};
use crate::nn::{checkpoint, Classifier, GraphBatch, ModelKind};
use crate::train::{self, SplitAssignment, SweepGrid, TrainConfig};
use crate::verify;

pub const OUT_ENV: &str = "BRAINGAT_OUT";

#[derive(Parser, Debug)]
#[command(name = "braingat", version, about = "Graph-attention classification of functional brain connectomes")]
struct Cli {
    /// Output root; each command writes into its own subdirectory
    #[arg(long, global = true, env = OUT_ENV, default_value = "braingat-out")]
    out: PathBuf,
    /// JSON pipeline config; flags given explicitly override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for data synthesis, splits, initialisation and SHAP sampling
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run the finite-difference gradient suite first and print its errors
    #[arg(long, global = true)]
    grad_check: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with a planted connectivity block
    Synth(SynthArgs),
    /// Turn a cohort manifest into thresholded correlation graphs
    BuildGraphs(GraphArgs),
    /// Train one model and evaluate it on its held-out split
    Train(TrainArgs),
    /// Independent runs with seeds seed, seed+1, ... and their aggregate
    Replicate(ReplicateArgs),
    /// Grid search over training hyperparameters on one fixed split
    Sweep(SweepArgs),
    /// Score a checkpoint on a subset of the cohort
    Evaluate(EvaluateArgs),
    /// SHAP and attention region rankings for a checkpoint
    Explain(ExplainArgs),
    /// Gradient and SHAP oracle suites
    Verify,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Subjects per class
    #[arg(long, default_value_t = 50)]
    subjects: usize,
    #[arg(long, default_value_t = 20)]
    regions: usize,
    #[arg(long, default_value_t = 200)]
    timepoints: usize,
    /// Regions coupled in the positive class
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    block: Vec<usize>,
    /// Latent coupling strength in [0, 1)
    #[arg(long, default_value_t = 0.8)]
    coupling: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Cohort directory [default: <out>/cohort]
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GraphArgs {
    /// Cohort manifest [default: <data-dir>/manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Cohort directory holding manifest.json [default: <out>/cohort]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Keep edges with |r| at or above this
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// correlation-profile or correlation-plus-series:K
    #[arg(long, default_value = "correlation-profile")]
    features: FeatureMode,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// gat or gcn
    #[arg(long, default_value = "gat")]
    model: ModelKind,
    #[arg(long = "lr", default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long = "blocks", default_value_t = 7)]
    n_blocks: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    head_dim: usize,
    #[arg(long, default_value_t = 1024)]
    fc_hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout_first: f64,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Graph directory [default: <out>/graphs]
    #[arg(long)]
    graphs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Concurrent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write each run's best checkpoint
    #[arg(long)]
    save_checkpoints: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// JSON object mapping hyperparameter names to value lists
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ModelInput {
    /// Graph directory [default: <out>/graphs]
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Model checkpoint [default: <out>/train/model.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split file [default: <out>/train/split.json when present]
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    input: ModelInput,
    /// train, validation, test or all
    #[arg(long, default_value = "test")]
    subset: Subset,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[command(flatten)]
    input: ModelInput,
    /// shap, attention or both
    #[arg(long, default_value = "both")]
    method: Method,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Coalitions per subject when not enumerating exhaustively
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    shap_samples: usize,
    /// feature (every node feature is a player) or region (whole rows)
    #[arg(long, default_value = "feature")]
    shap_level: ShapLevel,
    /// Explain at most this many test subjects; 0 means all
    #[arg(long, default_value_t = 0)]
    max_subjects: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Shap,
    Attention,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub subjects_per_class: usize,
    pub regions: usize,
    pub timepoints: usize,
    pub planted_block: Vec<usize>,
    pub coupling: f64,
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let s = SyntheticCohortSpec::default();
        Self {
            subjects_per_class: s.n_subjects_per_class,
            regions: s.n_regions,
            timepoints: s.n_timepoints,
            planted_block: s.planted_block,
            coupling: s.coupling_strength,
            noise: s.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectomeOptions {
    pub threshold: f64,
    pub feature_mode: FeatureMode,
}

impl Default for ConnectomeOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, feature_mode: FeatureMode::CorrelationProfile }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainOptions {
    pub method: Method,
    pub top_k: usize,
    pub shap_samples: usize,
    pub shap_level: ShapLevel,
    pub max_subjects: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { method: Method::Both, top_k: 5, shap_samples: DEFAULT_SAMPLES, shap_level: ShapLevel::Feature, max_subjects: 0 }
    }
}

/// Everything a command needs; written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cohort directory; `<out_dir>/cohort` when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Copied into the synthesis, training and SHAP seeds.
    pub seed: u64,
    pub synth: SynthOptions,
    pub connectome: ConnectomeOptions,
    pub train: TrainConfig,
    pub runs: usize,
    pub jobs: usize,
    pub explain: ExplainOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("braingat-out"),
            seed: 0,
            synth: SynthOptions::default(),
            connectome: ConnectomeOptions::default(),
            train: TrainConfig::default(),
            runs: 30,
            jobs: 1,
            explain: ExplainOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("cohort"))
    }

    fn stage(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn synth_spec(&self) -> SyntheticCohortSpec {
        let s = &self.synth;
        SyntheticCohortSpec {
            n_subjects_per_class: s.subjects_per_class,
            n_regions: s.regions,
            n_timepoints: s.timepoints,
            planted_block: s.planted_block.clone(),
            coupling_strength: s.coupling,
            noise_sigma: s.noise,
            seed: self.seed,
        }
    }
}

/// Line-delimited JSON events on standard error.
pub fn log_event(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), json!(event));
    if let serde_json::Value::Object(m) = fields {
        obj.extend(m);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", serde_json::Value::Object(obj));
}

/// Whether `id` was given on the command line or through the environment.
fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.try_get_raw(id), Ok(Some(_)))
        && matches!(m.value_source(id), Some(ValueSource::CommandLine | ValueSource::EnvVariable))
}

macro_rules! overlay {
    ($m:expr, $($id:literal => $target:expr, $value:expr;)*) => {
        $(if explicit($m, $id) {
            $target = $value;
        })*
    };
}

fn apply_hyper(m: &ArgMatches, h: &HyperArgs, t: &mut TrainConfig) {
    overlay! { m,
        "model" => t.model, h.model;
        "learning_rate" => t.learning_rate, h.learning_rate;
        "batch_size" => t.batch_size, h.batch_size;
        "epochs" => t.epochs, h.epochs;
        "patience" => t.patience, h.patience;
        "n_blocks" => t.n_blocks, h.n_blocks;
        "heads" => t.heads, h.heads;
        "head_dim" => t.head_dim, h.head_dim;
        "fc_hidden" => t.fc_hidden, h.fc_hidden;
        "dropout_first" => t.dropout_first, h.dropout_first;
        "dropout" => t.dropout, h.dropout;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable output");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid {}: {e}", path.display())))
}

fn stage_dir(cfg: &PipelineConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.stage(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("missing input {}", path.display())))
    }
}

fn load_graphs(cfg: &PipelineConfig, path: &Option<PathBuf>) -> Result<Vec<BrainGraph>> {
    let dir = path.clone().unwrap_or_else(|| cfg.stage("graphs"));
    require(&dir)?;
    let (_, graphs) = connectome::load_graph_dir(&dir)?;
    if graphs.is_empty() {
        return Err(Error::Data(format!("no graphs listed in {}", dir.display())));
    }
    Ok(graphs)
}

fn epoch_logger(run: usize) -> impl Fn(&train::EpochRecord) + Sync {
    move |r| {
        log_event(
            "epoch",
            json!({"run": run, "epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss, "val_accuracy": r.val_accuracy}),
        )
    }
}

fn history_csv(path: &Path, history: &[train::EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
    }
    write_text(path, &s)
}

fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.cohort_dir();
    let manifest = ingest::write_synthetic_cohort(&cfg.synth_spec(), &dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    log_event("synth", json!({"subjects": manifest.subjects.len(), "regions": manifest.n_regions, "dir": dir}));
    Ok(())
}

fn cmd_build_graphs(cfg: &PipelineConfig, manifest: Option<PathBuf>) -> Result<()> {
    let path = manifest.unwrap_or_else(|| cfg.cohort_dir().join("manifest.json"));
    require(&path)?;
    let manifest = ingest::load_manifest(&path)?;
    let c = &cfg.connectome;
    let graphs = connectome::build_cohort_graphs(&manifest, c.threshold, c.feature_mode)?;
    let dir = stage_dir(cfg, "graphs")?;
    let index = connectome::write_graph_dir(&graphs, c.threshold, c.feature_mode, &dir)?;
    let edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    log_event(
        "graphs",
        json!({"graphs": graphs.len(), "regions": index.n_regions, "feature_dim": index.feature_dim, "mean_edges": edges as f64 / graphs.len() as f64}),
    );
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, graphs: &Option<PathBuf>) -> Result<()> {
    let graphs = load_graphs(cfg, graphs)?;
    let run = train::train_once(&graphs, &cfg.train, &epoch_logger(0))?;
    let dir = stage_dir(cfg, "train")?;
    write_json(&dir.join("metrics.json"), &run.result.test)?;
    write_json(&dir.join("run.json"), &run.result)?;
    write_json(&dir.join("split.json"), &run.result.split)?;
    history_csv(&dir.join("history.csv"), &run.result.history)?;
    checkpoint::save(&run.model, &dir.join("model.ckpt"))?;
    log_event(
        "trained",
        json!({"best_epoch": run.result.best_epoch, "test_accuracy": run.result.test.accuracy, "test_auc": run.result.test.auc}),
    );
    Ok(())
}

/// Replicate summary without per-epoch histories or timings.
#[derive(Serialize)]
struct ReplicateSummary<'a> {
    base_seed: u64,
    config: &'a TrainConfig,
    aggregate: &'a Aggregate,
    runs: Vec<RunSummary<'a>>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    test: &'a MetricsReport,
}

fn cmd_replicate(cfg: &PipelineConfig, graphs: &Option<PathBuf>, save_checkpoints: bool) -> Result<()> {
    let graphs = load_graphs(cfg, graphs)?;
    let on_epoch = |run: usize, r: &train::EpochRecord| epoch_logger(run)(r);
    let (report, models) = train::run_replicates(&graphs, &cfg.train, cfg.runs, cfg.jobs, &on_epoch)?;
    let dir = stage_dir(cfg, "replicate")?;
    for (k, (run, model)) in report.runs.iter().zip(&models).enumerate() {
        write_json(&dir.join(format!("run_{k:03}.json")), run)?;
        if save_checkpoints {
            checkpoint::save(model, &dir.join(format!("run_{k:03}.ckpt")))?;
        }
    }
    let summary = ReplicateSummary {
        base_seed: report.base_seed,
        config: &cfg.train,
        aggregate: &report.aggregate,
        runs: report
            .runs
            .iter()
            .map(|r| RunSummary { seed: r.seed, best_epoch: r.best_epoch, best_val_loss: r.best_val_loss, test: &r.test })
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_text(&dir.join("table.md"), &eval::render_table(&report.aggregate))?;
    let a = &report.aggregate;
    log_event(
        "replicated",
        json!({"runs": a.runs, "mean_accuracy": a.accuracy.mean, "std_accuracy": a.accuracy.std, "mean_auc": a.auc.map(|s| s.mean)}),
    );
    Ok(())
}

fn cmd_sweep(cfg: &PipelineConfig, graphs: &Option<PathBuf>, grid: &Path) -> Result<()> {
    require(grid)?;
    let grid: SweepGrid = fs::read_to_string(grid)
        .map_err(|e| Error::io(grid, e))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| Error::Config(format!("invalid grid {}: {e}", grid.display()))))?;
    let graphs = load_graphs(cfg, graphs)?;
    let ranked = train::sweep(&graphs, &cfg.train, &grid, cfg.jobs)?;
    let dir = stage_dir(cfg, "sweep")?;
    write_json(&dir.join("sweep.json"), &ranked)?;
    write_json(&dir.join("best_config.json"), &ranked[0].config)?;
    log_event("swept", json!({"points": ranked.len(), "best_val_accuracy": ranked[0].val_accuracy}));
    Ok(())
}

struct Loaded {
    model: Classifier,
    graphs: Vec<BrainGraph>,
    split: Option<SplitAssignment>,
}

fn load_model_input(cfg: &PipelineConfig, input: &ModelInput) -> Result<Loaded> {
    let ckpt = input.checkpoint.clone().unwrap_or_else(|| cfg.stage("train").join("model.ckpt"));
    require(&ckpt)?;
    let model = checkpoint::load(&ckpt)?;
    let graphs = load_graphs(cfg, &input.graphs)?;
    let split = match &input.split {
        Some(p) => {
            require(p)?;
            Some(read_json(p)?)
        }
        None => {
            let p = cfg.stage("train").join("split.json");
            if p.exists() {
                Some(read_json(&p)?)
            } else {
                None
            }
        }
    };
    Ok(Loaded { model, graphs, split })
}

fn subset<'a>(graphs: &'a [BrainGraph], split: &Option<SplitAssignment>, which: Subset) -> Result<Vec<&'a BrainGraph>> {
    let ids: Option<&[String]> = match (which, split) {
        (Subset::All, _) => None,
        (_, None) => return Err(Error::Data("no split available; pass --split or use --subset all".into())),
        (Subset::Train, Some(s)) => Some(&s.train),
        (Subset::Validation, Some(s)) => Some(&s.validation),
        (Subset::Test, Some(s)) => Some(&s.test),
    };
    let Some(ids) = ids else {
        return Ok(graphs.iter().collect());
    };
    ids.iter()
        .map(|id| {
            graphs
                .iter()
                .find(|g| &g.id == id)
                .ok_or_else(|| Error::Data(format!("split references unknown subject {id}")))
        })
        .collect()
}

fn cmd_evaluate(cfg: &PipelineConfig, input: &ModelInput, which: Subset) -> Result<()> {
    let loaded = load_model_input(cfg, input)?;
    let chosen = subset(&loaded.graphs, &loaded.split, which)?;
    let batch = GraphBatch::new(&chosen)?;
    let pred = loaded.model.predict(&batch)?;
    let report = eval::evaluate_prediction(&pred, &batch.labels)?;
    let dir = stage_dir(cfg, "evaluate")?;
    write_json(&dir.join("metrics.json"), &report)?;
    let c = report.confusion;
    write_text(
        &dir.join("confusion.csv"),
        &format!("actual,predicted_control,predicted_asd\ncontrol,{},{}\nasd,{},{}\n", c.tn, c.fp, c.fn_, c.tp),
    )?;
    let mut gain = String::from("fraction_examined,fraction_positives_found\n0,0\n");
    for (x, y) in report.gain_curve.iter().flat_map(|g| &g.points) {
        gain.push_str(&format!("{x},{y}\n"));
    }
    write_text(&dir.join("gain_curve.csv"), &gain)?;
    let width = pred.embeddings.cols();
    let mut emb = String::from("id,label");
    for k in 0..width {
        emb.push_str(&format!(",e{k}"));
    }
    emb.push('\n');
    for (r, (id, label)) in batch.ids.iter().zip(&batch.labels).enumerate() {
        emb.push_str(&format!("{id},{}", label.index()));
        for v in pred.embeddings.row_slice(r) {
            emb.push_str(&format!(",{v}"));
        }
        emb.push('\n');
    }
    write_text(&dir.join("embeddings.csv"), &emb)?;
    log_event(
        "evaluated",
        json!({"n": report.n, "accuracy": report.accuracy, "precision": report.precision, "recall": report.recall, "f1": report.f1, "auc": report.auc}),
    );
    Ok(())
}

fn single_column(title: &str, rows: &[(String, f64)]) -> String {
    let mut s = format!("| Rank | {title} (with Score) |\n|---|---|\n");
    for (i, (name, v)) in rows.iter().enumerate() {
        s.push_str(&format!("| {} | {name} ({}) |\n", i + 1, explain::format_score(*v)));
    }
    s
}

fn cmd_explain(cfg: &PipelineConfig, input: &ModelInput) -> Result<()> {
    let opts = &cfg.explain;
    let loaded = load_model_input(cfg, input)?;
    let which = if loaded.split.is_some() { Subset::Test } else { Subset::All };
    let mut targets = subset(&loaded.graphs, &loaded.split, which)?;
    let n_regions = targets[0].n_nodes();
    if opts.top_k == 0 || opts.top_k > n_regions {
        return Err(Error::Config(format!("top-k must lie in 1..={n_regions}, got {}", opts.top_k)));
    }
    let dir = stage_dir(cfg, "explain")?;
    let mut shap_rank = None;
    if opts.method != Method::Attention {
        let background = match loaded.split {
            Some(_) => subset(&loaded.graphs, &loaded.split, Subset::Train)?,
            None => loaded.graphs.iter().collect(),
        };
        if opts.max_subjects > 0 {
            targets.truncate(opts.max_subjects);
        }
        let shap_opts = ShapOptions { n_samples: opts.shap_samples, seed: cfg.seed, level: opts.shap_level };
        let mut reports = Vec::with_capacity(targets.len());
        for g in &targets {
            let r = explain::subject_shap(&loaded.model, g, &background, &shap_opts)?;
            log_event("shap", json!({"subject": r.subject, "prediction": r.prediction, "base_value": r.base_value}));
            reports.push(r);
        }
        let ranking = explain::cohort_shap_ranking(&reports, &targets[0].region_names)?;
        explain::write_region_csv(&dir.join("shap.csv"), &ranking)?;
        write_json(&dir.join("shap_subjects.json"), &reports)?;
        shap_rank = Some(ranking);
    }
    let mut attention = None;
    if opts.method != Method::Shap {
        let graphs: Vec<BrainGraph> = subset(&loaded.graphs, &loaded.split, which)?.into_iter().cloned().collect();
        let imp = explain::attention_importance(&loaded.model, &graphs)?;
        let rows: Vec<(String, f64)> = imp.iter().map(|r| (r.region.clone(), r.score)).collect();
        explain::write_region_csv(&dir.join("attention.csv"), &rows)?;
        let mut layers = String::from("region");
        for l in 0..loaded.model.arch.n_blocks {
            layers.push_str(&format!(",layer_{l}"));
        }
        layers.push('\n');
        for r in &imp {
            layers.push_str(&r.region);
            for v in &r.per_layer {
                layers.push_str(&format!(",{v}"));
            }
            layers.push('\n');
        }
        write_text(&dir.join("attention_layers.csv"), &layers)?;
        attention = Some(imp);
    }
    let k = opts.top_k;
    let md = match (&shap_rank, &attention) {
        (Some(s), Some(a)) => {
            let t = explain::export_rankings(s, a, k)?;
            log_event("explained", json!({"top_k": k, "overlap": t.overlap}));
            t.to_markdown()
        }
        (Some(s), None) => single_column("Shapley", &s[..k]),
        (None, Some(a)) => {
            let rows: Vec<(String, f64)> = a[..k].iter().map(|r| (r.region.clone(), r.score)).collect();
            single_column("Attention", &rows)
        }
        (None, None) => unreachable!("at least one method runs"),
    };
    write_text(&dir.join("rankings.md"), &md)
}

fn grad_check() -> Result<verify::GradientReport> {
    let g = verify::gradient_suite()?;
    for e in g.primitives.iter().chain(&g.models) {
        println!("grad-check {:<24} max relative error {:.3e}", e.name, e.max_error);
    }
    println!(
        "gradient-check max error: primitives {:.3e}, models {:.3e}",
        g.max_primitive_error, g.max_model_error
    );
    Ok(g)
}

fn cmd_verify(cfg: &PipelineConfig) -> Result<()> {
    let g = grad_check()?;
    let s = verify::shap_oracle_suite()?;
    for c in &s.cases {
        println!("shap-oracle {:<24} max abs error {:.3e}", c.name, c.max_error);
    }
    println!("SHAP-oracle max error: {:.3e}, efficiency gap {:.3e}", s.max_error, s.max_efficiency_gap);
    let dir = stage_dir(cfg, "verify")?;
    write_json(&dir.join("report.json"), &json!({"gradients": g, "shap": s}))?;
    if !g.passed() {
        return Err(Error::Verification(format!(
            "gradient check exceeded tolerance: primitives {:.3e}, models {:.3e}",
            g.max_primitive_error, g.max_model_error
        )));
    }
    if !s.passed() {
        return Err(Error::Verification(format!(
            "SHAP oracle exceeded tolerance: {:.3e}, efficiency gap {:.3e}",
            s.max_error, s.max_efficiency_gap
        )));
    }
    println!("verify: all checks passed");
    Ok(())
}

fn sub_matches(m: &ArgMatches) -> &ArgMatches {
    m.subcommand().map(|(_, s)| s).unwrap_or(m)
}

fn resolve_config(cli: &Cli, top: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let sub = sub_matches(top);
    let either = |id: &str| explicit(top, id) || explicit(sub, id);
    if either("out") || cli.config.is_none() {
        cfg.out_dir = cli.out.clone();
    }
    if either("seed") {
        cfg.seed = cli.seed;
    }
    match &cli.command {
        Some(Command::Synth(a)) => {
            overlay! { sub,
                "subjects" => cfg.synth.subjects_per_class, a.subjects;
                "regions" => cfg.synth.regions, a.regions;
                "timepoints" => cfg.synth.timepoints, a.timepoints;
                "block" => cfg.synth.planted_block, a.block.clone();
                "coupling" => cfg.synth.coupling, a.coupling;
                "noise" => cfg.synth.noise, a.noise;
                "data_dir" => cfg.data_dir, a.data_dir.clone();
            }
        }
        Some(Command::BuildGraphs(a)) => {
            overlay! { sub,
                "threshold" => cfg.connectome.threshold, a.threshold;
                "features" => cfg.connectome.feature_mode, a.features;
                "data_dir" => cfg.data_dir, a.data_dir.clone();
            }
        }
        Some(Command::Train(a)) => apply_hyper(sub, &a.hyper, &mut cfg.train),
        Some(Command::Replicate(a)) => {
            apply_hyper(sub, &a.hyper, &mut cfg.train);
            overlay! { sub,
                "runs" => cfg.runs, a.runs;
                "jobs" => cfg.jobs, a.jobs;
            }
        }
        Some(Command::Sweep(a)) => {
            apply_hyper(sub, &a.hyper, &mut cfg.train);
            overlay! { sub, "jobs" => cfg.jobs, a.jobs; }
        }
        Some(Command::Explain(a)) => {
            overlay! { sub,
                "method" => cfg.explain.method, a.method;
                "top_k" => cfg.explain.top_k, a.top_k;
                "shap_samples" => cfg.explain.shap_samples, a.shap_samples;
                "shap_level" => cfg.explain.shap_level, a.shap_level;
                "max_subjects" => cfg.explain.max_subjects, a.max_subjects;
            }
        }
        _ => {}
    }
    cfg.train.seed = cfg.seed;
    cfg.train.validate()?;
    if !(0.0..=1.0).contains(&cfg.connectome.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", cfg.connectome.threshold)));
    }
    if cfg.runs == 0 || cfg.jobs == 0 {
        return Err(Error::Config("runs and jobs must be positive".into()));
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> Result<()> {
    if cli.grad_check {
        let g = grad_check()?;
        if !g.passed() {
            return Err(Error::Verification("gradient check exceeded tolerance".into()));
        }
    }
    match &cli.command {
        None if cli.grad_check => Ok(()),
        None => Err(Error::Config("no command given; see --help".into())),
        Some(Command::Synth(_)) => cmd_synth(cfg),
        Some(Command::BuildGraphs(a)) => cmd_build_graphs(cfg, a.manifest.clone()),
        Some(Command::Train(a)) => cmd_train(cfg, &a.hyper.graphs),
        Some(Command::Replicate(a)) => cmd_replicate(cfg, &a.hyper.graphs, a.save_checkpoints),
        Some(Command::Sweep(a)) => cmd_sweep(cfg, &a.hyper.graphs, &a.grid),
        Some(Command::Evaluate(a)) => cmd_evaluate(cfg, &a.input, a.subset),
        Some(Command::Explain(a)) => cmd_explain(cfg, &a.input),
        Some(Command::Verify) => cmd_verify(cfg),
    }
}

fn parse<I, T>(args: I) -> std::result::Result<(Cli, ArgMatches), clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, matches))
}

/// Run the CLI on `args` (program name first) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (cli, matches) = match parse(args) {
        Ok(p) => p,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report_error(&Error::Config(first.to_string()));
        }
    };
    let outcome = resolve_config(&cli, &matches).and_then(|cfg| dispatch(&cli, &cfg));
    match outcome {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    let code = e.exit_code();
    log_event("error", json!({"kind": e.kind(), "message": e.to_string(), "exit_code": code}));
    code
}
