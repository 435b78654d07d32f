//! Splitting, optimisation, replicate runs and hyperparameter sweeps.

mod adam;
mod split;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::eval::{self, Aggregate, MetricsReport};
use crate::ingest::Label;
use crate::nn::{self, ArchConfig, Classifier, GraphBatch, Mode, ModelKind};
use crate::seeds;

pub use adam::Adam;
pub use split::{allocate, stratified_split, SplitAssignment, DEFAULT_RATIOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub n_blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fc_hidden: usize,
    pub dropout_first: f64,
    pub dropout: f64,
    pub split_ratios: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::new(ModelKind::Gat, 1);
        Self {
            model: ModelKind::Gat,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 150,
            patience: 30,
            seed: 0,
            n_blocks: arch.n_blocks,
            heads: arch.heads,
            head_dim: arch.head_dim,
            fc_hidden: arch.fc_hidden,
            dropout_first: arch.dropout_first,
            dropout: arch.dropout,
            split_ratios: DEFAULT_RATIOS,
        }
    }
}

impl TrainConfig {
    /// Same depth and head count with narrow heads and a small FC layer,
    /// sized for single-core desk runs.
    pub fn compact() -> Self {
        Self { head_dim: 8, fc_hidden: 32, ..Self::default() }
    }

    pub fn arch(&self, input_dim: usize) -> ArchConfig {
        ArchConfig {
            n_blocks: self.n_blocks,
            heads: self.heads,
            head_dim: self.head_dim,
            fc_hidden: self.fc_hidden,
            dropout_first: self.dropout_first,
            dropout: self.dropout,
            ..ArchConfig::new(self.model, input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        self.arch(1).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// 0 when the initial weights were never beaten.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub test: MetricsReport,
    pub split: SplitAssignment,
}

pub struct TrainedRun {
    pub result: RunResult,
    /// Best-validation model.
    pub model: Classifier,
}

pub fn subjects_of(graphs: &[BrainGraph]) -> Vec<(String, Label)> {
    graphs.iter().map(|g| (g.id.clone(), g.label)).collect()
}

fn select<'a>(by_id: &HashMap<&str, &'a BrainGraph>, ids: &[String]) -> Result<Vec<&'a BrainGraph>> {
    ids.iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::Data(format!("split references unknown subject {id}"))))
        .collect()
}

/// Mean NLL and accuracy of `model` on `batch` in eval mode.
pub fn evaluate_loss(model: &Classifier, batch: &GraphBatch) -> Result<(f64, f64)> {
    let pred = model.predict(batch)?;
    let loss = nn::nll_value(&pred.log_probs, &batch.labels);
    let correct = pred.predicted().iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    Ok((loss, correct as f64 / batch.labels.len() as f64))
}

/// Cut a shuffled index list into batches; a trailing singleton joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Train on the split's training part, select by minimum validation loss,
/// and report test metrics of the selected weights.
pub fn train_model(
    graphs: &[BrainGraph],
    split: &SplitAssignment,
    cfg: &TrainConfig,
    on_epoch: &(dyn Fn(&EpochRecord) + Sync),
) -> Result<TrainedRun> {
    cfg.validate()?;
    let by_id: HashMap<&str, &BrainGraph> = graphs.iter().map(|g| (g.id.as_str(), g)).collect();
    let train = select(&by_id, &split.train)?;
    let val = GraphBatch::new(&select(&by_id, &split.validation)?)?;
    let test = GraphBatch::new(&select(&by_id, &split.test)?)?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let input_dim = train[0].feature_dim();
    let mut model = Classifier::new(cfg.arch(input_dim), &mut seeds::stream(cfg.seed, seeds::INIT))?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = seeds::stream(cfg.seed, seeds::SHUFFLE);
    let mut dropout_rng = seeds::stream(cfg.seed, seeds::DROPOUT);

    let (init_loss, init_acc) = evaluate_loss(&model, &val)?;
    let mut best = (model.clone(), 0usize, init_loss, init_acc);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in batches(&order, cfg.batch_size) {
            let members: Vec<&BrainGraph> = chunk.iter().map(|&i| train[i]).collect();
            let batch = GraphBatch::new(&members)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let out = model.forward(&mut tape, &bound, &batch, Mode::Train, &mut dropout_rng, false)?;
            let loss = nn::nll(&mut tape, out.log_probs, &batch.labels)?;
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<_> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
            opt.step(&mut model.params_mut(), &grads)?;
            model.commit_batch_stats(&out.batch_stats);
            loss_sum += value * chunk.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate_loss(&model, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_loss, val_accuracy };
        on_epoch(&record);
        history.push(record);
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss, val_accuracy);
        } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let (model, best_epoch, best_val_loss, best_val_accuracy) = best;
    let metrics = eval::evaluate_prediction(&model.predict(&test)?, &test.labels)?;
    Ok(TrainedRun {
        result: RunResult {
            seed: cfg.seed,
            history,
            best_epoch,
            best_val_loss,
            best_val_accuracy,
            test: metrics,
            split: split.clone(),
        },
        model,
    })
}

/// Split with the config's seed, then train.
pub fn train_once(graphs: &[BrainGraph], cfg: &TrainConfig, on_epoch: &(dyn Fn(&EpochRecord) + Sync)) -> Result<TrainedRun> {
    let split = stratified_split(&subjects_of(graphs), cfg.split_ratios, cfg.seed)?;
    train_model(graphs, &split, cfg, on_epoch)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub base_seed: u64,
    pub runs: Vec<RunResult>,
    pub aggregate: Aggregate,
}

/// Run `k` uses seed `base + k` for its split, initialisation, dropout and batch order.
pub fn run_replicates(
    graphs: &[BrainGraph],
    cfg: &TrainConfig,
    n_runs: usize,
    jobs: usize,
    on_epoch: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<(ReplicateReport, Vec<Classifier>)> {
    if n_runs == 0 {
        return Err(Error::Config("need at least one run".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<TrainedRun> = pool(jobs)?.install(|| {
        (0..n_runs)
            .into_par_iter()
            .map(|k| {
                let run_cfg = TrainConfig { seed: seeds::replicate_seed(cfg.seed, k), ..cfg.clone() };
                train_once(graphs, &run_cfg, &|r| on_epoch(k, r))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (runs, models): (Vec<RunResult>, Vec<Classifier>) = outcomes.into_iter().map(|o| (o.result, o.model)).unzip();
    let aggregate = eval::aggregate_runs(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?;
    Ok((ReplicateReport { base_seed: cfg.seed, runs, aggregate }, models))
}

/// Values to try per hyperparameter; absent keys keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rate: Option<Vec<f64>>,
    pub batch_size: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub n_blocks: Option<Vec<usize>>,
    pub head_dim: Option<Vec<usize>>,
    pub fc_hidden: Option<Vec<usize>>,
    pub dropout: Option<Vec<f64>>,
}

impl SweepGrid {
    /// Cartesian product over the listed values, in key order.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        let mut points = vec![base.clone()];
        fn expand<T: Clone>(points: Vec<TrainConfig>, values: &Option<Vec<T>>, set: fn(&mut TrainConfig, T)) -> Result<Vec<TrainConfig>> {
            match values {
                None => Ok(points),
                Some(v) if v.is_empty() => Err(Error::Config("sweep grid has an empty value list".into())),
                Some(v) => Ok(points
                    .iter()
                    .flat_map(|p| {
                        v.iter().map(move |x| {
                            let mut q = p.clone();
                            set(&mut q, x.clone());
                            q
                        })
                    })
                    .collect()),
            }
        }
        points = expand(points, &self.learning_rate, |c, v| c.learning_rate = v)?;
        points = expand(points, &self.batch_size, |c, v| c.batch_size = v)?;
        points = expand(points, &self.heads, |c, v| c.heads = v)?;
        points = expand(points, &self.n_blocks, |c, v| c.n_blocks = v)?;
        points = expand(points, &self.head_dim, |c, v| c.head_dim = v)?;
        points = expand(points, &self.fc_hidden, |c, v| c.fc_hidden = v)?;
        points = expand(points, &self.dropout, |c, v| {
            c.dropout = v;
            c.dropout_first = v;
        })?;
        for p in &points {
            p.validate()?;
        }
        Ok(points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub rank: usize,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Every grid point on one fixed split; ranked by validation accuracy, then loss.
pub fn sweep(graphs: &[BrainGraph], base: &TrainConfig, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepEntry>> {
    let points = grid.points(base)?;
    let split = stratified_split(&subjects_of(graphs), base.split_ratios, base.seed)?;
    let mut entries: Vec<SweepEntry> = pool(jobs)?.install(|| {
        points
            .into_par_iter()
            .map(|cfg| {
                let run = train_model(graphs, &split, &cfg, &|_| {})?.result;
                Ok(SweepEntry {
                    rank: 0,
                    config: cfg,
                    best_epoch: run.best_epoch,
                    val_loss: run.best_val_loss,
                    val_accuracy: run.best_val_accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    entries.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy).then(a.val_loss.total_cmp(&b.val_loss)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(entries)
}
