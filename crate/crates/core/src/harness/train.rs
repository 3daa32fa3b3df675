//! Training runs and seed-replicated sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{ExperimentConfig, ModelKind};
use super::data::{default_sizes, gen_dataset_sized, sub_seed, Dataset};
use super::model::{Forward, Model};
use super::optim::{clip_global_norm, Optimizer};
use crate::autodiff::Graph;
use crate::entangle::EntanglementSpec;
use crate::error::{Error, Result};
use crate::refine::{trace_csv, trace_refinement};
use crate::rng::SeededRng;

const EVAL_BATCH: usize = 250;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc";
pub const SUMMARY_HEADER: &str = "spec,mean_acc,std_acc,n_seeds,failures";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Loss or parameters went non-finite during this epoch.
    Diverged { epoch: usize },
    /// The run could not be set up or raised an error.
    Failed { reason: String },
}

/// Epoch 0 is the evaluation at initialization; `train_loss` and `train_acc`
/// of later epochs are running means over that epoch's minibatches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub config_hash: String,
    pub entanglement: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_test_acc: f64,
    pub wall_time_secs: f64,
    pub status: RunStatus,
    /// Whether every block's skip operator fingerprint matched before and
    /// after training.
    pub entanglement_unchanged: bool,
}

impl RunMetrics {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.train_acc, e.test_acc);
        }
        s
    }
}

struct Evaluation {
    loss: f64,
    correct: usize,
    counted: usize,
}

impl Evaluation {
    fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

/// Cross-entropy and accuracy of one forward pass. Returns the loss node
/// plus `(correct, counted)` over scored labels.
fn score(
    g: &mut Graph,
    fwd: &Forward,
    labels: &[usize],
    ds: &Dataset,
) -> Result<(crate::autodiff::NodeId, usize, usize)> {
    let rows = labels.len();
    let ordered: Vec<usize> = (0..rows).map(|r| labels[fwd.row_target(r)]).collect();
    let loss = g.cross_entropy(fwd.logits, &ordered)?;
    let logits = g.value(fwd.logits);
    let k = logits.last_dim();
    let (mut correct, mut counted) = (0, 0);
    for (r, row) in logits.data().chunks(k).enumerate() {
        let step = fwd.row_target(r) % ds.steps;
        if let Some(range) = &ds.scored_steps {
            if !range.contains(&step) {
                continue;
            }
        }
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        counted += 1;
        correct += usize::from(pred == ordered[r]);
    }
    Ok((loss, correct, counted))
}

fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    let mut ev = Evaluation {
        loss: 0.0,
        correct: 0,
        counted: 0,
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &x, false)?;
        let (loss, c, n) = score(&mut g, &fwd, &y, ds)?;
        ev.loss += g.value(loss).data()[0] * chunk.len() as f64;
        ev.correct += c;
        ev.counted += n;
    }
    ev.loss /= ds.len() as f64;
    Ok(ev)
}

/// A finished run together with the trained model.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub metrics: RunMetrics,
    pub model: Model,
    pub test: Dataset,
}

/// Trains the configured model for one seed. Data, initialization and batch
/// order all derive from `seed`; divergence ends the run with a recorded
/// status rather than an error.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    train_full(cfg, seed).map(|r| r.metrics)
}

pub fn train_full(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let (dtrain, dtest) = default_sizes(cfg.task);
    let (train_set, test_set) = gen_dataset_sized(
        cfg.task,
        seed,
        cfg.train_size.unwrap_or(dtrain),
        cfg.test_size.unwrap_or(dtest),
    )?;
    let mut init_rng = SeededRng::new(sub_seed(seed, 10));
    let mut order_rng = SeededRng::new(sub_seed(seed, 11));
    let mut model = Model::build(
        cfg,
        &cfg.entanglement,
        train_set.sample_shape(),
        train_set.classes,
        &mut init_rng,
    )?;
    let fingerprints = model.entangler_fingerprints();
    let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &sizes);

    let init_train = evaluate(&model, &train_set)?;
    let init_test = evaluate(&model, &test_set)?;
    let mut epochs = vec![EpochMetrics {
        epoch: 0,
        train_loss: init_train.loss,
        train_acc: init_train.accuracy(),
        test_acc: init_test.accuracy(),
    }];
    let mut status = if init_train.loss.is_finite() {
        RunStatus::Completed
    } else {
        RunStatus::Diverged { epoch: 0 }
    };

    'epochs: for epoch in 1..=cfg.epochs {
        if status != RunStatus::Completed {
            break;
        }
        let order = order_rng.permutation(train_set.len());
        let mut loss_sum = 0.0;
        let (mut correct, mut counted) = (0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &x, true)?;
            let (loss, c, n) = score(&mut g, &fwd, &y, &train_set)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                status = RunStatus::Diverged { epoch };
                break 'epochs;
            }
            let grads = g.backward(loss)?;
            let mut flat: Vec<Vec<f64>> = fwd
                .params
                .iter()
                .zip(&sizes)
                .map(|(id, &n)| grads.get(*id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]))
                .collect();
            clip_global_norm(&mut flat, cfg.clip_norm);
            opt.step(&mut model.param_slices_mut(), &flat);
            if model.param_tensors().iter().any(|t| !t.is_finite()) {
                status = RunStatus::Diverged { epoch };
                break 'epochs;
            }
            loss_sum += lv * chunk.len() as f64;
            correct += c;
            counted += n;
        }
        let test = evaluate(&model, &test_set)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: if counted == 0 { 0.0 } else { correct as f64 / counted as f64 },
            test_acc: test.accuracy(),
        });
    }

    let best_test_acc = epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max);
    let metrics = RunMetrics {
        seed,
        config_hash: cfg.hash(),
        entanglement: cfg.entanglement.sized(cfg.width).to_string(),
        epochs,
        best_test_acc,
        wall_time_secs: start.elapsed().as_secs_f64(),
        status,
        entanglement_unchanged: model.entangler_fingerprints() == fingerprints,
    };
    Ok(TrainedRun {
        metrics,
        model,
        test: test_set,
    })
}

/// Samples used for the refinement trace written next to a run.
pub const TRACE_SAMPLES: usize = 64;

/// Refinement CSV over the first test samples, for residual models.
pub fn refinement_csv(model: &Model, test: &Dataset) -> Result<Option<String>> {
    if !matches!(model.kind, ModelKind::ResMlp | ModelKind::ResCnn) {
        return Ok(None);
    }
    let n = test.len().min(TRACE_SAMPLES);
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = test.batch(&idx);
    let features = model.block_input(&x)?;
    Ok(Some(trace_csv(&trace_refinement(&model.blocks, &features)?)))
}

/// Writes `metrics.csv`, `model.ckpt`, `config.txt` and (for residual models)
/// `refinement.csv` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, run: &TrainedRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), run.metrics.to_csv())?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut ckpt = run.model.to_checkpoint();
    ckpt.set_meta("task", cfg.task.as_str());
    ckpt.set_meta("seed", run.metrics.seed.to_string());
    ckpt.set_meta("config_hash", run.metrics.config_hash.clone());
    ckpt.set_meta("test_size", run.test.len().to_string());
    ckpt.save(&dir.join("model.ckpt"))?;
    // a diverged model has nothing meaningful to trace
    if run.metrics.succeeded() {
        if let Some(csv) = refinement_csv(&run.model, &run.test)? {
            fs::write(dir.join("refinement.csv"), csv)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub index: usize,
    pub spec: String,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub spec: String,
    /// Mean and sample standard deviation of the best test accuracy over
    /// successful seeds; NaN when none succeeded.
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SummaryRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn failed_run(cfg: &ExperimentConfig, spec: &EntanglementSpec, seed: u64, err: &Error) -> RunMetrics {
    RunMetrics {
        seed,
        config_hash: cfg.hash(),
        entanglement: spec.to_string(),
        epochs: Vec::new(),
        best_test_acc: 0.0,
        wall_time_secs: 0.0,
        status: RunStatus::Failed { reason: err.to_string() },
        entanglement_unchanged: true,
    }
}

/// Every sweep spec crossed with every seed, in that order. Duplicate specs
/// give duplicate rows. `on_cell` sees each finished cell.
pub fn sweep_with(cfg: &ExperimentConfig, mut on_cell: impl FnMut(&SweepCell)) -> Result<SweepResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut summary = Vec::new();
    for (index, spec) in cfg.sweep_specs().into_iter().enumerate() {
        let spec = spec.sized(cfg.width);
        let cell_cfg = cfg.with_entanglement(spec.clone());
        let mut accs = Vec::new();
        let mut failures = 0;
        for &seed in &cfg.seeds {
            let metrics = match train(&cell_cfg, seed) {
                Ok(m) => m,
                Err(e) => failed_run(&cell_cfg, &spec, seed, &e),
            };
            if metrics.succeeded() {
                accs.push(metrics.best_test_acc);
            } else {
                failures += 1;
            }
            let cell = SweepCell {
                index,
                spec: spec.to_string(),
                seed,
                metrics,
            };
            on_cell(&cell);
            cells.push(cell);
        }
        let (mean_acc, std_acc) = mean_std(&accs);
        summary.push(SummaryRow {
            spec: spec.to_string(),
            mean_acc,
            std_acc,
            n_seeds: cfg.seeds.len(),
            failures,
        });
    }
    Ok(SweepResult { cells, summary })
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    sweep_with(cfg, |_| {})
}

fn num_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        v.to_string()
    }
}

impl SweepResult {
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.spec,
                num_cell(r.mean_acc),
                num_cell(r.std_acc),
                r.n_seeds,
                r.failures
            );
        }
        s
    }

    /// `run_<cell>_seed<seed>.csv` per run plus `summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for c in &self.cells {
            fs::write(dir.join(run_file_name(c.index, c.seed)), c.metrics.to_csv())?;
        }
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

pub fn run_file_name(cell: usize, seed: u64) -> String {
    format!("run_{cell:02}_seed{seed}.csv")
}
