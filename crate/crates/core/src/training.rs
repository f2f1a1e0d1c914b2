//! Minibatch training with Adam, exponential learning-rate decay, early
//! stopping, resumable state and grid search.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Dtype};
use crate::ehr::{Label, Task, TaskSample};
use crate::kg::MedicalKG;
use crate::metrics::{task_metric, Metric, MetricError};
use crate::model::{ModelConfig, ModelError, ParamMap, ProtoEhr};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {report}")]
    NonFinite { epoch: usize, batch: usize, report: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training state: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Evaluation batch size; 0 evaluates a fold as one batch.
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Positive-class weight of the binary loss; 1 is plain BCE.
    pub pos_weight: f64,
    /// Overrides the task's default early-stopping metric.
    pub early_stop_metric: Option<Metric>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay_gamma: 0.98,
            max_epochs: 200,
            patience: 20,
            batch_size: 64,
            eval_batch_size: 0,
            seed: 0,
            pos_weight: 1.0,
            early_stop_metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be finite and nonnegative");
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return err("lr_decay_gamma must lie in (0, 1]");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return err("max_epochs, patience and batch_size must be positive");
        }
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return err("pos_weight must be positive");
        }
        Ok(())
    }

    pub fn metric(&self, task: Task) -> Metric {
        self.early_stop_metric.unwrap_or_else(|| Metric::early_stop(task))
    }
}

/// Learning rate for a 0-based epoch.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based epoch of the best metric.
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records one epoch's metric and reports whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = metric.is_finite() && self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ParamMap,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
}

/// Early-stopping metric of `model` on `samples`.
pub fn evaluate_metric(model: &ProtoEhr, samples: &[TaskSample], metric: Metric, eval_batch_size: usize) -> Result<f64> {
    let (probs, _) = model.predict(samples, eval_batch_size)?;
    let p: Vec<&Vec<f64>> = probs.iter().collect();
    let l: Vec<&Label> = samples.iter().map(|s| &s.label).collect();
    Ok(task_metric(model.task, metric, &p, &l)?)
}

fn norm_report(params: &ParamMap) -> String {
    let mut norms: Vec<(&String, f64)> = params.iter().map(|(k, t)| (k, t.norm())).collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    norms
        .iter()
        .filter(|(_, n)| !n.is_finite())
        .chain(norms.iter().filter(|(_, n)| n.is_finite()).take(5))
        .map(|(k, n)| format!("{k}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x100_0003)
        .wrapping_add((epoch as u64) << 24)
        .wrapping_add(batch as u64)
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    format_version: u32,
    task: Task,
    model: ModelConfig,
    cfg: TrainConfig,
    epochs_done: usize,
    adam_t: u64,
    stopper: EarlyStopper,
    history: Vec<EpochRecord>,
}

const STATE_META: &str = "train_state.json";
const STATE_TENSORS: &str = "train_tensors.json";

/// Epoch-by-epoch training driver whose full state can be saved and
/// resumed.
pub struct Trainer<'a> {
    pub model: ProtoEhr,
    cfg: TrainConfig,
    metric: Metric,
    train: &'a [TaskSample],
    val: &'a [TaskSample],
    adam: Adam,
    stopper: EarlyStopper,
    best: ParamMap,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ProtoEhr, cfg: TrainConfig, train: &'a [TaskSample], val: &'a [TaskSample]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::Config("training and validation folds must be nonempty".into()));
        }
        if let Some(s) = train.iter().chain(val).find(|s| s.task != model.task) {
            return Err(TrainError::Config(format!("sample for task {} given to a {} model", s.task, model.task)));
        }
        Ok(Self {
            metric: cfg.metric(model.task),
            adam: Adam::new(cfg.lr),
            stopper: EarlyStopper::new(cfg.patience),
            best: model.params.clone(),
            history: Vec::new(),
            model,
            cfg,
            train,
            val,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.stopper.should_stop() || self.epochs_done() >= self.cfg.max_epochs
    }

    /// Runs one epoch: shuffled minibatches, Adam updates, validation.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epochs_done();
        let lr = lr_schedule(epoch, self.cfg.lr, self.cfg.lr_decay_gamma);
        self.adam.lr = lr;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&TaskSample> = chunk.iter().map(|i| &self.train[*i]).collect();
            let (loss, grads) = self
                .model
                .loss_and_grads(&batch, dropout_seed(self.cfg.seed, epoch, b), self.cfg.pos_weight)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    report: norm_report(&self.model.params),
                });
            }
            total += loss * batch.len() as f64;
            self.adam.begin_step();
            for (name, g) in &grads {
                let p = self.model.params.get_mut(name).expect("gradient for a bound parameter");
                self.adam.update(name, p, g);
            }
        }
        let val_metric = evaluate_metric(&self.model, self.val, self.metric, self.cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / self.train.len() as f64,
            val_metric,
            lr,
        };
        if self.stopper.observe(epoch + 1, val_metric) {
            self.best = self.model.params.clone();
        }
        log::info!(
            "epoch {} loss {:.5} val {} {:.4} lr {:.3e}",
            record.epoch,
            record.train_loss,
            self.metric,
            val_metric,
            lr
        );
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until early stopping or the epoch budget.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            best_params: self.best,
            best_epoch: self.stopper.best_epoch,
            best_metric: self.stopper.best.unwrap_or(f64::NAN),
            history: self.history,
        }
    }

    /// Saves parameters, best parameters, optimizer moments and counters
    /// in full precision under `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = ParamMap::new();
        for (k, t) in &self.model.params {
            tensors.insert(format!("param/{k}"), t.clone());
        }
        for (k, t) in &self.best {
            tensors.insert(format!("best/{k}"), t.clone());
        }
        for (k, m, v) in self.adam.moments() {
            tensors.insert(format!("adam_m/{k}"), Tensor::vector(m.to_vec()));
            tensors.insert(format!("adam_v/{k}"), Tensor::vector(v.to_vec()));
        }
        checkpoint::save(&dir.join(STATE_TENSORS), &tensors, Dtype::F64, None, None)?;
        let meta = StateMeta {
            format_version: checkpoint::FORMAT_VERSION,
            task: self.model.task,
            model: self.model.cfg.clone(),
            cfg: self.cfg.clone(),
            epochs_done: self.epochs_done(),
            adam_t: self.adam.t,
            stopper: self.stopper.clone(),
            history: self.history.clone(),
        };
        fs::write(dir.join(STATE_META), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_state`]. The knowledge
    /// graph and folds must be the ones the state was trained on.
    pub fn resume(dir: &Path, kg: &MedicalKG, train: &'a [TaskSample], val: &'a [TaskSample]) -> Result<Self> {
        let meta: StateMeta = serde_json::from_str(&fs::read_to_string(dir.join(STATE_META))?)?;
        let (_, tensors) = checkpoint::load(&dir.join(STATE_TENSORS))?;
        let mut params = ParamMap::new();
        let mut best = ParamMap::new();
        let mut moments: std::collections::BTreeMap<String, [Vec<f64>; 2]> = Default::default();
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("param/") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("best/") {
                best.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("adam_m/") {
                moments.entry(n.to_string()).or_default()[0] = t.into_data();
            } else if let Some(n) = k.strip_prefix("adam_v/") {
                moments.entry(n.to_string()).or_default()[1] = t.into_data();
            } else {
                return Err(TrainError::Config(format!("unexpected tensor {k} in training state")));
            }
        }
        let model = ProtoEhr::from_params(meta.model, meta.task, kg, params)?;
        let mut t = Trainer::new(model, meta.cfg, train, val)?;
        for (k, [m, v]) in moments {
            t.adam.set_moments(&k, m, v);
        }
        t.adam.t = meta.adam_t;
        t.stopper = meta.stopper;
        t.best = best;
        t.history = meta.history;
        if t.epochs_done() != meta.epochs_done {
            return Err(TrainError::Config("training state history does not match its epoch count".into()));
        }
        Ok(t)
    }
}

/// Trains `model` to completion and returns the best-epoch parameters.
pub fn train(model: ProtoEhr, cfg: &TrainConfig, train: &[TaskSample], val: &[TaskSample]) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone(), train, val)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub compgcn_layers: Vec<usize>,
    pub transformer_depth: Vec<usize>,
    pub code_protos: Vec<usize>,
    pub visit_protos: Vec<usize>,
    pub patient_protos: Vec<usize>,
    pub dropout: Vec<f64>,
    pub lr: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            compgcn_layers: vec![1, 2, 3, 4],
            transformer_depth: vec![1, 2, 4],
            code_protos: vec![32, 64],
            visit_protos: vec![4, 8, 16, 32],
            patient_protos: vec![2, 4, 8, 16],
            dropout: vec![0.1, 0.3, 0.5],
            lr: vec![1e-4, 5e-4, 1e-3],
        }
    }
}

impl GridSpec {
    /// Grid with every axis pinned to the base configurations.
    pub fn single(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            compgcn_layers: vec![model.gcn_layers],
            transformer_depth: vec![model.transformer_layers],
            code_protos: vec![model.code_protos],
            visit_protos: vec![model.visit_protos],
            patient_protos: vec![model.patient_protos],
            dropout: vec![model.dropout],
            lr: vec![train.lr],
        }
    }

    pub fn len(&self) -> usize {
        self.compgcn_layers.len()
            * self.transformer_depth.len()
            * self.code_protos.len()
            * self.visit_protos.len()
            * self.patient_protos.len()
            * self.dropout.len()
            * self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product of the axes applied to the base configurations.
    pub fn points(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<(ModelConfig, TrainConfig)> {
        let mut out = Vec::with_capacity(self.len());
        for &g in &self.compgcn_layers {
            for &t in &self.transformer_depth {
                for &c in &self.code_protos {
                    for &v in &self.visit_protos {
                        for &p in &self.patient_protos {
                            for &d in &self.dropout {
                                for &lr in &self.lr {
                                    let m = ModelConfig {
                                        gcn_layers: g,
                                        transformer_layers: t,
                                        code_protos: c,
                                        visit_protos: v,
                                        patient_protos: p,
                                        dropout: d,
                                        ..model.clone()
                                    };
                                    out.push((m, TrainConfig { lr, ..train.clone() }));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub rank: usize,
    pub trial: usize,
    pub compgcn_layers: usize,
    pub transformer_depth: usize,
    pub code_protos: usize,
    pub visit_protos: usize,
    pub patient_protos: usize,
    pub dropout: f64,
    pub lr: f64,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
}

/// Trains every grid point on a pool of `parallel` workers and ranks the
/// trials by best validation metric. Trial `i` uses seed `base.seed + i`
/// and writes under `out/trial_{i}`; the ranked table goes to
/// `out/trials.csv`.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    grid: &GridSpec,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    task: Task,
    kg: &MedicalKG,
    train_set: &[TaskSample],
    val_set: &[TaskSample],
    parallel: usize,
    out: &Path,
) -> Result<Vec<TrialResult>> {
    if grid.is_empty() {
        return Err(TrainError::Config("every grid axis needs at least one value".into()));
    }
    fs::create_dir_all(out)?;
    let points = grid.points(base_model, base_train);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut trials: Vec<TrialResult> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, (m, t))| {
                let t = TrainConfig {
                    seed: t.seed.wrapping_add(i as u64),
                    ..t.clone()
                };
                let model = ProtoEhr::new(m.clone(), task, kg, t.seed)?;
                let outcome = train(model, &t, train_set, val_set)?;
                let dir = out.join(format!("trial_{i}"));
                fs::create_dir_all(&dir)?;
                let ckpt = dir.join("model.json");
                checkpoint::save(&ckpt, &outcome.best_params, Dtype::F32, Some(task), Some(m))?;
                write_history(&dir.join("history.csv"), &outcome.history)?;
                Ok(TrialResult {
                    rank: 0,
                    trial: i,
                    compgcn_layers: m.gcn_layers,
                    transformer_depth: m.transformer_layers,
                    code_protos: m.code_protos,
                    visit_protos: m.visit_protos,
                    patient_protos: m.patient_protos,
                    dropout: m.dropout,
                    lr: t.lr,
                    best_metric: outcome.best_metric,
                    best_epoch: outcome.best_epoch,
                    checkpoint: ckpt,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    trials.sort_by(|a, b| {
        let key = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
        key(b.best_metric).total_cmp(&key(a.best_metric)).then(a.trial.cmp(&b.trial))
    });
    for (r, t) in trials.iter_mut().enumerate() {
        t.rank = r + 1;
    }
    let mut w = csv::Writer::from_path(out.join("trials.csv"))?;
    for t in &trials {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{derive_task_samples, generate_synthetic_cohort, split, GeneratorConfig, SplitSpec};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 1e-3, 0.9), 1e-3);
        assert_eq!(lr_schedule(7, 1e-3, 1.0), 1e-3);
        assert!((lr_schedule(2, 1e-3, 0.9) - 8.1e-4).abs() < 1e-18);
    }

    #[test]
    fn stopper_counts_flat_epochs() {
        let mut s = EarlyStopper::new(20);
        let mut stopped = None;
        for epoch in 1..=200 {
            s.observe(epoch, (epoch.min(5)) as f64);
            if s.should_stop() {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(25));
        assert_eq!(s.best_epoch, 5);
        assert!(!s.observe(26, f64::NAN));
    }

    fn cohort(n: usize) -> (MedicalKG, Vec<TaskSample>, Vec<TaskSample>) {
        let gen = GeneratorConfig {
            n_patients: n,
            ..Default::default()
        };
        let (ds, truth) = generate_synthetic_cohort(&gen, 3).unwrap();
        let kg = MedicalKG::from_named(
            ds.codes.clone(),
            &truth.kg_facts.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())).collect::<Vec<_>>(),
        )
        .unwrap();
        let samples = derive_task_samples(&ds, Task::Mortality).samples;
        let s = split(&samples, &SplitSpec::with_seed(1)).unwrap();
        (kg, s.train, s.val)
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            dim: 8,
            code_protos: 4,
            visit_protos: 2,
            patient_protos: 2,
            ..Default::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            lr: 5e-3,
            max_epochs: 3,
            batch_size: 32,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (kg, tr, va) = cohort(150);
        let run = || {
            let m = ProtoEhr::new(tiny_model(), Task::Mortality, &kg, 2).unwrap();
            let mut t = Trainer::new(m, tiny_train(), &tr, &va).unwrap();
            for _ in 0..3 {
                t.step_epoch().unwrap();
            }
            (t.model.params.clone(), t.history().to_vec())
        };
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);

        let dir = tempfile::tempdir().unwrap();
        let m = ProtoEhr::new(tiny_model(), Task::Mortality, &kg, 2).unwrap();
        let mut t = Trainer::new(m, tiny_train(), &tr, &va).unwrap();
        t.step_epoch().unwrap();
        t.save_state(dir.path()).unwrap();
        drop(t);
        let mut r = Trainer::resume(dir.path(), &kg, &tr, &va).unwrap();
        r.step_epoch().unwrap();
        r.step_epoch().unwrap();
        assert_eq!(r.model.params, p1);
        for (a, b) in r.history().iter().zip(&h1) {
            assert!((a.train_loss - b.train_loss).abs() <= 1e-12);
            assert_eq!(a.val_metric, b.val_metric);
        }
    }

    #[test]
    fn best_checkpoint_is_never_beaten_later() {
        let (kg, tr, va) = cohort(150);
        let m = ProtoEhr::new(tiny_model(), Task::Mortality, &kg, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            ..tiny_train()
        };
        let out = train(m, &cfg, &tr, &va).unwrap();
        let max = out.history.iter().map(|r| r.val_metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_metric, max);
        assert_eq!(out.history[out.best_epoch - 1].val_metric, max);
        let best = ProtoEhr::from_params(tiny_model(), Task::Mortality, &kg, out.best_params).unwrap();
        assert_eq!(evaluate_metric(&best, &va, Metric::Auprc, 0).unwrap(), max);
    }

    #[test]
    fn rejects_bad_configs_and_empty_folds() {
        let (kg, tr, va) = cohort(60);
        let m = ProtoEhr::new(tiny_model(), Task::Mortality, &kg, 2).unwrap();
        assert!(Trainer::new(m.clone(), tiny_train(), &tr, &[]).is_err());
        let bad = TrainConfig {
            patience: 0,
            ..tiny_train()
        };
        assert!(Trainer::new(m, bad, &tr, &va).is_err());
    }

    #[test]
    fn non_finite_loss_reports_diagnostics() {
        let (kg, tr, va) = cohort(60);
        let mut m = ProtoEhr::new(tiny_model(), Task::Mortality, &kg, 2).unwrap();
        m.params.get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
        let err = Trainer::new(m, tiny_train(), &tr, &va).unwrap().step_epoch().unwrap_err();
        match err {
            TrainError::NonFinite { epoch, batch, report } => {
                assert_eq!((epoch, batch), (1, 0));
                assert!(report.starts_with("head.b=NaN"), "{report}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn grid_ranks_frozen_model_last() {
        let (kg, tr, va) = cohort(300);
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec {
            lr: vec![0.0, 1e-2],
            ..GridSpec::single(&tiny_model(), &tiny_train())
        };
        let cfg = TrainConfig {
            max_epochs: 6,
            ..tiny_train()
        };
        let trials = grid_search(&grid, &tiny_model(), &cfg, Task::Mortality, &kg, &tr, &va, 2, dir.path()).unwrap();
        assert_eq!(trials.len(), 2);
        assert_eq!(trials[0].lr, 1e-2, "{trials:?}");
        assert!(trials[0].best_metric > trials[1].best_metric);
        let mut ranks: Vec<usize> = trials.iter().map(|t| t.rank).collect();
        ranks.sort();
        assert_eq!(ranks, vec![1, 2]);
        let table = fs::read_to_string(dir.path().join("trials.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(trials.iter().all(|t| t.checkpoint.exists()));

        let one = grid_search(&GridSpec::single(&tiny_model(), &cfg), &tiny_model(), &cfg, Task::Mortality, &kg, &tr, &va, 1, &dir.path().join("one")).unwrap();
        assert_eq!(one.len(), 1);
    }
}
