use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::ProtocolConfig;
use super::state::{EpochRecord, LrChoice, LrChoiceSource, Position, RunState, RunStatus};
use super::TrainError;
use crate::data::{Batch, BatchOptions, Dataset, Split};
use crate::metrics::evaluate;
use crate::nn::{build_resnet, Model, ParamStore};
use crate::optim::{lr_range_test, Adam, AdamConfig, LrAssignment, LrCurve, OptimError, Optimizer, StepTarget};
use crate::rng::{derive_seed, stream};
use crate::tensor::Graph;

/// Receives run progress. Called on the training thread.
pub trait Observer: Send {
    fn on_state(&mut self, _state: &RunState) {}
    fn on_step_start(&mut self, _position: Position, _lrs: &LrAssignment) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model) {}
}

/// Mirrors every published state into a shared snapshot.
#[derive(Clone, Default)]
pub struct SharedState(pub Arc<Mutex<Option<RunState>>>);

impl Observer for SharedState {
    fn on_state(&mut self, state: &RunState) {
        *self.0.lock().expect("state lock") = Some(state.clone());
    }
}

/// Appends one JSON line per completed epoch.
pub struct EventLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let file = File::create(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
        Ok(Self { out: BufWriter::new(file), path: path.into() })
    }
}

impl Observer for EventLog {
    fn on_epoch(&mut self, record: &EpochRecord, _model: &Model) {
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            log::error!("{}: {e}", self.path.display());
        }
    }
}

pub enum LrMode {
    /// Use the range test's suggestion.
    Automatic,
    /// Wait for a rate on `choices`; fall back to the suggestion after
    /// `timeout`.
    Interactive { choices: Receiver<f64>, timeout: Duration },
}

/// The model plus a fixed list of training batches, cycled by iteration.
#[derive(Clone)]
pub struct ModelTarget {
    pub model: Model,
    pub batches: Vec<Batch>,
    pub seed: u64,
}

impl StepTarget for ModelTarget {
    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn n_groups(&self) -> usize {
        self.model.n_groups()
    }

    fn loss_and_grad(&mut self, iter: usize) -> Result<f64, OptimError> {
        let batch = &self.batches[iter % self.batches.len()];
        let mut g = Graph::with_seed(derive_seed(self.seed, &[stream::DROPOUT, iter as u64]));
        let x = g.leaf(batch.images.clone());
        let err = |e: String| OptimError::Target(e);
        let logits = self.model.forward(&mut g, x, true).map_err(|e| err(e.to_string()))?;
        let loss = g.cross_entropy(logits, &batch.labels).map_err(|e| err(e.to_string()))?;
        let value = g.value(loss).item() as f64;
        if value.is_finite() {
            g.backward(loss).map_err(|e| err(e.to_string()))?;
            let params = self.model.params_mut();
            params.zero_grads();
            params.absorb_grads(&g);
        }
        Ok(value)
    }
}

pub struct Trainer {
    config: ProtocolConfig,
    model: Model,
    data: Dataset,
    state: RunState,
    adam: Adam,
    observers: Vec<Box<dyn Observer>>,
    lr_mode: LrMode,
}

impl Trainer {
    /// Builds the configured network with a fresh head sized to the
    /// dataset's class table.
    pub fn new(config: ProtocolConfig, data: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        let model = build_resnet(config.model.clone())?;
        Self::with_model(config, model, data)
    }

    /// Starts from `model` (for example one carrying pretrained body
    /// weights); its head is replaced and its layers regrouped.
    pub fn with_model(config: ProtocolConfig, mut model: Model, data: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        model.replace_head(data.manifest().n_classes(), derive_seed(config.seed, &[stream::HEAD_INIT]))?;
        model.assign_layer_groups(config.n_groups)?;
        model.set_update_frozen_bn_stats(config.update_frozen_bn_stats);
        let state = RunState::new(config.total_epochs());
        Ok(Self { config, model, data, state, adam: Adam::new(AdamConfig::default()), observers: Vec::new(), lr_mode: LrMode::Automatic })
    }

    /// Keeps `model` as it is, head included. Used to probe or evaluate a
    /// trained network.
    pub fn continuing(config: ProtocolConfig, mut model: Model, data: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        model.set_update_frozen_bn_stats(config.update_frozen_bn_stats);
        let state = RunState::new(config.total_epochs());
        Ok(Self { config, model, data, state, adam: Adam::new(AdamConfig::default()), observers: Vec::new(), lr_mode: LrMode::Automatic })
    }

    /// Continues from a checkpoint written by a run of the same protocol.
    pub fn resume(checkpoint: &Checkpoint, data: Dataset) -> Result<Self, TrainError> {
        let config = checkpoint
            .meta
            .protocol
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint carries no protocol".into()))?;
        config.validate()?;
        let mut state = checkpoint
            .meta
            .state
            .clone()
            .ok_or_else(|| TrainError::Config("checkpoint carries no run state".into()))?;
        let mut model = checkpoint.restore_model()?;
        model.set_update_frozen_bn_stats(config.update_frozen_bn_stats);
        let adam = checkpoint.restore_adam(&model).unwrap_or_else(|| Adam::new(AdamConfig::default()));
        state.status = RunStatus::Idle;
        state.position = checkpoint.meta.position;
        Ok(Self { config, model, data, state, adam, observers: Vec::new(), lr_mode: LrMode::Automatic })
    }

    pub fn add_observer(&mut self, observer: Box<dyn Observer>) {
        self.observers.push(observer);
    }

    pub fn set_lr_mode(&mut self, mode: LrMode) {
        self.lr_mode = mode;
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn dataset_mut(&mut self) -> &mut Dataset {
        &mut self.data
    }

    /// Checkpoint of the current model, position, protocol and run state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::capture(&self.model, Some(&self.adam), self.state.position, self.config.seed);
        c.meta.protocol = Some(self.config.clone());
        c.meta.state = Some(self.state.clone());
        c
    }

    fn publish(&mut self) {
        for o in &mut self.observers {
            o.on_state(&self.state);
        }
    }

    /// Runs the protocol from the current position to the end. On error the
    /// state is marked failed and the error returned.
    pub fn run(&mut self) -> Result<&RunState, TrainError> {
        match self.check_inputs().and_then(|_| self.run_inner()) {
            Ok(()) => Ok(&self.state),
            Err(e) => {
                self.state.status = RunStatus::Failed;
                self.state.error = Some(e.to_string());
                self.publish();
                Err(e)
            }
        }
    }

    fn check_inputs(&self) -> Result<(), TrainError> {
        for split in [Split::Train, Split::Test] {
            if self.data.len(split) == 0 {
                return Err(TrainError::Config(format!("empty {} split", split.as_str())));
            }
        }
        if self.data.manifest().n_classes() != self.model.n_classes() {
            return Err(TrainError::Config(format!(
                "model has {} classes, dataset {}",
                self.model.n_classes(),
                self.data.manifest().n_classes()
            )));
        }
        Ok(())
    }

    fn run_inner(&mut self) -> Result<(), TrainError> {
        let stages = self.config.stages.clone();
        let start = self.state.position;
        for (si, stage) in stages.iter().enumerate().skip(start.stage) {
            let first_step = if si == start.stage { start.step } else { 0 };
            for (pi, plan) in stage.steps.iter().enumerate().skip(first_step) {
                let first_epoch = if (si, pi) == (start.stage, start.step) { start.epoch } else { 0 };
                self.model.set_frozen(plan.freeze);
                let mut policy = plan.lr_policy.clone();
                if plan.lr_find {
                    let lr = self.choose_lr(si, pi, stage.image_size)?;
                    policy = policy.with_chosen(lr);
                }
                let lrs = policy.assignment(self.model.n_groups())?;
                if first_epoch == 0 {
                    self.adam = Adam::new(AdamConfig::default());
                }
                let position = Position { stage: si, step: pi, epoch: first_epoch };
                for o in &mut self.observers {
                    o.on_step_start(position, &lrs);
                }
                self.state.status = RunStatus::Training;
                self.publish();
                for epoch in first_epoch..plan.epochs {
                    let pos = Position { stage: si, step: pi, epoch };
                    self.state.position = pos;
                    let train_loss = self.train_epoch(stage.image_size, &lrs, pos)?;
                    let report = evaluate(&self.model, &mut self.data, stage.image_size, self.config.batch_size, &self.config.normalization)?;
                    let record = EpochRecord {
                        stage: si,
                        step: pi,
                        epoch,
                        train_loss,
                        test_accuracy: report.accuracy,
                        lrs: lrs.rates.clone(),
                    };
                    log::info!(
                        "stage {si} step {pi} epoch {epoch}: loss {train_loss:.4}, test accuracy {:.2}%",
                        report.accuracy
                    );
                    self.state.history.push(record.clone());
                    self.state.completed_epochs += 1;
                    self.state.position = self.next_position(pos);
                    for o in &mut self.observers {
                        o.on_epoch(&record, &self.model);
                    }
                    self.publish();
                }
            }
            if let Some(dir) = &self.config.checkpoint_dir {
                save_checkpoint(&self.checkpoint(), &dir.join(format!("stage{si}.swck")))?;
            }
        }
        let size = stages.last().expect("validated").image_size;
        let report = evaluate(&self.model, &mut self.data, size, self.config.batch_size, &self.config.normalization)?;
        self.state.report = Some(report);
        self.state.status = RunStatus::Done;
        if let Some(dir) = &self.config.checkpoint_dir {
            save_checkpoint(&self.checkpoint(), &dir.join("final.swck"))?;
        }
        self.publish();
        Ok(())
    }

    fn next_position(&self, p: Position) -> Position {
        let steps = &self.config.stages[p.stage].steps;
        if p.epoch + 1 < steps[p.step].epochs {
            Position { epoch: p.epoch + 1, ..p }
        } else if p.step + 1 < steps.len() {
            Position { stage: p.stage, step: p.step + 1, epoch: 0 }
        } else {
            Position { stage: p.stage + 1, step: 0, epoch: 0 }
        }
    }

    fn batch_options(&self, size: usize, seed: u64) -> BatchOptions {
        BatchOptions {
            size,
            batch_size: self.config.batch_size,
            seed,
            augment: self.config.augment.clone(),
            stats: self.config.normalization.clone(),
        }
    }

    /// Rate for step `(stage, step)`: reuses an earlier choice when resuming,
    /// otherwise runs the range test and takes the suggestion or an
    /// interactive choice.
    fn choose_lr(&mut self, stage: usize, step: usize, size: usize) -> Result<f64, TrainError> {
        if let Some(c) = self.state.lr_choices.iter().find(|c| (c.stage, c.step) == (stage, step)) {
            return Ok(c.chosen_lr);
        }
        self.state.status = RunStatus::Lrfind;
        self.state.position = Position { stage, step, epoch: 0 };
        self.publish();
        let curve = self.lr_curve(stage, step, size)?;
        let suggested = curve.suggested_lr;
        self.state.lr_curve = Some(curve);
        let (chosen, source) = match &self.lr_mode {
            LrMode::Automatic => (suggested, LrChoiceSource::Suggested),
            LrMode::Interactive { choices, timeout } => {
                while choices.try_recv().is_ok() {}
                let timeout = *timeout;
                self.state.status = RunStatus::AwaitingLr;
                self.publish();
                let LrMode::Interactive { choices, .. } = &self.lr_mode else { unreachable!() };
                match choices.recv_timeout(timeout) {
                    Ok(lr) if lr > 0.0 && lr.is_finite() => (lr, LrChoiceSource::User),
                    Ok(lr) => {
                        log::warn!("ignoring invalid learning rate {lr}; using suggestion {suggested:.3e}");
                        (suggested, LrChoiceSource::Timeout)
                    }
                    Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                        log::warn!("no learning rate chosen within {timeout:?}; using suggestion {suggested:.3e}");
                        (suggested, LrChoiceSource::Timeout)
                    }
                }
            }
        };
        self.state.lr_choices.push(LrChoice { stage, step, suggested_lr: suggested, chosen_lr: chosen, source });
        Ok(chosen)
    }

    /// Range test on a copy of the model over augmented training batches.
    pub fn lr_curve(&mut self, stage: usize, step: usize, size: usize) -> Result<LrCurve, TrainError> {
        let seed = derive_seed(self.config.seed, &[stream::LR_FINDER, stage as u64, step as u64]);
        let opts = self.batch_options(size, seed);
        let wanted = self.config.lr_finder.n_iters;
        let mut batches = Vec::new();
        for b in self.data.batches(Split::Train, &opts)? {
            let b = b?;
            if b.len() >= 2 {
                batches.push(b);
            }
            if batches.len() == wanted {
                break;
            }
        }
        if batches.is_empty() {
            return Err(TrainError::Config("no training batch with at least 2 samples".into()));
        }
        let target = ModelTarget { model: self.model.clone(), batches, seed };
        Ok(lr_range_test(&target, &Adam::new(AdamConfig::default()), &self.config.lr_finder)?)
    }

    /// One pass over the training split; returns the sample-weighted mean
    /// loss. Batches of one sample are skipped (batchnorm needs two).
    fn train_epoch(&mut self, size: usize, lrs: &LrAssignment, pos: Position) -> Result<f64, TrainError> {
        let path = [pos.stage as u64, pos.step as u64, pos.epoch as u64];
        let seed = derive_seed(self.config.seed, &path);
        let opts = self.batch_options(size, seed);
        let (mut total, mut count) = (0.0f64, 0usize);
        let Self { data, model, adam, .. } = self;
        for (bi, batch) in data.batches(Split::Train, &opts)?.enumerate() {
            let batch = batch?;
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::with_seed(derive_seed(seed, &[stream::DROPOUT, bi as u64]));
            let x = g.leaf(batch.images);
            let logits = model.forward(&mut g, x, true)?;
            let loss = g.cross_entropy(logits, &batch.labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { stage: pos.stage, step: pos.step, epoch: pos.epoch, batch: bi });
            }
            g.backward(loss)?;
            let params = model.params_mut();
            params.zero_grads();
            params.absorb_grads(&g);
            adam.step(params, lrs)?;
            total += value * batch.labels.len() as f64;
            count += batch.labels.len();
        }
        if count == 0 {
            return Err(TrainError::Config("no training batch with at least 2 samples".into()));
        }
        Ok(total / count as f64)
    }
}
