//! Optimization loop: Adam, plateau learning-rate schedule, early stopping,
//! alternating labeled/unlabeled batches, timing, and the significance test
//! used to compare variants.
//!
//! A run is single-threaded end to end; batch order and objective noise are
//! pure functions of (seed, epoch/step), so two runs with the same config
//! are bitwise identical and a run resumed from a checkpoint continues with
//! exactly the losses the uninterrupted run would have produced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{
    classify, load_arrays, save_arrays, ModelConfig, ModelParams, NamedArray, TokenBatch,
    EMBEDDING_PARAM,
};
use crate::objectives::{
    labeled_objective, unlabeled_objective, LossBreakdown, StepNoise, VariantConfig,
};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, Tape, Tensor};

// ---- Adam --------------------------------------------------------------------------------

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily; their shapes must then stay fixed.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

/// Initial learning rate.
pub const DEFAULT_LR: f64 = 4e-3;

impl<F: Scalar> AdamState<F> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter. Call once per optimization step,
    /// before any [`AdamState::update`] of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// In-place update of one named tensor. Zero gradient leaves the value
    /// unchanged and only decays the moments.
    pub fn update(&mut self, name: &str, value: &mut [F], grad: &[F]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid("adam: update before begin_step"));
        }
        if value.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_update",
                left: vec![value.len()],
                right: vec![grad.len()],
            });
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![F::zero(); value.len()], vec![F::zero(); value.len()]));
        if m.len() != value.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_moments",
                left: vec![m.len()],
                right: vec![value.len()],
            });
        }
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    fn to_named(&self) -> Vec<NamedArray<F>> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            out.push(NamedArray { name: format!("adam.m.{name}"), shape: vec![m.len()], data: m.clone() });
            out.push(NamedArray { name: format!("adam.v.{name}"), shape: vec![v.len()], data: v.clone() });
        }
        out
    }
}

/// Gradients keyed by parameter name, extracted from a backward pass over
/// watched parameters. Parameters the loss never touched are absent.
pub fn named_grads<F: Scalar>(
    watched: &ModelParams<F>,
    map: &GradMap<F>,
) -> BTreeMap<String, Tensor<F>> {
    let mut out = BTreeMap::new();
    watched.for_each(|name, t| {
        if let Some(g) = map.wrt(t) {
            out.insert(name.to_string(), g.clone());
        }
    });
    out
}

/// Zero the padding row of the embedding gradient so the pad vector stays
/// pinned at zero through training.
pub fn freeze_pad_row<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>) {
    if let Some(g) = grads.get(EMBEDDING_PARAM) {
        let dim = g.shape()[1];
        let mut data = g.data().to_vec();
        for slot in data.iter_mut().take(dim) {
            *slot = F::zero();
        }
        let t = Tensor::new(g.shape().to_vec(), data).expect("same shape");
        grads.insert(EMBEDDING_PARAM.to_string(), t);
    }
}

/// One Adam step over the whole parameter set. Rejects the step without
/// touching state or parameters if any gradient is non-finite; the caller
/// skips the batch and continues. Missing gradients count as zero.
pub fn adam_step<F: Scalar>(
    state: &mut AdamState<F>,
    params: &ModelParams<F>,
    grads: &BTreeMap<String, Tensor<F>>,
) -> Result<ModelParams<F>> {
    let mut shape_error = None;
    params.for_each(|name, t| {
        if let Some(g) = grads.get(name) {
            if g.shape() != t.shape() && shape_error.is_none() {
                shape_error = Some(Error::ShapeMismatch {
                    op: "adam_step",
                    left: g.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
    });
    if let Some(e) = shape_error {
        return Err(e);
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.begin_step();
    let zero_grad: Vec<F> = Vec::new();
    let updated = params.map_named(|name, t| {
        let mut value = t.data().to_vec();
        let grad_data;
        let grad: &[F] = match grads.get(name) {
            Some(g) => {
                grad_data = g.data();
                &grad_data
            }
            None => &zero_grad,
        };
        if grad.is_empty() {
            let zeros = vec![F::zero(); value.len()];
            state.update(name, &mut value, &zeros).expect("prevalidated shapes");
        } else {
            state.update(name, &mut value, grad).expect("prevalidated shapes");
        }
        Tensor::new(t.shape().to_vec(), value).expect("same shape")
    });
    Ok(updated)
}

// ---- plateau schedule --------------------------------------------------------------------

/// Plateau schedule: divide the learning rate by `decay` after
/// `lr_patience` epochs without strict dev improvement, stop after
/// `stop_patience`.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    pub best: f64,
    pub since_improvement: u32,
    pub lr_patience: u32,
    pub stop_patience: u32,
    pub decay: f64,
}

impl Default for ScheduleState {
    fn default() -> Self {
        ScheduleState {
            best: f64::NEG_INFINITY,
            since_improvement: 0,
            lr_patience: 4,
            stop_patience: 8,
            decay: 4.0,
        }
    }
}

/// Fold one epoch's dev accuracy into the schedule. Returns the (possibly
/// decayed) learning rate and whether to stop.
pub fn schedule_update(state: &mut ScheduleState, lr: f64, dev_accuracy: f64) -> (f64, bool) {
    if dev_accuracy > state.best {
        state.best = dev_accuracy;
        state.since_improvement = 0;
        return (lr, false);
    }
    state.since_improvement += 1;
    if state.since_improvement >= state.stop_patience {
        return (lr, true);
    }
    if state.since_improvement == state.lr_patience {
        return (lr / state.decay, false);
    }
    (lr, false)
}

// ---- run configuration and data ------------------------------------------------------------

/// Everything a single training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: VariantConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleState,
    /// Reporting only.
    pub dataset: String,
    /// Reporting only.
    pub labeled_fraction: f64,
}

impl TrainConfig {
    pub fn new(variant: VariantConfig, model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            variant,
            model,
            seed,
            batch_size: 32,
            max_epochs: 50,
            lr: DEFAULT_LR,
            schedule: ScheduleState::default(),
            dataset: "synthetic".into(),
            labeled_fraction: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Tokenized, id-mapped splits ready for a run.
#[derive(Debug, Clone, Default)]
pub struct PreparedData {
    pub labeled: Vec<(Vec<usize>, usize)>,
    pub unlabeled: Vec<Vec<usize>>,
    pub dev: Vec<(Vec<usize>, usize)>,
    pub test: Vec<(Vec<usize>, usize)>,
}

impl PreparedData {
    /// Reject id/label/length violations before any training starts.
    pub fn validate(&self, model: &ModelConfig, needs_unlabeled: bool) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::config("no labeled examples"));
        }
        if self.dev.is_empty() || self.test.is_empty() {
            return Err(Error::config("dev and test splits must be nonempty"));
        }
        if needs_unlabeled && self.unlabeled.is_empty() {
            return Err(Error::config("semi-supervised variant with no unlabeled examples"));
        }
        let check_row = |row: &[usize], what: &str| -> Result<()> {
            if row.is_empty() {
                return Err(Error::config(format!("{what}: empty token row")));
            }
            if row.len() > model.max_len {
                return Err(Error::config(format!(
                    "{what}: row of {} tokens exceeds max_len {}",
                    row.len(),
                    model.max_len
                )));
            }
            for (pos, &id) in row.iter().enumerate() {
                if id >= model.vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: model.vocab_size,
                        position: pos,
                    });
                }
            }
            Ok(())
        };
        for (row, label) in self.labeled.iter().chain(&self.dev).chain(&self.test) {
            check_row(row, "labeled/dev/test")?;
            if *label >= model.n_classes {
                return Err(Error::config(format!(
                    "label {label} outside {} classes",
                    model.n_classes
                )));
            }
        }
        for row in &self.unlabeled {
            check_row(row, "unlabeled")?;
        }
        Ok(())
    }
}

// ---- run report -------------------------------------------------------------------------

/// Outcome of one training run. Test accuracy is measured exactly once, on
/// the best-dev checkpoint.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub variant: String,
    pub dataset: String,
    pub labeled_fraction: f64,
    pub alpha: f64,
    pub seed: u64,
    pub dev_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub parameter_count: usize,
    pub mean_step_ms: f64,
    pub std_step_ms: f64,
    pub skipped_batches: u64,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "variant,dataset,labeled_fraction,alpha,seed,epochs,\
best_epoch,best_dev_accuracy,test_accuracy,parameter_count,mean_step_ms,std_step_ms,skipped_batches";

    pub fn best_dev_accuracy(&self) -> f64 {
        self.dev_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.dataset,
            self.labeled_fraction,
            self.alpha,
            self.seed,
            self.dev_accuracy.len(),
            self.best_epoch,
            self.best_dev_accuracy(),
            self.test_accuracy,
            self.parameter_count,
            self.mean_step_ms,
            self.std_step_ms,
            self.skipped_batches
        )
    }
}

// ---- trainer ------------------------------------------------------------------------------

/// Summary of one epoch, returned by [`Trainer::run_epoch`].
#[derive(Debug, Clone, Copy)]
pub struct EpochSummary {
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub improved: bool,
    pub stop: bool,
}

/// Stepwise training driver. [`train`] wraps the whole loop; the pieces are
/// public so checkpoint/resume and the benchmarks can drive steps directly.
pub struct Trainer<F: Scalar> {
    pub cfg: TrainConfig,
    data: PreparedData,
    pub params: ModelParams<F>,
    adam: AdamState<F>,
    schedule: ScheduleState,
    epoch: usize,
    global_step: u64,
    unlabeled_cycle: u64,
    unlabeled_cursor: usize,
    unlabeled_order: Vec<usize>,
    best_params: ModelParams<F>,
    best_epoch: usize,
    dev_history: Vec<f64>,
    /// Loss totals per optimization step, in order.
    pub step_totals: Vec<f64>,
    /// Full component rows per step for the training log.
    pub step_log: Vec<LossBreakdown>,
    step_ms: Vec<f64>,
    skipped: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainConfig, data: PreparedData) -> Result<Self> {
        cfg.validate()?;
        let semi = !cfg.variant.supervised_only;
        data.validate(&cfg.model, semi)?;
        if !cfg.variant.supervised_only && cfg.variant.drop_z != cfg.model.drop_z {
            return Err(Error::config("variant and model disagree about drop_z"));
        }
        let params = ModelParams::<F>::init(&cfg.model, cfg.seed)?;
        let adam = AdamState::new(cfg.lr);
        let schedule = cfg.schedule.clone();
        Ok(Trainer {
            best_params: params.clone(),
            params,
            adam,
            schedule,
            epoch: 0,
            global_step: 0,
            unlabeled_cycle: 0,
            unlabeled_cursor: 0,
            unlabeled_order: Vec::new(),
            best_epoch: 0,
            dev_history: Vec::new(),
            step_totals: Vec::new(),
            step_log: Vec::new(),
            step_ms: Vec::new(),
            skipped: 0,
            cfg,
            data,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn dev_history(&self) -> &[f64] {
        &self.dev_history
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.lr
    }

    fn labeled_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.labeled.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, Domain::ShuffleLabeled, epoch as u64));
        order
    }

    fn next_unlabeled_indices(&mut self, want: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.unlabeled_cursor >= self.unlabeled_order.len() {
                self.unlabeled_order = (0..self.data.unlabeled.len()).collect();
                self.unlabeled_order
                    .shuffle(&mut stream(self.cfg.seed, Domain::ShuffleUnlabeled, self.unlabeled_cycle));
                self.unlabeled_cycle += 1;
                self.unlabeled_cursor = 0;
            }
            out.push(self.unlabeled_order[self.unlabeled_cursor]);
            self.unlabeled_cursor += 1;
        }
        out
    }

    fn labeled_batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let rows: Vec<Vec<usize>> =
            indices.iter().map(|&i| self.data.labeled[i].0.clone()).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.data.labeled[i].1).collect();
        TokenBatch::from_rows(&rows, Some(labels))
    }

    fn unlabeled_batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let rows: Vec<Vec<usize>> =
            indices.iter().map(|&i| self.data.unlabeled[i].clone()).collect();
        TokenBatch::from_rows(&rows, None)
    }

    /// One optimization step on pre-materialized batches. Timing covers
    /// forward + backward + update only.
    pub fn step(&mut self, labeled: &TokenBatch, unlabeled: Option<&TokenBatch>) -> Result<()> {
        let cfg = &self.cfg;
        let started = Instant::now();
        let tape = Tape::new();
        let watched = self.params.watch(&tape);
        let lnoise = StepNoise::labeled(cfg.seed, self.global_step);
        let lab = labeled_objective(
            &tape,
            &watched,
            &cfg.model,
            &cfg.variant,
            labeled,
            self.global_step,
            lnoise,
            Mode::Train,
        )?;
        let mut breakdown = lab.breakdown;
        let loss = match unlabeled {
            None => lab.loss,
            Some(ub) => {
                let unoise = StepNoise::unlabeled(cfg.seed, self.global_step);
                let unlab = unlabeled_objective(
                    &tape,
                    &watched,
                    &cfg.model,
                    &cfg.variant,
                    ub,
                    self.global_step,
                    unoise,
                    Mode::Train,
                )?;
                breakdown = LossBreakdown {
                    total: lab.breakdown.total + unlab.breakdown.total,
                    reconstruction: lab.breakdown.reconstruction + unlab.breakdown.reconstruction,
                    kl_z: lab.breakdown.kl_z + unlab.breakdown.kl_z,
                    kl_y: lab.breakdown.kl_y + unlab.breakdown.kl_y,
                    supervised_ce: lab.breakdown.supervised_ce,
                    anneal: lab.breakdown.anneal,
                };
                tape.add(&lab.loss, &unlab.loss)?
            }
        };

        let map = tape.backward(&loss)?;
        let mut grads = named_grads(&watched, &map);
        freeze_pad_row(&mut grads);
        match adam_step(&mut self.adam, &self.params, &grads) {
            Ok(updated) => self.params = updated,
            Err(Error::NonFiniteGradient(_)) => self.skipped += 1,
            Err(e) => return Err(e),
        }
        self.step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        self.global_step += 1;
        self.step_totals.push(breakdown.total);
        self.step_log.push(breakdown);
        Ok(())
    }

    /// One pass over the labeled set (one labeled batch plus one cycling
    /// unlabeled batch per step), then dev evaluation and the plateau
    /// schedule.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let order = self.labeled_order(self.epoch);
        let bs = self.cfg.batch_size;
        let semi = !self.cfg.variant.supervised_only;
        for chunk in order.chunks(bs) {
            let labeled = self.labeled_batch(chunk)?;
            let unlabeled = if semi {
                let idx = self.next_unlabeled_indices(bs);
                Some(self.unlabeled_batch(&idx)?)
            } else {
                None
            };
            self.step(&labeled, unlabeled.as_ref())?;
        }

        let dev_accuracy = self.evaluate(&self.data.dev.clone())?;
        self.dev_history.push(dev_accuracy);
        let improved = dev_accuracy > self.schedule.best;
        if improved {
            self.best_params = self.params.clone();
            self.best_epoch = self.epoch;
        }
        let (lr, stop) = schedule_update(&mut self.schedule, self.adam.lr, dev_accuracy);
        self.adam.lr = lr;
        self.epoch += 1;
        Ok(EpochSummary { epoch: self.epoch - 1, dev_accuracy, improved, stop })
    }

    /// Accuracy of the current parameters on a labeled split.
    pub fn evaluate(&self, split: &[(Vec<usize>, usize)]) -> Result<f64> {
        accuracy_of(&self.params, &self.cfg.model, split, self.cfg.batch_size)
    }

    /// Run to the stop criterion or `max_epochs`, then report with test
    /// accuracy at the best-dev checkpoint.
    pub fn train(mut self) -> Result<RunReport> {
        for _ in 0..self.cfg.max_epochs {
            let summary = self.run_epoch()?;
            if summary.stop {
                break;
            }
        }
        self.into_report()
    }

    /// Finalize: evaluate test on the best checkpoint.
    pub fn into_report(self) -> Result<RunReport> {
        let test_accuracy =
            accuracy_of(&self.best_params, &self.cfg.model, &self.data.test, self.cfg.batch_size)?;
        let (mean_ms, std_ms) = mean_std(&self.step_ms);
        Ok(RunReport {
            variant: self.cfg.variant.name().to_string(),
            dataset: self.cfg.dataset.clone(),
            labeled_fraction: self.cfg.labeled_fraction,
            alpha: self.cfg.variant.alpha,
            seed: self.cfg.seed,
            dev_accuracy: self.dev_history,
            best_epoch: self.best_epoch,
            test_accuracy,
            parameter_count: self.params.numel(),
            mean_step_ms: mean_ms,
            std_step_ms: std_ms,
            skipped_batches: self.skipped,
        })
    }

    /// Parameters of the best-dev epoch seen so far.
    pub fn best_params(&self) -> &ModelParams<F> {
        &self.best_params
    }

    // ---- checkpointing ----------------------------------------------------------------

    /// Serialize params, best params, Adam moments, and loop counters.
    /// Restoring continues training bitwise-identically to an uninterrupted
    /// run; only at epoch boundaries is the state complete.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        for a in self.params.to_named() {
            arrays.push(NamedArray { name: format!("param.{}", a.name), ..a });
        }
        for a in self.best_params.to_named() {
            arrays.push(NamedArray { name: format!("best.{}", a.name), ..a });
        }
        arrays.extend(self.adam.to_named());
        arrays.push(NamedArray {
            name: "dev_history".into(),
            shape: vec![self.dev_history.len()],
            data: self.dev_history.iter().map(|&x| F::from_f64(x)).collect(),
        });
        let meta = [
            self.adam.step as f64,
            self.adam.lr,
            self.epoch as f64,
            self.global_step as f64,
            self.unlabeled_cycle as f64,
            self.unlabeled_cursor as f64,
            self.best_epoch as f64,
            self.schedule.best,
            self.schedule.since_improvement as f64,
            self.skipped as f64,
        ];
        arrays.push(NamedArray {
            name: "meta".into(),
            shape: vec![meta.len()],
            data: meta.iter().map(|&x| F::from_f64(x)).collect(),
        });
        save_arrays(path, &arrays)
    }

    /// Rebuild a trainer from a checkpoint written by
    /// [`Trainer::save_checkpoint`] with the same config and data.
    pub fn resume(cfg: TrainConfig, data: PreparedData, path: &Path) -> Result<Self> {
        let arrays = load_arrays::<F>(path)?;
        let mut trainer = Trainer::new(cfg, data)?;

        let strip = |prefix: &str| -> Vec<NamedArray<F>> {
            arrays
                .iter()
                .filter(|a| a.name.starts_with(prefix))
                .map(|a| NamedArray {
                    name: a.name[prefix.len()..].to_string(),
                    shape: a.shape.clone(),
                    data: a.data.clone(),
                })
                .collect()
        };
        trainer.params = ModelParams::from_named(&trainer.cfg.model, &strip("param."))?;
        trainer.best_params = ModelParams::from_named(&trainer.cfg.model, &strip("best."))?;
        for a in strip("adam.m.") {
            let slot =
                trainer.adam.moments.entry(a.name).or_insert_with(|| (Vec::new(), Vec::new()));
            slot.0 = a.data;
        }
        for a in strip("adam.v.") {
            let slot =
                trainer.adam.moments.entry(a.name).or_insert_with(|| (Vec::new(), Vec::new()));
            slot.1 = a.data;
        }
        let meta = arrays
            .iter()
            .find(|a| a.name == "meta")
            .ok_or_else(|| Error::Checkpoint("missing meta block".into()))?;
        if meta.data.len() != 10 {
            return Err(Error::Checkpoint(format!(
                "meta block has {} entries, expected 10",
                meta.data.len()
            )));
        }
        let m: Vec<f64> = meta.data.iter().map(|v| crate::scalar::Scalar::to_f64(*v)).collect();
        trainer.adam.step = m[0] as u64;
        trainer.adam.lr = m[1];
        trainer.epoch = m[2] as usize;
        trainer.global_step = m[3] as u64;
        trainer.unlabeled_cycle = m[4] as u64;
        trainer.unlabeled_cursor = m[5] as usize;
        trainer.best_epoch = m[6] as usize;
        trainer.schedule.best = m[7];
        trainer.schedule.since_improvement = m[8] as u32;
        trainer.skipped = m[9] as u64;
        if let Some(h) = arrays.iter().find(|a| a.name == "dev_history") {
            trainer.dev_history =
                h.data.iter().map(|v| crate::scalar::Scalar::to_f64(*v)).collect();
        }
        // The cursor indexes a cycle that save_checkpoint did not store; the
        // order is a pure function of (seed, cycle), so regenerate it.
        if trainer.unlabeled_cycle > 0 {
            trainer.unlabeled_order = (0..trainer.data.unlabeled.len()).collect();
            trainer.unlabeled_order.shuffle(&mut stream(
                trainer.cfg.seed,
                Domain::ShuffleUnlabeled,
                trainer.unlabeled_cycle - 1,
            ));
        }
        Ok(trainer)
    }
}

/// Classifier accuracy of `params` over a labeled split, batched.
pub fn accuracy_of<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    split: &[(Vec<usize>, usize)],
    batch_size: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut correct = 0usize;
    for chunk in split.chunks(batch_size.max(1)) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|(r, _)| r.clone()).collect();
        let batch = TokenBatch::from_rows(&rows, None)?;
        let (pred, _) = classify(params, config, &batch)?;
        correct += pred
            .iter()
            .zip(chunk.iter())
            .filter(|(p, (_, label))| **p == *label)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// End-to-end run: train to the stop criterion, report test accuracy at the
/// best-dev checkpoint.
pub fn train<F: Scalar>(cfg: TrainConfig, data: PreparedData) -> Result<RunReport> {
    Trainer::<F>::new(cfg, data)?.train()
}

// ---- timing --------------------------------------------------------------------------------

/// Per-iteration wall-clock statistics.
#[derive(Debug, Clone, Copy)]
pub struct TimingReport {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations: usize,
}

const TIMING_WARMUP: usize = 20;

/// Wall-clock per full optimization step (forward + backward + update) over
/// `n` iterations after 20 untimed warmup steps. Batches are materialized
/// outside the timed region. The labeled stream cycles like the unlabeled
/// one so the measurement never crosses epoch logic.
pub fn time_iterations<F: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    n: usize,
) -> Result<TimingReport> {
    if n < 30 {
        return Err(Error::invalid(format!("timing over {n} iterations is too noisy; need >= 30")));
    }
    let mut trainer = Trainer::<F>::new(cfg.clone(), data.clone())?;
    let semi = !cfg.variant.supervised_only;

    // Pre-materialize one fixed batch stream, shared verbatim by every
    // config timed against the same data and seed.
    let mut rng = stream(cfg.seed, Domain::ShuffleLabeled, u64::MAX);
    let total = TIMING_WARMUP + n;
    let mut labeled_batches = Vec::with_capacity(total);
    let mut unlabeled_batches = Vec::with_capacity(total);
    for _ in 0..total {
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..data.labeled.len())).collect();
        labeled_batches.push(trainer.labeled_batch(&idx)?);
        if semi {
            let idx: Vec<usize> =
                (0..cfg.batch_size).map(|_| rng.gen_range(0..data.unlabeled.len())).collect();
            unlabeled_batches.push(trainer.unlabeled_batch(&idx)?);
        }
    }

    for i in 0..total {
        trainer.step(&labeled_batches[i], if semi { Some(&unlabeled_batches[i]) } else { None })?;
    }
    let timed = &trainer.step_ms[TIMING_WARMUP..];
    let (mean_ms, std_ms) = mean_std(timed);
    Ok(TimingReport { mean_ms, std_ms, iterations: n })
}

/// Mean and sample standard deviation (n - 1); (x, 0) for singletons.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---- significance ---------------------------------------------------------------------------

/// Two-sided Welch t-test p-value. Degenerate zero-variance pairs resolve
/// by comparing means: equal → 1, different → 0.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch_t_test needs at least two observations per sample"));
    }
    let (ma, va) = mean_std(a);
    let (mb, vb) = mean_std(b);
    let (va, vb) = (va * va, vb * vb);
    if va == 0.0 && vb == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::invalid(format!("students-t with df {df}: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(p.clamp(0.0, 1.0))
}

/// Monte Carlo permutation test on the difference of means (two-sided).
/// Oracle used to validate [`welch_t_test`]; not part of the reports.
pub fn permutation_p_value(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("permutation test needs at least two observations per sample"));
    }
    if resamples == 0 {
        return Err(Error::invalid("permutation test needs at least one resample"));
    }
    let observed = (a.iter().sum::<f64>() / a.len() as f64
        - b.iter().sum::<f64>() / b.len() as f64)
        .abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = stream(seed, Domain::Verify, 2);
    let mut hits = 0usize;
    for _ in 0..resamples {
        pooled.shuffle(&mut rng);
        let ma = pooled[..a.len()].iter().sum::<f64>() / a.len() as f64;
        let mb = pooled[a.len()..].iter().sum::<f64>() / b.len() as f64;
        if (ma - mb).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok(hits as f64 / resamples as f64)
}
