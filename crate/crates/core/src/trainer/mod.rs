//! Epoch-budgeted training with periodic GAP evaluation.
//!
//! Batches are drawn from an endless stream of per-epoch permutations:
//! step `s` covers stream positions `[s·B, (s+1)·B)`, position `p` maps to
//! epoch `p / N` and slot `p % N` of that epoch's permutation. The epoch
//! fraction after `s` steps is therefore exactly `s·B / N`, and a run can be
//! resumed from nothing more than the step counter.
//!
//! Permutations come from a ChaCha stream keyed by `(seed, phase, epoch)`.

mod checkpoint;

use std::borrow::Borrow;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::featureio::VideoRecord;
use crate::losses::{multilabel_loss, HuberParams};
use crate::metrics::{gap, GapConfig, GroundTruth, PredictionSet};
use crate::netmodel::Model;
use crate::optim::{Optimizer, OptimizerKind};
use crate::schedule::{lr_at, ScheduleParams};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// ⌈num_videos / batch_size⌉.
pub fn steps_per_epoch(num_videos: u64, batch_size: u64) -> u64 {
    assert!(num_videos >= 1 && batch_size >= 1, "steps_per_epoch needs positive arguments");
    num_videos.div_ceil(batch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epoch_budget: f64,
    pub eval_every: f64,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub loss: HuberParams,
    pub optimizer: OptimizerKind,
    /// GAP cut-off used for the curve.
    pub top_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 160,
            epoch_budget: 2.5,
            eval_every: 0.25,
            seed: 0,
            schedule: ScheduleParams::TUNED,
            loss: HuberParams::default(),
            optimizer: OptimizerKind::Adam,
            top_n: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.epoch_budget > 0.0 && self.epoch_budget.is_finite()) {
            return Err(invalid("epoch_budget must be positive"));
        }
        if !(self.eval_every > 0.0 && self.eval_every.is_finite()) {
            return Err(invalid("eval_every must be positive"));
        }
        if self.top_n == 0 {
            return Err(invalid("top_n must be at least 1"));
        }
        if !(self.loss.delta > 0.0) {
            return Err(invalid("huber delta must be positive"));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: f64,
    pub split: Split,
    pub gap: f64,
    pub loss: f64,
    pub lr: f64,
}

pub const CURVE_CSV_HEADER: &str = "epoch,split,gap,loss,lr";

/// Renders a curve as `epoch,split,gap,loss,lr` CSV.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in curve {
        out.push_str(&format!("{},{},{},{},{}\n", p.epoch, p.split, p.gap, p.loss, p.lr));
    }
    out
}

/// Records decoded once for training or evaluation: widened frames,
/// dense targets and the ground truth used by GAP.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub frames: Vec<Array2<f64>>,
    pub targets: Array2<f64>,
    pub truth: GroundTruth,
}

impl PreparedSet {
    pub fn new<R: Borrow<VideoRecord>>(records: &[R], vocab_size: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        let mut targets = Array2::<f64>::zeros((records.len(), vocab_size));
        let mut ids = Vec::with_capacity(records.len());
        let mut frames = Vec::with_capacity(records.len());
        let mut truth = GroundTruth::new();
        for (i, r) in records.iter().enumerate() {
            let r = r.borrow();
            for &l in &r.labels {
                if l as usize >= vocab_size {
                    return Err(invalid(format!("label {l} outside vocab_size {vocab_size}")));
                }
                targets[[i, l as usize]] = 1.0;
            }
            // duplicated records (hard-pattern sets) share one truth entry
            let id = r.id_str();
            truth.insert(id.clone(), r.labels.iter().copied().collect());
            ids.push(id);
            frames.push(r.frames_f64());
        }
        Ok(Self { ids, frames, targets, truth })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Mean loss and GAP of `model` on `set`.
pub fn evaluate(model: &Model, set: &PreparedSet, loss: &HuberParams, top_n: usize) -> Result<(f64, f64)> {
    const CHUNK: usize = 256;
    let mut probs = Array2::<f64>::zeros(set.targets.dim());
    let mut loss_sum = 0.0;
    for start in (0..set.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(set.len());
        let (p, _) = model.forward(&set.frames[start..end])?;
        let y = set.targets.slice(ndarray::s![start..end, ..]).to_owned();
        let (l, _) = multilabel_loss(&p, &y, loss)?;
        loss_sum += l * (end - start) as f64;
        probs.slice_mut(ndarray::s![start..end, ..]).assign(&p);
    }
    let preds = PredictionSet::from_probabilities(&set.ids, &probs, top_n)?;
    let g = gap(&preds, &set.truth, &GapConfig { n: top_n })?;
    Ok((g, loss_sum / set.len() as f64))
}

/// Training state: model, optimizer and position in the batch stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    phase: u32,
    step: u64,
    perm_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, &model.params);
        Ok(Self { model, optimizer, config, phase: 0, step: 0, perm_cache: None })
    }

    /// Steps taken in the current phase.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn phase(&self) -> u32 {
        self.phase
    }

    pub fn epoch_fraction(&self, num_videos: usize) -> f64 {
        epoch_at(self.step, self.config.batch_size, num_videos)
    }

    /// Starts a new phase: the step counter and batch stream restart, the
    /// model and optimizer state carry over.
    pub fn begin_phase(&mut self, phase: u32) {
        self.phase = phase;
        self.step = 0;
        self.perm_cache = None;
    }

    fn permutation(&mut self, epoch: u64, n: usize) -> &[usize] {
        let stale = !matches!(&self.perm_cache, Some((e, p)) if *e == epoch && p.len() == n);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(((self.phase as u64) << 40) | epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            self.perm_cache = Some((epoch, perm));
        }
        &self.perm_cache.as_ref().unwrap().1
    }

    fn batch_indices(&mut self, step: u64, n: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        let n64 = n as u64;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let slot = (pos % n64) as usize;
                self.permutation(pos / n64, n)[slot]
            })
            .collect()
    }

    /// Number of steps that exhausts `budget` epochs of an `n`-video set.
    pub fn steps_for_budget(&self, budget: f64, n: usize) -> u64 {
        let exact = budget * n as f64 / self.config.batch_size as f64;
        // guard against 2.5·N/B landing a hair above an integer
        ((exact - 1e-9).ceil() as u64).max(1)
    }

    /// Trains on `train` until `budget` epochs are consumed, or until the
    /// phase-local step counter reaches `stop_at_step`. Returns the curve
    /// points produced by this call.
    pub fn run(
        &mut self,
        train: &PreparedSet,
        val: Option<&PreparedSet>,
        budget: f64,
        stop_at_step: Option<u64>,
    ) -> Result<Vec<CurvePoint>> {
        if train.is_empty() {
            return Err(invalid("training set is empty"));
        }
        if train.targets.ncols() != self.model.config.vocab_size {
            return Err(shape(format!(
                "training targets have {} labels, model has {}",
                train.targets.ncols(),
                self.model.config.vocab_size
            )));
        }
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(invalid("epoch budget must be positive"));
        }
        let n = train.len();
        let total = self.steps_for_budget(budget, n);
        let stop = stop_at_step.map_or(total, |s| s.min(total));
        let mut curve = Vec::new();

        while self.step < stop {
            let before = self.epoch_fraction(n);
            let lr = lr_at(before, &self.config.schedule)?;
            let idx = self.batch_indices(self.step, n);
            let frames: Vec<&Array2<f64>> = idx.iter().map(|&i| &train.frames[i]).collect();
            let targets = train.targets.select(ndarray::Axis(0), &idx);

            let (probs, cache) = self.model.forward(&frames)?;
            let (loss, grad) = multilabel_loss(&probs, &targets, &self.config.loss)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    detail: format!("loss {loss} at epoch {before:.4}, lr {lr}"),
                });
            }
            let grads = self.model.backward(&grad, &cache)?;
            self.optimizer
                .step(&mut self.model, &grads.params, lr)
                .map_err(|e| Error::Diverged { step: self.step, detail: e.to_string() })?;
            self.step += 1;

            let after = self.epoch_fraction(n);
            let ev = self.config.eval_every;
            let crossed = (after / ev + 1e-9).floor() > (before / ev + 1e-9).floor();
            if crossed || self.step == total {
                curve.extend(self.eval_points(after, train, val)?);
            }
        }
        Ok(curve)
    }

    fn eval_points(&self, epoch: f64, train: &PreparedSet, val: Option<&PreparedSet>) -> Result<Vec<CurvePoint>> {
        let lr = lr_at(epoch, &self.config.schedule)?;
        let mut out = Vec::with_capacity(2);
        let (g, l) = evaluate(&self.model, train, &self.config.loss, self.config.top_n)?;
        out.push(CurvePoint { epoch, split: Split::Train, gap: g, loss: l, lr });
        if let Some(v) = val {
            let (g, l) = evaluate(&self.model, v, &self.config.loss, self.config.top_n)?;
            out.push(CurvePoint { epoch, split: Split::Val, gap: g, loss: l, lr });
        }
        Ok(out)
    }

    pub fn checkpoint(&self, num_videos: usize) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            train_config: self.config,
            phase: self.phase,
            step: self.step,
            epoch_fraction: self.epoch_fraction(num_videos),
            num_videos: num_videos as u64,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        if ckpt.optimizer.kind() != ckpt.train_config.optimizer {
            return Err(invalid("checkpoint optimizer state does not match its config"));
        }
        Ok(Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.train_config,
            phase: ckpt.phase,
            step: ckpt.step,
            perm_cache: None,
        })
    }
}

fn epoch_at(step: u64, batch_size: usize, num_videos: usize) -> f64 {
    (step as f64 * batch_size as f64) / num_videos as f64
}

/// Single-set training for `config.epoch_budget` epochs.
pub fn train<R: Borrow<VideoRecord>>(
    train_records: &[R],
    val_records: &[R],
    model: Model,
    config: &TrainConfig,
) -> Result<(Model, Vec<CurvePoint>)> {
    let vocab = model.config.vocab_size;
    let train_set = PreparedSet::new(train_records, vocab)?;
    let val_set = if val_records.is_empty() { None } else { Some(PreparedSet::new(val_records, vocab)?) };
    let mut t = Trainer::new(model, *config)?;
    let curve = t.run(&train_set, val_set.as_ref(), config.epoch_budget, None)?;
    Ok((t.model, curve))
}

#[derive(Clone, Debug)]
pub struct Phase {
    pub data: PreparedSet,
    pub epoch_budget: f64,
}

/// Ordered training phases sharing one model and optimizer.
#[derive(Clone, Debug)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(invalid("phase plan is empty"));
        }
        if let Some(p) = self.phases.iter().find(|p| !(p.epoch_budget > 0.0)) {
            return Err(invalid(format!("phase budget {} is not positive", p.epoch_budget)));
        }
        Ok(())
    }
}

/// Runs each phase to its budget, carrying model and optimizer state.
/// Curve epochs are offset by the epochs completed in earlier phases.
pub fn train_phases(
    plan: &PhasePlan,
    val: Option<&PreparedSet>,
    model: Model,
    config: &TrainConfig,
) -> Result<(Model, Vec<CurvePoint>)> {
    plan.validate()?;
    let mut t = Trainer::new(model, *config)?;
    let (curve, _) = run_phases(&mut t, plan, val)?;
    Ok((t.model, curve))
}

/// Phase loop on an existing trainer; also returns the epoch offset
/// reached at the end of every phase.
pub fn run_phases(t: &mut Trainer, plan: &PhasePlan, val: Option<&PreparedSet>) -> Result<(Vec<CurvePoint>, Vec<f64>)> {
    plan.validate()?;
    let mut curve = Vec::new();
    let mut offsets = Vec::with_capacity(plan.phases.len());
    let mut offset = 0.0;
    for (i, phase) in plan.phases.iter().enumerate() {
        t.begin_phase(i as u32);
        let pts = t.run(&phase.data, val, phase.epoch_budget, None)?;
        curve.extend(pts.into_iter().map(|mut p| {
            p.epoch += offset;
            p
        }));
        offset += t.epoch_fraction(phase.data.len());
        offsets.push(offset);
    }
    Ok((curve, offsets))
}
