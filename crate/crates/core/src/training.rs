//! Two-stage training.
//!
//! Stage `slim` trains the backbone alone: every step runs all `J` static
//! forwards and minimizes the summed spectral loss. Stage `dyn` adds the
//! router and minimizes the routed spectral loss plus the efficiency and
//! balance terms; its outputs are the `J` static outputs mixed by the
//! straight-through one-hot selections under Gumbel noise.
//!
//! Validation never samples noise: stage `slim` scores every factor, stage
//! `dyn` runs the switched-width pass with argmax decisions.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Demucs, Widths};
use crate::checkpoint::Checkpoint;
use crate::data::{batch_segments, Batch, Corpus, MixtureSpec};
use crate::error::{Error, Result};
use crate::losses::{
    bal_loss_value, combine_outputs, dynslim_loss, eff_loss_value, occurrence, slim_loss, spectral_loss,
    spectral_loss_value, LossConfig,
};
use crate::metrics::si_sdr;
use crate::router::{self, SelectMode};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const LOG_FILE: &str = "train.log";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping usually ends the run sooner.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stage `slim`: epochs without improvement before the rate halves.
    pub plateau_epochs: usize,
    pub patience: usize,
    /// Stage `dyn`: per-epoch multiplicative decay.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stage `dyn`: epochs that update only the router before joint
    /// training at `finetune_lr`. Zero trains everything from the start.
    pub router_pretrain_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 16,
            lr: 1e-3,
            plateau_epochs: 15,
            patience: 35,
            lr_decay: 0.99,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            router_pretrain_epochs: 0,
            finetune_lr: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.patience == 0 || self.plateau_epochs == 0 {
            return bad("batch size, patience and plateau length must be positive");
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs β1, β2 in [0, 1) and ε > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Slim,
    Dyn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Slim => "slim",
            Stage::Dyn => "dyn",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slim" => Ok(Stage::Slim),
            "dyn" => Ok(Stage::Dyn),
            _ => Err(Error::Config(format!("unknown stage `{s}` (expected slim or dyn)"))),
        }
    }
}

/// Bias-corrected Adam with moments stored per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. Returns `false`, leaving everything untouched, if any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<bool> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                axis: "parameters",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Ok(false);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, g) in grads[k].data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Validation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    /// Selection criterion: summed spectral loss over factors (`slim`) or the
    /// full routed objective (`dyn`), averaged over utterances.
    pub loss: f64,
    /// Mean SI-SDR per factor (`slim`) or of the routed output (`dyn`).
    pub si_sdr: Vec<f64>,
    /// Routed runs only: occurrence of each factor over all frames.
    pub occurrence: Option<Vec<f64>>,
    pub mean_utilization: Option<f64>,
    /// Routed runs only: mean spectral term.
    pub se: Option<f64>,
}

/// Scores `model` on `corpus` without noise and without side effects.
pub fn validate(model: &Demucs, corpus: &Corpus, stage: Stage, loss: &LossConfig) -> Result<Validation> {
    if corpus.is_empty() {
        return Err(Error::Data("validation corpus is empty".into()));
    }
    let n = corpus.len() as f64;
    let j = model.config.uset.len();
    match stage {
        Stage::Slim => {
            let mut total = 0.0;
            let mut sdr = vec![0.0; j];
            for u in &corpus.items {
                for (k, acc) in sdr.iter_mut().enumerate() {
                    let y = model.forward_static_index(&u.noisy, k)?;
                    total += spectral_loss_value(&u.clean, &y, loss)?;
                    *acc += si_sdr(&u.clean, &y)?;
                }
            }
            Ok(Validation {
                loss: total / n,
                si_sdr: sdr.iter().map(|v| v / n).collect(),
                occurrence: None,
                mean_utilization: None,
                se: None,
            })
        }
        Stage::Dyn => {
            let (mut se, mut sdr) = (0.0, 0.0);
            let mut decisions = Vec::new();
            for u in &corpus.items {
                let (y, trace) = model.forward_dynamic(&u.noisy)?;
                se += spectral_loss_value(&u.clean, &y, loss)?;
                sdr += si_sdr(&u.clean, &y)?;
                decisions.extend(trace.decisions);
            }
            let occ = router::occurrence(&decisions, j);
            let ufs = &model.config.uset;
            let total = se / n + loss.beta * eff_loss_value(&occ, ufs, loss.target)? + loss.gamma * bal_loss_value(&occ)?;
            let mean = occ.iter().zip(ufs.values()).map(|(o, u)| o * u).sum();
            Ok(Validation {
                loss: total,
                si_sdr: vec![sdr / n],
                occurrence: Some(occ),
                mean_utilization: Some(mean),
                se: Some(se / n),
            })
        }
    }
}

/// Per-epoch summary, also written to the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Training occurrence of each factor (`dyn` only).
    pub train_occurrence: Option<Vec<f64>>,
    pub val: Validation,
    pub skipped_steps: u64,
    pub seed: u64,
    pub seconds: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

impl EpochRecord {
    /// One `key=value` line.
    pub fn to_log_line(&self) -> String {
        let mut s = format!(
            "stage={} epoch={} step={} lr={:.6e} train_loss={:.6} val_loss={:.6} val_si_sdr={}",
            self.stage.name(),
            self.epoch,
            self.step,
            self.lr,
            self.train_loss,
            self.val.loss,
            join(&self.val.si_sdr)
        );
        if let Some(o) = &self.train_occurrence {
            s.push_str(&format!(" train_occ={}", join(o)));
        }
        if let Some(o) = &self.val.occurrence {
            s.push_str(&format!(" occ={}", join(o)));
        }
        if let Some(m) = self.val.mean_utilization {
            s.push_str(&format!(" mean_util={m:.6}"));
        }
        if let Some(se) = self.val.se {
            s.push_str(&format!(" val_se={se:.6}"));
        }
        s.push_str(&format!(" skipped={} seed={} seconds={:.1}", self.skipped_steps, self.seed, self.seconds));
        s
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub best_val: f64,
    /// Epochs since the best validation loss.
    pub bad_epochs: usize,
    pub seed: u64,
    pub adam: Adam,
    pub skipped_steps: u64,
    /// Static backbone forwards run so far.
    pub forward_passes: u64,
    pub history: Vec<EpochRecord>,
    pub best_params: Option<ParamStore>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(model: &Demucs, stage: Stage, cfg: &TrainConfig, seed: u64) -> Self {
        TrainState {
            stage,
            epoch: 0,
            step: 0,
            lr: cfg.lr,
            best_val: f64::INFINITY,
            bad_epochs: 0,
            seed,
            adam: Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps),
            skipped_steps: 0,
            forward_passes: 0,
            history: Vec::new(),
            best_params: None,
            stopped_early: false,
        }
    }

    /// Tracks the best validation loss; in stage `slim` the rate halves after
    /// every `plateau_epochs` epochs without improvement. Returns whether
    /// `loss` is a new best.
    pub fn record_validation(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        if loss < self.best_val {
            self.best_val = loss;
            self.bad_epochs = 0;
            return true;
        }
        self.bad_epochs += 1;
        if self.stage == Stage::Slim && self.bad_epochs % cfg.plateau_epochs == 0 {
            self.lr /= 2.0;
        }
        false
    }

    /// Model checkpoint extended with the optimizer state.
    pub fn to_checkpoint(&self, model: &Demucs) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        for (k, v) in [
            ("train.stage", self.stage.name().to_string()),
            ("train.epoch", self.epoch.to_string()),
            ("train.step", self.step.to_string()),
            ("train.lr", format!("{:e}", self.lr)),
            ("train.best_val", format!("{:e}", self.best_val)),
            ("train.bad_epochs", self.bad_epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.adam_t", self.adam.t.to_string()),
            ("train.adam_beta1", format!("{:e}", self.adam.beta1)),
            ("train.adam_beta2", format!("{:e}", self.adam.beta2)),
            ("train.adam_eps", format!("{:e}", self.adam.eps)),
            ("train.skipped_steps", self.skipped_steps.to_string()),
            ("train.forward_passes", self.forward_passes.to_string()),
        ] {
            ck.meta.insert(k.to_string(), v);
        }
        for (k, (_, name, _)) in model.params.iter().enumerate() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.m[k].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.v[k].clone()));
        }
        ck
    }

    /// Restores the model and optimizer from a checkpoint written by
    /// [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<(Demucs, Self)> {
        let model = Demucs::from_checkpoint(ck, dir)?;
        let stage: String = ck.parse(dir, "train.stage")?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, t) in model.params.iter() {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let moment = ck.tensor(&key).filter(|x| x.shape() == t.shape()).ok_or_else(|| Error::Checkpoint {
                    path: dir.to_path_buf(),
                    msg: format!("missing or misshapen optimizer tensor `{key}`"),
                })?;
                out.push(moment.clone());
            }
        }
        let state = TrainState {
            stage: stage.parse()?,
            epoch: ck.parse(dir, "train.epoch")?,
            step: ck.parse(dir, "train.step")?,
            lr: ck.parse(dir, "train.lr")?,
            best_val: ck.parse(dir, "train.best_val")?,
            bad_epochs: ck.parse(dir, "train.bad_epochs")?,
            seed: ck.parse(dir, "train.seed")?,
            adam: Adam {
                beta1: ck.parse(dir, "train.adam_beta1")?,
                beta2: ck.parse(dir, "train.adam_beta2")?,
                eps: ck.parse(dir, "train.adam_eps")?,
                m,
                v,
                t: ck.parse(dir, "train.adam_t")?,
            },
            skipped_steps: ck.parse(dir, "train.skipped_steps")?,
            forward_passes: ck.parse(dir, "train.forward_passes")?,
            history: Vec::new(),
            best_params: None,
            stopped_early: false,
        };
        Ok((model, state))
    }

    pub fn save(&self, model: &Demucs, dir: &Path) -> Result<()> {
        self.to_checkpoint(model).save(dir)
    }

    pub fn load(dir: &Path) -> Result<(Demucs, Self)> {
        TrainState::from_checkpoint(&Checkpoint::load(dir)?, dir)
    }
}

/// Inputs shared by both stages.
#[derive(Clone, Copy, Debug)]
pub struct Setup<'a> {
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub mixture: &'a MixtureSpec,
    /// Run directory for `last/`, `best/` and the log; nothing is written
    /// when `None`.
    pub out: Option<&'a Path>,
}

/// Stage-`dyn` learning rate for a zero-based epoch.
pub fn dyn_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let base = if cfg.router_pretrain_epochs > 0 && epoch >= cfg.router_pretrain_epochs {
        cfg.finetune_lr
    } else {
        cfg.lr
    };
    base * cfg.lr_decay.powi(epoch as i32)
}

/// Per-step loss and occurrence.
struct StepOutcome {
    loss: f64,
    occurrence: Option<Vec<f64>>,
}

fn batch_rows(batch: &Batch, b: usize) -> (Vec<f64>, Vec<f64>) {
    (Batch::row(&batch.noisy, b).to_vec(), Batch::row(&batch.clean, b).to_vec())
}

/// Stage-1 step: gradients of each crop's summed per-factor loss are
/// accumulated in batch order, averaged, clipped and applied once.
fn slim_step(model: &mut Demucs, batch: &Batch, state: &mut TrainState, setup: &Setup) -> Result<Option<StepOutcome>> {
    let cfg = &model.config;
    let j = cfg.uset.len();
    let t_pad = batch.noisy.dim(1);
    let widths: Vec<Widths> = (0..j).map(|k| Widths::constant(cfg, t_pad, k)).collect();
    let mut grads: Option<Vec<Tensor>> = None;
    let mut total = 0.0;
    for b in 0..batch.size() {
        let (x, s) = batch_rows(batch, b);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::signal(x));
        let sv = g.constant(Tensor::signal(s));
        let sv = g.slice_time(sv, 0, batch.samples)?;
        let mut outs = Vec::with_capacity(j);
        for w in &widths {
            let y = model.build(&mut g, xv, w)?;
            state.forward_passes += 1;
            outs.push(g.slice_time(y, 0, batch.samples)?);
        }
        let l = slim_loss(&mut g, sv, &outs, setup.loss, j)?;
        total += g.value(l).item();
        let gr = g.backward(l)?.for_params(&model.params);
        match grads.as_mut() {
            None => grads = Some(gr),
            Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = batch.size() as f64;
    let mut grads = grads.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
    apply(model, grads, state, setup)?;
    Ok(Some(StepOutcome {
        loss: total / n,
        occurrence: None,
    }))
}

/// Stage-2 step on one graph, since the occurrence couples the batch.
fn dyn_step(
    model: &mut Demucs,
    batch: &Batch,
    state: &mut TrainState,
    setup: &Setup,
    router_only: bool,
) -> Result<Option<StepOutcome>> {
    let cfg = &model.config;
    let j = cfg.uset.len();
    let t_pad = batch.noisy.dim(1);
    let widths: Vec<Widths> = (0..j).map(|k| Widths::constant(cfg, t_pad, k)).collect();
    let router = model.router()?;
    let t_star = router.frames(t_pad)?;
    let map = router::sample_to_router_frame(t_star, cfg.bottleneck_frames(t_pad), t_pad);
    let mut rng = router::noise_rng(state.seed ^ 0x5eed_0f_6a_b1e5, state.step);
    let mut g = Graph::new();
    let mut selections = Vec::with_capacity(batch.size());
    let mut se = None;
    for b in 0..batch.size() {
        let (x, s) = batch_rows(batch, b);
        let xv = g.constant(Tensor::signal(x));
        let sv = g.constant(Tensor::signal(s));
        let r = model.route(&mut g, xv)?;
        let sel = router::st_select(&mut g, r, SelectMode::Train, &mut rng)?;
        selections.push(sel);
        let gating = g.gather_time(sel, map.clone())?;
        let mut outs = Vec::with_capacity(j);
        for w in &widths {
            outs.push(model.build(&mut g, xv, w)?);
            state.forward_passes += 1;
        }
        let y = combine_outputs(&mut g, &outs, gating)?;
        let y = g.slice_time(y, 0, batch.samples)?;
        let sv = g.slice_time(sv, 0, batch.samples)?;
        let l = spectral_loss(&mut g, sv, y, setup.loss)?;
        se = Some(match se {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let se = g.scale(se.expect("non-empty batch"), 1.0 / batch.size() as f64);
    let occ = occurrence(&mut g, &selections)?;
    let terms = dynslim_loss(&mut g, se, occ, &cfg.uset, setup.loss)?;
    let loss = g.value(terms.total).item();
    let occ_value = g.value(occ).data().to_vec();
    let mut grads = g.backward(terms.total)?.for_params(&model.params);
    if router_only {
        for ((_, name, _), gr) in model.params.iter().zip(grads.iter_mut()) {
            if !name.starts_with("router.") {
                gr.data_mut().fill(0.0);
            }
        }
    }
    apply(model, grads, state, setup)?;
    Ok(Some(StepOutcome {
        loss,
        occurrence: Some(occ_value),
    }))
}

fn apply(model: &mut Demucs, mut grads: Vec<Tensor>, state: &mut TrainState, setup: &Setup) -> Result<()> {
    clip_global_norm(&mut grads, setup.train.clip_norm);
    if !state.adam.step(&mut model.params, &grads, state.lr)? {
        state.skipped_steps += 1;
    }
    state.step += 1;
    Ok(())
}

/// Runs a step, turning numerical failures into a skipped step.
fn guarded(
    step: impl FnOnce(&mut TrainState) -> Result<Option<StepOutcome>>,
    state: &mut TrainState,
) -> Result<Option<StepOutcome>> {
    match step(state) {
        Err(e) if e.is_numerical() => {
            state.skipped_steps += 1;
            state.step += 1;
            Ok(None)
        }
        other => other,
    }
}

fn append_log(out: Option<&Path>, line: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Trains `model` for one stage, resuming from `state` when given.
///
/// `on_epoch` sees every epoch record as it is produced. At the end the model
/// holds the parameters with the best validation loss.
pub fn train(
    model: &mut Demucs,
    stage: Stage,
    train_set: &Corpus,
    val_set: &Corpus,
    setup: &Setup,
    state: Option<TrainState>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainState> {
    setup.train.validate()?;
    setup.loss.validate()?;
    setup.mixture.validate()?;
    match stage {
        Stage::Slim if model.router.is_some() => {
            return Err(Error::Config("stage slim trains a backbone without a router".into()))
        }
        Stage::Dyn if model.router.is_none() => {
            return Err(Error::Config("stage dyn needs a model with a router".into()))
        }
        _ => {}
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation corpora must be non-empty".into()));
    }
    let mut state = match state {
        Some(s) if s.stage != stage => {
            return Err(Error::Config(format!("cannot resume a {} run as {}", s.stage.name(), stage.name())))
        }
        Some(s) => s,
        None => TrainState::new(model, stage, setup.train, seed),
    };
    let cfg = setup.train;
    while state.epoch < cfg.epochs && state.bad_epochs < cfg.patience {
        let started = std::time::Instant::now();
        let epoch = state.epoch;
        let router_only = stage == Stage::Dyn && epoch < cfg.router_pretrain_epochs;
        if stage == Stage::Dyn {
            state.lr = dyn_lr(cfg, epoch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(epoch as u64);
        let vl = |t: usize| model.valid_length(t);
        let batches = batch_segments(train_set, setup.mixture, cfg.batch_size, vl, &mut rng)?;
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        let mut occ_sum = vec![0.0; model.config.uset.len()];
        for batch in &batches {
            let outcome = match stage {
                Stage::Slim => guarded(|s| slim_step(model, batch, s, setup), &mut state)?,
                Stage::Dyn => guarded(|s| dyn_step(model, batch, s, setup, router_only), &mut state)?,
            };
            if let Some(o) = outcome {
                loss_sum += o.loss;
                counted += 1;
                if let Some(occ) = o.occurrence {
                    occ_sum.iter_mut().zip(occ).for_each(|(a, b)| *a += b);
                }
            }
        }
        let val = match validate(model, val_set, stage, setup.loss) {
            Ok(v) if v.loss.is_finite() => v,
            Ok(v) => return diverged(model, &state, setup, epoch, format!("validation loss {}", v.loss)),
            Err(e) if e.is_numerical() => return diverged(model, &state, setup, epoch, e.to_string()),
            Err(e) => return Err(e),
        };
        state.epoch += 1;
        if state.record_validation(val.loss, cfg) {
            state.best_params = Some(model.params.clone());
            if let Some(dir) = setup.out {
                model.save(&dir.join(BEST_DIR))?;
            }
        }
        let record = EpochRecord {
            stage,
            epoch: state.epoch,
            step: state.step,
            lr: state.lr,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            train_occurrence: (stage == Stage::Dyn && counted > 0)
                .then(|| occ_sum.iter().map(|v| v / counted as f64).collect()),
            val,
            skipped_steps: state.skipped_steps,
            seed: state.seed,
            seconds: started.elapsed().as_secs_f64(),
        };
        append_log(setup.out, &record.to_log_line())?;
        on_epoch(&record);
        state.history.push(record);
        if let Some(dir) = setup.out {
            state.save(model, &dir.join(LAST_DIR))?;
        }
    }
    state.stopped_early = state.bad_epochs >= cfg.patience;
    if let Some(best) = &state.best_params {
        model.params = best.clone();
    }
    Ok(state)
}

fn diverged(model: &Demucs, state: &TrainState, setup: &Setup, epoch: usize, msg: String) -> Result<TrainState> {
    if let Some(dir) = setup.out {
        state.save(model, &dir.join("diverged"))?;
        append_log(setup.out, &format!("stage={} epoch={} diverged=\"{msg}\"", state.stage.name(), epoch + 1))?;
    }
    Err(Error::Diverged { epoch: epoch + 1, msg })
}

/// Stage 1 on a router-free backbone.
pub fn stage1_train(
    model: &mut Demucs,
    train_set: &Corpus,
    val_set: &Corpus,
    setup: &Setup,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainState> {
    train(model, Stage::Slim, train_set, val_set, setup, None, seed, on_epoch)
}

/// Stage 2: implants a fresh router into a stage-1 backbone and trains both.
pub fn stage2_train(
    model: &mut Demucs,
    train_set: &Corpus,
    val_set: &Corpus,
    setup: &Setup,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainState> {
    model.implant_router(seed);
    train(model, Stage::Dyn, train_set, val_set, setup, None, seed, on_epoch)
}
