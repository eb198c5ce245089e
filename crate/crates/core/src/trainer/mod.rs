//! Column-masked fine-tuning of FFN neurons.
//!
//! A selected neuron owns the fan-in column of its projection matrix plus its
//! bias entry. Everything else stays frozen: the gradient is masked before the
//! optimizer, and the optimizer's delta is masked again after it.

mod mask;

pub use mask::SelectionMask;

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_csv_with_header;
use crate::model::{
    FfnModule, ForwardOptions, LossWeighting, Model, PackedBatch, ParamKind, Sequence,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to 10% of the peak.
    WarmupCosine { warmup: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Global L2 clip on the (masked) gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Zero frozen entries of the gradient before the optimizer. The delta is
    /// masked either way.
    pub mask_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1500,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            mask_gradients: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.weight_decay != 0.0 {
            return fail(format!("weight_decay must be 0, got {}", self.weight_decay));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("learning rate {} is invalid", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return fail("adam_eps must be positive and grad_clip non-negative".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::WarmupCosine { warmup } => {
                if step < warmup {
                    return self.lr * (step + 1) as f64 / warmup as f64;
                }
                let span = self.steps.saturating_sub(warmup).max(1) as f64;
                let p = ((step - warmup) as f64 / span).min(1.0);
                self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
        }
    }
}

/// Adam moments (or nothing, for SGD), one buffer per trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub skipped: bool,
}

/// Thirds of the layer stack: `lower < round(n/3) <= middle < round(2n/3) <= higher`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub n_layers: usize,
    pub lower_end: usize,
    pub middle_end: usize,
}

pub const GROUP_NAMES: [&str; 3] = ["lower", "middle", "higher"];

impl LayerGroups {
    pub fn thirds(n_layers: usize) -> Self {
        let r = |x: f64| x.round() as usize;
        Self {
            n_layers,
            lower_end: r(n_layers as f64 / 3.0),
            middle_end: r(2.0 * n_layers as f64 / 3.0),
        }
    }

    pub fn group(&self, layer: usize) -> usize {
        if layer < self.lower_end {
            0
        } else if layer < self.middle_end {
            1
        } else {
            2
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub masked_param_count: u64,
    pub mean_abs_delta_lower_gate: f64,
    pub mean_abs_delta_lower_up: f64,
    pub mean_abs_delta_lower_down: f64,
    pub mean_abs_delta_middle_gate: f64,
    pub mean_abs_delta_middle_up: f64,
    pub mean_abs_delta_middle_down: f64,
    pub mean_abs_delta_higher_gate: f64,
    pub mean_abs_delta_higher_up: f64,
    pub mean_abs_delta_higher_down: f64,
}

pub const TRAIN_LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub skipped_steps: u64,
}

impl TrainLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_csv_with_header(
            path,
            &[("schema_version".into(), TRAIN_LOG_SCHEMA_VERSION.to_string())],
            &self.rows,
        )
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Mean |W - W0| over every entry of each FFN weight matrix, grouped by
/// layer third and module: `out[group][module]`.
pub fn mean_abs_ffn_delta(initial: &Model, current: &Model) -> Result<[[f64; 3]; 3]> {
    if initial.config() != current.config() {
        return Err(Error::shape("mean_abs_ffn_delta", "models differ in shape"));
    }
    let groups = LayerGroups::thirds(initial.config().n_layers);
    let mut sum = [[0.0; 3]; 3];
    let mut count = [[0usize; 3]; 3];
    for l in 0..initial.config().n_layers {
        let g = groups.group(l);
        for (mi, m) in FfnModule::ALL.into_iter().enumerate() {
            let a = initial.ffn_weight(l, m).data();
            let b = current.ffn_weight(l, m).data();
            sum[g][mi] += a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>();
            count[g][mi] += a.len();
        }
    }
    let mut out = [[0.0; 3]; 3];
    for g in 0..3 {
        for m in 0..3 {
            if count[g][m] > 0 {
                out[g][m] = sum[g][m] / count[g][m] as f64;
            }
        }
    }
    Ok(out)
}

/// Loss and parameter gradients of one packed batch. Only parameters flagged
/// in `trainable` get a gradient.
pub fn batch_gradients(
    model: &Model,
    batch: &PackedBatch,
    trainable: &[bool],
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        trainable: Some(trainable),
        ..Default::default()
    };
    let g = model.build(&mut tape, batch, &opts)?;
    let loss = tape.weighted_cross_entropy(g.logits, &batch.targets, &batch.weights)?;
    tape.backward(loss)?;
    let loss = tape.value(loss).data()[0];
    let grads = g
        .params
        .iter()
        .zip(trainable)
        .map(|(&n, &t)| {
            if t {
                Some(tape.grad(n).map_or_else(
                    || vec![0.0; tape.value(n).len()],
                    <[f64]>::to_vec,
                ))
            } else {
                None
            }
        })
        .collect();
    Ok((loss, grads))
}

fn ffn_trainable(model: &Model) -> Vec<bool> {
    model.params().iter().map(|p| p.kind.is_ffn()).collect()
}

/// Entry-level mask for parameter `i`: `None` means the parameter is frozen,
/// otherwise the selected output columns.
fn column_mask<'m>(model: &Model, mask: &'m SelectionMask, i: usize) -> Option<&'m [bool]> {
    match model.params()[i].kind {
        ParamKind::FfnWeight { layer, module } | ParamKind::FfnBias { layer, module } => {
            Some(mask.columns(layer, module))
        }
        _ => None,
    }
}

fn clip(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v *= s;
            }
        }
    }
}

fn all_finite(grads: &[Option<Vec<f64>>]) -> bool {
    grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Optimizer delta for one entry. Shared by the masked and reference paths so
/// both perform the same arithmetic.
#[inline]
fn entry_delta(cfg: &TrainConfig, lr: f64, t: u64, m: &mut f64, v: &mut f64, g: f64) -> f64 {
    match cfg.optimizer {
        OptimizerKind::Sgd => -lr * g,
        OptimizerKind::Adam => {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / (1.0 - cfg.beta1.powi(t as i32));
            let vhat = *v / (1.0 - cfg.beta2.powi(t as i32));
            -lr * mhat / (vhat.sqrt() + cfg.adam_eps)
        }
    }
}

fn moments<'s>(
    state: &'s mut OptimizerState,
    i: usize,
    len: usize,
) -> (&'s mut Vec<f64>, &'s mut Vec<f64>) {
    let m = state.m[i].get_or_insert_with(|| vec![0.0; len]);
    let v = state.v[i].get_or_insert_with(|| vec![0.0; len]);
    (m, v)
}

/// One masked optimizer step. Parameters outside the mask, including every
/// non-FFN parameter, are never written.
pub fn masked_update(
    model: &mut Model,
    batch: &PackedBatch,
    mask: &SelectionMask,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    mask.check_model(model)?;
    let trainable: Vec<bool> = (0..model.params().len())
        .map(|i| column_mask(model, mask, i).is_some_and(|c| c.iter().any(|&s| s)))
        .collect();
    let (loss, mut grads) = match batch_gradients(model, batch, &trainable) {
        Ok(r) => r,
        Err(Error::NonFinite { op }) => {
            warn!("non-finite value in {op}; step skipped");
            return Ok(StepOutcome {
                loss: f64::NAN,
                skipped: true,
            });
        }
        Err(e) => return Err(e),
    };
    if cfg.mask_gradients {
        for (i, g) in grads.iter_mut().enumerate() {
            let (Some(g), Some(cols)) = (g.as_mut(), column_mask(model, mask, i)) else {
                continue;
            };
            let w = cols.len();
            for (k, v) in g.iter_mut().enumerate() {
                if !cols[k % w] {
                    *v = 0.0;
                }
            }
        }
    }
    if !loss.is_finite() || !all_finite(&grads) {
        warn!("non-finite loss or gradient at step {}; step skipped", state.t + 1);
        return Ok(StepOutcome {
            loss,
            skipped: true,
        });
    }
    clip(&mut grads, cfg.grad_clip);
    state.t += 1;
    let lr = cfg.lr_at(model.step());
    let t = state.t;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let cols = column_mask(model, mask, i).expect("trainable implies FFN").to_vec();
        let w = cols.len();
        let (m, v) = moments(state, i, g.len());
        let data = model.params_mut()[i].tensor.data_mut();
        for k in 0..g.len() {
            let delta = entry_delta(cfg, lr, t, &mut m[k], &mut v[k], g[k]);
            if cols[k % w] {
                data[k] += delta;
            }
        }
    }
    model.set_step(model.step() + 1);
    Ok(StepOutcome {
        loss,
        skipped: false,
    })
}

/// Plain optimizer step over every parameter flagged in `trainable`; no mask
/// logic at all.
pub fn reference_update(
    model: &mut Model,
    batch: &PackedBatch,
    trainable: &[bool],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let (loss, mut grads) = batch_gradients(model, batch, trainable)?;
    if !loss.is_finite() || !all_finite(&grads) {
        warn!("non-finite loss or gradient at step {}; step skipped", state.t + 1);
        return Ok(StepOutcome {
            loss,
            skipped: true,
        });
    }
    clip(&mut grads, cfg.grad_clip);
    state.t += 1;
    let lr = cfg.lr_at(model.step());
    let t = state.t;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = moments(state, i, g.len());
        let data = model.params_mut()[i].tensor.data_mut();
        for k in 0..g.len() {
            data[k] += entry_delta(cfg, lr, t, &mut m[k], &mut v[k], g[k]);
        }
    }
    model.set_step(model.step() + 1);
    Ok(StepOutcome {
        loss,
        skipped: false,
    })
}

/// Draws batches uniformly over domains, cycling through a fresh shuffle of
/// each domain's examples.
pub struct DomainMixer<'d> {
    domains: &'d [Vec<Sequence>],
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl<'d> DomainMixer<'d> {
    pub fn new(domains: &'d [Vec<Sequence>]) -> Result<Self> {
        if domains.is_empty() || domains.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("training data has an empty domain".into()));
        }
        Ok(Self {
            orders: domains.iter().map(|d| (0..d.len()).collect()).collect(),
            cursors: vec![usize::MAX; domains.len()],
            domains,
        })
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng, size: usize) -> Vec<&'d Sequence> {
        (0..size)
            .map(|_| {
                let d = rng.gen_range(0..self.domains.len());
                if self.cursors[d] >= self.orders[d].len() {
                    self.orders[d].shuffle(rng);
                    self.cursors[d] = 0;
                }
                let idx = self.orders[d][self.cursors[d]];
                self.cursors[d] += 1;
                &self.domains[d][idx]
            })
            .collect()
    }
}

/// Which parameters a training run may change.
#[derive(Debug, Clone)]
pub enum TrainScope<'s> {
    Masked(&'s SelectionMask),
    /// No mask; every flagged parameter trains.
    Reference(&'s [bool]),
}

/// Runs `cfg.steps` updates over domain-mixed batches. The model's RNG is
/// reseeded from `cfg.seed` and drives batch sampling.
pub fn train(
    model: &mut Model,
    domains: &[Vec<Sequence>],
    scope: TrainScope<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut mixer = DomainMixer::new(domains)?;
    let initial = model.clone();
    let mut state = OptimizerState::new(model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masked_param_count = match &scope {
        TrainScope::Masked(mask) => mask.entry_count(),
        TrainScope::Reference(t) => model
            .params()
            .iter()
            .zip(t.iter())
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.tensor.len() as u64)
            .sum(),
    };
    let mut log = TrainLog::default();
    for _ in 0..cfg.steps {
        let seqs = mixer.next_batch(&mut rng, cfg.batch_size);
        let batch = PackedBatch::new(&seqs, LossWeighting::MeanOfSequences)?;
        let lr = cfg.lr_at(model.step());
        let out = match &scope {
            TrainScope::Masked(mask) => masked_update(model, &batch, mask, &mut state, cfg)?,
            TrainScope::Reference(t) => reference_update(model, &batch, t, &mut state, cfg)?,
        };
        if out.skipped {
            log.skipped_steps += 1;
        }
        if (log.rows.len() + 1) % 100 == 0 {
            info!("step {} loss {:.4}", log.rows.len() + 1, out.loss);
        }
        let d = mean_abs_ffn_delta(&initial, model)?;
        log.rows.push(TrainLogRow {
            step: log.rows.len() as u64 + 1,
            loss: out.loss,
            lr,
            masked_param_count,
            mean_abs_delta_lower_gate: d[0][0],
            mean_abs_delta_lower_up: d[0][1],
            mean_abs_delta_lower_down: d[0][2],
            mean_abs_delta_middle_gate: d[1][0],
            mean_abs_delta_middle_up: d[1][1],
            mean_abs_delta_middle_down: d[1][2],
            mean_abs_delta_higher_gate: d[2][0],
            mean_abs_delta_higher_up: d[2][1],
            mean_abs_delta_higher_down: d[2][2],
        });
    }
    model.set_rng(rng);
    Ok(log)
}

/// Masked fine-tuning of the selected neurons.
pub fn finetune(
    model: &mut Model,
    domains: &[Vec<Sequence>],
    mask: &SelectionMask,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train(model, domains, TrainScope::Masked(mask), cfg)
}

/// Unmasked training of every FFN parameter.
pub fn finetune_ffn_reference(
    model: &mut Model,
    domains: &[Vec<Sequence>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let t = ffn_trainable(model);
    train(model, domains, TrainScope::Reference(&t), cfg)
}

/// Unmasked training of every parameter (base pretraining, "Full" baseline).
pub fn train_full(model: &mut Model, domains: &[Vec<Sequence>], cfg: &TrainConfig) -> Result<TrainLog> {
    let t = vec![true; model.params().len()];
    train(model, domains, TrainScope::Reference(&t), cfg)
}

#[cfg(test)]
mod tests;
