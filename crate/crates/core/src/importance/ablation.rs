//! Loss changes from clamping or scaling single neurons, and the agreement
//! between those changes and the gradient-activation scores.

use serde::{Deserialize, Serialize};

use super::attribute_batch;
use crate::error::{Error, Result};
use crate::model::{
    FfnModule, ForwardOptions, Intervention, LossWeighting, Model, NeuronId, PackedBatch, Sequence,
};
use crate::stats::{slope, spearman};
use crate::tensor::{log_sum_exp, Tape, Tensor};

/// Perturbed residual streams evaluated per packed tail pass.
const TAIL_CHUNK: usize = 24;

/// `|L(h = 0) - L(h)|` via a full forward pass with the neuron's output
/// clamped to zero at every position. The model is not modified.
pub fn ablation_delta_loss(model: &Model, seq: &Sequence, neuron: NeuronId) -> Result<f64> {
    model.space().check(neuron)?;
    let base = model.sequence_loss(seq)?;
    let ablated = model.sequence_loss_with(
        seq,
        &[Intervention {
            neuron,
            factor: 0.0,
        }],
    )?;
    Ok((ablated - base).abs())
}

/// Cached forward pass of one sequence. A neuron's contribution to the
/// residual stream after its layer is known in closed form, so scaling that
/// neuron only needs the remaining layers to be recomputed.
pub struct AblationCache<'m> {
    model: &'m Model,
    seq: Sequence,
    rows: usize,
    resid_out: Vec<Tensor>,
    product: Vec<Tensor>,
    down: Vec<Tensor>,
    base: Vec<f64>,
}

impl<'m> AblationCache<'m> {
    pub fn new(model: &'m Model, seq: &Sequence) -> Result<Self> {
        if seq.target_len() == 0 {
            return Err(Error::Invalid("sequence has an empty target".into()));
        }
        let batch = PackedBatch::new(&[seq], LossWeighting::SumOfSequences)?;
        let mut tape = Tape::new();
        let g = model.build(&mut tape, &batch, &ForwardOptions::default())?;
        let n_layers = model.config().n_layers;
        let mut cache = Self {
            model,
            seq: seq.clone(),
            rows: seq.len(),
            resid_out: Vec::with_capacity(n_layers),
            product: Vec::with_capacity(n_layers),
            down: Vec::with_capacity(n_layers),
            base: Vec::with_capacity(n_layers),
        };
        for l in 0..n_layers {
            let nodes = g.layer(l)?;
            cache.resid_out.push(tape.value(nodes.resid_out).clone());
            cache.product.push(tape.value(nodes.product).clone());
            cache.down.push(tape.value(nodes.down).clone());
        }
        drop(tape);
        for l in 0..n_layers {
            let r = cache.resid_out[l].clone();
            cache.base.push(cache.tail_losses(l + 1, vec![r])?[0]);
        }
        Ok(cache)
    }

    /// Loss of the unperturbed sequence, recomputed from the layer after `layer`.
    pub fn base_loss(&self, layer: usize) -> f64 {
        self.base[layer]
    }

    /// Change in the residual stream after the neuron's layer when its output
    /// is scaled by `1 - eps`.
    fn residual_delta(&self, id: NeuronId, eps: f64) -> Vec<f64> {
        let c = self.model.config();
        let d = c.d_model;
        let mut delta = vec![0.0; self.rows * d];
        match id.module {
            FfnModule::Gate | FfnModule::Up => {
                let f = c.d_ffn;
                let p = self.product[id.layer].data();
                let wd = self.model.ffn_weight(id.layer, FfnModule::Down).data();
                let wrow = &wd[id.index * d..(id.index + 1) * d];
                for r in 0..self.rows {
                    let s = -eps * p[r * f + id.index];
                    for k in 0..d {
                        delta[r * d + k] = s * wrow[k];
                    }
                }
            }
            FfnModule::Down => {
                let dn = self.down[id.layer].data();
                for r in 0..self.rows {
                    delta[r * d + id.index] = -eps * dn[r * d + id.index];
                }
            }
        }
        delta
    }

    fn perturbed(&self, id: NeuronId, eps: f64) -> Tensor {
        let mut t = self.resid_out[id.layer].clone();
        for (v, dv) in t.data_mut().iter_mut().zip(self.residual_delta(id, eps)) {
            *v += dv;
        }
        t
    }

    /// Per-copy sequence losses when the residual stream entering `start` is
    /// replaced by each of `residuals`.
    fn tail_losses(&self, start: usize, residuals: Vec<Tensor>) -> Result<Vec<f64>> {
        let k = residuals.len();
        let copies: Vec<&Sequence> = vec![&self.seq; k];
        let batch = PackedBatch::new(&copies, LossWeighting::SumOfSequences)?;
        let d = self.model.config().d_model;
        let mut stacked = Vec::with_capacity(k * self.rows * d);
        for r in residuals {
            stacked.extend_from_slice(r.data());
        }
        let stacked = Tensor::new(vec![k * self.rows, d], stacked)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            start: Some((start, &stacked)),
            ..Default::default()
        };
        let g = self.model.build(&mut tape, &batch, &opts)?;
        let logits = tape.value(g.logits);
        Ok(batch
            .segments
            .iter()
            .map(|seg| {
                (seg.start..seg.start + seg.len)
                    .filter(|&r| batch.weights[r] != 0.0)
                    .map(|r| {
                        let row = logits.row(r);
                        batch.weights[r] * (log_sum_exp(row) - row[batch.targets[r]])
                    })
                    .sum()
            })
            .collect())
    }

    /// Losses with each neuron's output scaled by `1 - eps`, all neurons from
    /// the same layer.
    pub fn scaled_losses(&self, ids: &[NeuronId], eps: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            let layer = ids[i].layer;
            let mut j = i;
            while j < ids.len() && ids[j].layer == layer && j - i < TAIL_CHUNK {
                j += 1;
            }
            let res: Vec<Tensor> = ids[i..j].iter().map(|&id| self.perturbed(id, eps)).collect();
            out.extend(self.tail_losses(layer + 1, res)?);
            i = j;
        }
        Ok(out)
    }

    /// `|L(h = 0) - L(h)|` for every neuron, flat order.
    pub fn exhaustive(&self) -> Result<Vec<f64>> {
        let space = self.model.space();
        let mut out = vec![0.0; space.len()];
        for l in 0..space.n_layers {
            // gate and up neurons with the same index zero the same product
            let ids: Vec<NeuronId> = (0..space.d_ffn)
                .map(|j| NeuronId::new(l, FfnModule::Gate, j))
                .chain((0..space.d_model).map(|j| NeuronId::new(l, FfnModule::Down, j)))
                .collect();
            let losses = self.scaled_losses(&ids, 1.0)?;
            for (id, loss) in ids.iter().zip(losses) {
                let dl = (loss - self.base[l]).abs();
                out[space.flat(*id)] = dl;
                if id.module == FfnModule::Gate {
                    out[space.flat(NeuronId::new(l, FfnModule::Up, id.index))] = dl;
                }
            }
        }
        Ok(out)
    }
}

/// Exhaustive single-neuron ablation of every FFN neuron on one sequence.
pub fn exhaustive_ablation(model: &Model, seq: &Sequence) -> Result<Vec<f64>> {
    AblationCache::new(model, seq)?.exhaustive()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalResult {
    pub neuron: NeuronId,
    /// Mean over samples of `|L(h(1-eps)) - L(h) + eps * h . dL/dh|`, one per eps.
    pub residuals: Vec<f64>,
    /// Fitted log-log slope; `None` when some residual is exactly zero.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub eps_schedule: Vec<f64>,
    pub directional: Vec<DirectionalResult>,
    /// Fraction of neurons whose fitted order is at least 1.9 (neurons with
    /// exactly zero residuals count as passing).
    pub order_pass_fraction: f64,
    /// Spearman rho between |h . dL/dh| and |dL| over all neurons, per sample.
    pub per_sample_rho: Vec<f64>,
    pub mean_per_sample_rho: f64,
    /// Spearman rho between sample-mean importance and sample-mean |dL|.
    pub aggregate_rho: f64,
}

pub const ORDER_THRESHOLD: f64 = 1.9;

/// Directional first-order check on `neurons` plus the full-ablation rank
/// agreement over every neuron, on each sample of `seqs`. Pass an empty
/// `neurons` to skip the directional part, or `ablation = false` to skip the
/// exhaustive part.
pub fn taylor_agreement(
    model: &Model,
    seqs: &[Sequence],
    neurons: &[NeuronId],
    eps_schedule: &[f64],
    ablation: bool,
) -> Result<AgreementReport> {
    if seqs.is_empty() {
        return Err(Error::Invalid("no samples for the agreement check".into()));
    }
    if eps_schedule.len() < 2
        || eps_schedule.iter().any(|&e| !(e > 0.0 && e < 1.0))
        || eps_schedule.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::Invalid(
            "eps schedule must hold at least two strictly decreasing values in (0, 1)".into(),
        ));
    }
    let space = model.space();
    for &id in neurons {
        space.check(id)?;
    }
    let mut order: Vec<usize> = (0..neurons.len()).collect();
    order.sort_by_key(|&i| neurons[i]);
    let sorted: Vec<NeuronId> = order.iter().map(|&i| neurons[i]).collect();

    let mut residual_sum = vec![vec![0.0; eps_schedule.len()]; neurons.len()];
    let mut per_sample_rho = Vec::new();
    let mut mean_imp = vec![0.0; space.len()];
    let mut mean_dl = vec![0.0; space.len()];
    for seq in seqs {
        let signed = attribute_batch(model, &[seq])?.signed.swap_remove(0);
        let cache = AblationCache::new(model, seq)?;
        for (e, &eps) in eps_schedule.iter().enumerate() {
            let losses = cache.scaled_losses(&sorted, eps)?;
            for (k, (&id, loss)) in sorted.iter().zip(losses).enumerate() {
                let a = signed[space.flat(id)];
                let r = (loss - cache.base_loss(id.layer) + eps * a).abs();
                residual_sum[order[k]][e] += r;
            }
        }
        if ablation {
            let dl = cache.exhaustive()?;
            let imp: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
            per_sample_rho.push(spearman(&imp, &dl));
            for i in 0..space.len() {
                mean_imp[i] += imp[i];
                mean_dl[i] += dl[i];
            }
        }
    }
    let n = seqs.len() as f64;
    let log_eps: Vec<f64> = eps_schedule.iter().map(|e| e.ln()).collect();
    let directional: Vec<DirectionalResult> = neurons
        .iter()
        .zip(residual_sum)
        .map(|(&neuron, sums)| {
            let residuals: Vec<f64> = sums.iter().map(|s| s / n).collect();
            let order = if residuals.iter().all(|&r| r > 0.0) {
                let ly: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
                Some(slope(&log_eps, &ly))
            } else {
                None
            };
            DirectionalResult {
                neuron,
                residuals,
                order,
            }
        })
        .collect();
    let passing = directional
        .iter()
        .filter(|d| d.order.map_or(true, |o| o >= ORDER_THRESHOLD))
        .count();
    let order_pass_fraction = if directional.is_empty() {
        1.0
    } else {
        passing as f64 / directional.len() as f64
    };
    let (mean_per_sample_rho, aggregate_rho) = if ablation {
        (
            per_sample_rho.iter().sum::<f64>() / per_sample_rho.len() as f64,
            spearman(&mean_imp, &mean_dl),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(AgreementReport {
        eps_schedule: eps_schedule.to_vec(),
        directional,
        order_pass_fraction,
        per_sample_rho,
        mean_per_sample_rho,
        aggregate_rho,
    })
}
