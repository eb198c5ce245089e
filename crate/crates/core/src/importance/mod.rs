//! Gradient-activation neuron importance.
//!
//! For a neuron with output `h_t` at position `t` and sequence loss `L`, the
//! per-sample score is `|sum_t h_t * dL/dh_t|`: the first-order estimate of
//! the loss change when the neuron is clamped to zero at every position.

mod ablation;
mod shard;

pub use ablation::{
    ablation_delta_loss, exhaustive_ablation, taylor_agreement, AblationCache, AgreementReport,
    DirectionalResult, ORDER_THRESHOLD,
};
pub use shard::{read_shard, write_shard, write_summary_csv, Shard};

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FfnModule, ForwardOptions, LossWeighting, Model, NeuronSpace, PackedBatch, Sequence};
use crate::tensor::Tape;

/// Sequences scored per packed forward/backward pass.
pub const SCORE_BATCH: usize = 16;

/// Per-sample scores over the whole neuron space, flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRecord {
    pub sample_id: u64,
    pub domain: u64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSummary {
    pub domain: u64,
    pub mean: Vec<f64>,
    pub count: u64,
}

/// Per-neuron counts of positions with a positive output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub domain: u64,
    pub positions: u64,
    pub positive: Vec<u64>,
}

impl ActivationStats {
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.positions.max(1) as f64;
        self.positive.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Signed `sum_t h_t * dL/dh_t` for every sequence of a batch, computed in one
/// packed pass with backward hooks on every FFN neuron output.
#[derive(Debug, Clone)]
pub struct BatchAttribution {
    pub signed: Vec<Vec<f64>>,
    pub positive: Vec<u64>,
    pub positions: u64,
}

pub fn attribute_batch(model: &Model, seqs: &[&Sequence]) -> Result<BatchAttribution> {
    let space = model.space();
    if let Some(s) = seqs.iter().find(|s| s.target_len() == 0) {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens has no target to score",
            s.len()
        )));
    }
    let batch = PackedBatch::new(seqs, LossWeighting::SumOfSequences)?;
    let rows = batch.rows();
    let n = space.len();
    let signed = Rc::new(RefCell::new(vec![vec![0.0; n]; seqs.len()]));
    let positive = Rc::new(RefCell::new(vec![0u64; n]));
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        watch_input: true,
        ..Default::default()
    };
    let graph = model.build(&mut tape, &batch, &opts)?;
    let segments = batch.segments.clone();
    for l in 0..space.n_layers {
        for m in FfnModule::ALL {
            let node = graph.neuron_node(l, m)?;
            let range = space.range(l, m);
            let width = range.len();
            let signed = Rc::clone(&signed);
            let positive = Rc::clone(&positive);
            let segments = segments.clone();
            tape.register_hook(node, move |ev| {
                let h = ev.activation.data();
                let mut signed = signed.borrow_mut();
                let mut positive = positive.borrow_mut();
                for (s, seg) in segments.iter().enumerate() {
                    let acc = &mut signed[s][range.clone()];
                    for r in seg.start..seg.start + seg.len {
                        let hr = &h[r * width..(r + 1) * width];
                        let gr = &ev.grad[r * width..(r + 1) * width];
                        for c in 0..width {
                            acc[c] += hr[c] * gr[c];
                        }
                    }
                }
                let pos = &mut positive[range.clone()];
                for r in 0..h.len() / width {
                    for c in 0..width {
                        if h[r * width + c] > 0.0 {
                            pos[c] += 1;
                        }
                    }
                }
            });
        }
    }
    let loss = tape.weighted_cross_entropy(graph.logits, &batch.targets, &batch.weights)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite { op: "sequence loss" });
    }
    tape.backward(loss)?;
    drop(tape);
    let signed = Rc::try_unwrap(signed).expect("hooks dropped").into_inner();
    let positive = Rc::try_unwrap(positive).expect("hooks dropped").into_inner();
    Ok(BatchAttribution {
        signed,
        positive,
        positions: rows as u64,
    })
}

/// `|h . dL/dh|` for every neuron on one sequence.
pub fn per_sample_importance(model: &Model, seq: &Sequence) -> Result<Vec<f64>> {
    let a = attribute_batch(model, &[seq])?;
    Ok(a.signed[0].iter().map(|v| v.abs()).collect())
}

/// Scores every sequence of one domain in packed batches.
pub fn score_domain(
    model: &Model,
    seqs: &[Sequence],
    domain: u64,
) -> Result<(Vec<ImportanceRecord>, ActivationStats)> {
    let n = model.space().len();
    let mut records = Vec::with_capacity(seqs.len());
    let mut stats = ActivationStats {
        domain,
        positions: 0,
        positive: vec![0; n],
    };
    for (c, chunk) in seqs.chunks(SCORE_BATCH).enumerate() {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let a = attribute_batch(model, &refs)?;
        for (k, s) in a.signed.into_iter().enumerate() {
            records.push(ImportanceRecord {
                sample_id: (c * SCORE_BATCH + k) as u64,
                domain,
                scores: s.into_iter().map(f64::abs).collect(),
            });
        }
        stats.positions += a.positions;
        for (t, p) in stats.positive.iter_mut().zip(&a.positive) {
            *t += p;
        }
    }
    Ok((records, stats))
}

/// Streaming mean in sample-id order.
#[derive(Debug, Clone)]
pub struct SummaryAccumulator {
    domain: u64,
    sum: Vec<f64>,
    count: u64,
}

impl SummaryAccumulator {
    pub fn new(domain: u64, neurons: usize) -> Self {
        Self {
            domain,
            sum: vec![0.0; neurons],
            count: 0,
        }
    }

    pub fn push(&mut self, domain: u64, scores: &[f64]) -> Result<()> {
        if domain != self.domain {
            return Err(Error::Invalid(format!(
                "record from domain {domain} in a summary of domain {}",
                self.domain
            )));
        }
        if scores.len() != self.sum.len() {
            return Err(Error::shape("importance summary", "record length differs"));
        }
        for (s, v) in self.sum.iter_mut().zip(scores) {
            *s += v;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ImportanceSummary> {
        if self.count == 0 {
            return Err(Error::Invalid("no records to aggregate".into()));
        }
        let n = self.count as f64;
        Ok(ImportanceSummary {
            domain: self.domain,
            mean: self.sum.into_iter().map(|s| s / n).collect(),
            count: self.count,
        })
    }
}

/// Per-neuron arithmetic mean of one domain's records. Records are summed in
/// sample-id order, so the result does not depend on input order.
pub fn aggregate_importance(records: &[ImportanceRecord]) -> Result<ImportanceSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Invalid("no records to aggregate".into()))?;
    let mut order: Vec<&ImportanceRecord> = records.iter().collect();
    order.sort_by_key(|r| r.sample_id);
    let mut acc = SummaryAccumulator::new(first.domain, first.scores.len());
    for r in order {
        acc.push(r.domain, &r.scores)?;
    }
    acc.finish()
}

/// Checks that a score vector covers the neuron space with finite,
/// non-negative values.
pub fn validate_scores(space: NeuronSpace, scores: &[f64]) -> Result<()> {
    if scores.len() != space.len() {
        return Err(Error::shape(
            "importance",
            format!("{} scores for {} neurons", scores.len(), space.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid(format!(
            "score {} for neuron {} is not a finite non-negative number",
            scores[i],
            space.id(i)
        )));
    }
    Ok(())
}
