use std::ops::Range;

use super::{FfnModule, Graph, NeuronId, NeuronSpace};
use crate::error::Result;
use crate::tensor::Tape;

/// Every FFN neuron's output over one sequence.
///
/// `raw` holds per-position values (row = position, column = flat neuron
/// index). `mean` averages over the configured positions, which for a
/// supervised sequence are its target positions.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    space: NeuronSpace,
    positions: usize,
    raw: Vec<f64>,
    mean: Vec<f64>,
}

impl ActivationTrace {
    pub(crate) fn from_graph(
        space: NeuronSpace,
        tape: &Tape<'_>,
        graph: &Graph,
        rows: Range<usize>,
        averaged: Range<usize>,
    ) -> Result<Self> {
        let n = space.len();
        let positions = rows.len();
        let mut raw = vec![0.0; positions * n];
        for l in 0..space.n_layers {
            for m in FfnModule::ALL {
                let node = tape.value(graph.neuron_node(l, m)?);
                let width = space.width(m);
                let range = space.range(l, m);
                for (p, r) in rows.clone().enumerate() {
                    let src = &node.data()[r * width..(r + 1) * width];
                    raw[p * n + range.start..p * n + range.end].copy_from_slice(src);
                }
            }
        }
        let mut mean = vec![0.0; n];
        if !averaged.is_empty() {
            for p in averaged.clone() {
                for (m, v) in mean.iter_mut().zip(&raw[p * n..(p + 1) * n]) {
                    *m += v;
                }
            }
            let k = averaged.len() as f64;
            for m in &mut mean {
                *m /= k;
            }
        }
        Ok(Self {
            space,
            positions,
            raw,
            mean,
        })
    }

    pub fn space(&self) -> NeuronSpace {
        self.space
    }

    /// Number of neurons covered.
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn value(&self, id: NeuronId) -> f64 {
        self.mean[self.space.flat(id)]
    }

    pub fn raw(&self, pos: usize, id: NeuronId) -> f64 {
        self.raw[pos * self.space.len() + self.space.flat(id)]
    }

    pub fn position(&self, pos: usize) -> &[f64] {
        let n = self.space.len();
        &self.raw[pos * n..(pos + 1) * n]
    }
}
