//! Central finite-difference checks of the tape's backward rules on small
//! random graphs that exercise every op.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NodeId, Segment, Tape, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
struct GraphSpec {
    ids: Vec<usize>,
    targets: Vec<usize>,
    ce_weights: Vec<f64>,
    segments: Vec<Segment>,
    heads: usize,
    blocks: usize,
    col_factors: Vec<f64>,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub entries: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub floor: f64,
}

fn randn(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn random_case(seed: u64) -> (GraphSpec, Vec<Tensor>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let heads = r.gen_range(1..=2);
    let d = heads * r.gen_range(2..=3);
    let f = r.gen_range(2..=5);
    let v = r.gen_range(3..=6);
    let blocks = r.gen_range(1..=2);
    let mut segments = Vec::new();
    let mut n = 0;
    for _ in 0..r.gen_range(1..=3) {
        let len = r.gen_range(1..=3);
        segments.push(Segment { start: n, len });
        n += len;
    }
    let spec = GraphSpec {
        ids: (0..n).map(|_| r.gen_range(0..v)).collect(),
        targets: (0..n).map(|_| r.gen_range(0..v)).collect(),
        ce_weights: (0..n)
            .map(|_| if r.gen_bool(0.3) { 0.0 } else { r.gen_range(0.1..1.0) })
            .collect(),
        segments,
        heads,
        blocks,
        col_factors: (0..f).map(|_| r.gen_range(-1.5..1.5)).collect(),
        scale: r.gen_range(0.5..1.5),
    };
    let mut leaves = vec![randn(&mut r, vec![v, d], 1.0), randn(&mut r, vec![d, v], 0.8)];
    for _ in 0..blocks {
        leaves.push(randn(&mut r, vec![d], 1.0));
        for _ in 0..3 {
            leaves.push(randn(&mut r, vec![d, d], 0.8));
        }
        leaves.push(randn(&mut r, vec![d, f], 0.8));
        leaves.push(randn(&mut r, vec![f], 0.5));
        leaves.push(randn(&mut r, vec![d, f], 0.8));
        leaves.push(randn(&mut r, vec![f, d], 0.8));
    }
    (spec, leaves)
}

fn build<'a>(tape: &mut Tape<'a>, spec: &GraphSpec, leaves: &'a [Tensor]) -> Result<(NodeId, Vec<NodeId>)> {
    let p: Vec<NodeId> = leaves.iter().map(|t| tape.param(t, true)).collect();
    let mut x = tape.embedding(p[0], &spec.ids)?;
    let mut hidden = None;
    for b in 0..spec.blocks {
        let w = &p[2 + b * 8..2 + (b + 1) * 8];
        let n = tape.rmsnorm(x, w[0], 1e-6)?;
        let q = tape.matmul(n, w[1])?;
        let k = tape.matmul(n, w[2])?;
        let v = tape.matmul(n, w[3])?;
        let a = tape.causal_attention(q, k, v, spec.heads, &spec.segments)?;
        x = tape.add(x, a)?;
        let g = tape.matmul(x, w[4])?;
        let g = tape.add_row(g, w[5])?;
        let g = tape.silu(g)?;
        let u = tape.matmul(x, w[6])?;
        let h = tape.mul(g, u)?;
        let h = tape.scale_columns(h, spec.col_factors.clone())?;
        hidden = Some(h);
        let o = tape.matmul(h, w[7])?;
        let o = tape.scale(o, spec.scale)?;
        x = tape.add(x, o)?;
    }
    let logits = tape.matmul(x, p[1])?;
    let mask: Vec<bool> = spec.ce_weights.iter().map(|w| *w != 0.0).collect();
    let ce = if mask.iter().any(|m| *m) {
        tape.softmax_cross_entropy(logits, &spec.targets, &mask)?
    } else {
        tape.sum(logits)?
    };
    let wce = tape.weighted_cross_entropy(logits, &spec.targets, &spec.ce_weights)?;
    let h = hidden.expect("at least one block");
    let hh = tape.mul(h, h)?;
    let reg = tape.sum(hh)?;
    let reg = tape.scale(reg, 0.05)?;
    let loss = tape.add(ce, wce)?;
    Ok((tape.add(loss, reg)?, p))
}

fn loss_at(spec: &GraphSpec, leaves: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let (root, _) = build(&mut tape, spec, leaves)?;
    Ok(tape.value(root).data()[0])
}

/// Compares every gradient entry of the graph drawn from `seed` against a
/// central difference with step [`FD_STEP`].
pub fn check_random_graph(seed: u64, floor: f64) -> Result<GradcheckReport> {
    let (spec, mut leaves) = random_case(seed);
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (root, params) = build(&mut tape, &spec, &leaves)?;
        tape.backward(root)?;
        (0..leaves.len())
            .map(|i| {
                tape.grad(params[i])
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; leaves[i].len()])
            })
            .collect()
    };
    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for i in 0..leaves.len() {
        for j in 0..leaves[i].len() {
            let orig = leaves[i].data()[j];
            leaves[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&spec, &leaves)?;
            leaves[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&spec, &leaves)?;
            leaves[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(GradcheckReport {
        seed,
        entries,
        max_rel_error: max_rel,
        floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_match_finite_differences() {
        for seed in 0..10 {
            let r = check_random_graph(seed, 1e-2).unwrap();
            assert!(r.entries > 50);
            assert!(r.max_rel_error < 1e-6, "seed {seed}: {}", r.max_rel_error);
        }
    }
}
