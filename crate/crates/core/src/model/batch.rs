use crate::error::{Error, Result};
use crate::tensor::Segment;

/// A token sequence whose tail, starting at `target_start`, is supervised.
///
/// Position `p` predicts token `p + 1`, so the supervised (loss) positions are
/// `target_start - 1 ..= len - 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub target_start: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<usize>, target_start: usize) -> Result<Self> {
        if target_start == 0 || target_start >= tokens.len() {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens has no target after position {target_start}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            target_start,
        })
    }

    /// Unsupervised sequence (used for plain forward passes).
    pub fn prompt_only(tokens: Vec<usize>) -> Self {
        let target_start = tokens.len();
        Self {
            tokens,
            target_start,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised_positions(&self) -> std::ops::Range<usize> {
        if self.target_start >= self.tokens.len() {
            return 0..0;
        }
        self.target_start - 1..self.tokens.len() - 1
    }

    pub fn target_len(&self) -> usize {
        self.supervised_positions().len()
    }
}

/// How per-position losses of a packed batch are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWeighting {
    /// Mean over sequences of each sequence's mean target loss.
    MeanOfSequences,
    /// Sum over sequences of each sequence's mean target loss, so the
    /// gradient at any row equals the gradient of its own sequence's loss.
    SumOfSequences,
}

/// Several sequences concatenated row-wise; attention never crosses segments.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PackedBatch {
    pub fn new(seqs: &[&Sequence], weighting: LossWeighting) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut b = PackedBatch {
            tokens: Vec::with_capacity(total),
            positions: Vec::with_capacity(total),
            segments: Vec::with_capacity(seqs.len()),
            targets: Vec::with_capacity(total),
            weights: Vec::with_capacity(total),
        };
        let scale = match weighting {
            LossWeighting::MeanOfSequences => 1.0 / seqs.len() as f64,
            LossWeighting::SumOfSequences => 1.0,
        };
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Invalid("empty sequence in batch".into()));
            }
            b.segments.push(Segment {
                start: b.tokens.len(),
                len: s.len(),
            });
            let sup = s.supervised_positions();
            let w = if sup.is_empty() {
                0.0
            } else {
                scale / sup.len() as f64
            };
            for (p, &t) in s.tokens.iter().enumerate() {
                b.tokens.push(t);
                b.positions.push(p);
                if sup.contains(&p) {
                    b.targets.push(s.tokens[p + 1]);
                    b.weights.push(w);
                } else {
                    b.targets.push(0);
                    b.weights.push(0.0);
                }
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}
