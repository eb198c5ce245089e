use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::model::{LossWeighting, Model, PackedBatch, Sequence};

/// How many prompts share one packed forward pass.
pub const DECODE_CHUNK: usize = 32;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of each prompt until EOS (not included) or `max_new`
/// tokens. Lowest token id wins ties.
pub fn greedy_decode(model: &Model, prompts: &[Vec<usize>], max_new: usize) -> Result<Vec<Vec<usize>>> {
    let limit = model.config().max_seq_len;
    for p in prompts {
        if p.is_empty() || p.len() > limit {
            return Err(Error::Invalid(format!(
                "prompt of {} tokens does not fit context {limit}",
                p.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(DECODE_CHUNK) {
        let mut seqs: Vec<Vec<usize>> = chunk.to_vec();
        let mut done = vec![max_new == 0; chunk.len()];
        let mut produced = vec![0usize; chunk.len()];
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..chunk.len()).filter(|&i| !done[i]).collect();
            let wrapped: Vec<Sequence> = active
                .iter()
                .map(|&i| Sequence::prompt_only(seqs[i].clone()))
                .collect();
            let refs: Vec<&Sequence> = wrapped.iter().collect();
            let batch = PackedBatch::new(&refs, LossWeighting::SumOfSequences)?;
            let logits = model.logits(&batch)?;
            for (seg, &i) in batch.segments.iter().zip(&active) {
                let next = argmax(logits.row(seg.start + seg.len - 1));
                produced[i] += 1;
                if next == EOS {
                    done[i] = true;
                    continue;
                }
                seqs[i].push(next);
                if produced[i] >= max_new || seqs[i].len() >= limit {
                    done[i] = true;
                }
            }
        }
        for (s, p) in seqs.into_iter().zip(chunk) {
            out.push(s[p.len()..].to_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn deterministic_and_budgeted() {
        let m = Model::new(tiny_config()).unwrap();
        let prompts = vec![vec![1, 4, 5], vec![1, 6], vec![1, 7, 8, 9]];
        let a = greedy_decode(&m, &prompts, 5).unwrap();
        let b = greedy_decode(&m, &prompts, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.len() <= 5));
        let none = greedy_decode(&m, &prompts, 0).unwrap();
        assert!(none.iter().all(Vec::is_empty));
    }

    #[test]
    fn batched_equals_one_at_a_time() {
        let m = Model::new(tiny_config()).unwrap();
        let prompts = vec![vec![1, 4, 5], vec![1, 6], vec![1, 7, 8, 9]];
        let together = greedy_decode(&m, &prompts, 6).unwrap();
        for (p, t) in prompts.iter().zip(&together) {
            assert_eq!(&greedy_decode(&m, std::slice::from_ref(p), 6).unwrap()[0], t);
        }
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }
}
