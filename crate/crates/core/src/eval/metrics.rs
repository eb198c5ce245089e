use std::collections::HashMap;

use crate::error::{Error, Result};

/// Recorded in every report header.
pub const BLEU_VARIANT: &str =
    "corpus BLEU-4, token-level, clipped counts, add-one smoothing on zero match counts, closest-length brevity penalty";

fn check(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Matched and total n-gram counts for n = 1..=4, plus hypothesis and
/// reference lengths, summed over the corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Self> {
        check(hyps, refs)?;
        let mut s = BleuStats::default();
        for (h, r) in hyps.iter().zip(refs) {
            s.hyp_len += h.len();
            s.ref_len += r.len();
            for n in 1..=4 {
                let hc = ngram_counts(h, n);
                let rc = ngram_counts(r, n);
                s.totals[n - 1] += h.len().saturating_sub(n - 1);
                s.matches[n - 1] += hc
                    .iter()
                    .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                    .sum::<usize>();
            }
        }
        Ok(s)
    }

    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let bp = self.brevity_penalty();
        if bp == 0.0 {
            return 0.0;
        }
        let log_mean = (1..=4).map(|n| self.precision(n).ln()).sum::<f64>() / 4.0;
        (100.0 * bp * log_mean.exp()).min(100.0)
    }
}

/// Corpus BLEU-4 in [0, 100].
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    Ok(BleuStats::collect(hyps, refs)?.score())
}

/// Position-aligned matches over total reference tokens.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check(hyps, refs)?;
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Invalid("references contain no tokens".into()));
    }
    let hit: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hit as f64 / total as f64)
}

/// Like [`token_accuracy`] but counting only reference positions whose token
/// satisfies `keep`.
pub fn filtered_token_accuracy(
    hyps: &[Vec<usize>],
    refs: &[Vec<usize>],
    keep: impl Fn(usize) -> bool,
) -> Result<f64> {
    check(hyps, refs)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        for (p, &t) in r.iter().enumerate() {
            if keep(t) {
                total += 1;
                hit += usize::from(h.get(p) == Some(&t));
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hit as f64 / total as f64)
}

pub fn exact_match(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check(hyps, refs)?;
    let hit = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hit as f64 / hyps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<usize> {
        s.split_whitespace().map(|w| w.as_bytes()[0] as usize).collect()
    }

    #[test]
    fn identical_corpus_is_exactly_100() {
        let c = vec![toks("a b c d e"), toks("f g h i")];
        assert_eq!(corpus_bleu(&c, &c).unwrap(), 100.0);
        assert_eq!(token_accuracy(&c, &c).unwrap(), 1.0);
        assert_eq!(exact_match(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn one_substitution_at_the_end() {
        let h = vec![toks("a b c d e f")];
        let r = vec![toks("a b c d e g")];
        let s = BleuStats::collect(&h, &r).unwrap();
        assert_eq!(s.matches, [5, 4, 3, 2]);
        assert_eq!(s.totals, [6, 5, 4, 3]);
        assert_eq!(s.brevity_penalty(), 1.0);
        // the precision product is exactly 1/3
        let want = 100.0 * (1.0f64 / 3.0).powf(0.25);
        assert!((s.score() - want).abs() < 1e-12);
        assert!((s.score() - 75.98356856515925).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpus_scores_below_one() {
        let h: Vec<Vec<usize>> = (0..100).map(|i| vec![1000 + i, 2000 + i, 3000 + i, 4000 + i]).collect();
        let r: Vec<Vec<usize>> = (0..100).map(|i| vec![i, 5000 + i, 6000 + i, 7000 + i]).collect();
        let b = corpus_bleu(&h, &r).unwrap();
        assert!(b > 0.0 && b < 1.0, "{b}");
        assert_eq!(token_accuracy(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("a b c d e f g h")];
        let s = BleuStats::collect(&h, &r).unwrap();
        assert!((s.brevity_penalty() - (-1.0f64).exp()).abs() < 1e-15);
        let empty = BleuStats::collect(&[vec![]], &r).unwrap();
        assert_eq!(empty.score(), 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let s = BleuStats::collect(&[toks("a a a a")], &[toks("a b c d")]).unwrap();
        assert_eq!(s.matches[0], 1);
    }

    #[test]
    fn token_accuracy_examples() {
        assert_eq!(token_accuracy(&[toks("a b")], &[toks("a c")]).unwrap(), 0.5);
        assert_eq!(token_accuracy(&[toks("a")], &[toks("a c")]).unwrap(), 0.5);
        assert!(token_accuracy(&[], &[]).is_err());
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn bleu_is_bounded_and_order_free(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0usize..6, 0..8), proptest::collection::vec(0usize..6, 1..8)),
                1..12),
            rot in 0usize..12,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let b = corpus_bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            let k = rot % pairs.len();
            let mut hp = h.clone();
            let mut rp = r.clone();
            hp.rotate_left(k);
            rp.rotate_left(k);
            prop_assert_eq!(corpus_bleu(&hp, &rp).unwrap(), b);
        }
    }
}
