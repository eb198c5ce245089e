//! Quantile binning of importance scores and plug-in mutual information
//! between a neuron's score bin and the domain label.

use log::warn;

use crate::error::{Error, Result};
use crate::importance::Shard;

/// Per-neuron quantile thresholds. A score `x` falls in bin `k`, the number
/// of thresholds `<= x`, so bins are half-open `[e_{k-1}, e_k)` and tied
/// scores always share a bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    pub bins: usize,
    pub edges: Vec<Vec<f64>>,
    /// Smallest and largest pooled score per neuron.
    pub support: Vec<(f64, f64)>,
}

impl BinEdges {
    pub fn neurons(&self) -> usize {
        self.edges.len()
    }

    pub fn effective_bins(&self, neuron: usize) -> usize {
        self.edges[neuron].len() + 1
    }

    /// Neurons whose pooled scores are all identical.
    pub fn single_bin(&self, neuron: usize) -> bool {
        self.edges[neuron].is_empty()
    }

    pub fn bin(&self, neuron: usize, x: f64) -> usize {
        self.edges[neuron].partition_point(|&e| e <= x)
    }
}

/// Equal-frequency thresholds for one sorted column. The threshold between
/// ranks `q-1` and `q` sits strictly above the lower score, so the assignment
/// depends only on ranks.
pub fn quantile_edges(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(bins.saturating_sub(1));
    if n == 0 {
        return edges;
    }
    for k in 1..bins {
        let q = k * n / bins;
        if q == 0 || q >= n {
            continue;
        }
        let (a, b) = (sorted[q - 1], sorted[q]);
        let mut e = a + (b - a) / 2.0;
        if e <= a {
            e = b;
        }
        if e > sorted[0] && edges.last().map_or(true, |&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

fn check_shards(shards: &[&Shard]) -> Result<usize> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Invalid("no importance shards given".into()))?;
    if let Some(s) = shards.iter().find(|s| s.neurons != first.neurons) {
        return Err(Error::shape(
            "importance shards",
            format!("{} neurons vs {}", s.neurons, first.neurons),
        ));
    }
    Ok(first.neurons)
}

/// First pass: quantile edges over each neuron's scores pooled across every
/// shard.
pub fn compute_bin_edges(shards: &[&Shard], bins: usize) -> Result<BinEdges> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let neurons = check_shards(shards)?;
    let total: usize = shards.iter().map(|s| s.samples).sum();
    if total == 0 {
        return Err(Error::Invalid("importance shards hold no samples".into()));
    }
    let mut edges = Vec::with_capacity(neurons);
    let mut support = Vec::with_capacity(neurons);
    let mut col = Vec::with_capacity(total);
    for j in 0..neurons {
        col.clear();
        for s in shards {
            col.extend(s.column(j));
        }
        col.sort_by(f64::total_cmp);
        edges.push(quantile_edges(&col, bins));
        support.push((col[0], col[total - 1]));
    }
    Ok(BinEdges {
        bins,
        edges,
        support,
    })
}

/// Counts `n[i][d]` of (score bin, domain) per neuron, stored bin-major.
/// Domains are kept in ascending id order whatever order the shards come in.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    pub domains: Vec<u64>,
    pub domain_totals: Vec<u64>,
    pub total: u64,
    pub counts: Vec<u64>,
    /// Scores that fell outside the support the edges were computed on.
    pub clamped: u64,
}

impl JointHistogram {
    pub fn neurons(&self) -> usize {
        self.counts.len() / (self.bins * self.domains.len()).max(1)
    }

    pub fn table(&self, neuron: usize) -> &[u64] {
        let w = self.bins * self.domains.len();
        &self.counts[neuron * w..(neuron + 1) * w]
    }
}

/// Second pass: tallies every score of every shard into its neuron's table.
pub fn accumulate_joint(shards: &[&Shard], edges: &BinEdges) -> Result<JointHistogram> {
    let neurons = check_shards(shards)?;
    if neurons != edges.neurons() {
        return Err(Error::shape(
            "accumulate_joint",
            format!("edges cover {} neurons, shards {neurons}", edges.neurons()),
        ));
    }
    let mut domains: Vec<u64> = shards.iter().map(|s| s.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let nd = domains.len();
    let b = edges.bins;
    let mut counts = vec![0u64; neurons * b * nd];
    let mut domain_totals = vec![0u64; nd];
    let mut clamped = 0u64;
    for s in shards {
        let d = domains.binary_search(&s.domain).expect("domain collected above");
        domain_totals[d] += s.samples as u64;
        for row in 0..s.samples {
            let scores = s.row(row);
            for (j, &x) in scores.iter().enumerate() {
                let (lo, hi) = edges.support[j];
                if x < lo || x > hi {
                    clamped += 1;
                }
                let i = edges.bin(j, x);
                counts[(j * b + i) * nd + d] += 1;
            }
        }
    }
    if clamped > 0 {
        warn!("{clamped} scores fell outside the binned support and were clamped");
    }
    Ok(JointHistogram {
        bins: b,
        domains,
        total: domain_totals.iter().sum(),
        domain_totals,
        counts,
        clamped,
    })
}

/// Per-domain partial MI `sum_i p(i,d) ln(p(i,d) / (p(i) p(d)))` of one
/// bin-major `bins x domains` count table, in nats.
pub fn partial_mi(counts: &[u64], domains: usize) -> Vec<f64> {
    let bins = counts.len() / domains;
    let n: u64 = counts.iter().sum();
    let mut out = vec![0.0; domains];
    if n == 0 {
        return out;
    }
    let nf = n as f64;
    let col: Vec<u64> = (0..domains)
        .map(|d| (0..bins).map(|i| counts[i * domains + d]).sum())
        .collect();
    for i in 0..bins {
        let row = &counts[i * domains..(i + 1) * domains];
        let ni: u64 = row.iter().sum();
        for d in 0..domains {
            let nid = row[d];
            if nid == 0 {
                continue;
            }
            let ratio = (nid as f64 * nf) / (ni as f64 * col[d] as f64);
            out[d] += nid as f64 / nf * ratio.ln();
        }
    }
    out
}

/// `H(I) + H(d) - H(I,d)` over the same table.
pub fn entropy_mi(counts: &[u64], domains: usize) -> f64 {
    let bins = counts.len() / domains;
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let h = |c: &mut dyn Iterator<Item = u64>| -> f64 {
        c.filter(|&x| x > 0)
            .map(|x| {
                let p = x as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let hi = h(&mut (0..bins).map(|i| counts[i * domains..(i + 1) * domains].iter().sum()));
    let hd = h(&mut (0..domains).map(|d| (0..bins).map(|i| counts[i * domains + d]).sum()));
    let hid = h(&mut counts.iter().copied());
    hi + hd - hid
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiScores {
    pub domains: Vec<u64>,
    /// `partials[neuron][domain]`.
    pub partials: Vec<Vec<f64>>,
    pub total: Vec<f64>,
    /// Minimum partial over domains.
    pub consensus: Vec<f64>,
    pub effective_bins: Vec<usize>,
}

impl MiScores {
    pub fn neurons(&self) -> usize {
        self.total.len()
    }
}

pub fn mutual_information(hist: &JointHistogram) -> Result<MiScores> {
    if hist.total == 0 || hist.domains.is_empty() {
        return Err(Error::Invalid("joint histogram is empty".into()));
    }
    let nd = hist.domains.len();
    let n = hist.neurons();
    let mut out = MiScores {
        domains: hist.domains.clone(),
        partials: Vec::with_capacity(n),
        total: Vec::with_capacity(n),
        consensus: Vec::with_capacity(n),
        effective_bins: Vec::with_capacity(n),
    };
    for j in 0..n {
        let t = hist.table(j);
        let used = (0..hist.bins)
            .filter(|&i| t[i * nd..(i + 1) * nd].iter().any(|&c| c > 0))
            .count();
        let p = if used <= 1 { vec![0.0; nd] } else { partial_mi(t, nd) };
        out.total.push(p.iter().sum());
        out.consensus.push(p.iter().copied().fold(f64::INFINITY, f64::min));
        out.partials.push(p);
        out.effective_bins.push(used);
    }
    Ok(out)
}
