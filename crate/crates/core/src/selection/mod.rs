//! Neuron selection: the task-relevant pool, consensus ranking by minimum
//! per-domain partial MI, and the baseline selectors.

mod mi;

pub use mi::{
    accumulate_joint, compute_bin_edges, entropy_mi, mutual_information, partial_mi,
    quantile_edges, BinEdges, JointHistogram, MiScores,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ActivationStats, ImportanceSummary};
use crate::io::{read_json, write_csv_records, write_json};
use crate::model::{FfnModule, NeuronId, NeuronSpace};
use crate::stats::average_ranks;

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Caneft,
    Rcn,
    ImportanceOnly,
    NoMdmtn,
    Lape,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Caneft,
        Strategy::Rcn,
        Strategy::ImportanceOnly,
        Strategy::NoMdmtn,
        Strategy::Lape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Caneft => "caneft",
            Strategy::Rcn => "rcn",
            Strategy::ImportanceOnly => "importance_only",
            Strategy::NoMdmtn => "no_mdmtn",
            Strategy::Lape => "lape",
        }
    }

    pub fn needs_mi(self) -> bool {
        matches!(self, Strategy::Caneft | Strategy::NoMdmtn)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub budget_ratio: f64,
    pub pool_ratio: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            budget_ratio: 0.01,
            pool_ratio: 0.10,
            bins: 16,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("budget_ratio", self.budget_ratio), ("pool_ratio", self.pool_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {r}")));
            }
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be at least 2, got {}", self.bins)));
        }
        Ok(())
    }
}

/// `round(ratio * n)`; a zero budget is an error.
pub fn budget_size(ratio: f64, n: usize) -> Result<usize> {
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "ratio {ratio} of {n} neurons gives a budget of {k}"
        )));
    }
    Ok(k)
}

/// Flat indices ordered by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_summaries(space: NeuronSpace, summaries: &[ImportanceSummary]) -> Result<()> {
    if summaries.is_empty() {
        return Err(Error::Invalid("no domain importance summaries given".into()));
    }
    if let Some(s) = summaries.iter().find(|s| s.mean.len() != space.len()) {
        return Err(Error::shape(
            "importance summary",
            format!("domain {} has {} scores for {} neurons", s.domain, s.mean.len(), space.len()),
        ));
    }
    Ok(())
}

/// Mean over domains of each neuron's mean importance.
pub fn cross_domain_importance(summaries: &[ImportanceSummary]) -> Vec<f64> {
    let n = summaries.first().map_or(0, |s| s.mean.len());
    let k = summaries.len() as f64;
    (0..n)
        .map(|j| summaries.iter().map(|s| s.mean[j]).sum::<f64>() / k)
        .collect()
}

/// The task-relevant pool: the top `round(pool_ratio * N)` neurons by
/// cross-domain importance, returned in flat order.
pub fn select_task_relevant(
    space: NeuronSpace,
    summaries: &[ImportanceSummary],
    pool_ratio: f64,
) -> Result<Vec<usize>> {
    check_summaries(space, summaries)?;
    let k = budget_size(pool_ratio, space.len())?;
    let mut pool = rank_descending(&cross_domain_importance(summaries));
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedNeuron {
    pub layer: usize,
    pub module: FfnModule,
    pub index: usize,
    pub consensus_score: Option<f64>,
    /// The score the strategy ranked by; absent for random selection.
    pub score: Option<f64>,
}

impl SelectedNeuron {
    pub fn id(&self) -> NeuronId {
        NeuronId::new(self.layer, self.module, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub layer: usize,
    pub module: FfnModule,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub budget_ratio: f64,
    pub pool_ratio: Option<f64>,
    #[serde(rename = "B")]
    pub bins: Option<usize>,
    pub effective_gamma: Option<f64>,
    pub seed: u64,
    pub neuron_space: NeuronSpace,
    pub task_pool: Vec<PoolEntry>,
    /// Chosen neurons in rank order.
    pub neurons: Vec<SelectedNeuron>,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<NeuronId> {
        self.neurons.iter().map(SelectedNeuron::id).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        if r.schema_version != SELECTION_SCHEMA_VERSION {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: format!("unsupported selection schema version {}", r.schema_version),
            });
        }
        for n in &r.neurons {
            r.neuron_space.check(n.id())?;
        }
        Ok(r)
    }
}

/// Everything a selector may consume. `mi` and `activation` are only needed
/// by the strategies that use them.
#[derive(Debug, Clone, Copy)]
pub struct SelectionInputs<'a> {
    pub space: NeuronSpace,
    pub summaries: &'a [ImportanceSummary],
    pub mi: Option<&'a MiScores>,
    pub activation: &'a [ActivationStats],
}

/// Top `budget` of `pool` by consensus score. The effective gamma is the
/// consensus score of the last neuron admitted.
pub fn select_consensus(
    mi: &MiScores,
    pool: &[usize],
    budget: usize,
) -> Result<(Vec<usize>, f64)> {
    if budget > pool.len() {
        return Err(Error::Config(format!(
            "budget of {budget} neurons exceeds the task-relevant pool of {}; raise pool_ratio",
            pool.len()
        )));
    }
    if budget == 0 {
        return Err(Error::Config("budget selects no neurons".into()));
    }
    if let Some(&j) = pool.iter().find(|&&j| j >= mi.neurons()) {
        return Err(Error::shape("select_consensus", format!("pool neuron {j} has no MI score")));
    }
    let mut order = pool.to_vec();
    order.sort_by(|&a, &b| mi.consensus[b].total_cmp(&mi.consensus[a]).then(a.cmp(&b)));
    order.truncate(budget);
    let gamma = mi.consensus[*order.last().expect("budget is positive")];
    Ok((order, gamma))
}

/// Entropy of each neuron's firing probabilities normalised across domains.
/// Neurons that never fire get `+inf`.
pub fn activation_entropy(stats: &[ActivationStats]) -> Result<Vec<f64>> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Invalid("lape needs per-domain activation statistics".into()))?;
    let n = first.positive.len();
    if stats.iter().any(|s| s.positive.len() != n) {
        return Err(Error::shape("activation stats", "domains cover different neuron counts"));
    }
    let freqs: Vec<Vec<f64>> = stats.iter().map(ActivationStats::frequencies).collect();
    Ok((0..n)
        .map(|j| {
            let total: f64 = freqs.iter().map(|f| f[j]).sum();
            if total <= 0.0 {
                return f64::INFINITY;
            }
            -freqs
                .iter()
                .map(|f| f[j] / total)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect())
}

fn entry(space: NeuronSpace, j: usize) -> PoolEntry {
    let id = space.id(j);
    PoolEntry {
        layer: id.layer,
        module: id.module,
        index: id.index,
    }
}

fn require_mi<'a>(inputs: &SelectionInputs<'a>) -> Result<&'a MiScores> {
    let mi = inputs
        .mi
        .ok_or_else(|| Error::Invalid("this strategy needs mutual-information scores".into()))?;
    if mi.neurons() != inputs.space.len() {
        return Err(Error::shape(
            "mi scores",
            format!("{} neurons vs {}", mi.neurons(), inputs.space.len()),
        ));
    }
    Ok(mi)
}

/// Runs one strategy at the configured budget.
pub fn select(
    strategy: Strategy,
    inputs: &SelectionInputs<'_>,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    let space = inputs.space;
    let n = space.len();
    let budget = budget_size(cfg.budget_ratio, n)?;
    let mut pool: Vec<usize> = Vec::new();
    let mut gamma = None;
    let (chosen, scores): (Vec<usize>, Option<Vec<f64>>) = match strategy {
        Strategy::Caneft | Strategy::NoMdmtn => {
            let mi = require_mi(inputs)?;
            pool = if strategy == Strategy::Caneft {
                select_task_relevant(space, inputs.summaries, cfg.pool_ratio)?
            } else {
                (0..n).collect()
            };
            let (c, g) = select_consensus(mi, &pool, budget)?;
            gamma = Some(g);
            (c, Some(mi.consensus.clone()))
        }
        Strategy::ImportanceOnly => {
            check_summaries(space, inputs.summaries)?;
            let imp = cross_domain_importance(inputs.summaries);
            let mut order = rank_descending(&imp);
            order.truncate(budget);
            (order, Some(imp))
        }
        Strategy::Rcn => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut c = index::sample(&mut rng, n, budget).into_vec();
            c.sort_unstable();
            (c, None)
        }
        Strategy::Lape => {
            let h = activation_entropy(inputs.activation)?;
            if h.len() != n {
                return Err(Error::shape("activation stats", format!("{} neurons vs {n}", h.len())));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
            order.truncate(budget);
            (order, Some(h))
        }
    };
    let neurons = chosen
        .iter()
        .map(|&j| {
            let id = space.id(j);
            SelectedNeuron {
                layer: id.layer,
                module: id.module,
                index: id.index,
                consensus_score: inputs
                    .mi
                    .filter(|m| m.neurons() == n)
                    .map(|m| m.consensus[j]),
                score: scores.as_ref().map(|s| s[j]).filter(|v| v.is_finite()),
            }
        })
        .collect();
    Ok(SelectionResult {
        schema_version: SELECTION_SCHEMA_VERSION,
        strategy,
        budget_ratio: cfg.budget_ratio,
        pool_ratio: (strategy == Strategy::Caneft).then_some(cfg.pool_ratio),
        bins: strategy.needs_mi().then_some(cfg.bins),
        effective_gamma: gamma,
        seed: cfg.seed,
        neuron_space: space,
        task_pool: pool.iter().map(|&j| entry(space, j)).collect(),
        neurons,
    })
}

/// One row per neuron: per-domain partials, total, consensus, both rank
/// orders (1 = best) and pool membership.
pub fn write_mi_report(
    path: &Path,
    space: NeuronSpace,
    mi: &MiScores,
    domain_names: &[String],
    pool: &[usize],
    comments: &[(String, String)],
) -> Result<()> {
    if domain_names.len() != mi.domains.len() || mi.neurons() != space.len() {
        return Err(Error::shape("mi report", "names, scores and neuron space disagree"));
    }
    let mut columns: Vec<String> = ["layer", "module", "index"].map(String::from).to_vec();
    columns.extend(domain_names.iter().map(|d| format!("partial_{d}")));
    columns.extend(
        ["total", "consensus", "rank_consensus", "rank_total", "effective_bins", "in_pool"]
            .map(String::from),
    );
    let ranks = |v: &[f64]| {
        let mut r = vec![0usize; v.len()];
        for (pos, j) in rank_descending(v).into_iter().enumerate() {
            r[j] = pos + 1;
        }
        r
    };
    let rc = ranks(&mi.consensus);
    let rt = ranks(&mi.total);
    let rows = (0..space.len())
        .map(|j| {
            let id = space.id(j);
            let mut row = vec![id.layer.to_string(), id.module.to_string(), id.index.to_string()];
            row.extend(mi.partials[j].iter().map(|p| p.to_string()));
            row.push(mi.total[j].to_string());
            row.push(mi.consensus[j].to_string());
            row.push(rc[j].to_string());
            row.push(rt[j].to_string());
            row.push(mi.effective_bins[j].to_string());
            row.push(pool.binary_search(&j).is_ok().to_string());
            row
        })
        .collect::<Vec<_>>();
    write_csv_records(path, comments, &columns, &rows)
}

/// Spearman correlation between the consensus and total-MI rankings.
pub fn ranking_agreement(mi: &MiScores) -> f64 {
    let a = average_ranks(&mi.consensus);
    let b = average_ranks(&mi.total);
    crate::stats::pearson(&a, &b)
}

/// Jaccard overlap of two selections.
pub fn overlap(a: &[NeuronId], b: &[NeuronId]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[cfg(test)]
mod tests;
