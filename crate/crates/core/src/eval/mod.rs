//! Per-domain decoding and scoring, plus the layer-group and neuron-layout
//! analysis reports.

mod decode;
mod metrics;
mod reports;

pub use decode::{greedy_decode, DECODE_CHUNK};
pub use metrics::{
    corpus_bleu, exact_match, filtered_token_accuracy, token_accuracy, BleuStats, BLEU_VARIANT,
};
pub use reports::{
    gradient_change_report, neuron_distribution_report, DistributionRow, DistributionTable,
    GroupChange, LayerGroupReport,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Benchmark;
use crate::error::{Error, Result};
use crate::io::{write_csv_with_header, write_json};
use crate::model::Model;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub seen: bool,
    pub count: usize,
    pub token_accuracy: f64,
    /// Accuracy on reference positions holding a shared core token.
    pub core_token_accuracy: f64,
    pub bleu: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub domains: usize,
    pub token_accuracy: f64,
    pub core_token_accuracy: f64,
    pub bleu: f64,
    pub exact_match: f64,
}

impl MeanScores {
    /// Unweighted mean over domains; `None` when there are none.
    fn of<'a>(scores: impl Iterator<Item = &'a DomainScore>) -> Option<Self> {
        let v: Vec<&DomainScore> = scores.collect();
        if v.is_empty() {
            return None;
        }
        let k = v.len() as f64;
        let mean = |f: fn(&DomainScore) -> f64| v.iter().map(|s| f(s)).sum::<f64>() / k;
        Some(Self {
            domains: v.len(),
            token_accuracy: mean(|s| s.token_accuracy),
            core_token_accuracy: mean(|s| s.core_token_accuracy),
            bleu: mean(|s| s.bleu),
            exact_match: mean(|s| s.exact_match),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Header fields: BLEU variant, checkpoint hash, plus whatever the caller
    /// adds (config hash, seeds).
    pub meta: BTreeMap<String, String>,
    /// Sorted by domain name.
    pub domains: Vec<DomainScore>,
    pub seen: Option<MeanScores>,
    pub unseen: Option<MeanScores>,
}

impl EvalReport {
    pub fn domain(&self, name: &str) -> Option<&DomainScore> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut comments: Vec<(String, String)> =
            vec![("schema_version".into(), EVAL_SCHEMA_VERSION.to_string())];
        comments.extend(self.meta.iter().map(|(k, v)| (k.clone(), v.clone())));
        write_csv_with_header(path, &comments, &self.domains)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Test examples per domain; `None` for the whole split.
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { limit: None }
    }
}

/// Greedy-decodes every domain's test split and scores it against the
/// references.
pub fn evaluate(model: &Model, bench: &Benchmark, opts: &EvalOptions) -> Result<EvalReport> {
    let core = bench.core_ids();
    let max_new = bench.config.max_source_len + 2;
    let mut domains = Vec::with_capacity(bench.domains.len());
    for (spec, split) in bench.domains.iter().zip(&bench.splits) {
        let n = opts.limit.map_or(split.test.len(), |l| l.min(split.test.len()));
        let test = &split.test[..n];
        if test.is_empty() {
            return Err(Error::Invalid(format!("domain {} has no test examples", spec.name)));
        }
        let prompts: Vec<Vec<usize>> = test.iter().map(|e| e.prompt()).collect();
        let refs: Vec<Vec<usize>> = test.iter().map(|e| e.target.clone()).collect();
        let hyps = greedy_decode(model, &prompts, max_new)?;
        domains.push(DomainScore {
            domain: spec.name.clone(),
            seen: spec.seen,
            count: n,
            token_accuracy: token_accuracy(&hyps, &refs)?,
            core_token_accuracy: filtered_token_accuracy(&hyps, &refs, |t| core.contains(&t))?,
            bleu: corpus_bleu(&hyps, &refs)?,
            exact_match: exact_match(&hyps, &refs)?,
        });
    }
    domains.sort_by(|a, b| a.domain.cmp(&b.domain));
    let mut meta = BTreeMap::new();
    meta.insert("bleu_variant".into(), BLEU_VARIANT.into());
    meta.insert("checkpoint_sha256".into(), model.checksum());
    meta.insert("corpus_seed".into(), bench.config.seed.to_string());
    meta.insert("model_seed".into(), model.config().seed.to_string());
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        meta,
        seen: MeanScores::of(domains.iter().filter(|d| d.seen)),
        unseen: MeanScores::of(domains.iter().filter(|d| !d.seen)),
        domains,
    })
}
