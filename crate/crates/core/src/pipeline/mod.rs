//! Stage-by-stage orchestration over a workspace directory.
//!
//! ```text
//! <workspace>/
//!   config.json                 effective config of the first command
//!   data/                       benchmark (vocab, domain rules, splits)
//!   base.ckpt, pretrain_log.csv
//!   importance/<domain>.shard   per-sample scores, <domain>_summary.csv
//!   importance/activation.json  per-domain firing counts
//!   eval/base.{json,csv}
//!   runs/<strategy>_b<ratio>_s<seed>/
//!     selection.json, mi_report.csv, finetuned.ckpt, train_log.csv,
//!     eval.{json,csv}, distribution.csv, gradients.csv
//!   sweeps/<strategy>_s<seed>.csv
//! ```

mod config;

pub use config::PipelineConfig;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_benchmark, Benchmark};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, gradient_change_report, neuron_distribution_report, EvalOptions, EvalReport,
};
use crate::importance::{
    aggregate_importance, read_shard, score_domain, write_shard, write_summary_csv,
    ActivationStats, ImportanceSummary, Shard,
};
use crate::io::{read_json, write_csv_with_header, write_json};
use crate::model::{load_checkpoint, save_checkpoint, Model, Sequence};
use crate::selection::{
    accumulate_joint, compute_bin_edges, mutual_information, select, write_mi_report, MiScores,
    SelectionConfig, SelectionInputs, SelectionResult, Strategy,
};
use crate::trainer::{finetune, train_full, LayerGroups, SelectionMask, TrainLog};

const ACTIVATION_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationFile {
    schema_version: u32,
    domains: Vec<ActivationStats>,
}

/// One fine-tuning run. `seed` drives both the selector and the trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub strategy: Strategy,
    pub budget_ratio: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn name(&self) -> String {
        format!("{}_b{:.4}_s{}", self.strategy, self.budget_ratio, self.seed)
    }
}

/// Held for the lifetime of a [`Workspace`]; removed on drop. The file holds
/// the owner's pid, and a lock whose owner no longer exists is taken over.
#[derive(Debug)]
struct Lock(PathBuf);

impl Lock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(".lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(std::process::id().to_string().as_bytes())
                        .map_err(|e| Error::io(&path, e))?;
                    return Ok(Lock(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if !owner_is_gone(&path) {
                        break;
                    }
                    log::warn!("removing stale lock {}", path.display());
                    let _ = std::fs::remove_file(&path);
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked(path))
    }
}

fn owner_is_gone(lock: &Path) -> bool {
    let proc = Path::new("/proc");
    if !proc.is_dir() {
        return false;
    }
    match std::fs::read_to_string(lock).ok().and_then(|s| s.trim().parse::<u32>().ok()) {
        Some(pid) => !proc.join(pid.to_string()).exists(),
        None => false,
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Scores and statistics produced by the `score` stage, seen domains only.
#[derive(Debug, Clone)]
pub struct ImportanceInputs {
    pub domain_names: Vec<String>,
    pub shards: Vec<Shard>,
    pub summaries: Vec<ImportanceSummary>,
    pub activation: Vec<ActivationStats>,
}

impl ImportanceInputs {
    pub fn mi_scores(&self, bins: usize) -> Result<MiScores> {
        let refs: Vec<&Shard> = self.shards.iter().collect();
        let edges = compute_bin_edges(&refs, bins)?;
        mutual_information(&accumulate_joint(&refs, &edges)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget_ratio: f64,
    pub status: String,
    pub scope: String,
    pub token_accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub exact_match: Option<f64>,
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    config: PipelineConfig,
    _lock: Lock,
}

impl Workspace {
    /// Validates the config, creates the directory and takes the lock.
    pub fn open(root: &Path, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = Lock::acquire(root)?;
        let snapshot = root.join("config.json");
        if !snapshot.exists() {
            write_json(&snapshot, &config)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base.ckpt")
    }

    pub fn importance_dir(&self) -> PathBuf {
        self.root.join("importance")
    }

    pub fn run_dir(&self, run: &RunSpec) -> PathBuf {
        self.root.join("runs").join(run.name())
    }

    fn guard(path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(Error::ArtifactExists(path.to_path_buf()));
        }
        Ok(())
    }

    fn require(path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(())
    }

    fn header(&self, extra: &[(&str, String)]) -> Vec<(String, String)> {
        let c = &self.config;
        let mut h = vec![
            ("config_sha256".to_string(), c.hash()),
            ("corpus_seed".to_string(), c.benchmark.seed.to_string()),
            ("model_seed".to_string(), c.model.seed.to_string()),
        ];
        h.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        h
    }

    fn run_config(&self, run: &RunSpec) -> (SelectionConfig, crate::trainer::TrainConfig) {
        let sel = SelectionConfig {
            budget_ratio: run.budget_ratio,
            seed: run.seed,
            ..self.config.selection.clone()
        };
        let train = crate::trainer::TrainConfig {
            seed: run.seed,
            ..self.config.finetune.clone()
        };
        (sel, train)
    }

    /// The run described by the config's own strategy, budget and seed.
    pub fn default_run(&self) -> RunSpec {
        RunSpec {
            strategy: self.config.strategy,
            budget_ratio: self.config.selection.budget_ratio,
            seed: self.config.selection.seed,
        }
    }

    pub fn gen_data(&self, force: bool) -> Result<Benchmark> {
        let dir = self.data_dir();
        Self::guard(&dir.join("domains.json"), force)?;
        let bench = generate_benchmark(&self.config.benchmark)?;
        bench.save(&dir)?;
        info!("benchmark written to {}", dir.display());
        Ok(bench)
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Self::require(&self.data_dir().join("domains.json"))?;
        Benchmark::load(&self.data_dir())
    }

    pub fn pretrain(&self, force: bool) -> Result<TrainLog> {
        let ckpt = self.base_checkpoint();
        Self::guard(&ckpt, force)?;
        let bench = self.benchmark()?;
        let data: Vec<Vec<Sequence>> = vec![bench.pretrain.iter().map(|e| e.sequence()).collect()];
        let mut model = Model::new(self.config.model.clone())?;
        let log = train_full(&mut model, &data, &self.config.pretrain)?;
        log.save(&self.root.join("pretrain_log.csv"))?;
        save_checkpoint(&model, &ckpt)?;
        info!("base checkpoint written to {}", ckpt.display());
        Ok(log)
    }

    pub fn base_model(&self) -> Result<Model> {
        Self::require(&self.base_checkpoint())?;
        load_checkpoint(&self.base_checkpoint())
    }

    pub fn score(&self, force: bool) -> Result<ImportanceInputs> {
        let dir = self.importance_dir();
        Self::guard(&dir.join("activation.json"), force)?;
        let bench = self.benchmark()?;
        let model = self.base_model()?;
        let n = self.config.importance_samples;
        let mut activation = Vec::new();
        for (i, spec) in bench.seen_domains() {
            let seqs: Vec<Sequence> = bench.splits[i].selection[..n].iter().map(|e| e.sequence()).collect();
            let (records, stats) = score_domain(&model, &seqs, i as u64)?;
            let summary = aggregate_importance(&records)?;
            let shard = Shard::from_records(i as u64, model.space().len(), &records)?;
            write_shard(&dir.join(format!("{}.shard", spec.name)), &shard)?;
            let header = self.header(&[
                ("schema_version", "1".into()),
                ("domain", spec.name.clone()),
                ("checkpoint_sha256", model.checksum()),
            ]);
            write_summary_csv(
                &dir.join(format!("{}_summary.csv", spec.name)),
                model.space(),
                &summary,
                &shard,
                &header,
            )?;
            activation.push(stats);
            info!("scored {} samples of {}", seqs.len(), spec.name);
        }
        write_json(
            &dir.join("activation.json"),
            &ActivationFile {
                schema_version: ACTIVATION_SCHEMA_VERSION,
                domains: activation,
            },
        )?;
        self.importance()
    }

    pub fn importance(&self) -> Result<ImportanceInputs> {
        let dir = self.importance_dir();
        Self::require(&dir.join("activation.json"))?;
        let bench = self.benchmark()?;
        let act_path = dir.join("activation.json");
        let file: ActivationFile = read_json(&act_path)?;
        if file.schema_version != ACTIVATION_SCHEMA_VERSION {
            return Err(Error::Corrupt {
                path: act_path,
                detail: format!("unsupported schema version {}", file.schema_version),
            });
        }
        let activation = file.domains;
        let mut out = ImportanceInputs {
            domain_names: Vec::new(),
            shards: Vec::new(),
            summaries: Vec::new(),
            activation,
        };
        for (i, spec) in bench.seen_domains() {
            let path = dir.join(format!("{}.shard", spec.name));
            Self::require(&path)?;
            let shard = read_shard(&path)?;
            if shard.domain != i as u64 {
                return Err(Error::Corrupt {
                    path,
                    detail: format!("holds domain {} instead of {i}", shard.domain),
                });
            }
            out.summaries.push(aggregate_importance(&shard.records())?);
            out.shards.push(shard);
            out.domain_names.push(spec.name.clone());
        }
        Ok(out)
    }

    pub fn select(&self, run: &RunSpec, force: bool) -> Result<SelectionResult> {
        let dir = self.run_dir(run);
        let path = dir.join("selection.json");
        Self::guard(&path, force)?;
        let imp = self.importance()?;
        let space = crate::model::NeuronSpace::from_config(&self.config.model);
        let (cfg, _) = self.run_config(run);
        let mi = if run.strategy.needs_mi() {
            Some(imp.mi_scores(cfg.bins)?)
        } else {
            None
        };
        let inputs = SelectionInputs {
            space,
            summaries: &imp.summaries,
            mi: mi.as_ref(),
            activation: &imp.activation,
        };
        let result = select(run.strategy, &inputs, &cfg)?;
        if let Some(mi) = &mi {
            let pool: Vec<usize> = result
                .task_pool
                .iter()
                .map(|p| space.flat(crate::model::NeuronId::new(p.layer, p.module, p.index)))
                .collect();
            let header = self.header(&[
                ("schema_version", "1".into()),
                ("bins", cfg.bins.to_string()),
                ("selection_seed", run.seed.to_string()),
            ]);
            write_mi_report(&dir.join("mi_report.csv"), space, mi, &imp.domain_names, &pool, &header)?;
        }
        result.save(&path)?;
        Ok(result)
    }

    pub fn selection(&self, run: &RunSpec) -> Result<SelectionResult> {
        let path = self.run_dir(run).join("selection.json");
        Self::require(&path)?;
        SelectionResult::load(&path)
    }

    pub fn finetune(&self, run: &RunSpec, force: bool) -> Result<TrainLog> {
        let dir = self.run_dir(run);
        let ckpt = dir.join("finetuned.ckpt");
        Self::guard(&ckpt, force)?;
        let bench = self.benchmark()?;
        let sel = self.selection(run)?;
        let mut model = self.base_model()?;
        let mask = SelectionMask::build(&sel.ids(), model.space())?;
        let (_, train) = self.run_config(run);
        let log = finetune(&mut model, &bench.finetune_sequences(), &mask, &train)?;
        log.save(&dir.join("train_log.csv"))?;
        save_checkpoint(&model, &ckpt)?;
        Ok(log)
    }

    pub fn finetuned_model(&self, run: &RunSpec) -> Result<Model> {
        let ckpt = self.run_dir(run).join("finetuned.ckpt");
        Self::require(&ckpt)?;
        load_checkpoint(&ckpt)
    }

    fn write_eval(&self, model: &Model, stem: &Path, force: bool, extra: &[(&str, String)]) -> Result<EvalReport> {
        let json = stem.with_extension("json");
        Self::guard(&json, force)?;
        let bench = self.benchmark()?;
        let mut report = evaluate(model, &bench, &EvalOptions { limit: self.config.eval_limit })?;
        for (k, v) in self.header(extra) {
            report.meta.insert(k, v);
        }
        report.save_json(&json)?;
        report.save_csv(&stem.with_extension("csv"))?;
        Ok(report)
    }

    pub fn eval_base(&self, force: bool) -> Result<EvalReport> {
        let model = self.base_model()?;
        self.write_eval(&model, &self.root.join("eval").join("base"), force, &[])
    }

    pub fn eval_run(&self, run: &RunSpec, force: bool) -> Result<EvalReport> {
        let model = self.finetuned_model(run)?;
        let extra = [
            ("strategy", run.strategy.to_string()),
            ("budget_ratio", run.budget_ratio.to_string()),
            ("selection_seed", run.seed.to_string()),
            ("train_seed", run.seed.to_string()),
        ];
        self.write_eval(&model, &self.run_dir(run).join("eval"), force, &extra)
    }

    fn load_eval(path: &Path) -> Result<EvalReport> {
        Self::require(path)?;
        read_json(path)
    }

    pub fn report_distribution(&self, run: &RunSpec, force: bool) -> Result<crate::eval::DistributionTable> {
        let path = self.run_dir(run).join("distribution.csv");
        Self::guard(&path, force)?;
        let sel = self.selection(run)?;
        let table = neuron_distribution_report(sel.neuron_space, &sel.ids(), self.config.index_bins)?;
        let header = self.header(&[
            ("schema_version", "1".into()),
            ("strategy", run.strategy.to_string()),
            ("index_bins", self.config.index_bins.to_string()),
        ]);
        table.save(&path, &header)?;
        Ok(table)
    }

    pub fn report_gradients(&self, run: &RunSpec, force: bool) -> Result<crate::eval::LayerGroupReport> {
        let path = self.run_dir(run).join("gradients.csv");
        Self::guard(&path, force)?;
        let sel = self.selection(run)?;
        let base = self.base_model()?;
        let tuned = self.finetuned_model(run)?;
        let groups = LayerGroups::thirds(base.config().n_layers);
        let report = gradient_change_report(&base, &tuned, &sel.ids(), groups)?;
        let header = self.header(&[
            ("schema_version", "1".into()),
            ("strategy", run.strategy.to_string()),
            ("groups", format!("[0,{}) [{},{}) [{},{})", groups.lower_end, groups.lower_end, groups.middle_end, groups.middle_end, groups.n_layers)),
            ("base_sha256", base.checksum()),
            ("finetuned_sha256", tuned.checksum()),
        ]);
        report.save(&path, &header)?;
        Ok(report)
    }

    /// Every stage up to the reports for one run. Upstream artifacts (data,
    /// base model, base eval, importance) are reused when present; the run's
    /// own stages are reused too unless `force` is set.
    pub fn run_all(&self, run: &RunSpec, force: bool) -> Result<EvalReport> {
        if !self.data_dir().join("domains.json").exists() {
            self.gen_data(false)?;
        }
        if !self.base_checkpoint().exists() {
            self.pretrain(false)?;
        }
        if !self.root.join("eval").join("base.json").exists() {
            self.eval_base(false)?;
        }
        if !self.importance_dir().join("activation.json").exists() {
            self.score(false)?;
        }
        let report = if force {
            self.select(run, true)?;
            self.finetune(run, true)?;
            self.eval_run(run, true)?
        } else {
            self.ensure_run(run)?
        };
        let dir = self.run_dir(run);
        if force || !dir.join("distribution.csv").exists() {
            self.report_distribution(run, force)?;
        }
        if force || !dir.join("gradients.csv").exists() {
            self.report_gradients(run, force)?;
        }
        Ok(report)
    }

    /// Select, fine-tune and evaluate one run, skipping finished stages.
    pub fn ensure_run(&self, run: &RunSpec) -> Result<EvalReport> {
        let dir = self.run_dir(run);
        if !dir.join("selection.json").exists() {
            self.select(run, false)?;
        }
        if !dir.join("finetuned.ckpt").exists() {
            self.finetune(run, false)?;
        }
        if dir.join("eval.json").exists() {
            Self::load_eval(&dir.join("eval.json"))
        } else {
            self.eval_run(run, false)
        }
    }

    /// Base-model report, evaluating it if needed.
    pub fn ensure_base_eval(&self) -> Result<EvalReport> {
        let p = self.root.join("eval").join("base.json");
        if p.exists() {
            Self::load_eval(&p)
        } else {
            self.eval_base(false)
        }
    }

    /// Select + fine-tune + evaluate at each budget ratio, sharing upstream
    /// artifacts. A ratio that cannot be run is recorded and skipped.
    pub fn sweep_ratio(&self, ratios: &[f64], seed: u64, force: bool) -> Result<Vec<SweepRow>> {
        let path = self
            .root
            .join("sweeps")
            .join(format!("{}_s{seed}.csv", self.config.strategy));
        Self::guard(&path, force)?;
        let mut rows = Vec::new();
        for &r in ratios {
            let run = RunSpec {
                strategy: self.config.strategy,
                budget_ratio: r,
                seed,
            };
            if r > self.config.selection.pool_ratio {
                rows.push(failed(r, format!("ratio exceeds pool_ratio {}", self.config.selection.pool_ratio)));
                continue;
            }
            match self.ensure_run(&run) {
                Ok(rep) => {
                    for d in &rep.domains {
                        rows.push(SweepRow {
                            budget_ratio: r,
                            status: "ok".into(),
                            scope: d.domain.clone(),
                            token_accuracy: Some(d.token_accuracy),
                            bleu: Some(d.bleu),
                            exact_match: Some(d.exact_match),
                        });
                    }
                    for (scope, m) in [("seen_mean", rep.seen), ("unseen_mean", rep.unseen)] {
                        if let Some(m) = m {
                            rows.push(SweepRow {
                                budget_ratio: r,
                                status: "ok".into(),
                                scope: scope.into(),
                                token_accuracy: Some(m.token_accuracy),
                                bleu: Some(m.bleu),
                                exact_match: Some(m.exact_match),
                            });
                        }
                    }
                }
                Err(e) if e.is_validation() => rows.push(failed(r, e.to_string())),
                Err(e) => return Err(e),
            }
        }
        let header = self.header(&[
            ("schema_version", "1".into()),
            ("strategy", self.config.strategy.to_string()),
            ("seed", seed.to_string()),
        ]);
        write_csv_with_header(&path, &header, &rows)?;
        Ok(rows)
    }
}

fn failed(ratio: f64, why: String) -> SweepRow {
    SweepRow {
        budget_ratio: ratio,
        status: format!("failed: {why}"),
        scope: "all".into(),
        token_accuracy: None,
        bleu: None,
        exact_match: None,
    }
}
