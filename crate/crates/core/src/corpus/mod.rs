//! Synthetic multi-domain "translation" benchmark.
//!
//! Every domain translates with the same cipher over a shared core vocabulary
//! and the same window reorder; each domain also owns a small private
//! vocabulary slice with its own cipher. Sources are mostly core tokens, so
//! what a model learns in one domain largely transfers to the others.

mod vocab;

pub use vocab::{Vocab, BOS, EOS, INSTRUCTION_SYMBOLS, PAD, SEP, SPECIAL_SYMBOLS};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_string, write_atomic, write_json};
use crate::model::{ModelConfig, Sequence};

pub const GENERIC_DOMAIN: &str = "generic";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDef {
    pub name: String,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub core_vocab: usize,
    pub domain_vocab: usize,
    pub domains: Vec<DomainDef>,
    pub selection_per_domain: usize,
    pub finetune_per_domain: usize,
    pub test_per_domain: usize,
    pub pretrain_examples: usize,
    pub min_source_len: usize,
    pub max_source_len: usize,
    /// Chance that a source position draws from the domain slice.
    pub domain_token_prob: f64,
    /// Hard cap on the share of domain tokens in one source.
    pub max_domain_fraction: f64,
    pub reorder_window: usize,
    /// Let pretraining sources contain domain-slice tokens, translated by
    /// copying them unchanged.
    pub pretrain_copies_domain_tokens: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        let d = |name: &str, seen| DomainDef {
            name: name.into(),
            seen,
        };
        Self {
            seed: 0,
            core_vocab: 64,
            domain_vocab: 8,
            domains: vec![
                d("it", true),
                d("law", true),
                d("med", true),
                d("sub", true),
                d("kor", false),
            ],
            selection_per_domain: 2000,
            finetune_per_domain: 400,
            test_per_domain: 200,
            pretrain_examples: 20000,
            min_source_len: 4,
            max_source_len: 10,
            domain_token_prob: 0.25,
            max_domain_fraction: 0.3,
            reorder_window: 2,
            pretrain_copies_domain_tokens: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let seen = self.domains.iter().filter(|d| d.seen).count();
        if seen < 2 || seen == self.domains.len() {
            return fail(format!(
                "need at least 2 seen and 1 unseen domain, got {seen} seen of {}",
                self.domains.len()
            ));
        }
        if self.domains.len() > 24 {
            return fail("at most 24 domains are supported".into());
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.push(GENERIC_DOMAIN);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("domain names must be unique and not \"generic\"".into());
        }
        for d in &self.domains {
            let reserved = SPECIAL_SYMBOLS.contains(&d.name.as_str())
                || INSTRUCTION_SYMBOLS.contains(&d.name.as_str());
            if d.name.is_empty() || d.name.chars().any(|c| !c.is_ascii_alphabetic()) || reserved {
                return fail(format!("domain name {:?} must be alphabetic", d.name));
            }
        }
        if self.core_vocab < 2 || self.domain_vocab < 2 {
            return fail("core_vocab and domain_vocab must be at least 2".into());
        }
        if self.min_source_len == 0 || self.min_source_len > self.max_source_len {
            return fail(format!(
                "source length range {}..={} is empty",
                self.min_source_len, self.max_source_len
            ));
        }
        if self.finetune_per_domain > self.selection_per_domain {
            return fail("finetune set must fit inside the selection set".into());
        }
        if self.finetune_per_domain == 0 || self.test_per_domain == 0 || self.pretrain_examples == 0 {
            return fail("finetune, test and pretrain sets must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.domain_token_prob) {
            return fail("domain_token_prob must lie in [0, 1]".into());
        }
        if !(0.0..=0.3).contains(&self.max_domain_fraction) {
            return fail("max_domain_fraction must lie in [0, 0.3]".into());
        }
        if self.reorder_window == 0 {
            return fail("reorder_window must be positive".into());
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        SPECIAL_SYMBOLS.len()
            + INSTRUCTION_SYMBOLS.len()
            + 1
            + self.domains.len()
            + self.core_vocab
            + self.domains.len() * self.domain_vocab
    }

    /// Longest tokenized example: BOS, 4-token instruction, source, SEP,
    /// target, EOS.
    pub fn max_example_len(&self) -> usize {
        1 + 4 + 2 * self.max_source_len + 2
    }

    /// Checks that the generated data fits a model.
    pub fn check_model(&self, m: &ModelConfig) -> Result<()> {
        if self.vocab_size() > m.vocab_size {
            return Err(Error::Config(format!(
                "benchmark needs {} vocabulary slots but the model has {}",
                self.vocab_size(),
                m.vocab_size
            )));
        }
        if self.max_source_len > m.max_seq_len / 3 {
            return Err(Error::Config(format!(
                "max_source_len {} exceeds max_seq_len / 3 = {}",
                self.max_source_len,
                m.max_seq_len / 3
            )));
        }
        if self.max_example_len() > m.max_seq_len {
            return Err(Error::Config(format!(
                "examples of up to {} tokens exceed max_seq_len {}",
                self.max_example_len(),
                m.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Permutation applied to each full window of `pattern.len()` tokens; a
/// trailing partial window keeps its order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderRule {
    pub pattern: Vec<usize>,
}

impl ReorderRule {
    /// Reverses each window.
    pub fn reverse_windows(window: usize) -> Self {
        Self {
            pattern: (0..window).rev().collect(),
        }
    }

    pub fn apply<T: Copy>(&self, xs: &[T]) -> Vec<T> {
        let w = self.pattern.len();
        let mut out = Vec::with_capacity(xs.len());
        let mut chunks = xs.chunks_exact(w);
        for c in chunks.by_ref() {
            out.extend(self.pattern.iter().map(|&i| c[i]));
        }
        out.extend_from_slice(chunks.remainder());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub seen: bool,
    pub vocab_slice: Vec<String>,
    pub shared_cipher: BTreeMap<String, String>,
    pub domain_cipher: BTreeMap<String, String>,
    pub reorder_rule: ReorderRule,
}

impl DomainSpec {
    /// Applies both ciphers, then the reorder. `None` for a symbol outside
    /// this domain's vocabulary.
    pub fn translate(&self, source: &[&str]) -> Option<Vec<String>> {
        let mapped = source
            .iter()
            .map(|s| {
                self.shared_cipher
                    .get(*s)
                    .or_else(|| self.domain_cipher.get(*s))
                    .map(String::as_str)
            })
            .collect::<Option<Vec<&str>>>()?;
        Some(
            self.reorder_rule
                .apply(&mapped)
                .into_iter()
                .map(str::to_string)
                .collect(),
        )
    }

    /// What an oracle without this domain's cipher would output: shared cipher
    /// where it applies, the untouched symbol elsewhere.
    pub fn shared_only_guess(&self, source: &[&str]) -> Vec<String> {
        let mapped: Vec<&str> = source
            .iter()
            .map(|s| self.shared_cipher.get(*s).map_or(*s, String::as_str))
            .collect();
        self.reorder_rule
            .apply(&mapped)
            .into_iter()
            .map(str::to_string)
            .collect()
    }
}

/// One instruction-prefixed parallel pair, as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub domain: String,
    pub instruction: Vec<usize>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl ParallelExample {
    /// `[BOS] instruction source [SEP]`
    pub fn prompt(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.instruction.len() + self.source.len() + 2);
        t.push(BOS);
        t.extend_from_slice(&self.instruction);
        t.extend_from_slice(&self.source);
        t.push(SEP);
        t
    }

    /// Prompt followed by `target [EOS]`; the target and EOS are supervised.
    pub fn sequence(&self) -> Sequence {
        let mut tokens = self.prompt();
        let target_start = tokens.len();
        tokens.extend_from_slice(&self.target);
        tokens.push(EOS);
        Sequence {
            tokens,
            target_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub domain: String,
    pub instruction: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainSplit {
    pub selection: Vec<ParallelExample>,
    pub finetune: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    config: GenConfig,
    domains: Vec<DomainSpec>,
}

/// Generated benchmark: vocabulary, domain rules and all splits.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: GenConfig,
    pub vocab: Vocab,
    pub domains: Vec<DomainSpec>,
    /// Aligned with `domains`.
    pub splits: Vec<DomainSplit>,
    pub pretrain: Vec<ParallelExample>,
}

fn slice_prefix(domain: usize) -> char {
    (b'b' + domain as u8) as char
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Deterministic in `config` (its seed included).
pub fn generate_benchmark(config: &GenConfig) -> Result<Benchmark> {
    config.validate()?;
    let core: Vec<String> = (0..config.core_vocab).map(|i| format!("a{i}")).collect();
    let slices: Vec<Vec<String>> = (0..config.domains.len())
        .map(|d| {
            (0..config.domain_vocab)
                .map(|i| format!("{}{i}", slice_prefix(d)))
                .collect()
        })
        .collect();
    let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
    symbols.extend(INSTRUCTION_SYMBOLS.iter().map(|s| s.to_string()));
    symbols.push(GENERIC_DOMAIN.into());
    symbols.extend(config.domains.iter().map(|d| d.name.clone()));
    symbols.extend(core.iter().cloned());
    for s in &slices {
        symbols.extend(s.iter().cloned());
    }
    let vocab = Vocab::from_symbols(symbols)?;

    let mut rng = stream_rng(config.seed, 0);
    let shared_cipher = permutation_map(&core, &mut rng);
    let reorder_rule = ReorderRule::reverse_windows(config.reorder_window);
    let domains: Vec<DomainSpec> = config
        .domains
        .iter()
        .zip(&slices)
        .map(|(d, slice)| DomainSpec {
            name: d.name.clone(),
            seen: d.seen,
            vocab_slice: slice.clone(),
            shared_cipher: shared_cipher.clone(),
            domain_cipher: permutation_map(slice, &mut rng),
            reorder_rule: reorder_rule.clone(),
        })
        .collect();

    let mut bench = Benchmark {
        config: config.clone(),
        vocab,
        domains,
        splits: Vec::new(),
        pretrain: Vec::new(),
    };
    let mut splits = Vec::with_capacity(bench.domains.len());
    for (d, spec) in bench.domains.iter().enumerate() {
        let instr = bench.render_instruction(&spec.name)?;
        let make = |n: usize, stream: u64| -> Result<Vec<ParallelExample>> {
            let mut rng = stream_rng(config.seed, stream);
            (0..n)
                .map(|_| bench.sample_example(spec, &instr, Some(&slices[d]), &mut rng))
                .collect()
        };
        let base = 1 + 2 * d as u64;
        let split = if spec.seen {
            let selection = make(config.selection_per_domain, base)?;
            let finetune = selection[..config.finetune_per_domain].to_vec();
            let test = make(config.test_per_domain, base + 1)?;
            DomainSplit {
                selection,
                finetune,
                test,
            }
        } else {
            DomainSplit {
                test: make(config.test_per_domain, base + 1)?,
                ..Default::default()
            }
        };
        splits.push(split);
    }
    bench.splits = splits;
    let generic = bench.generic_spec();
    let instr = bench.render_instruction(GENERIC_DOMAIN)?;
    let mut rng = stream_rng(config.seed, 1 + 2 * config.domains.len() as u64);
    let pretrain_slice = config
        .pretrain_copies_domain_tokens
        .then(|| generic.vocab_slice.clone());
    bench.pretrain = (0..config.pretrain_examples)
        .map(|_| bench.sample_example(&generic, &instr, pretrain_slice.as_ref(), &mut rng))
        .collect::<Result<_>>()?;
    bench.check_unseen_solvability(0.7)?;
    Ok(bench)
}

fn permutation_map(symbols: &[String], rng: &mut ChaCha8Rng) -> BTreeMap<String, String> {
    let mut image = symbols.to_vec();
    image.shuffle(rng);
    symbols.iter().cloned().zip(image).collect()
}

impl Benchmark {
    /// `translate domain <NAME> :` as token ids.
    pub fn render_instruction(&self, domain: &str) -> Result<Vec<usize>> {
        if domain != GENERIC_DOMAIN && !self.domains.iter().any(|d| d.name == domain) {
            return Err(Error::UnknownDomain(domain.to_string()));
        }
        let v = &self.vocab;
        Ok(vec![v.id("translate")?, v.id("domain")?, v.id(domain)?, v.id(":")?])
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn seen_domains(&self) -> impl Iterator<Item = (usize, &DomainSpec)> {
        self.domains.iter().enumerate().filter(|(_, d)| d.seen)
    }

    /// Fine-tuning sequences of every seen domain, in domain order.
    pub fn finetune_sequences(&self) -> Vec<Vec<Sequence>> {
        self.seen_domains()
            .map(|(i, _)| self.splits[i].finetune.iter().map(ParallelExample::sequence).collect())
            .collect()
    }

    /// Rules for the pretraining instruction: the shared cipher, plus the
    /// identity on every domain slice when pretraining copies domain tokens.
    pub fn generic_spec(&self) -> DomainSpec {
        let d = &self.domains[0];
        let slice: Vec<String> = if self.config.pretrain_copies_domain_tokens {
            self.domains.iter().flat_map(|d| d.vocab_slice.iter().cloned()).collect()
        } else {
            Vec::new()
        };
        DomainSpec {
            name: GENERIC_DOMAIN.into(),
            seen: true,
            domain_cipher: slice.iter().map(|s| (s.clone(), s.clone())).collect(),
            vocab_slice: slice,
            shared_cipher: d.shared_cipher.clone(),
            reorder_rule: d.reorder_rule.clone(),
        }
    }

    fn sample_example(
        &self,
        spec: &DomainSpec,
        instruction: &[usize],
        slice: Option<&Vec<String>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParallelExample> {
        let c = &self.config;
        let len = rng.gen_range(c.min_source_len..=c.max_source_len);
        let cap = (c.max_domain_fraction * len as f64 + 1e-9).floor() as usize;
        let core = &spec.shared_cipher;
        let mut used = 0;
        let mut source: Vec<&str> = Vec::with_capacity(len);
        for _ in 0..len {
            let s = match slice {
                Some(sl) if used < cap && rng.gen_bool(c.domain_token_prob) => {
                    used += 1;
                    sl[rng.gen_range(0..sl.len())].as_str()
                }
                _ => {
                    let k = rng.gen_range(0..c.core_vocab);
                    core.keys().nth(k).expect("core index").as_str()
                }
            };
            source.push(s);
        }
        let target = spec
            .translate(&source)
            .ok_or_else(|| Error::Invalid(format!("domain {} cannot translate", spec.name)))?;
        Ok(ParallelExample {
            domain: spec.name.clone(),
            instruction: instruction.to_vec(),
            source: source
                .iter()
                .map(|s| self.vocab.id(s))
                .collect::<Result<_>>()?,
            target: target
                .iter()
                .map(|s| self.vocab.id(s))
                .collect::<Result<_>>()?,
        })
    }

    /// An oracle that knows the shared cipher and reorder but nothing
    /// domain-specific must reach `min_accuracy` on every unseen test set.
    fn check_unseen_solvability(&self, min_accuracy: f64) -> Result<()> {
        for (spec, split) in self.domains.iter().zip(&self.splits) {
            if spec.seen {
                continue;
            }
            let (mut hit, mut total) = (0usize, 0usize);
            for ex in &split.test {
                let src: Vec<&str> = ex
                    .source
                    .iter()
                    .map(|&t| self.vocab.symbol(t))
                    .collect::<Result<_>>()?;
                let guess = spec.shared_only_guess(&src);
                for (g, &t) in guess.iter().zip(&ex.target) {
                    hit += usize::from(self.vocab.id(g)? == t);
                }
                total += ex.target.len();
            }
            let acc = hit as f64 / total.max(1) as f64;
            if acc < min_accuracy {
                return Err(Error::Config(format!(
                    "unseen domain {} is only {:.1}% solvable from shared rules",
                    spec.name,
                    acc * 100.0
                )));
            }
        }
        Ok(())
    }

    pub fn to_record(&self, ex: &ParallelExample) -> Result<ExampleRecord> {
        Ok(ExampleRecord {
            domain: ex.domain.clone(),
            instruction: self.vocab.detokenize(&ex.instruction)?,
            source: self.vocab.detokenize(&ex.source)?,
            target: self.vocab.detokenize(&ex.target)?,
        })
    }

    pub fn from_record(&self, r: &ExampleRecord) -> Result<ParallelExample> {
        Ok(ParallelExample {
            domain: r.domain.clone(),
            instruction: self.vocab.tokenize(&r.instruction)?,
            source: self.vocab.tokenize(&r.source)?,
            target: self.vocab.tokenize(&r.target)?,
        })
    }

    /// Writes `vocab.txt`, `domains.json`, `pretrain.jsonl` and
    /// `<domain>.<split>.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.vocab.save(&dir.join("vocab.txt"))?;
        write_json(
            &dir.join("domains.json"),
            &Manifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                seed: self.config.seed,
                config: self.config.clone(),
                domains: self.domains.clone(),
            },
        )?;
        self.write_jsonl(&dir.join("pretrain.jsonl"), &self.pretrain)?;
        for (spec, split) in self.domains.iter().zip(&self.splits) {
            if spec.seen {
                self.write_jsonl(&dir.join(format!("{}.selection.jsonl", spec.name)), &split.selection)?;
                self.write_jsonl(&dir.join(format!("{}.finetune.jsonl", spec.name)), &split.finetune)?;
            }
            self.write_jsonl(&dir.join(format!("{}.test.jsonl", spec.name)), &split.test)?;
        }
        Ok(())
    }

    fn write_jsonl(&self, path: &Path, examples: &[ParallelExample]) -> Result<()> {
        let mut out = String::new();
        for ex in examples {
            out.push_str(&serde_json::to_string(&self.to_record(ex)?)?);
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    fn read_jsonl(&self, path: &Path) -> Result<Vec<ParallelExample>> {
        let text = read_string(path)?;
        text.lines()
            .enumerate()
            .map(|(i, line)| {
                let r: ExampleRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", i + 1),
                })?;
                self.from_record(&r)
            })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("domains.json");
        let m: Manifest = read_json(&manifest_path)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Corrupt {
                path: manifest_path,
                detail: format!("unsupported schema version {}", m.schema_version),
            });
        }
        let mut bench = Benchmark {
            config: m.config,
            vocab: Vocab::load(&dir.join("vocab.txt"))?,
            domains: m.domains,
            splits: Vec::new(),
            pretrain: Vec::new(),
        };
        bench.pretrain = bench.read_jsonl(&dir.join("pretrain.jsonl"))?;
        for i in 0..bench.domains.len() {
            let name = bench.domains[i].name.clone();
            let mut split = DomainSplit {
                test: bench.read_jsonl(&dir.join(format!("{name}.test.jsonl")))?,
                ..Default::default()
            };
            if bench.domains[i].seen {
                split.selection = bench.read_jsonl(&dir.join(format!("{name}.selection.jsonl")))?;
                split.finetune = bench.read_jsonl(&dir.join(format!("{name}.finetune.jsonl")))?;
            }
            bench.splits.push(split);
        }
        Ok(bench)
    }

    /// Token ids of the shared core vocabulary.
    pub fn core_ids(&self) -> std::ops::Range<usize> {
        let core_lo = SPECIAL_SYMBOLS.len() + INSTRUCTION_SYMBOLS.len() + 1 + self.domains.len();
        core_lo..core_lo + self.config.core_vocab
    }

    /// Fraction of source tokens drawn from the shared core vocabulary, per
    /// example, minimum over the whole benchmark.
    pub fn min_core_fraction(&self) -> f64 {
        let core = self.core_ids();
        self.splits
            .iter()
            .flat_map(|s| s.selection.iter().chain(&s.test))
            .map(|ex| {
                ex.source.iter().filter(|t| core.contains(t)).count() as f64 / ex.source.len() as f64
            })
            .fold(1.0, f64::min)
    }
}
