//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 2, 3 and 5 to 10 share one pipeline workspace on the default
//! config (pretrained base model, importance shards, and 5 seeds of each
//! strategy at a 1% budget). It is built in a temporary directory, or under
//! `$CANEFT_ACCEPTANCE_CACHE` when that is set, in which case finished
//! artifacts are reused on the next run and reported as such.
//!
//! The process exits non-zero if any criterion fails, except those listed in
//! `KNOWN_CONFLICTS`, whose target value contradicts its own definition.

use std::time::Instant;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use caneft::eval::corpus_bleu;
use caneft::importance::{taylor_agreement, Shard, ORDER_THRESHOLD};
use caneft::model::{FfnModule, Model, ParamKind, Sequence};
use caneft::pipeline::{PipelineConfig, RunSpec, Workspace};
use caneft::selection::{
    accumulate_joint, compute_bin_edges, entropy_mi, mutual_information, JointHistogram, MiScores,
    Strategy,
};
use caneft::tensor::gradcheck::check_random_graph;
use caneft::trainer::{finetune, finetune_ffn_reference, SelectionMask, TrainConfig};
use num_rational::Ratio;

/// Criterion 9 pins 73.48 for a case whose own formula evaluates to 75.98.
const KNOWN_CONFLICTS: [usize; 1] = [9];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BUDGET: f64 = 0.01;
const EPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

type Outcome = caneft::Result<(bool, String)>;

struct Fixture {
    _tmp: Option<tempfile::TempDir>,
    ws: Workspace,
    build_secs: f64,
    reused: bool,
}

fn fixture() -> caneft::Result<Fixture> {
    let config = PipelineConfig::default();
    let (tmp, root) = match std::env::var_os("CANEFT_ACCEPTANCE_CACHE") {
        Some(dir) => (None, std::path::PathBuf::from(dir).join(format!("default-{}", &config.hash()[..12]))),
        None => {
            let t = tempfile::tempdir().expect("temporary directory");
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let ws = Workspace::open(&root, config)?;
    let t = Instant::now();
    let mut reused = true;
    if !ws.data_dir().join("domains.json").exists() {
        ws.gen_data(false)?;
        reused = false;
    }
    if !ws.base_checkpoint().exists() {
        ws.pretrain(false)?;
        reused = false;
    }
    if !ws.importance_dir().join("activation.json").exists() {
        ws.score(false)?;
        reused = false;
    }
    ws.ensure_base_eval()?;
    Ok(Fixture {
        _tmp: tmp,
        ws,
        build_secs: t.elapsed().as_secs_f64(),
        reused,
    })
}

fn time_limit(ok: bool, secs: f64, limit: f64) -> (bool, String) {
    (ok && secs < limit, format!("{secs:.0}s of {limit:.0}s"))
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..50 {
        let r = check_random_graph(seed, 1e-2)?;
        worst = worst.max(r.max_rel_error);
        entries += r.entries;
    }
    let (ok, time) = time_limit(worst < 1e-6, t.elapsed().as_secs_f64(), 60.0);
    Ok((ok, format!("50 graphs, {entries} entries, max relative error {worst:.2e} (< 1e-6), {time}")))
}

fn probe_sequences(ws: &Workspace, per_domain: usize) -> caneft::Result<Vec<Sequence>> {
    let bench = ws.benchmark()?;
    Ok(bench
        .seen_domains()
        .flat_map(|(i, _)| bench.splits[i].test[..per_domain].iter().map(|e| e.sequence()))
        .collect())
}

fn c2_taylor_order(ws: &Workspace, model: &Model) -> Outcome {
    let t = Instant::now();
    let space = model.space();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids: Vec<_> = sample(&mut rng, space.len(), 200).into_iter().map(|f| space.id(f)).collect();
    let seqs = probe_sequences(ws, 2)?;
    let r = taylor_agreement(model, &seqs, &ids, &EPS, false)?;
    let orders: Vec<f64> = r.directional.iter().filter_map(|d| d.order).collect();
    let median = if orders.is_empty() {
        f64::NAN
    } else {
        let mut o = orders.clone();
        o.sort_by(f64::total_cmp);
        o[o.len() / 2]
    };
    let (ok, time) = time_limit(r.order_pass_fraction >= 0.9, t.elapsed().as_secs_f64(), 300.0);
    Ok((
        ok,
        format!(
            "{:.1}% of 200 neurons with slope >= {ORDER_THRESHOLD} (need 90%), median slope {median:.3}, {} samples, {time}",
            100.0 * r.order_pass_fraction,
            seqs.len()
        ),
    ))
}

fn c3_ablation(ws: &Workspace, model: &Model) -> Outcome {
    let t = Instant::now();
    let seqs = probe_sequences(ws, 5)?;
    let r = taylor_agreement(model, &seqs, &[], &EPS, true)?;
    let (ok, time) = time_limit(r.mean_per_sample_rho >= 0.5, t.elapsed().as_secs_f64(), 900.0);
    Ok((
        ok,
        format!(
            "mean per-sample spearman {:.3} over {} samples (need 0.5), aggregate {:.3}, {time}",
            r.mean_per_sample_rho,
            seqs.len(),
            r.aggregate_rho
        ),
    ))
}

/// Plug-in partial MI with exact fractions; only the final log is rounded.
fn exact_partials(counts: &[u64], domains: usize) -> Vec<f64> {
    let bins = counts.len() / domains;
    let n = counts.iter().sum::<u64>() as i64;
    let p = |c: u64| Ratio::new(c as i64, n);
    let f = |r: Ratio<i64>| *r.numer() as f64 / *r.denom() as f64;
    (0..domains)
        .map(|d| {
            let pd = p((0..bins).map(|i| counts[i * domains + d]).sum());
            (0..bins)
                .filter(|&i| counts[i * domains + d] > 0)
                .map(|i| {
                    let pid = p(counts[i * domains + d]);
                    let pi = p(counts[i * domains..(i + 1) * domains].iter().sum());
                    f(pid) * f(pid / (pi * pd)).ln()
                })
                .sum()
        })
        .collect()
}

fn histogram(bins: usize, domains: usize, counts: Vec<u64>) -> JointHistogram {
    let domain_totals: Vec<u64> = (0..domains).map(|d| (0..bins).map(|i| counts[i * domains + d]).sum()).collect();
    JointHistogram {
        bins,
        domains: (0..domains as u64).collect(),
        total: domain_totals.iter().sum(),
        domain_totals,
        counts,
        clamped: 0,
    }
}

fn c4_mi_oracle() -> Outcome {
    use rand::Rng;
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..100 {
        let bins = rng.gen_range(2..=5);
        let domains = rng.gen_range(2..=4);
        let mut counts: Vec<u64> = (0..bins * domains).map(|_| rng.gen_range(0..=12)).collect();
        for d in 0..domains {
            counts[rng.gen_range(0..bins) * domains + d] += 1;
        }
        let mi = mutual_information(&histogram(bins, domains, counts.clone()))?;
        let exact = exact_partials(&counts, domains);
        for (a, b) in mi.partials[0].iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((mi.total[0] - exact.iter().sum::<f64>()).abs());
        worst_identity = worst_identity.max((entropy_mi(&counts, domains) - mi.total[0]).abs());
    }
    // n[i][d] = a_i * b_d
    let (a, b) = ([3u64, 1, 4, 1, 5], [2u64, 7, 1]);
    let outer: Vec<u64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
    let indep = mutual_information(&histogram(5, 3, outer))?.total[0];
    let det = mutual_information(&histogram(2, 2, vec![9, 0, 0, 9]))?.total[0];
    let det_err = (det - std::f64::consts::LN_2).abs();
    let ok = worst <= 1e-12 && worst_identity <= 1e-12 && indep.abs() <= 1e-12 && det_err <= 1e-12;
    let (ok, time) = time_limit(ok, t.elapsed().as_secs_f64(), 60.0);
    Ok((
        ok,
        format!(
            "100 tables: max |MI - exact| {worst:.1e}, entropy form {worst_identity:.1e}; independent {indep:.1e}; deterministic - ln 2 = {det_err:.1e}; {time}"
        ),
    ))
}

fn mi_of(shards: &[Shard], bins: usize) -> caneft::Result<MiScores> {
    let refs: Vec<&Shard> = shards.iter().collect();
    let edges = compute_bin_edges(&refs, bins)?;
    mutual_information(&accumulate_joint(&refs, &edges)?)
}

fn same_neuron(a: &MiScores, b: &MiScores, j: usize) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    bits(&a.partials[j]) == bits(&b.partials[j])
        && a.total[j].to_bits() == b.total[j].to_bits()
        && a.consensus[j].to_bits() == b.consensus[j].to_bits()
        && a.effective_bins[j] == b.effective_bins[j]
}

fn c5_rank_invariance(ws: &Workspace) -> Outcome {
    let t = Instant::now();
    let imp = ws.importance()?;
    let bins = ws.config().selection.bins;
    let before = mi_of(&imp.shards, bins)?;
    let n = before.neurons();
    let probes = [0, n / 3, n / 2, 2 * n / 3 + 1, n - 1];
    let mut identical = 0;
    for &j in &probes {
        let mut shards = imp.shards.clone();
        for s in &mut shards {
            let w = s.neurons;
            for row in s.scores.chunks_mut(w) {
                row[j] = row[j].powi(3);
            }
        }
        let after = mi_of(&shards, bins)?;
        let others = (0..n).filter(|&k| k != j).all(|k| same_neuron(&before, &after, k));
        if same_neuron(&before, &after, j) && others {
            identical += 1;
        }
    }
    let (ok, time) = time_limit(identical == probes.len(), t.elapsed().as_secs_f64(), 60.0);
    Ok((ok, format!("{identical} of {} cubed neurons bit-identical on real shards, {time}", probes.len())))
}

fn ffn_columns(p: &ParamKind, mask: &SelectionMask) -> Option<(bool, Vec<bool>)> {
    match *p {
        ParamKind::FfnWeight { layer, module } => Some((true, mask.columns(layer, module).to_vec())),
        ParamKind::FfnBias { layer, module } => Some((false, mask.columns(layer, module).to_vec())),
        _ => None,
    }
}

fn c6_freeze(ws: &Workspace, base: &Model) -> Outcome {
    let t = Instant::now();
    let run = RunSpec {
        strategy: Strategy::Caneft,
        budget_ratio: BUDGET,
        seed: 0,
    };
    let sel = if ws.run_dir(&run).join("selection.json").exists() {
        ws.selection(&run)?
    } else {
        ws.select(&run, false)?
    };
    let data = ws.benchmark()?.finetune_sequences();
    let cfg = TrainConfig {
        steps: 500,
        ..ws.config().finetune.clone()
    };
    let mask = SelectionMask::build(&sel.ids(), base.space())?;
    let mut tuned = base.clone();
    finetune(&mut tuned, &data, &mask, &cfg)?;

    let mut frozen_moved = 0usize;
    let mut frozen_entries = 0usize;
    let mut selected_cols = 0usize;
    let mut selected_moved = 0usize;
    for (p0, p1) in base.params().iter().zip(tuned.params()) {
        let (a, b) = (p0.tensor.data(), p1.tensor.data());
        match ffn_columns(&p0.kind, &mask) {
            None => {
                frozen_entries += a.len();
                frozen_moved += a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
            }
            Some((is_weight, cols)) => {
                let w = cols.len();
                for (k, (x, y)) in a.iter().zip(b).enumerate() {
                    if !cols[k % w] {
                        frozen_entries += 1;
                        frozen_moved += usize::from(x.to_bits() != y.to_bits());
                    }
                }
                if is_weight {
                    for c in (0..w).filter(|&c| cols[c]) {
                        selected_cols += 1;
                        let moved = (0..a.len() / w).any(|r| a[r * w + c] != b[r * w + c]);
                        selected_moved += usize::from(moved);
                    }
                }
            }
        }
    }

    let mut full = base.clone();
    finetune(&mut full, &data, &SelectionMask::full(base.space()), &cfg)?;
    let mut reference = base.clone();
    finetune_ffn_reference(&mut reference, &data, &cfg)?;
    let same = full.params().iter().zip(reference.params()).all(|(a, b)| {
        a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let ok = frozen_moved == 0 && selected_cols > 0 && selected_moved == selected_cols && same;
    let (ok, time) = time_limit(ok, t.elapsed().as_secs_f64(), 300.0);
    Ok((
        ok,
        format!(
            "{frozen_moved} of {frozen_entries} frozen entries moved; {selected_moved} of {selected_cols} selected columns moved; full mask {} reference; {time}",
            if same { "bit-identical to" } else { "differs from" }
        ),
    ))
}

struct Runs {
    strategies: Vec<Strategy>,
    /// `seen[strategy][seed]`
    seen: Vec<Vec<f64>>,
    unseen: Vec<Vec<f64>>,
    base_seen: f64,
    base_unseen: f64,
    secs: f64,
}

fn protocol(ws: &Workspace) -> caneft::Result<Runs> {
    let t = Instant::now();
    let strategies = vec![Strategy::Caneft, Strategy::Rcn, Strategy::ImportanceOnly, Strategy::NoMdmtn];
    let mut seen = vec![Vec::new(); strategies.len()];
    let mut unseen = vec![Vec::new(); strategies.len()];
    for &seed in &SEEDS {
        for (k, &strategy) in strategies.iter().enumerate() {
            let r = ws.ensure_run(&RunSpec {
                strategy,
                budget_ratio: BUDGET,
                seed,
            })?;
            seen[k].push(r.seen.expect("seen domains").token_accuracy);
            unseen[k].push(r.unseen.expect("unseen domain").token_accuracy);
        }
        let row: Vec<String> = strategies
            .iter()
            .enumerate()
            .map(|(k, s)| format!("{s} {:.4}/{:.4}", seen[k][seen[k].len() - 1], unseen[k][unseen[k].len() - 1]))
            .collect();
        println!("  seed {seed} seen/unseen: {}", row.join(", "));
    }
    let base = ws.ensure_base_eval()?;
    Ok(Runs {
        strategies,
        seen,
        unseen,
        base_seen: base.seen.expect("seen domains").token_accuracy,
        base_unseen: base.unseen.expect("unseen domain").token_accuracy,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn wins(a: &[f64], b: &[f64], strict: bool) -> usize {
    a.iter().zip(b).filter(|(x, y)| if strict { x > y } else { x >= y }).count()
}

fn c7_ordering(runs: &Runs, fx: &Fixture) -> Outcome {
    let (c, r) = (&runs.seen[0], &runs.seen[1]);
    let per_seed = wins(c, r, true);
    let unseen = mean(&runs.unseen[0]);
    let ok = mean(c) > mean(r) && per_seed >= 4 && unseen >= runs.base_unseen - 0.01;
    let total = fx.build_secs + runs.secs;
    let (ok, time) = time_limit(ok, total, 7200.0);
    Ok((
        ok,
        format!(
            "seen caneft {:.4} vs rcn {:.4} (base {:.4}), caneft ahead on {per_seed}/5 seeds; unseen caneft {unseen:.4} vs base {:.4}; {time}{}",
            mean(c),
            mean(r),
            runs.base_seen,
            runs.base_unseen,
            if fx.reused { ", upstream artifacts reused from cache" } else { "" }
        ),
    ))
}

fn c8_ablations(runs: &Runs) -> Outcome {
    let c = &runs.seen[0];
    let mut ok = true;
    let mut parts = Vec::new();
    for k in 2..runs.strategies.len() {
        let w = wins(c, &runs.seen[k], false);
        ok &= w >= 4;
        parts.push(format!("caneft >= {} on {w}/5 seeds (mean {:.4} vs {:.4})", runs.strategies[k], mean(c), mean(&runs.seen[k])));
    }
    Ok((ok, parts.join("; ")))
}

fn c9_bleu() -> Outcome {
    let hyp = vec![vec![10, 11, 12, 13, 14, 15]];
    let reference = vec![vec![10, 11, 12, 13, 14, 16]];
    let hand = corpus_bleu(&hyp, &reference)?;
    let identical = corpus_bleu(&reference, &reference)?;
    let expected = (5.0f64 / 6.0 * 4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0).powf(0.25) * 100.0;
    let ok = (hand - 73.48).abs() <= 0.01 && identical == 100.0;
    Ok((
        ok,
        format!(
            "hand example {hand:.2} (target 73.48; (5/6*4/5*3/4*2/3)^(1/4)*100 = {expected:.2}); identical corpus {identical}"
        ),
    ))
}

fn c10_conservation(ws: &Workspace) -> Outcome {
    let space = ws.base_model()?.space();
    let mut checked = 0;
    let mut bad = Vec::new();
    for &seed in &SEEDS {
        for strategy in [Strategy::Caneft, Strategy::Rcn, Strategy::ImportanceOnly, Strategy::NoMdmtn] {
            let run = RunSpec {
                strategy,
                budget_ratio: BUDGET,
                seed,
            };
            let ids = ws.selection(&run)?.ids();
            let table = ws.report_distribution(&run, true)?;
            for l in 0..space.n_layers {
                for m in FfnModule::ALL {
                    let want = ids.iter().filter(|i| i.layer == l && i.module == m).count();
                    let got: usize = table.rows.iter().filter(|r| r.layer == l && r.module == m).map(|r| r.count).sum();
                    if want != got {
                        bad.push(format!("{} L{l}.{}: {got} != {want}", run.name(), m.as_str()));
                    }
                }
            }
            let grads = ws.report_gradients(&run, true)?;
            if grads.rows.iter().any(|r| r.outside_mean_abs_change != 0.0) {
                bad.push(format!("{} moved outside its mask", run.name()));
            }
            checked += 1;
        }
    }
    Ok((bad.is_empty(), format!("{checked} runs checked; {}", if bad.is_empty() { "no violations".into() } else { bad.join(", ") })))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut failed = Vec::new();
    let mut record = |n: usize, name: &str, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    };

    record(1, "gradient correctness", c1_gradients());
    let fx = match fixture() {
        Ok(f) => f,
        Err(e) => {
            println!("fixture failed: {e}");
            std::process::exit(1);
        }
    };
    println!(
        "  default-model fixture ready in {:.0}s{} at {}",
        fx.build_secs,
        if fx.reused { " (reused)" } else { "" },
        fx.ws.root().display()
    );
    let base = fx.ws.base_model().expect("base checkpoint");
    record(2, "taylor order", c2_taylor_order(&fx.ws, &base));
    record(3, "ablation agreement", c3_ablation(&fx.ws, &base));
    record(4, "mutual information oracle", c4_mi_oracle());
    record(5, "rank invariance", c5_rank_invariance(&fx.ws));
    record(6, "freeze bit-identity", c6_freeze(&fx.ws, &base));
    match protocol(&fx.ws) {
        Ok(runs) => {
            record(7, "end-to-end ordering", c7_ordering(&runs, &fx));
            record(8, "ablation ordering", c8_ablations(&runs));
        }
        Err(e) => {
            record(7, "end-to-end ordering", Err(e));
            record(8, "ablation ordering", Ok((false, "protocol runs failed".into())));
        }
    }
    record(9, "bleu oracle", c9_bleu());
    record(10, "report conservation", c10_conservation(&fx.ws));

    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_CONFLICTS.contains(n)).collect();
    for n in failed.iter().filter(|n| KNOWN_CONFLICTS.contains(n)) {
        println!("criterion {n} failed on a target that contradicts its own definition; see README");
    }
    println!("{} of 10 criteria passed", 10 - failed.len());
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
