use super::*;
use crate::importance::Shard;
use num_rational::Ratio;
use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

/// Plug-in MI with every probability held as an exact fraction; only the
/// final log ratio is rounded.
fn exact_partials(counts: &[u64], domains: usize) -> Vec<f64> {
    let bins = counts.len() / domains;
    let n: i64 = counts.iter().sum::<u64>() as i64;
    let p = |c: u64| Ratio::new(c as i64, n);
    let mut out = vec![0.0; domains];
    for d in 0..domains {
        let pd = p((0..bins).map(|i| counts[i * domains + d]).sum());
        for i in 0..bins {
            let pid = p(counts[i * domains + d]);
            if *pid.numer() == 0 {
                continue;
            }
            let pi = p(counts[i * domains..(i + 1) * domains].iter().sum());
            let ratio = pid / (pi * pd);
            let f = |r: Ratio<i64>| *r.numer() as f64 / *r.denom() as f64;
            out[d] += f(pid) * f(ratio).ln();
        }
    }
    out
}

fn space(n_layers: usize, d_ffn: usize, d_model: usize) -> NeuronSpace {
    NeuronSpace {
        n_layers,
        d_ffn,
        d_model,
    }
}

fn shard(domain: u64, neurons: usize, rows: &[Vec<f64>]) -> Shard {
    Shard {
        domain,
        neurons,
        samples: rows.len(),
        scores: rows.concat(),
    }
}

fn summary(domain: u64, mean: Vec<f64>) -> ImportanceSummary {
    ImportanceSummary {
        domain,
        mean,
        count: 1,
    }
}

fn mi_table(consensus: Vec<f64>, total: Vec<f64>) -> MiScores {
    MiScores {
        domains: vec![0, 1],
        partials: consensus.iter().zip(&total).map(|(c, t)| vec![*c, t - c]).collect(),
        effective_bins: vec![2; total.len()],
        total,
        consensus,
    }
}

#[test]
fn quantile_edges_split_one_to_hundred_into_quarters() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    let e = quantile_edges(&v, 4);
    assert_eq!(e, vec![25.5, 50.5, 75.5]);
    let edges = BinEdges {
        bins: 4,
        edges: vec![e],
        support: vec![(1.0, 100.0)],
    };
    let mut per_bin = [0; 4];
    for x in &v {
        per_bin[edges.bin(0, *x)] += 1;
    }
    assert_eq!(per_bin, [25; 4]);
    assert_eq!(quantile_edges(&[1.0, 2.0, 3.0, 4.0], 2), vec![2.5]);
}

#[test]
fn ties_collapse_bins() {
    assert!(quantile_edges(&[3.0; 10], 4).is_empty());
    let e = quantile_edges(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0], 4);
    assert_eq!(e, vec![0.5]);
    let e = quantile_edges(&[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0], 4);
    assert_eq!(e, vec![1.0]);
}

#[test]
fn constant_neuron_has_one_bin_and_no_information() {
    let a = shard(0, 2, &[vec![1.0, 0.1], vec![1.0, 0.2]]);
    let b = shard(1, 2, &[vec![1.0, 0.9], vec![1.0, 0.8]]);
    let edges = compute_bin_edges(&[&a, &b], 4).unwrap();
    assert!(edges.single_bin(0));
    let mi = mutual_information(&accumulate_joint(&[&a, &b], &edges).unwrap()).unwrap();
    assert_eq!(mi.total[0], 0.0);
    assert_eq!(mi.effective_bins[0], 1);
    assert!((mi.total[1] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn tiny_trace_matches_hand_tally() {
    // neuron 0: domain 0 scores {1,2,3,8}, domain 1 scores {4,5,6,7}; median split at 4.5
    let a = shard(0, 1, &[vec![1.0], vec![2.0], vec![3.0], vec![8.0]]);
    let b = shard(1, 1, &[vec![4.0], vec![5.0], vec![6.0], vec![7.0]]);
    let edges = compute_bin_edges(&[&b, &a], 2).unwrap();
    assert_eq!(edges.edges[0], vec![4.5]);
    let h = accumulate_joint(&[&a, &b], &edges).unwrap();
    assert_eq!(h.table(0), &[3, 1, 1, 3]);
    assert_eq!(h.domain_totals, vec![4, 4]);
    assert_eq!(h, accumulate_joint(&[&b, &a], &edges).unwrap());
    let mi = mutual_information(&h).unwrap();
    let want = exact_partials(&[3, 1, 1, 3], 2);
    for (g, w) in mi.partials[0].iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn out_of_support_scores_are_clamped_and_counted() {
    let a = shard(0, 1, &[vec![1.0], vec![2.0]]);
    let b = shard(1, 1, &[vec![3.0], vec![4.0]]);
    let edges = compute_bin_edges(&[&a, &b], 2).unwrap();
    let c = shard(1, 1, &[vec![-5.0], vec![50.0]]);
    let h = accumulate_joint(&[&a, &b, &c], &edges).unwrap();
    assert_eq!(h.clamped, 2);
    assert_eq!(h.table(0), &[2, 1, 0, 3]);
}

#[test]
fn independence_and_perfect_dependence() {
    let indep = [2, 4, 1, 2, 3, 6];
    assert!(partial_mi(&indep, 2).iter().all(|p| p.abs() < 1e-15));
    let det = [5, 0, 0, 5];
    let p = partial_mi(&det, 2);
    assert!((p.iter().sum::<f64>() - 2f64.ln()).abs() < 1e-15);
    assert!((entropy_mi(&det, 2) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn two_by_two_matches_exact_fractions() {
    let t = [3, 1, 1, 3];
    let got = partial_mi(&t, 2);
    let want = exact_partials(&t, 2);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
    assert!((got.iter().sum::<f64>() - entropy_mi(&t, 2)).abs() < 1e-12);
}

#[test]
fn cubing_one_neuron_leaves_mi_bit_identical() {
    let rows = |seed: u64, k: usize| -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| {
                let x = ((seed * 31 + i as u64 * 17) % 97) as f64 / 97.0 + 0.01;
                vec![x, x * 0.5 + seed as f64, (i % 3) as f64]
            })
            .collect()
    };
    let (r0, r1) = (rows(1, 40), rows(2, 40));
    let mi_of = |r0: &[Vec<f64>], r1: &[Vec<f64>]| {
        let (a, b) = (shard(0, 3, r0), shard(1, 3, r1));
        let e = compute_bin_edges(&[&a, &b], 8).unwrap();
        mutual_information(&accumulate_joint(&[&a, &b], &e).unwrap()).unwrap()
    };
    let cube = |r: &[Vec<f64>]| -> Vec<Vec<f64>> {
        r.iter().map(|v| vec![v[0].powi(3), v[1], v[2]]).collect()
    };
    let before = mi_of(&r0, &r1);
    let after = mi_of(&cube(&r0), &cube(&r1));
    assert_eq!(before.partials[0], after.partials[0]);
    assert_eq!(before.total[0].to_bits(), after.total[0].to_bits());
}

#[test]
fn min_operator_prefers_uniform_partials() {
    // neuron 0 has the larger total but one near-zero partial
    let mi = mi_table(vec![0.001, 0.2], vec![0.6, 0.4]);
    let (chosen, gamma) = select_consensus(&mi, &[0, 1], 1).unwrap();
    assert_eq!(chosen, vec![1]);
    assert_eq!(gamma, 0.2);
}

#[test]
fn consensus_matches_min_then_sort_oracle() {
    let partials = vec![
        vec![0.10, 0.30, 0.20],
        vec![0.25, 0.25, 0.26],
        vec![0.05, 0.90, 0.90],
        vec![0.20, 0.21, 0.22],
        vec![0.25, 0.40, 0.30],
    ];
    let mi = MiScores {
        domains: vec![0, 1, 2],
        total: partials.iter().map(|p| p.iter().sum()).collect(),
        consensus: partials.iter().map(|p| p.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
        effective_bins: vec![4; 5],
        partials: partials.clone(),
    };
    // exhaustive: every 2-subset scored by its smallest min-partial
    let mins: Vec<f64> = partials.iter().map(|p| p.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let mut best = (f64::NEG_INFINITY, vec![]);
    for a in 0..5 {
        for b in a + 1..5 {
            let key = mins[a] + mins[b];
            if key > best.0 {
                best = (key, vec![a, b]);
            }
        }
    }
    let (mut chosen, gamma) = select_consensus(&mi, &[0, 1, 2, 3, 4], 2).unwrap();
    chosen.sort_unstable();
    assert_eq!(chosen, best.1);
    assert_eq!(gamma, 0.25);
    let (tied, _) = select_consensus(&mi, &[0, 1, 2, 3, 4], 1).unwrap();
    assert_eq!(tied, vec![1]);
    assert!(matches!(select_consensus(&mi, &[0, 1], 3), Err(Error::Config(_))));
}

#[test]
fn task_pool_follows_sort_oracle() {
    let sp = space(1, 3, 4);
    let a: Vec<f64> = vec![0.5, 0.1, 0.9, 0.3, 0.0, 0.7, 0.2, 0.8, 0.4, 0.6];
    let b: Vec<f64> = a.iter().map(|x| x * 2.0).collect();
    let sums = [summary(0, a.clone()), summary(1, b)];
    let pool = select_task_relevant(sp, &sums, 0.3).unwrap();
    assert_eq!(pool, vec![2, 5, 7]);
    assert_eq!(select_task_relevant(sp, &sums, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
    assert!(select_task_relevant(sp, &[], 0.5).is_err());
}

#[test]
fn lape_ranks_one_domain_neuron_first() {
    let stats = [
        ActivationStats {
            domain: 0,
            positions: 10,
            positive: vec![5, 5, 0],
        },
        ActivationStats {
            domain: 1,
            positions: 10,
            positive: vec![0, 5, 0],
        },
    ];
    let h = activation_entropy(&stats).unwrap();
    assert_eq!(h[0], 0.0);
    assert!((h[1] - 2f64.ln()).abs() < 1e-15);
    assert_eq!(h[2], f64::INFINITY);
}

fn fixture() -> (NeuronSpace, Vec<ImportanceSummary>, MiScores, Vec<ActivationStats>) {
    let sp = space(2, 30, 20);
    let n = sp.len();
    let sums: Vec<_> = (0..3)
        .map(|d| summary(d, (0..n).map(|j| ((j * 37 + d as usize * 11) % 101) as f64).collect()))
        .collect();
    let partials: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..3).map(|d| ((j * 13 + d * 7) % 29) as f64 / 100.0).collect())
        .collect();
    let mi = MiScores {
        domains: vec![0, 1, 2],
        total: partials.iter().map(|p| p.iter().sum()).collect(),
        consensus: partials.iter().map(|p| p.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
        effective_bins: vec![16; n],
        partials,
    };
    let act = (0..3)
        .map(|d| ActivationStats {
            domain: d,
            positions: 50,
            positive: (0..n).map(|j| (j as u64 * 3 + d * 5) % 51).collect(),
        })
        .collect();
    (sp, sums, mi, act)
}

#[test]
fn every_strategy_spends_the_same_budget() {
    let (sp, sums, mi, act) = fixture();
    let inputs = SelectionInputs {
        space: sp,
        summaries: &sums,
        mi: Some(&mi),
        activation: &act,
    };
    let cfg = SelectionConfig {
        budget_ratio: 0.05,
        pool_ratio: 0.2,
        ..Default::default()
    };
    for s in Strategy::ALL {
        let r = select(s, &inputs, &cfg).unwrap();
        assert_eq!(r.neurons.len(), 8, "{s}");
        let mut ids = r.ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }
    let c = select(Strategy::Caneft, &inputs, &cfg).unwrap();
    let pool: Vec<NeuronId> = c
        .task_pool
        .iter()
        .map(|p| NeuronId::new(p.layer, p.module, p.index))
        .collect();
    assert_eq!(pool.len(), 32);
    assert!(c.ids().iter().all(|id| pool.contains(id)));
    assert_eq!(c.effective_gamma, c.neurons.last().unwrap().consensus_score);
}

#[test]
fn rcn_is_seeded() {
    let (sp, sums, _, _) = fixture();
    let inputs = SelectionInputs {
        space: sp,
        summaries: &sums,
        mi: None,
        activation: &[],
    };
    let cfg = |seed| SelectionConfig {
        seed,
        ..Default::default()
    };
    let a = select(Strategy::Rcn, &inputs, &cfg(7)).unwrap();
    assert_eq!(a, select(Strategy::Rcn, &inputs, &cfg(7)).unwrap());
    assert_ne!(a.ids(), select(Strategy::Rcn, &inputs, &cfg(8)).unwrap().ids());
    assert!(select(Strategy::Caneft, &inputs, &cfg(7)).is_err());
    assert!(select(Strategy::Lape, &inputs, &cfg(7)).is_err());
    assert!(matches!("bogus".parse::<Strategy>(), Err(Error::UnknownStrategy(_))));
}

#[test]
fn selection_file_round_trips() {
    let (sp, sums, mi, act) = fixture();
    let inputs = SelectionInputs {
        space: sp,
        summaries: &sums,
        mi: Some(&mi),
        activation: &act,
    };
    let r = select(Strategy::Caneft, &inputs, &SelectionConfig { budget_ratio: 0.05, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sel.json");
    r.save(&p).unwrap();
    assert_eq!(SelectionResult::load(&p).unwrap(), r);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("\"B\": 16") && text.contains("\"effective_gamma\""));
    let names: Vec<String> = ["x", "y", "z"].map(String::from).to_vec();
    let pool: Vec<usize> = (0..10).collect();
    let csv = dir.path().join("mi.csv");
    write_mi_report(&csv, sp, &mi, &names, &pool, &[("bins".into(), "16".into())]).unwrap();
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("# bins: 16\nlayer,module,index,partial_x,partial_y,partial_z,total,consensus,rank_consensus,rank_total"));
    assert_eq!(body.lines().count(), 2 + sp.len());
}

#[test]
fn equalizing_domains_cannot_raise_consensus() {
    // domain 1 piles into the high bin; adding balanced samples pulls every
    // partial toward zero
    let base = [6u64, 1, 2, 7];
    let before = partial_mi(&base, 2);
    for extra in 1..20u64 {
        let t = [base[0] + extra, base[1] + extra, base[2] + extra, base[3] + extra];
        let after = partial_mi(&t, 2);
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min(&after) <= min(&before) + 1e-15);
    }
}

proptest! {
    #[test]
    fn matches_exact_oracle_and_bounds(
        b in 2usize..6,
        d in 2usize..5,
        cells in proptest::collection::vec(0u64..12, 30),
    ) {
        let t: Vec<u64> = cells[..b * d].to_vec();
        prop_assume!(t.iter().sum::<u64>() > 0);
        let got = partial_mi(&t, d);
        let want = exact_partials(&t, d);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
            prop_assert!(*g >= -1e-15);
        }
        let total: f64 = got.iter().sum();
        prop_assert!((total - entropy_mi(&t, d)).abs() < 1e-12);
        prop_assert!(total <= (b.min(d) as f64).ln() + 1e-12);
    }

    #[test]
    fn monotone_transforms_keep_bins(xs in proptest::collection::vec(0.0f64..10.0, 4..60), bins in 2usize..9) {
        let mut a = xs.clone();
        a.sort_by(f64::total_cmp);
        let ea = BinEdges { bins, edges: vec![quantile_edges(&a, bins)], support: vec![(a[0], a[a.len() - 1])] };
        let t: Vec<f64> = a.iter().map(|x| 3.0 * x + 1.0).collect();
        let et = BinEdges { bins, edges: vec![quantile_edges(&t, bins)], support: vec![(t[0], t[t.len() - 1])] };
        for (x, y) in a.iter().zip(&t) {
            prop_assert_eq!(ea.bin(0, *x), et.bin(0, *y));
        }
        for w in ea.edges[0].windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }
}
