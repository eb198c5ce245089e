//! Mutual information between neuron importance and domain, the consensus
//! (min over domains) score, and how each selection strategy's picks overlap.
//!
//! `cargo run --release --example consensus_selection -- [workspace]`

mod common;

use caneft::model::NeuronId;
use caneft::pipeline::RunSpec;
use caneft::selection::{overlap, ranking_agreement, Strategy};

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (_tmp, ws) = common::quick_workspace()?;
    let imp = if ws.importance_dir().join("activation.json").exists() {
        ws.importance()?
    } else {
        ws.score(false)?
    };
    let mi = imp.mi_scores(ws.config().selection.bins)?;
    let n = mi.neurons();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("{n} neurons, {} seen domains", mi.domains.len());
    println!("mean total MI {:.4} nats, mean consensus {:.4}", mean(&mi.total), mean(&mi.consensus));
    println!("spearman(consensus, total) {:.3}", ranking_agreement(&mi));

    let best = (0..n).max_by(|&a, &b| mi.consensus[a].total_cmp(&mi.consensus[b])).unwrap_or(0);
    let parts: Vec<String> = imp
        .domain_names
        .iter()
        .zip(&mi.partials[best])
        .map(|(d, p)| format!("{d}={p:.4}"))
        .collect();
    println!("strongest consensus neuron #{best}: {}", parts.join(" "));

    let mut picks: Vec<(Strategy, Vec<NeuronId>)> = Vec::new();
    for strategy in Strategy::ALL {
        let run = RunSpec { strategy, ..ws.default_run() };
        let sel = ws.select(&run, true)?;
        if let Some(g) = sel.effective_gamma {
            println!("{strategy}: {} neurons, gamma {g:.5}", sel.neurons.len());
        } else {
            println!("{strategy}: {} neurons", sel.neurons.len());
        }
        picks.push((strategy, sel.ids()));
    }
    let caneft = &picks[0].1;
    for (s, ids) in &picks[1..] {
        println!("overlap(caneft, {s}) = {:.2}", overlap(caneft, ids));
    }
    println!("per-neuron report: {}", ws.run_dir(&ws.default_run()).join("mi_report.csv").display());
    Ok(())
}
