//! Gradient-activation importance of every FFN neuron, and how well it tracks
//! the true loss change when a neuron is switched off.
//!
//! `cargo run --release --example neuron_importance -- [workspace]`

mod common;

use caneft::importance::{per_sample_importance, taylor_agreement};
use caneft::model::Sequence;
use caneft::selection::rank_descending;

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (_tmp, ws) = common::quick_workspace()?;
    let model = ws.base_model()?;
    let bench = ws.benchmark()?;
    let space = model.space();

    let imp = if ws.importance_dir().join("activation.json").exists() {
        ws.importance()?
    } else {
        ws.score(false)?
    };
    for (name, summary) in imp.domain_names.iter().zip(&imp.summaries) {
        let top: Vec<String> = rank_descending(&summary.mean)
            .into_iter()
            .take(5)
            .map(|f| {
                let id = space.id(f);
                format!("L{}.{}[{}]={:.4}", id.layer, id.module.as_str(), id.index, summary.mean[f])
            })
            .collect();
        println!("{name:<4} {} samples, top: {}", summary.count, top.join(" "));
    }

    let seqs: Vec<Sequence> = bench.splits[0].selection[..8].iter().map(|e| e.sequence()).collect();
    let scores = per_sample_importance(&model, &seqs[0])?;
    println!("\none sample: {} scores, max {:.4}", scores.len(), scores.iter().cloned().fold(0.0, f64::max));

    let probe: Vec<_> = (0..space.len()).step_by(space.len() / 40).map(|f| space.id(f)).collect();
    let report = taylor_agreement(&model, &seqs, &probe, &[1e-2, 5e-3, 2.5e-3], true)?;
    println!(
        "first-order residual shrinks quadratically for {:.0}% of {} probed neurons",
        100.0 * report.order_pass_fraction,
        probe.len()
    );
    println!(
        "spearman(importance, ablation |dL|): per sample {:.3}, aggregate {:.3}",
        report.mean_per_sample_rho, report.aggregate_rho
    );
    Ok(())
}
