//! Fine-tune only the selected neurons and confirm that every other weight is
//! untouched.
//!
//! `cargo run --release --example masked_finetune -- [workspace]`

mod common;

use caneft::eval::gradient_change_report;
use caneft::model::FfnModule;
use caneft::trainer::{LayerGroups, GROUP_NAMES};

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (_tmp, ws) = common::quick_workspace()?;
    if !ws.importance_dir().join("activation.json").exists() {
        ws.score(false)?;
    }
    let run = ws.default_run();
    let sel = ws.select(&run, true)?;
    let t = std::time::Instant::now();
    let log = ws.finetune(&run, true)?;
    let l = log.losses();
    println!(
        "{} neurons, {} steps in {:.0}s, loss {:.3} -> {:.3}",
        sel.neurons.len(),
        l.len(),
        t.elapsed().as_secs_f64(),
        l[0],
        l[l.len() - 1]
    );

    let base = ws.base_model()?;
    let tuned = ws.finetuned_model(&run)?;
    let changed = base
        .params()
        .iter()
        .zip(tuned.params())
        .filter(|(a, b)| a.tensor.data() != b.tensor.data())
        .count();
    println!("{changed} of {} parameter tensors changed", base.params().len());

    let groups = LayerGroups::thirds(base.config().n_layers);
    let report = gradient_change_report(&base, &tuned, &sel.ids(), groups)?;
    for g in 0..3 {
        for m in FfnModule::ALL {
            let r = report.get(g, m);
            println!(
                "{:<6} {:<4} {:>3} columns, mean |dW| selected {:.2e}, outside {:.1e}",
                GROUP_NAMES[g],
                m.as_str(),
                r.selected_columns,
                r.selected_mean_abs_change,
                r.outside_mean_abs_change
            );
        }
    }
    Ok(())
}
