//! Every stage of the method plus the baselines on the quick preset:
//! generate, pretrain, score, then select / fine-tune / evaluate each
//! strategy at the same budget.
//!
//! `cargo run --release --example full_pipeline -- [workspace]`

mod common;

use caneft::pipeline::RunSpec;
use caneft::selection::Strategy;

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (_tmp, ws) = common::quick_workspace()?;
    let base = ws.ensure_base_eval()?;
    let (bs, bu) = (base.seen.expect("seen domains"), base.unseen.expect("unseen domain"));
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "strategy", "seen acc", "unseen", "seen bleu", "unseen");
    println!("{:<16} {:>8.4} {:>8.4} {:>8.2} {:>8.2}", "base", bs.token_accuracy, bu.token_accuracy, bs.bleu, bu.bleu);
    for strategy in Strategy::ALL {
        let run = RunSpec { strategy, ..ws.default_run() };
        let r = ws.run_all(&run, false)?;
        let (s, u) = (r.seen.expect("seen domains"), r.unseen.expect("unseen domain"));
        println!("{:<16} {:>8.4} {:>8.4} {:>8.2} {:>8.2}", strategy.as_str(), s.token_accuracy, u.token_accuracy, s.bleu, u.bleu);
    }
    let table = ws.report_distribution(&ws.default_run(), true)?;
    println!("\ncaneft neurons by module:");
    for m in caneft::model::FfnModule::ALL {
        println!("  {:<4} {}", m.as_str(), table.module_total(m));
    }
    Ok(())
}
