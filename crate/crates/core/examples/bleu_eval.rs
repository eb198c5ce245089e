//! Corpus metrics on hand-made token sequences, then a full evaluation of the
//! base model against a fine-tuned run.
//!
//! `cargo run --release --example bleu_eval -- [workspace]`

mod common;

use caneft::eval::{corpus_bleu, exact_match, token_accuracy, BLEU_VARIANT};

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let hyp = vec![vec![1, 2, 3, 4, 5, 6]];
    let reference = vec![vec![1, 2, 3, 4, 5, 7]];
    println!("{BLEU_VARIANT}");
    println!("one wrong final token: BLEU {:.2}", corpus_bleu(&hyp, &reference)?);
    println!("identical corpus:      BLEU {:.2}", corpus_bleu(&reference, &reference)?);
    println!("token accuracy {:.3}, exact match {:.3}", token_accuracy(&hyp, &reference)?, exact_match(&hyp, &reference)?);

    let (_tmp, ws) = common::quick_workspace()?;
    let run = ws.default_run();
    let base = ws.ensure_base_eval()?;
    let tuned = ws.run_all(&run, false)?;
    println!("\n{:<6} {:<6} {:>9} {:>9} {:>8} {:>8}", "domain", "", "base acc", "tuned acc", "base bleu", "tuned bleu");
    for d in &base.domains {
        let t = tuned.domain(&d.domain).expect("same domains");
        println!(
            "{:<6} {:<6} {:>9.4} {:>9.4} {:>8.2} {:>8.2}",
            d.domain,
            if d.seen { "seen" } else { "unseen" },
            d.token_accuracy,
            t.token_accuracy,
            d.bleu,
            t.bleu
        );
    }
    println!("reports under {}", ws.root().display());
    Ok(())
}
