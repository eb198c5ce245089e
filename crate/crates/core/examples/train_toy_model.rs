//! Pretrain the toy decoder on the generic copy-and-reorder instruction,
//! round-trip its checkpoint and decode a few test prompts.
//!
//! `cargo run --release --example train_toy_model -- [workspace]`

mod common;

use caneft::eval::greedy_decode;
use caneft::model::{load_checkpoint, save_checkpoint};

fn main() -> caneft::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (_tmp, ws) = common::quick_workspace()?;
    let model = ws.base_model()?;
    let c = model.config();
    println!(
        "{} layers, d_model {}, d_ffn {}: {} parameters, {} FFN neurons",
        c.n_layers,
        c.d_model,
        c.d_ffn,
        model.param_count(),
        model.space().len()
    );

    let copy = ws.root().join("copy.ckpt");
    save_checkpoint(&model, &copy)?;
    assert_eq!(load_checkpoint(&copy)?.checksum(), model.checksum());
    println!("checkpoint sha256 {}", model.checksum());

    let bench = ws.benchmark()?;
    for (i, spec) in bench.domains.iter().enumerate() {
        let ex = &bench.splits[i].test[0];
        let out = greedy_decode(&model, &[ex.prompt()], ex.target.len() + 2)?;
        println!("\n[{}] {}", spec.name, bench.vocab.detokenize(&ex.source)?);
        println!("  reference  {}", bench.vocab.detokenize(&ex.target)?);
        println!("  base model {}", bench.vocab.detokenize(&out[0])?);
    }
    Ok(())
}
