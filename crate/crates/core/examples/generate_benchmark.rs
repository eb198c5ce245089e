//! Generate the synthetic multi-domain translation benchmark and show a few
//! examples from each domain.
//!
//! `cargo run --release --example generate_benchmark -- [out_dir]`

use caneft::corpus::{generate_benchmark, Benchmark, GenConfig};

fn main() -> caneft::Result<()> {
    let bench = generate_benchmark(&GenConfig::default())?;
    println!("vocabulary: {} symbols", bench.vocab.len());
    for (i, spec) in bench.domains.iter().enumerate() {
        let split = &bench.splits[i];
        println!(
            "\n{} ({}): {} selection / {} finetune / {} test",
            spec.name,
            if spec.seen { "seen" } else { "unseen" },
            split.selection.len(),
            split.finetune.len(),
            split.test.len()
        );
        for ex in split.test.iter().take(2) {
            println!("  src {}", bench.vocab.detokenize(&ex.source)?);
            println!("  tgt {}", bench.vocab.detokenize(&ex.target)?);
        }
    }
    println!("\npretraining examples: {}", bench.pretrain.len());
    if let Some(dir) = std::env::args().nth(1) {
        let dir = std::path::Path::new(&dir);
        bench.save(dir)?;
        let back = Benchmark::load(dir)?;
        assert_eq!(back.splits[0].test.len(), bench.splits[0].test.len());
        println!("saved to {}", dir.display());
    }
    Ok(())
}
