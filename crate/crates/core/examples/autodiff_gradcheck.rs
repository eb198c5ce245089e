//! Finite-difference check of every tape op on random small graphs.
//!
//! `cargo run --release --example autodiff_gradcheck -- [graphs]`

use caneft::tensor::gradcheck::{check_random_graph, FD_STEP};

fn main() -> caneft::Result<()> {
    let graphs: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..graphs {
        let r = check_random_graph(seed, 1e-2)?;
        worst = worst.max(r.max_rel_error);
        entries += r.entries;
    }
    println!("{graphs} graphs, {entries} gradient entries, step {FD_STEP:e}");
    println!("worst relative error {worst:.3e}");
    Ok(())
}
