//! Hallucinated-fact counts of each pipeline on seeded corpora.
//!
//! `cargo run --release --example ablation -- [items] [seeds...]`

use inex_core::eval::{biased_model, generate_corpus, run_benchmark, BenchmarkConfig, Pipeline, Setting};
use inex_core::model::ModelConfig;
use inex_core::par::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut seeds: Vec<u64> = args.map(|s| s.parse()).collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        seeds = (0..5).collect();
    }
    let weights = biased_model(&ModelConfig::default())?;
    let cfg = BenchmarkConfig::default();
    println!("seed,pipeline,hallucinated_facts,accuracy,f1,chair_i,ece");
    for seed in seeds {
        let items = generate_corpus(size, Setting::Random, seed)?;
        for p in Pipeline::ALL {
            let r = run_benchmark(&items, p, &weights, &cfg, Execution::Parallel)?;
            println!(
                "{seed},{p},{},{:.3},{:.3},{:.3},{:.3}",
                r.hallucinated_facts, r.binary.accuracy, r.binary.f1, r.chair.chair_i, r.calibration.ece
            );
        }
    }
    Ok(())
}
