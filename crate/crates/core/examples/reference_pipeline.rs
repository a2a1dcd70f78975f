//! Runs the full experiment and prints the arm comparison.
//!
//! cargo run --release --example reference_pipeline -- [config.txt] [key=value ...]

use std::path::Path;

use difflab::kvconfig::KvConfig;
use difflab::pipeline::{run_pipeline, ExperimentConfig};

fn main() -> difflab::Result<()> {
    let mut kv = KvConfig::default();
    kv.set("experiment.out_dir", std::env::temp_dir().join("difflab-reference").display());
    for arg in std::env::args().skip(1) {
        if arg.contains('=') {
            kv.apply_override(&arg)?;
        } else {
            kv.merge(KvConfig::load(Path::new(&arg))?);
        }
    }
    let cfg = ExperimentConfig::from_kv(&kv)?;
    let started = std::time::Instant::now();
    let out = run_pipeline(&cfg)?;
    for s in &out.stages {
        println!("{:<40} {}", s.stage, if s.ran { "ran" } else { "cached" });
    }
    print!("{}", out.comparison.to_table());
    println!("output: {}  ({:.1}s)", cfg.out_dir.display(), started.elapsed().as_secs_f64());
    Ok(())
}
