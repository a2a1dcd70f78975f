//! Generates the two-class corpus, prints its spatial statistics and writes
//! a few records as PPM.
//!
//! cargo run --release --example synth_corpus -- [out_dir]

use std::path::PathBuf;

use difflab::synth::{corpus_stats, generate_corpus, SynthConfig};

fn main() -> difflab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("difflab-synth"));
    std::fs::create_dir_all(&out).map_err(|e| difflab::Error::io(&out, e))?;

    let corpus = generate_corpus(&SynthConfig::default())?;
    corpus.save(&out.join("corpus.bin"))?;
    let stats = corpus_stats(&corpus)?;
    println!("{} records, d = {}", corpus.len(), corpus.dim());
    println!("overall a.x: mu {:.4} sigma2 {:.4e}", stats.overall.mu, stats.overall.sigma2);
    for c in &stats.classes {
        println!("class {}: mu {:.4} sigma2 {:.4e} (n = {})", c.class_id, c.spatial.mu, c.spatial.sigma2, c.spatial.count);
    }
    for i in 0..6 {
        let cond = corpus.images[i].condition;
        println!("record {i}: {} color {:?} size {:.2}", cond.class.name(), cond.color, cond.size);
        corpus.export_ppm(i, &out.join(format!("record_{i}.ppm")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
