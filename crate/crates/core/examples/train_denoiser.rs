//! Trains a small conditional denoiser on a generated corpus.
//!
//! cargo run --release --example train_denoiser -- [iters] [standard|offset]

use difflab::pca::PcaMixture;
use difflab::schedule::{build_schedule, ScheduleConfig};
use difflab::synth::{generate_corpus, SynthConfig};
use difflab::trainer::{run_training, TrainConfig, TrainMode};

fn main() -> difflab::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters: u64 = args.next().map_or(Ok(500), |s| s.parse()).expect("iteration count");
    let mode: TrainMode = args.next().as_deref().unwrap_or("standard").parse()?;

    let dir = std::env::temp_dir().join("difflab-train-example");
    std::fs::create_dir_all(&dir).map_err(|e| difflab::Error::io(&dir, e))?;
    let corpus = generate_corpus(&SynthConfig::default())?;
    let corpus_path = dir.join("corpus.bin");
    corpus.save(&corpus_path)?;
    let pca_path = dir.join("pca");
    PcaMixture::fit(&corpus, 8)?.save(&pca_path)?;

    let sched = build_schedule(ScheduleConfig::default())?;
    let cfg = TrainConfig {
        mode,
        total_iters: iters,
        log_interval: (iters / 10).max(1),
        corpus: corpus_path,
        pca: Some(pca_path),
        out_dir: dir.join(format!("train-{mode}")),
        ..TrainConfig::default()
    };
    let out = run_training(&cfg, &sched)?;
    for rec in &out.log {
        println!("iter {:>6}  loss {:.5}  offset {:.3}  {:.1}s", rec.iter, rec.mean_loss, rec.offset_fraction, rec.wall_clock_s);
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}
