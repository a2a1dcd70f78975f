//! Trains a short standard model, then samples the same held-out conditions
//! from pure noise, from the mean offset and from the true images, and
//! scores all three.
//!
//! cargo run --release --example offset_sampling -- [iters] [count]

use difflab::denoiser::load_checkpoint;
use difflab::eval::compare_arms;
use difflab::pca::PcaMixture;
use difflab::pipeline::{draw_inits, evaluate_saved, run_ddim_traces, InitKind};
use difflab::sampler::{export_trace, trace_stats};
use difflab::schedule::{build_schedule, ScheduleConfig};
use difflab::synth::{generate_corpus, Corpus, SynthCondition, SynthConfig, SynthImage};
use difflab::trainer::{run_training, TrainConfig};

fn main() -> difflab::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters: u64 = args.next().map_or(Ok(3000), |s| s.parse()).expect("iteration count");
    let count: usize = args.next().map_or(Ok(100), |s| s.parse()).expect("sample count");

    let dir = std::env::temp_dir().join("difflab-offset-sampling");
    std::fs::create_dir_all(&dir).map_err(|e| difflab::Error::io(&dir, e))?;
    let corpus = generate_corpus(&SynthConfig::default())?;
    corpus.save(&dir.join("corpus.bin"))?;
    let mixture = PcaMixture::fit(&corpus, 1)?;
    let eval = generate_corpus(&SynthConfig { seed: 99, n_per_class: count.div_ceil(2), ..Default::default() })?;

    let sched = build_schedule(ScheduleConfig::default())?;
    let cfg = TrainConfig {
        total_iters: iters,
        log_interval: iters,
        corpus: dir.join("corpus.bin"),
        out_dir: dir.join("train"),
        ..TrainConfig::default()
    };
    let trained = run_training(&cfg, &sched)?;
    println!("trained {iters} iterations, final loss {:.4}", trained.log.last().map_or(f64::NAN, |r| r.mean_loss));
    let (params, _) = load_checkpoint(&trained.final_checkpoint, Some(corpus.dim()))?;

    let conds: Vec<SynthCondition> = eval.images.iter().map(|i| i.condition).collect();
    let (h, w, c) = (eval.height, eval.width, eval.channels);
    let mut reports = Vec::new();
    for (name, kind) in [("noise", InitKind::Noise), ("mean_offset", InitKind::Offset), ("control", InitKind::Control)] {
        let inits = draw_inits(kind, &eval, &sched, Some(&mixture), 0, false, 7)?;
        let traces = run_ddim_traces(&params, &inits, &conds, &sched, 100)?;
        let step1: f64 = traces.iter().map(|t| trace_stats(t, h, w, c)[0].x0_hat_border_std).sum::<f64>() / traces.len() as f64;
        println!("{name:>12}: mean step-1 border std of x0_hat {step1:.4}");
        export_trace(&traces[0], h, w, c, &dir.join("traces"), name)?;

        let images = traces
            .iter()
            .zip(&conds)
            .map(|(t, cond)| SynthImage { pixels: t.final_image().to_vec(), condition: *cond })
            .collect();
        let samples = Corpus::new(h, w, c, images)?;
        reports.push(evaluate_saved(&format!("ddim_train+{name}_inf"), &samples)?);
    }
    print!("\n{}", compare_arms(&reports)?.to_table());
    println!("traces in {}", dir.join("traces").display());
    Ok(())
}
