//! Predicted vs Monte-Carlo separation of fully noised images from pure
//! noise, at the default schedule and across a `linear_end` sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use difflab::gap::analyze_at;
use difflab::schedule::{build_schedule, ScheduleConfig};
use difflab::synth::{generate_corpus, SynthConfig};

fn main() -> difflab::Result<()> {
    let corpus = generate_corpus(&SynthConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sched = build_schedule(ScheduleConfig::default())?;
    let report = analyze_at(&corpus, sched.alpha_bar_final(), 10_000, &mut rng)?;
    print!("{}", report.to_table());

    println!("\n{:>10} {:>12} {:>10} {:>8} {:>8}", "linear_end", "alpha_T", "ratio2", "AUC", "verdict");
    for end in [0.012, 0.02, 0.025, 0.03] {
        let s = build_schedule(ScheduleConfig::default().with_linear_end(end))?;
        let r = analyze_at(&corpus, s.alpha_bar_final(), 10_000, &mut rng)?;
        let auc = r.empirical.as_ref().map_or(f64::NAN, |e| e.auc);
        println!("{end:>10} {:>12.4e} {:>10.4} {auc:>8.4} {:>8}", r.predicted.alpha_t, r.predicted.ratio2, r.verdict());
    }
    Ok(())
}
