//! Final ᾱ_T across the `linear_end` sweep and the 1/d threshold check.

use difflab::gap::{predict_gap, GapReport};
use difflab::schedule::{alpha_threshold, build_schedule, sweep_linear_end, ScheduleConfig};

fn main() -> difflab::Result<()> {
    let base = ScheduleConfig::default();
    let sched = build_schedule(base)?;
    println!("T = {}, S = {}, {} inference steps: {:?}", sched.total_steps(), sched.skip(), sched.inference_steps().len(), sched.inference_steps());

    println!("{:>10} {:>14} {:>14}", "linear_end", "alpha_T", "sqrt(alpha_T)");
    for row in sweep_linear_end(base, &[0.012, 0.02, 0.025, 0.03])? {
        println!("{:>10} {:>14.4e} {:>14.4e}", row.linear_end, row.alpha_bar_final, row.sqrt_alpha_bar_final);
    }

    // a 64x64x4 latent
    let d = 16384;
    println!("threshold 1/d = {:.6}", alpha_threshold(d));
    let report = GapReport::new(predict_gap(d, sched.alpha_bar_final(), 0.5, 0.0)?, None);
    println!("{}", report.threshold_statement());
    println!("ratio1 {:.2}, ratio2 {:.2}", report.predicted.ratio1, report.predicted.ratio2);
    Ok(())
}
