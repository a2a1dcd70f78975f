//! Scores clean renders against progressively corrupted copies and compares
//! them as if they were sampling arms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use difflab::eval::{compare_arms, evaluate_batch, ImageGeometry};
use difflab::synth::{class_backgrounds, denormalize, generate_corpus, SynthCondition, SynthConfig};

fn main() -> difflab::Result<()> {
    let corpus = generate_corpus(&SynthConfig { n_per_class: 100, ..Default::default() })?;
    let geom = ImageGeometry { height: corpus.height, width: corpus.width, channels: corpus.channels };
    let conds: Vec<SynthCondition> = corpus.images.iter().map(|i| i.condition).collect();
    let clean: Vec<Vec<f32>> = corpus.images.iter().map(|i| denormalize(&i.pixels)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reports = vec![evaluate_batch("clean", &clean, &conds, &class_backgrounds(), geom)?];
    for sigma in [0.02f32, 0.08, 0.2] {
        let noisy: Vec<Vec<f32>> = clean
            .iter()
            .map(|img| img.iter().map(|&v| (v + sigma * rng.random_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect())
            .collect();
        reports.push(evaluate_batch(&format!("uniform_noise_{sigma}"), &noisy, &conds, &class_backgrounds(), geom)?);
    }
    for r in &reports {
        println!(
            "{:<20} bg_mse {:.2e}  centering {:.3}  fidelity {:.2e}  pass {:.3}",
            r.arm, r.background_mse, r.centering_error, r.attribute_fidelity, r.property_pass_rate
        );
    }
    print!("\n{}", compare_arms(&reports)?.to_table());
    Ok(())
}
