//! Per-class PCA: spectrum, projection error by K and initialization draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use difflab::pca::PcaMixture;
use difflab::synth::{generate_corpus, SynthConfig};

fn main() -> difflab::Result<()> {
    let corpus = generate_corpus(&SynthConfig { n_per_class: 500, ..Default::default() })?;
    let mixture = PcaMixture::fit(&corpus, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for model in &mixture.models {
        let total: f64 = model.eigenvalues.iter().sum();
        println!("class {}: top eigenvalues {:?}", model.class_id, &model.eigenvalues[..4]);
        println!("  top-16 variance {:.3}, orthonormality error {:.1e}", total, model.orthonormality_error());

        let x: Vec<f64> = corpus
            .images
            .iter()
            .find(|i| i.condition.class.id() == model.class_id)
            .unwrap()
            .pixels
            .iter()
            .map(|&v| v as f64)
            .collect();
        for k in [0, 1, 3, 8, 16] {
            let p = model.project(&x, k)?;
            let err: f64 = x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            println!("  K = {k:>2}: |x - x_K| = {err:.3}");
        }
        let draw = model.sample_init(3, &mut rng)?;
        let mean_dist: f64 = draw.iter().zip(&model.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("  PCA-3 draw is {mean_dist:.3} from the class mean");
    }
    Ok(())
}
