//! Analytic vs central-difference gradients of the denoiser loss in f64.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use difflab::denoiser::{Batch, DenoiserConfig, DenoiserParams};

fn main() -> difflab::Result<()> {
    let config = DenoiserConfig { hidden: 32, ..DenoiserConfig::new(48) };
    let params = DenoiserParams::<f64>::init(config, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    let batch = Batch {
        x_t: rand(8, config.d),
        t: (1..=8).map(|i| i * 120).collect(),
        cond: rand(8, config.cond_dim),
        target: rand(8, config.d),
    };
    let (loss, grad) = params.loss_and_grad(&batch)?;
    println!("{} parameters, loss {loss:.6}", params.len());

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut pick = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let k = pick.random_range(0..params.len());
        let mut plus = params.clone();
        plus.data[k] += h;
        let mut minus = params.clone();
        minus.data[k] -= h;
        let fd = (plus.loss(&batch)? - minus.loss(&batch)?) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-10);
        worst = worst.max(rel);
        println!("param {k:>6}: analytic {:+.6e}  numeric {fd:+.6e}  rel {rel:.1e}", grad[k]);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
