//! Forward-process algebra shared by training and sampling.
//!
//! Standard noising: `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`. Offset noising replaces
//! `x_0` by a start image `x_s` and rewrites the target so that `x̂_0`
//! recovery still returns the true `x_0`:
//! `ε_new = (x_t − √ᾱ_t·x_0)/√(1−ᾱ_t) = ε + √(ᾱ_t/(1−ᾱ_t))·(x_s − x_0)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub x_t: Vec<f32>,
    pub t: usize,
    /// Noise actually added.
    pub epsilon: Vec<f32>,
    /// `x_0` on the standard branch, the offset start otherwise.
    pub x_start_used: Vec<f32>,
    pub target_epsilon: Vec<f32>,
    pub offset: bool,
}

pub fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f32> {
    (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// `√ᾱ·x + √(1−ᾱ)·ε`, element-wise in `f64`.
pub fn noise_with(x: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x.iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect()
}

/// Standard forward sample with a fresh `ε ~ N(0, I)`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    x0: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> ForwardSample {
    let eps = standard_normal(x0.len(), rng);
    forward_diffuse_with(x0, t, sched.alpha_bar(t), eps)
}

pub fn forward_diffuse_with(x0: &[f32], t: usize, alpha_bar: f64, eps: Vec<f32>) -> ForwardSample {
    ForwardSample {
        x_t: noise_with(x0, &eps, alpha_bar),
        t,
        target_epsilon: eps.clone(),
        epsilon: eps,
        x_start_used: x0.to_vec(),
        offset: false,
    }
}

/// `x̂_0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ`.
pub fn recover_x0(x_t: &[f32], eps_hat: &[f32], alpha_bar: f64) -> Result<Vec<f32>> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::Numeric(format!(
            "x0 recovery needs alpha_bar in (0, 1], got {alpha_bar}"
        )));
    }
    Ok(recover_x0_unchecked(x_t, eps_hat, alpha_bar))
}

pub(crate) fn recover_x0_unchecked(x_t: &[f32], eps_hat: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32)
        .collect()
}

/// Offset forward sample for `t ≥ T − S`.
pub fn offset_forward<R: Rng + ?Sized>(
    x0: &[f32],
    x_start: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ForwardSample> {
    if !sched.in_offset_window(t) {
        return Err(Error::Config(format!(
            "t = {t} lies outside the offset window t >= {}",
            sched.total_steps().saturating_sub(sched.skip())
        )));
    }
    let eps = standard_normal(x0.len(), rng);
    offset_forward_with(x0, x_start, t, sched.alpha_bar(t), eps)
}

pub fn offset_forward_with(
    x0: &[f32],
    x_start: &[f32],
    t: usize,
    alpha_bar: f64,
    eps: Vec<f32>,
) -> Result<ForwardSample> {
    if x0.len() != x_start.len() || x0.len() != eps.len() {
        return Err(Error::Shape("x0, x_start and eps must share length".into()));
    }
    if alpha_bar >= 1.0 {
        return Err(Error::Numeric("offset target is singular at alpha_bar = 1".into()));
    }
    let x_t = noise_with(x_start, &eps, alpha_bar);
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let gain = a / b;
    // Closed form of (x_t − √ᾱ·x_0)/√(1−ᾱ); avoids cancellation in x_t.
    let target = eps
        .iter()
        .zip(x_start.iter().zip(x0))
        .map(|(&e, (&s, &x))| (e as f64 + gain * (s as f64 - x as f64)) as f32)
        .collect();
    Ok(ForwardSample {
        x_t,
        t,
        epsilon: eps,
        x_start_used: x_start.to_vec(),
        target_epsilon: target,
        offset: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn limits_of_alpha_bar() {
        let x0 = vec![0.3, -0.7, 1.0];
        let eps = vec![0.5, 0.1, -2.0];
        assert_eq!(forward_diffuse_with(&x0, 1, 1.0, eps.clone()).x_t, x0);
        assert_eq!(forward_diffuse_with(&x0, 1, 0.0, eps.clone()).x_t, eps);
    }

    #[test]
    fn recovery_scalar_and_identity() {
        assert_eq!(recover_x0(&[0.5], &[0.0], 0.25).unwrap(), vec![1.0]);
        assert_eq!(recover_x0(&[0.2, -0.4], &[0.0, 0.0], 1.0).unwrap(), vec![0.2, -0.4]);
        assert!(recover_x0(&[0.5], &[0.0], 0.0).is_err());
    }

    #[test]
    fn forward_then_recover() {
        let s = build_schedule(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0: Vec<f32> = (0..64).map(|i| (i as f32 / 32.0) - 1.0).collect();
        for t in [1, 10, 500, 999, 1000] {
            let f = forward_diffuse(&x0, t, &s, &mut rng);
            assert_eq!(f.target_epsilon, f.epsilon);
            let r = recover_x0(&f.x_t, &f.epsilon, s.alpha_bar(t)).unwrap();
            assert!(max_abs(&r, &x0) < 1e-5, "t={t}");
        }
    }

    #[test]
    fn offset_scalar_case() {
        let f = offset_forward_with(&[0.0], &[1.0], 1000, 0.25, vec![0.0]).unwrap();
        assert_eq!(f.x_t, vec![0.5]);
        assert!((f.target_epsilon[0] - 0.5 / 0.75f32.sqrt()).abs() < 1e-6);
        assert!((f.target_epsilon[0] - 0.5774).abs() < 1e-4);
    }

    #[test]
    fn offset_reduces_to_standard() {
        let x0 = vec![0.3f32, -0.2, 0.9];
        let eps = vec![1.0f32, -0.5, 0.25];
        let f = offset_forward_with(&x0, &x0, 1000, 0.0047, eps.clone()).unwrap();
        assert_eq!(f.target_epsilon, eps);
        let vanishing = offset_forward_with(&x0, &[5.0; 3], 1000, 1e-14, eps.clone()).unwrap();
        assert!(max_abs(&vanishing.target_epsilon, &eps) < 1e-6);
        assert!(offset_forward_with(&x0, &x0, 1, 1.0, eps).is_err());
    }

    #[test]
    fn offset_window_is_enforced() {
        let s = build_schedule(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(offset_forward(&[0.0], &[1.0], 949, &s, &mut rng).is_err());
        assert!(offset_forward(&[0.0], &[1.0], 950, &s, &mut rng).is_ok());
    }

    #[test]
    fn offset_spatial_mean_tracks_the_start_distribution() {
        let s = build_schedule(ScheduleConfig::default()).unwrap();
        let a = s.alpha_bar(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 64;
        let n = 20_000;
        let x0 = vec![0.0f32; d];
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            // x_start ~ N(0.6, 0.2²) per pixel, E[a·x_start] = 0.6
            let xs: Vec<f32> = standard_normal(d, &mut rng).iter().map(|v| 0.6 + 0.2 * v).collect();
            let f = offset_forward(&x0, &xs, 1000, &s, &mut rng).unwrap();
            let m = f.x_t.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            sum += m;
            sq += m * m;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - a.sqrt() * 0.6).abs() < 4.0 * se, "{mean} vs {}", a.sqrt() * 0.6);
    }

    proptest::proptest! {
        #[test]
        fn offset_targets_recover_x0(seed in 0u64..1000, t in 950usize..=1000) {
            let s = build_schedule(ScheduleConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = standard_normal(32, &mut rng).iter().map(|v| v.tanh()).collect::<Vec<_>>();
            let xs = standard_normal(32, &mut rng).iter().map(|v| v.tanh()).collect::<Vec<_>>();
            let f = offset_forward(&x0, &xs, t, &s, &mut rng).unwrap();
            let r = recover_x0(&f.x_t, &f.target_epsilon, s.alpha_bar(t)).unwrap();
            proptest::prop_assert!(max_abs(&r, &x0) < 1e-5);
        }
    }
}
