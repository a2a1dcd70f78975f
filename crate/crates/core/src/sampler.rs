//! Deterministic DDIM inference (η = 0) with three initializations and full
//! trace capture.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::denoiser::DenoiserParams;
use crate::diffusion::{noise_with, recover_x0_unchecked, standard_normal};
use crate::error::{Error, Result};
use crate::pca::PcaMixture;
use crate::ppm;
use crate::schedule::{inference_indices, NoiseSchedule};
use crate::synth::border_pixels;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    /// `x_init ~ N(0, I)`.
    Noise,
    /// `x_init = √ᾱ_T·x_R + √(1−ᾱ_T)·ε` with `x_R` drawn from the class's
    /// K-component PCA model. `K = 0` is mean offset inference.
    PcaOffset { class: usize, k: usize, clip: bool },
    /// The same formula with `x_R` replaced by a known clean image.
    Control { x0: Vec<f32> },
}

/// Draws an initial latent. `zero_noise` drops the `ε` term (debugging aid).
pub fn init_latent<R: Rng + ?Sized>(
    mode: &InitMode,
    sched: &NoiseSchedule,
    d: usize,
    mixture: Option<&PcaMixture>,
    zero_noise: bool,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let alpha_t = sched.alpha_bar_final();
    let start: Option<Vec<f32>> = match mode {
        InitMode::Noise => None,
        InitMode::PcaOffset { class, k, clip } => {
            let mix = mixture.ok_or_else(|| Error::Missing("PCA-offset init needs a mixture".into()))?;
            let model = mix.class(*class)?;
            if model.dim() != d {
                return Err(Error::Shape(format!("PCA d = {} but latent d = {d}", model.dim())));
            }
            let mut x: Vec<f32> = model.sample_init(*k, rng)?.into_iter().map(|v| v as f32).collect();
            if *clip {
                x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
            Some(x)
        }
        InitMode::Control { x0 } => {
            if x0.len() != d {
                return Err(Error::Shape(format!("control image has {} values, want {d}", x0.len())));
            }
            Some(x0.clone())
        }
    };
    let eps = if zero_noise {
        vec![0.0; d]
    } else {
        standard_normal(d, rng)
    };
    Ok(match start {
        None => eps,
        Some(x) => noise_with(&x, &eps, alpha_t),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub x_t: Vec<f32>,
    pub eps_hat: Vec<f32>,
    pub x0_hat: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    /// `x̂_0` at the smallest index, in normalized space.
    pub fn final_image(&self) -> &[f32] {
        &self.steps.last().expect("trace has at least one step").x0_hat
    }
}

/// Runs DDIM for every row of `x_init` jointly:
/// `x̂_0 = (x_t − √(1−ᾱ_t)ε̂)/√ᾱ_t`, `x_{t'} = √ᾱ_{t'}·x̂_0 + √(1−ᾱ_{t'})·ε̂`
/// over the skip indices, ending at `x̂_0` of the last index.
pub fn ddim_sample_batch(
    params: &DenoiserParams<f32>,
    x_init: &Array2<f32>,
    cond: &Array2<f32>,
    sched: &NoiseSchedule,
    skip: usize,
) -> Result<Vec<SampleTrace>> {
    if skip == 0 || skip > sched.total_steps() {
        return Err(Error::Config(format!("skip {skip} outside [1, T]")));
    }
    let n = x_init.nrows();
    if cond.nrows() != n {
        return Err(Error::Shape(format!(
            "{} latents but {} conditions",
            n,
            cond.nrows()
        )));
    }
    let steps = inference_indices(sched, skip);
    let mut traces = vec![SampleTrace { steps: Vec::with_capacity(steps.len()) }; n];
    let mut x = x_init.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps_hat = params.forward(x.view(), &vec![t; n], cond.view())?;
        let a = sched.alpha_bar(t);
        let next = steps.get(i + 1).map(|&tn| sched.alpha_bar(tn));
        let mut new_x = Array2::<f32>::zeros(x.dim());
        for (r, trace) in traces.iter_mut().enumerate() {
            let xr = x.row(r).to_vec();
            let er = eps_hat.row(r).to_vec();
            let x0 = recover_x0_unchecked(&xr, &er, a);
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite x0_hat at step {i} (t = {t})")));
            }
            if let Some(an) = next {
                let upd = noise_with(&x0, &er, an);
                new_x.row_mut(r).assign(&ndarray::ArrayView1::from(&upd));
            }
            trace.steps.push(TraceStep {
                t,
                x_t: xr,
                eps_hat: er,
                x0_hat: x0,
            });
        }
        x = new_x;
    }
    Ok(traces)
}

/// Single-sample DDIM.
pub fn ddim_sample(
    params: &DenoiserParams<f32>,
    x_init: &[f32],
    cond: &[f32],
    sched: &NoiseSchedule,
    skip: usize,
) -> Result<SampleTrace> {
    let x = Array2::from_shape_vec((1, x_init.len()), x_init.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let c = Array2::from_shape_vec((1, cond.len()), cond.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(ddim_sample_batch(params, &x, &c, sched, skip)?.remove(0))
}

/// Population standard deviation of the outermost ring (all channels).
pub fn border_std(x: &[f32], h: usize, w: usize, c: usize) -> f64 {
    let ring = ((h.min(w) as f64 / 16.0).round() as usize).max(1);
    let vals: Vec<f64> = border_pixels(h, w, ring)
        .into_iter()
        .flat_map(|(y, xx)| (0..c).map(move |ch| (y * w + xx) * c + ch))
        .map(|i| x[i] as f64)
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceStats {
    pub step: usize,
    pub t: usize,
    pub x_t_mean: f64,
    pub x0_hat_mean: f64,
    pub x_t_border_std: f64,
    pub x0_hat_border_std: f64,
}

pub fn trace_stats(trace: &SampleTrace, h: usize, w: usize, c: usize) -> Vec<TraceStats> {
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| TraceStats {
            step: i + 1,
            t: s.t,
            x_t_mean: crate::synth::spatial_mean(&s.x_t),
            x0_hat_mean: crate::synth::spatial_mean(&s.x0_hat),
            x_t_border_std: border_std(&s.x_t, h, w, c),
            x0_hat_border_std: border_std(&s.x0_hat, h, w, c),
        })
        .collect()
}

/// Writes `<stem>.ppm` (row 0: `x_t`, row 1: `x̂_0`, one tile per step) and
/// `<stem>.csv` with per-step statistics.
pub fn export_trace(trace: &SampleTrace, h: usize, w: usize, c: usize, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = trace.steps.len();
    let (sh, sw) = (2 * h, n * w);
    let mut strip = vec![0.0f32; sh * sw * c];
    for (k, step) in trace.steps.iter().enumerate() {
        for (row, img) in [&step.x_t, &step.x0_hat].into_iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let dst = ((row * h + y) * sw + k * w + x) * c + ch;
                        strip[dst] = ppm::to_display(img[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    ppm::write(&dir.join(format!("{stem}.ppm")), sh, sw, c, &strip)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut text = String::from("step,t,x_t_mean,x0_hat_mean,x_t_border_std,x0_hat_border_std\n");
    for s in trace_stats(trace, h, w, c) {
        text.push_str(&format!(
            "{},{},{:.8},{:.8},{:.8},{:.8}\n",
            s.step, s.t, s.x_t_mean, s.x0_hat_mean, s.x_t_border_std, s.x0_hat_border_std
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::pca::{fit_samples, PcaMixture};
    use crate::schedule::{build_schedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        build_schedule(ScheduleConfig::default()).unwrap()
    }

    fn mixture(d: usize) -> PcaMixture {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PcaMixture::new(vec![fit_samples(0, &samples, 3).unwrap()]).unwrap()
    }

    #[test]
    fn mean_offset_init_formula() {
        let s = sched();
        let mix = mixture(12);
        let mode = InitMode::PcaOffset { class: 0, k: 0, clip: false };
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let x = init_latent(&mode, &s, 12, Some(&mix), false, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let eps = standard_normal(12, &mut r2);
        let a = s.alpha_bar_final();
        for j in 0..12 {
            let want = a.sqrt() * mix.models[0].mean[j] + (1.0 - a).sqrt() * eps[j] as f64;
            assert!((x[j] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn init_spatial_means_match_their_modes() {
        let s = sched();
        let a = s.alpha_bar_final();
        let d = 48;
        let mut shifted = mixture(d);
        shifted.models[0].mean.iter_mut().for_each(|m| *m += 0.6);
        let target = a.sqrt() * shifted.models[0].mean.iter().sum::<f64>() / d as f64;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (mode, want) in [
            (InitMode::Noise, 0.0),
            (InitMode::PcaOffset { class: 0, k: 0, clip: false }, target),
        ] {
            let means: Vec<f64> = (0..n)
                .map(|_| crate::synth::spatial_mean(&init_latent(&mode, &s, d, Some(&shifted), false, &mut rng).unwrap()))
                .collect();
            let m = means.iter().sum::<f64>() / n as f64;
            let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - want).abs() < 4.0 * (var / n as f64).sqrt(), "{mode:?}: {m} vs {want}");
        }
    }

    #[test]
    fn control_with_zero_noise_is_scaled_image() {
        let s = sched();
        let x0: Vec<f32> = (0..8).map(|i| i as f32 / 8.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = init_latent(&InitMode::Control { x0: x0.clone() }, &s, 8, None, true, &mut rng).unwrap();
        let a = s.alpha_bar_final().sqrt();
        for (v, x) in x.iter().zip(&x0) {
            assert_eq!(*v, (a * *x as f64) as f32);
        }
    }

    #[test]
    fn missing_resources_are_errors() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = InitMode::PcaOffset { class: 0, k: 0, clip: false };
        assert!(matches!(init_latent(&mode, &s, 12, None, false, &mut rng), Err(Error::Missing(_))));
        let other = InitMode::PcaOffset { class: 1, k: 0, clip: false };
        assert!(init_latent(&other, &s, 12, Some(&mixture(12)), false, &mut rng).is_err());
        let ctl = InitMode::Control { x0: vec![0.0; 3] };
        assert!(init_latent(&ctl, &s, 12, None, false, &mut rng).is_err());
    }

    #[test]
    fn tiny_alpha_makes_modes_coincide() {
        let s = build_schedule(ScheduleConfig {
            linear_end: 0.2,
            ..Default::default()
        })
        .unwrap();
        assert!(s.alpha_bar_final() < 1e-20);
        let mix = mixture(6);
        let modes = [
            InitMode::Noise,
            InitMode::PcaOffset { class: 0, k: 0, clip: false },
            InitMode::Control { x0: vec![0.9; 6] },
        ];
        let draws: Vec<Vec<f32>> = modes
            .iter()
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                init_latent(m, &s, 6, Some(&mix), false, &mut rng).unwrap()
            })
            .collect();
        assert_eq!(draws[0], draws[1]);
        assert_eq!(draws[0], draws[2]);
    }

    #[test]
    fn zero_network_rescales_each_step() {
        let s = sched();
        let cfg = DenoiserConfig { hidden: 4, ..DenoiserConfig::new(10) };
        let p = DenoiserParams::<f32>::zeros(DenoiserConfig { skip_gate: false, ..cfg }).unwrap();
        let x: Vec<f32> = (0..10).map(|i| i as f32 * 0.1 - 0.4).collect();
        let tr = ddim_sample(&p, &x, &[0.0; 6], &s, 50).unwrap();
        assert_eq!(tr.steps.len(), 20);
        // ε̂ = 0 ⇒ x̂_0 = x_T/√ᾱ_T at every step and x_t = √ᾱ_t·x̂_0.
        let x0: Vec<f64> = x.iter().map(|&v| v as f64 / s.alpha_bar_final().sqrt()).collect();
        for st in &tr.steps {
            for j in 0..10 {
                assert!((st.x0_hat[j] as f64 - x0[j]).abs() < 1e-4 * x0[j].abs().max(1.0));
                let want = s.alpha_bar(st.t).sqrt() * x0[j];
                assert!((st.x_t[j] as f64 - want).abs() < 1e-4 * want.abs().max(1.0));
            }
        }
        assert_eq!(tr.final_image(), tr.steps[19].x0_hat.as_slice());
    }

    #[test]
    fn traces_are_deterministic_and_consistent() {
        let s = sched();
        let p = DenoiserParams::<f32>::init(DenoiserConfig { hidden: 8, ..DenoiserConfig::new(12) }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standard_normal(12, &mut rng);
        let e = [1.0, 0.0, 0.5, 0.5, 0.5, 0.5];
        let a = ddim_sample(&p, &x, &e, &s, 50).unwrap();
        let b = ddim_sample(&p, &x, &e, &s, 50).unwrap();
        assert_eq!(a, b);
        for st in &a.steps {
            let r = crate::diffusion::recover_x0(&st.x_t, &st.eps_hat, s.alpha_bar(st.t)).unwrap();
            assert!(r.iter().zip(&st.x0_hat).all(|(u, v)| (u - v).abs() < 1e-5));
        }
    }

    #[test]
    fn oracle_denoiser_recovers_control_start() {
        // A one-index chain with ε̂ equal to the true init noise returns x_0.
        let s = build_schedule(ScheduleConfig { total_steps: 1000, skip: 1000, ..Default::default() }).unwrap();
        let x0: Vec<f32> = (0..6).map(|i| (i as f32 - 2.5) / 3.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut probe = rng.clone();
        let xi = init_latent(&InitMode::Control { x0: x0.clone() }, &s, 6, None, false, &mut rng).unwrap();
        let eps = standard_normal(6, &mut probe);
        let r = crate::diffusion::recover_x0(&xi, &eps, s.alpha_bar(1000)).unwrap();
        assert!(r.iter().zip(&x0).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn export_layout() {
        let s = sched();
        let p = DenoiserParams::<f32>::init(DenoiserConfig { hidden: 8, ..DenoiserConfig::new(16 * 16 * 3) }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standard_normal(768, &mut rng);
        let tr = ddim_sample(&p, &x, &[0.0, 1.0, 0.1, 0.2, 0.3, 0.5], &s, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_trace(&tr, 16, 16, 3, dir.path(), "trace").unwrap();
        let img = std::fs::read(dir.path().join("trace.ppm")).unwrap();
        let header = b"P6\n320 32\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 32 * 320 * 3);
        let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(csv.lines().count(), 21);
    }
}
