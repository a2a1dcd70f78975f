//! Denoiser training under the standard objective or PCA-K offset training.
//!
//! Each sample draws `t ~ U{1..T}`. In offset mode samples with `t ≥ T − S`
//! are noised from `x_K`, the projection of `x_0` onto its class's top-K
//! PCA components (`K = 0` gives the class mean), and regress the rewritten
//! target `ε_new`; all other samples follow the standard objective. The
//! offset branch therefore receives a fraction `(S + 1)/T` of samples.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::denoiser::{
    load_checkpoint, save_checkpoint, Batch, CheckpointMeta, DenoiserConfig, DenoiserParams,
};
use crate::diffusion::{forward_diffuse_with, offset_forward_with, standard_normal, ForwardSample};
use crate::error::{Error, Result};
use crate::pca::PcaMixture;
use crate::schedule::NoiseSchedule;
use crate::synth::{Corpus, SynthImage, COND_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    Offset,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "ddim" => Ok(TrainMode::Standard),
            "offset" => Ok(TrainMode::Offset),
            _ => Err(Error::Config(format!("unknown train mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Standard => "standard",
            TrainMode::Offset => "offset",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// PCA components used for the offset projection.
    pub k: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub total_iters: u64,
    pub seed: u64,
    pub hidden: usize,
    pub skip_gate: bool,
    pub log_interval: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_interval: u64,
    pub corpus: PathBuf,
    pub pca: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Standard,
            k: 0,
            batch_size: 64,
            adam: AdamConfig::default(),
            total_iters: 20_000,
            seed: 0,
            hidden: 256,
            skip_gate: true,
            log_interval: 100,
            checkpoint_interval: 0,
            corpus: PathBuf::from("corpus.bin"),
            pca: None,
            init_from: None,
            out_dir: PathBuf::from("train"),
        }
    }
}

impl TrainConfig {
    pub fn denoiser_config(&self, d: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.hidden,
            skip_gate: self.skip_gate,
            ..DenoiserConfig::new(d)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iter: u64,
    pub mean_loss: f64,
    pub offset_fraction: f64,
    pub wall_clock_s: f64,
}

/// Per-class start images for the offset branch.
pub struct OffsetSource<'a> {
    mixture: &'a PcaMixture,
    k: usize,
    means: Vec<(usize, Vec<f32>)>,
}

impl<'a> OffsetSource<'a> {
    pub fn new(mixture: &'a PcaMixture, k: usize, corpus: &Corpus) -> Result<Self> {
        if k > mixture.k_max() {
            return Err(Error::Config(format!(
                "K = {k} exceeds the PCA model's K_max = {}",
                mixture.k_max()
            )));
        }
        if mixture.dim() != corpus.dim() {
            return Err(Error::Shape(format!(
                "PCA d = {} but corpus d = {}",
                mixture.dim(),
                corpus.dim()
            )));
        }
        for (class, &n) in corpus.class_counts().iter().enumerate() {
            if n > 0 {
                mixture.class(class)?;
            }
        }
        let means = mixture
            .models
            .iter()
            .map(|m| (m.class_id, m.mean.iter().map(|&v| v as f32).collect()))
            .collect();
        Ok(Self { mixture, k, means })
    }

    /// `x_K^c` for a training image of class `c`.
    pub fn start_for(&self, img: &SynthImage) -> Result<Vec<f32>> {
        let class = img.condition.class.id();
        if self.k == 0 {
            return self
                .means
                .iter()
                .find(|(c, _)| *c == class)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Missing(format!("PCA model for class {class}")));
        }
        let x: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
        let proj = self.mixture.class(class)?.project(&x, self.k)?;
        Ok(proj.into_iter().map(|v| v as f32).collect())
    }
}

/// Forward samples for a set of images, timesteps and noise draws. Routing
/// to the offset branch happens only when `offset` is supplied.
pub fn build_samples(
    images: &[&SynthImage],
    ts: &[usize],
    noises: Vec<Vec<f32>>,
    sched: &NoiseSchedule,
    offset: Option<&OffsetSource>,
) -> Result<Vec<ForwardSample>> {
    images
        .iter()
        .zip(ts)
        .zip(noises)
        .map(|((img, &t), eps)| match offset {
            Some(src) if sched.in_offset_window(t) => {
                let start = src.start_for(img)?;
                offset_forward_with(&img.pixels, &start, t, sched.alpha_bar(t), eps)
            }
            _ => Ok(forward_diffuse_with(&img.pixels, t, sched.alpha_bar(t), eps)),
        })
        .collect()
}

pub fn to_batch(samples: &[ForwardSample], images: &[&SynthImage]) -> Batch<f32> {
    let b = samples.len();
    let d = samples.first().map_or(0, |s| s.x_t.len());
    let x_t = Array2::from_shape_fn((b, d), |(i, j)| samples[i].x_t[j]);
    let target = Array2::from_shape_fn((b, d), |(i, j)| samples[i].target_epsilon[j]);
    let conds: Vec<[f32; COND_DIM]> = images.iter().map(|i| i.condition.encode()).collect();
    let cond = Array2::from_shape_fn((b, COND_DIM), |(i, j)| conds[i][j]);
    Batch {
        x_t,
        t: samples.iter().map(|s| s.t).collect(),
        cond,
        target,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub offset_fraction: f64,
}

/// One optimizer step on a uniformly drawn batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    params: &mut DenoiserParams<f32>,
    adam: &mut Adam,
    corpus: &Corpus,
    batch_size: usize,
    sched: &NoiseSchedule,
    offset: Option<&OffsetSource>,
    rng: &mut R,
) -> Result<StepOutcome> {
    let d = corpus.dim();
    let images: Vec<&SynthImage> = (0..batch_size)
        .map(|_| &corpus.images[rng.random_range(0..corpus.len())])
        .collect();
    let ts: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(1..=sched.total_steps()))
        .collect();
    let noises: Vec<Vec<f32>> = (0..batch_size).map(|_| standard_normal(d, rng)).collect();
    let samples = build_samples(&images, &ts, noises, sched, offset)?;
    let offset_count = samples.iter().filter(|s| s.offset).count();
    let batch = to_batch(&samples, &images);
    let (loss, grad) = params.loss_and_grad(&batch)?;
    adam.update(&mut params.data, &grad);
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(StepOutcome {
        loss,
        offset_fraction: offset_count as f64 / batch_size as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub log: Vec<TrainLogRecord>,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step}"))
}

/// Full training run: writes `train_log.csv` and `step_<n>/` checkpoints
/// under `cfg.out_dir`.
pub fn run_training(cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    let corpus = Corpus::load(&cfg.corpus)?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mixture = match (cfg.mode, &cfg.pca) {
        (TrainMode::Offset, Some(p)) => Some(PcaMixture::load(p)?),
        (TrainMode::Offset, None) => {
            return Err(Error::Missing("offset training needs a PCA model".into()))
        }
        (TrainMode::Standard, _) => None,
    };
    let source = mixture
        .as_ref()
        .map(|m| OffsetSource::new(m, cfg.k, &corpus))
        .transpose()?;
    let mut params = match &cfg.init_from {
        Some(p) => load_checkpoint(p, Some(corpus.dim()))?.0,
        None => DenoiserParams::<f32>::init(cfg.denoiser_config(corpus.dim()), cfg.seed)?,
    };
    let mut adam = Adam::new(cfg.adam, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "iter,mean_loss,offset_fraction,wall_clock_s").map_err(|e| Error::io(&log_path, e))?;

    let meta = |step: u64| CheckpointMeta {
        step,
        extra: vec![
            ("mode".into(), cfg.mode.to_string()),
            ("k".into(), cfg.k.to_string()),
            ("seed".into(), cfg.seed.to_string()),
            ("skip".into(), sched.skip().to_string()),
            ("total_steps".into(), sched.total_steps().to_string()),
        ],
    };

    let started = Instant::now();
    let mut log = Vec::new();
    let (mut loss_acc, mut frac_acc, mut n_acc) = (0.0, 0.0, 0u64);
    for iter in 1..=cfg.total_iters {
        let out = train_step(
            &mut params,
            &mut adam,
            &corpus,
            cfg.batch_size,
            sched,
            source.as_ref(),
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("iteration {iter}: {msg}")),
            other => other,
        })?;
        loss_acc += out.loss;
        frac_acc += out.offset_fraction;
        n_acc += 1;
        if iter % cfg.log_interval.max(1) == 0 || iter == cfg.total_iters {
            let rec = TrainLogRecord {
                iter,
                mean_loss: loss_acc / n_acc as f64,
                offset_fraction: frac_acc / n_acc as f64,
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            writeln!(
                log_file,
                "{},{:.8},{:.6},{:.3}",
                rec.iter, rec.mean_loss, rec.offset_fraction, rec.wall_clock_s
            )
            .map_err(|e| Error::io(&log_path, e))?;
            log.push(rec);
            (loss_acc, frac_acc, n_acc) = (0.0, 0.0, 0);
        }
        if cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0 && iter != cfg.total_iters {
            save_checkpoint(&params, &meta(iter), &checkpoint_dir(&cfg.out_dir, iter))?;
        }
    }
    let final_dir = checkpoint_dir(&cfg.out_dir, cfg.total_iters);
    save_checkpoint(&params, &meta(cfg.total_iters), &final_dir)?;
    Ok(TrainOutcome {
        final_checkpoint: final_dir,
        log_path,
        steps: cfg.total_iters,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::recover_x0;
    use crate::schedule::{build_schedule, ScheduleConfig};
    use crate::synth::{generate_corpus, SynthConfig};

    fn small_corpus() -> Corpus {
        generate_corpus(&SynthConfig {
            seed: 2,
            n_per_class: 16,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn sched(t: usize, s: usize) -> NoiseSchedule {
        build_schedule(ScheduleConfig {
            total_steps: t,
            skip: s,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn standard_mode_never_routes_to_offset() {
        let corpus = small_corpus();
        let s = sched(100, 100);
        let images: Vec<&SynthImage> = corpus.images.iter().take(8).collect();
        let ts: Vec<usize> = (0..8).map(|i| 100 - i).collect();
        let noises = vec![vec![0.1; corpus.dim()]; 8];
        let out = build_samples(&images, &ts, noises, &s, None).unwrap();
        assert!(out.iter().all(|f| !f.offset && f.target_epsilon == f.epsilon));
    }

    #[test]
    fn full_window_routes_everything_and_targets_recover_x0() {
        let corpus = small_corpus();
        let mix = PcaMixture::fit(&corpus, 3).unwrap();
        let s = sched(100, 100);
        for k in [0, 2] {
            let src = OffsetSource::new(&mix, k, &corpus).unwrap();
            let images: Vec<&SynthImage> = corpus.images.iter().take(10).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let ts: Vec<usize> = (0..10).map(|_| rng.random_range(1..=100)).collect();
            let noises = (0..10).map(|_| standard_normal(corpus.dim(), &mut rng)).collect();
            let out = build_samples(&images, &ts, noises, &s, Some(&src)).unwrap();
            for (f, img) in out.iter().zip(&images) {
                assert!(f.offset);
                let r = recover_x0(&f.x_t, &f.target_epsilon, s.alpha_bar(f.t)).unwrap();
                let err = r.iter().zip(&img.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                assert!(err < 1e-5, "err {err}");
            }
        }
    }

    #[test]
    fn offset_fraction_matches_window_share() {
        let corpus = small_corpus();
        let mix = PcaMixture::fit(&corpus, 0).unwrap();
        let src = OffsetSource::new(&mix, 0, &corpus).unwrap();
        let s = sched(1000, 50);
        let mut params = DenoiserParams::<f32>::init(
            DenoiserConfig { hidden: 4, ..DenoiserConfig::new(corpus.dim()) },
            0,
        )
        .unwrap();
        let mut adam = Adam::new(AdamConfig::default(), params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut frac = 0.0;
        let n = 400;
        for _ in 0..n {
            frac += train_step(&mut params, &mut adam, &corpus, 64, &s, Some(&src), &mut rng)
                .unwrap()
                .offset_fraction;
        }
        let p = 51.0 / 1000.0;
        let se = (p * (1.0 - p) / (64.0 * n as f64)).sqrt();
        assert!((frac / n as f64 - p).abs() < 4.0 * se, "fraction {}", frac / n as f64);
    }

    #[test]
    fn offset_gradients_differ_only_inside_window() {
        let corpus = small_corpus();
        let mix = PcaMixture::fit(&corpus, 0).unwrap();
        let src = OffsetSource::new(&mix, 0, &corpus).unwrap();
        let s = sched(1000, 50);
        let params = DenoiserParams::<f32>::init(
            DenoiserConfig { hidden: 16, ..DenoiserConfig::new(corpus.dim()) },
            3,
        )
        .unwrap();
        let images: Vec<&SynthImage> = corpus.images.iter().take(4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noises: Vec<Vec<f32>> = (0..4).map(|_| standard_normal(corpus.dim(), &mut rng)).collect();
        let grads = |ts: &[usize], off: Option<&OffsetSource>| {
            let smp = build_samples(&images, ts, noises.clone(), &s, off).unwrap();
            params.loss_and_grad(&to_batch(&smp, &images)).unwrap().1
        };
        let outside = [10, 200, 500, 949];
        assert_eq!(grads(&outside, None), grads(&outside, Some(&src)));
        let inside = [950, 970, 990, 1000];
        assert_ne!(grads(&inside, None), grads(&inside, Some(&src)));
    }

    #[test]
    fn offset_source_requires_coverage_and_valid_k() {
        let corpus = small_corpus();
        let mix = PcaMixture::fit(&corpus, 2).unwrap();
        assert!(OffsetSource::new(&mix, 3, &corpus).is_err());
        let partial = PcaMixture::new(vec![mix.models[0].clone()]).unwrap();
        assert!(matches!(
            OffsetSource::new(&partial, 0, &corpus),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn short_runs_are_deterministic_and_checkpoint_step_matches() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.bin");
        small_corpus().save(&corpus_path).unwrap();
        let s = sched(100, 10);
        let run = |name: &str| {
            let cfg = TrainConfig {
                total_iters: 30,
                batch_size: 8,
                hidden: 16,
                log_interval: 10,
                checkpoint_interval: 20,
                corpus: corpus_path.clone(),
                out_dir: dir.path().join(name),
                seed: 4,
                ..Default::default()
            };
            run_training(&cfg, &s).unwrap()
        };
        let a = run("a");
        let b = run("b");
        let bytes = |o: &TrainOutcome| std::fs::read(o.final_checkpoint.join("tensors.bin")).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.log.len(), 3);
        assert!(dir.path().join("a/step_20/manifest.txt").exists());
        let (_, meta) = load_checkpoint(&a.final_checkpoint, None).unwrap();
        assert_eq!(meta.step, a.steps);
        let rows = std::fs::read_to_string(&a.log_path).unwrap().lines().count();
        assert_eq!(rows, 4);
    }

    #[test]
    fn loss_falls_over_the_first_two_hundred_steps() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.bin");
        small_corpus().save(&corpus_path).unwrap();
        let cfg = TrainConfig {
            total_iters: 200,
            batch_size: 16,
            hidden: 32,
            log_interval: 50,
            corpus: corpus_path,
            out_dir: dir.path().join("smoke"),
            seed: 11,
            ..Default::default()
        };
        let out = run_training(&cfg, &sched(1000, 50)).unwrap();
        assert!(out.log.last().unwrap().mean_loss < 0.8 * out.log[0].mean_loss, "{:?}", out.log);
    }

    #[test]
    fn offset_run_without_pca_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_path = dir.path().join("corpus.bin");
        small_corpus().save(&corpus_path).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Offset,
            corpus: corpus_path,
            out_dir: dir.path().join("o"),
            ..Default::default()
        };
        assert!(matches!(run_training(&cfg, &sched(100, 10)), Err(Error::Missing(_))));
    }
}
