//! End-to-end experiment: synth → fit-pca → analyze → train → sample →
//! trace → eval → compare.
//!
//! Every stage writes into its own directory under `out_dir` together with
//! a `stamp.txt` holding the stage key (a SHA-256 over the stage's settings
//! and its upstream keys) and the seed. A stage is skipped when its stamp
//! matches, its outputs exist and nothing upstream ran in the same call.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adam::AdamConfig;
use crate::denoiser::load_checkpoint;
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::eval::{compare_arms, evaluate_batch, Comparison, EvalReport, ImageGeometry};
use crate::gap::analyze_at;
use crate::kvconfig::KvConfig;
use crate::pca::PcaMixture;
use crate::ppm;
use crate::sampler::{ddim_sample_batch, export_trace, init_latent, InitMode, SampleTrace};
use crate::schedule::{build_schedule, sweep_linear_end, NoiseSchedule, ScheduleConfig};
use crate::synth::{class_backgrounds, generate_corpus, Corpus, SynthCondition, SynthConfig, SynthImage};
use crate::trainer::{checkpoint_dir, run_training, TrainConfig, TrainMode};

/// How an arm initializes inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Noise,
    /// PCA-K offset with the experiment's inference K (`mean_offset` when 0).
    Offset,
    /// Ground-truth `x_0` of the evaluation record.
    Control,
}

/// One experiment arm, named `<ddim|offset>_train+<init>_inf`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arm {
    pub train: TrainMode,
    pub init: InitKind,
}

impl Arm {
    pub fn name(&self, k: usize) -> String {
        let train = match self.train {
            TrainMode::Standard => "ddim",
            TrainMode::Offset => "offset",
        };
        let init = match self.init {
            InitKind::Noise => "noise".to_string(),
            InitKind::Offset if k == 0 => "mean_offset".to_string(),
            InitKind::Offset => format!("pca{k}_offset"),
            InitKind::Control => "control".to_string(),
        };
        format!("{train}_train+{init}_inf")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown arm `{s}`"));
        let (train, init) = s.split_once('+').ok_or_else(bad)?;
        let train = match train.strip_suffix("_train").ok_or_else(bad)? {
            "ddim" | "standard" => TrainMode::Standard,
            "offset" => TrainMode::Offset,
            _ => return Err(bad()),
        };
        let init = match init.strip_suffix("_inf").ok_or_else(bad)? {
            "noise" | "ddim" => InitKind::Noise,
            "control" => InitKind::Control,
            other if other == "mean_offset" || (other.starts_with("pca") && other.ends_with("_offset")) => {
                InitKind::Offset
            }
            _ => return Err(bad()),
        };
        Ok(Arm { train, init })
    }
}

/// Everything the pipeline needs, read from a [`KvConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Held-out conditions per class used for sampling and evaluation.
    pub eval_per_class: usize,
    pub schedule: ScheduleConfig,
    pub pca_k_max: usize,
    pub train: TrainConfig,
    /// Offset training starts from the standard checkpoint instead of scratch.
    pub offset_init_from_standard: bool,
    pub infer_k: usize,
    pub clip_init: bool,
    pub sample_seed: u64,
    pub sample_chunk: usize,
    pub ppm_export: usize,
    pub analyze_samples: usize,
    pub analyze_seed: u64,
    pub trace_count: usize,
    pub trace_export: usize,
    pub trace_arms: Vec<Arm>,
    pub arms: Vec<Arm>,
}

pub const DEFAULT_ARMS: [Arm; 4] = [
    Arm { train: TrainMode::Standard, init: InitKind::Noise },
    Arm { train: TrainMode::Standard, init: InitKind::Offset },
    Arm { train: TrainMode::Offset, init: InitKind::Offset },
    Arm { train: TrainMode::Standard, init: InitKind::Control },
];

fn arms_from(kv: &KvConfig, key: &str, default: &[Arm]) -> Result<Vec<Arm>> {
    match kv.get_list::<String>(key)? {
        None => Ok(default.to_vec()),
        Some(names) => names.iter().map(|n| Arm::parse(n)).collect(),
    }
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let seed: u64 = kv.get_or("experiment.seed", 0)?;
        let sd = SynthConfig::default();
        let synth = SynthConfig {
            seed: kv.get_or("synth.seed", seed)?,
            n_per_class: kv.get_or("synth.n_per_class", sd.n_per_class)?,
            height: kv.get_or("synth.height", sd.height)?,
            width: kv.get_or("synth.width", sd.width)?,
            channels: kv.get_or("synth.channels", sd.channels)?,
            max_record_len: kv.get_or("synth.max_record_len", sd.max_record_len)?,
        };
        let schedule = schedule_from(kv)?;
        let td = TrainConfig::default();
        let ad = AdamConfig::default();
        let train = TrainConfig {
            k: kv.get_or("train.k", td.k)?,
            batch_size: kv.get_or("train.batch_size", td.batch_size)?,
            adam: AdamConfig {
                learning_rate: kv.get_or("train.learning_rate", ad.learning_rate)?,
                beta1: kv.get_or("train.beta1", ad.beta1)?,
                beta2: kv.get_or("train.beta2", ad.beta2)?,
                epsilon: kv.get_or("train.epsilon", ad.epsilon)?,
            },
            total_iters: kv.get_or("train.iters", td.total_iters)?,
            seed: kv.get_or("train.seed", seed.wrapping_add(1))?,
            hidden: kv.get_or("train.hidden", td.hidden)?,
            skip_gate: kv.get_or("train.skip_gate", td.skip_gate)?,
            log_interval: kv.get_or("train.log_interval", td.log_interval)?,
            checkpoint_interval: kv.get_or("train.checkpoint_interval", td.checkpoint_interval)?,
            ..td
        };
        let cfg = Self {
            out_dir: kv.get_or("experiment.out_dir", PathBuf::from("difflab-run"))?,
            seed,
            synth,
            eval_per_class: kv.get_or("sample.per_class", 250)?,
            schedule,
            pca_k_max: kv.get_or("pca.k_max", 16)?,
            train,
            offset_init_from_standard: kv.get_or("train.offset_init_from_standard", false)?,
            infer_k: kv.get_or("sample.k", 0)?,
            clip_init: kv.get_or("sample.clip", false)?,
            sample_seed: kv.get_or("sample.seed", seed.wrapping_add(2))?,
            sample_chunk: kv.get_or("sample.chunk", 100)?,
            ppm_export: kv.get_or("sample.ppm_export", 16)?,
            analyze_samples: kv.get_or("analyze.samples", 10_000)?,
            analyze_seed: kv.get_or("analyze.seed", seed.wrapping_add(3))?,
            trace_count: kv.get_or("trace.count", 200)?,
            trace_export: kv.get_or("trace.export", 8)?,
            trace_arms: arms_from(kv, "trace.arms", &DEFAULT_ARMS[..2])?,
            arms: arms_from(kv, "pipeline.arms", &DEFAULT_ARMS)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.arms.is_empty() {
            return Err(Error::Config("pipeline.arms is empty".into()));
        }
        if self.eval_per_class == 0 || self.sample_chunk == 0 {
            return Err(Error::Config("sample.per_class and sample.chunk must be positive".into()));
        }
        if self.train.k > self.pca_k_max || self.infer_k > self.pca_k_max {
            return Err(Error::Config(format!(
                "train.k = {} / sample.k = {} exceed pca.k_max = {}",
                self.train.k, self.infer_k, self.pca_k_max
            )));
        }
        if self.trace_count > 2 * self.eval_per_class {
            return Err(Error::Config("trace.count exceeds the evaluation set".into()));
        }
        if self.train.batch_size == 0 || self.train.total_iters == 0 {
            return Err(Error::Config("train.batch_size and train.iters must be positive".into()));
        }
        Ok(())
    }

    pub fn arm_names(&self) -> Vec<String> {
        self.arms.iter().map(|a| a.name(self.infer_k)).collect()
    }

    fn needs_train(&self, mode: TrainMode) -> bool {
        self.arms.iter().chain(&self.trace_arms).any(|a| a.train == mode)
    }
}

pub fn schedule_from(kv: &KvConfig) -> Result<ScheduleConfig> {
    let d = ScheduleConfig::default();
    let cfg = ScheduleConfig {
        linear_start: kv.get_or("schedule.linear_start", d.linear_start)?,
        linear_end: kv.get_or("schedule.linear_end", d.linear_end)?,
        total_steps: kv.get_or("schedule.total_steps", d.total_steps)?,
        skip: kv.get_or("schedule.skip", d.skip)?,
        beta_schedule: kv.get_or("schedule.beta_schedule", d.beta_schedule)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Paired initial latents for `eval`: record `i` always uses RNG stream `i`
/// of `seed`, so arms differ only in their initialization rule.
pub fn draw_inits(
    kind: InitKind,
    eval: &Corpus,
    sched: &NoiseSchedule,
    mixture: Option<&PcaMixture>,
    k: usize,
    clip: bool,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    eval.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mode = match kind {
                InitKind::Noise => InitMode::Noise,
                InitKind::Offset => InitMode::PcaOffset { class: img.condition.class.id(), k, clip },
                InitKind::Control => InitMode::Control { x0: img.pixels.clone() },
            };
            init_latent(&mode, sched, eval.dim(), mixture, false, &mut rng)
        })
        .collect()
}

fn rows(v: &[Vec<f32>], width: usize) -> Result<Array2<f32>> {
    let flat: Vec<f32> = v.iter().flatten().copied().collect();
    Array2::from_shape_vec((v.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// DDIM over `inits` in chunks, returning full traces.
pub fn run_ddim_traces(
    params: &DenoiserParams<f32>,
    inits: &[Vec<f32>],
    conds: &[SynthCondition],
    sched: &NoiseSchedule,
    chunk: usize,
) -> Result<Vec<SampleTrace>> {
    if inits.len() != conds.len() {
        return Err(Error::Shape(format!("{} latents but {} conditions", inits.len(), conds.len())));
    }
    let d = params.config.d;
    let mut out = Vec::with_capacity(inits.len());
    for (xs, cs) in inits.chunks(chunk.max(1)).zip(conds.chunks(chunk.max(1))) {
        let x = rows(xs, d)?;
        let e: Vec<Vec<f32>> = cs.iter().map(|c| c.encode().to_vec()).collect();
        let c = rows(&e, params.config.cond_dim)?;
        out.extend(ddim_sample_batch(params, &x, &c, sched, sched.skip())?);
    }
    Ok(out)
}

/// DDIM over `inits`, keeping only the final images.
pub fn run_ddim(
    params: &DenoiserParams<f32>,
    inits: &[Vec<f32>],
    conds: &[SynthCondition],
    sched: &NoiseSchedule,
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(inits.len());
    for (xs, cs) in inits.chunks(chunk.max(1)).zip(conds.chunks(chunk.max(1))) {
        out.extend(
            run_ddim_traces(params, xs, cs, sched, chunk)?
                .into_iter()
                .map(|t| t.final_image().to_vec()),
        );
    }
    Ok(out)
}

/// Writes a generated batch: `samples.bin` (corpus format), `conditions.csv`
/// and the first `n_ppm` images as PPM.
pub fn save_samples(dir: &Path, geom: ImageGeometry, images: &[Vec<f32>], conds: &[SynthCondition], n_ppm: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = images
        .iter()
        .zip(conds)
        .map(|(p, c)| SynthImage { pixels: p.clone(), condition: *c })
        .collect();
    let corpus = Corpus::new(geom.height, geom.width, geom.channels, records)?;
    corpus.save(&dir.join("samples.bin"))?;
    let mut csv = String::from("index,class_id,r,g,b,size\n");
    for (i, c) in conds.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{:.6},{:.6},{:.6},{:.6}\n",
            c.class.id(),
            c.color[0],
            c.color[1],
            c.color[2],
            c.size
        ));
    }
    let p = dir.join("conditions.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    for i in 0..n_ppm.min(images.len()) {
        corpus.export_ppm(i, &dir.join(format!("sample_{i:04}.ppm")))?;
    }
    Ok(())
}

/// Scores a saved sample batch in display space.
pub fn evaluate_saved(arm: &str, samples: &Corpus) -> Result<EvalReport> {
    let geom = ImageGeometry {
        height: samples.height,
        width: samples.width,
        channels: samples.channels,
    };
    let images: Vec<Vec<f32>> = samples
        .images
        .iter()
        .map(|i| i.pixels.iter().map(|&v| ppm::to_display(v)).collect())
        .collect();
    let conds: Vec<SynthCondition> = samples.images.iter().map(|i| i.condition).collect();
    evaluate_batch(arm, &images, &conds, &class_backgrounds(), geom)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRun {
    pub stage: String,
    pub ran: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub stages: Vec<StageRun>,
    pub comparison: Comparison,
}

impl PipelineOutcome {
    pub fn executed(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| s.ran).map(|s| s.stage.as_str()).collect()
    }
}

/// Fixed paths of the artifacts produced under `out_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("synth/corpus.bin")
    }
    pub fn eval_set(&self) -> PathBuf {
        self.root.join("synth/eval_set.bin")
    }
    pub fn pca(&self) -> PathBuf {
        self.root.join("fit-pca/pca")
    }
    pub fn train(&self, mode: TrainMode) -> PathBuf {
        self.root.join(format!("train-{mode}"))
    }
    pub fn samples(&self, arm: &str) -> PathBuf {
        self.root.join(format!("sample-{arm}"))
    }
    pub fn eval(&self, arm: &str) -> PathBuf {
        self.root.join(format!("eval-{arm}/report.json"))
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("trace")
    }
    pub fn comparison(&self) -> PathBuf {
        self.root.join("compare/comparison.json")
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    keys: std::collections::BTreeMap<String, String>,
    ran: BTreeSet<String>,
    stages: Vec<StageRun>,
}

impl Runner<'_> {
    fn stage(
        &mut self,
        name: &str,
        upstream: &[&str],
        settings: String,
        seed: u64,
        outputs: &[PathBuf],
        body: impl FnOnce(&Layout) -> Result<()>,
    ) -> Result<()> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(b"\n");
        h.update(settings.as_bytes());
        for u in upstream {
            h.update(b"\n");
            h.update(self.keys[*u].as_bytes());
        }
        let key = hex::encode(h.finalize());
        let dir = self.layout.stage_dir(name);
        let stamp_path = dir.join("stamp.txt");
        let stamp = format!("stage: {name}\nconfig_hash: {key}\nseed: {seed}\n");
        let fresh = upstream.iter().all(|u| !self.ran.contains(*u))
            && std::fs::read_to_string(&stamp_path).is_ok_and(|s| s == stamp)
            && outputs.iter().all(|p| p.exists());
        if !fresh {
            let _ = std::fs::remove_file(&stamp_path);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            body(&self.layout).map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e) })?;
            std::fs::write(&stamp_path, &stamp).map_err(|e| Error::io(&stamp_path, e))?;
            self.ran.insert(name.to_string());
        }
        self.keys.insert(name.to_string(), key);
        self.stages.push(StageRun { stage: name.to_string(), ran: !fresh });
        Ok(())
    }
}

fn load_params(layout: &Layout, mode: TrainMode, iters: u64, d: usize) -> Result<DenoiserParams<f32>> {
    Ok(load_checkpoint(&checkpoint_dir(&layout.train(mode), iters), Some(d))?.0)
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let sched = build_schedule(cfg.schedule)?;
    let geom = ImageGeometry {
        height: cfg.synth.height,
        width: cfg.synth.width,
        channels: cfg.synth.channels,
    };
    let mut r = Runner {
        cfg,
        layout: Layout::new(&cfg.out_dir),
        keys: Default::default(),
        ran: Default::default(),
        stages: Vec::new(),
    };
    let c = r.cfg;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
    let eval_synth = SynthConfig {
        seed: c.synth.seed ^ 0x0e7a_15e7,
        n_per_class: c.eval_per_class,
        ..c.synth
    };

    r.stage(
        "synth",
        &[],
        format!("{:?}\n{:?}", c.synth, eval_synth),
        c.synth.seed,
        &[r.layout.corpus(), r.layout.eval_set()],
        |l| {
            generate_corpus(&c.synth)?.save(&l.corpus())?;
            generate_corpus(&eval_synth)?.save(&l.eval_set())
        },
    )?;

    r.stage("fit-pca", &["synth"], format!("k_max={}", c.pca_k_max), 0, &[r.layout.pca()], |l| {
        PcaMixture::fit(&Corpus::load(&l.corpus())?, c.pca_k_max)?.save(&l.pca())
    })?;

    let analysis = r.layout.stage_dir("analyze");
    r.stage(
        "analyze",
        &["synth"],
        format!("{:?}\nsamples={}", c.schedule, c.analyze_samples),
        c.analyze_seed,
        &[analysis.join("gap.json")],
        |l| {
            let dir = l.stage_dir("analyze");
            let corpus = Corpus::load(&l.corpus())?;
            let mut rng = ChaCha8Rng::seed_from_u64(c.analyze_seed);
            let report = analyze_at(&corpus, sched.alpha_bar_final(), c.analyze_samples, &mut rng)?;
            write(&dir.join("gap.json"), &report.to_json())?;
            write(&dir.join("gap.txt"), &report.to_table())?;
            sched.save_csv(&dir.join("schedule.csv"))?;
            let mut sweep = String::from("linear_end,alpha_bar_final,sqrt_alpha_bar_final\n");
            for row in sweep_linear_end(c.schedule, &[0.012, 0.02, 0.025, 0.03])? {
                sweep.push_str(&format!(
                    "{},{:.6e},{:.6e}\n",
                    row.linear_end, row.alpha_bar_final, row.sqrt_alpha_bar_final
                ));
            }
            write(&dir.join("sweep.csv"), &sweep)
        },
    )?;

    for mode in [TrainMode::Standard, TrainMode::Offset] {
        if !c.needs_train(mode) {
            continue;
        }
        let name = format!("train-{mode}");
        let fine_tune = mode == TrainMode::Offset && c.offset_init_from_standard;
        let mut upstream = vec!["synth"];
        if mode == TrainMode::Offset {
            upstream.push("fit-pca");
        }
        if fine_tune {
            upstream.push("train-standard");
        }
        let mut tc = TrainConfig {
            mode,
            corpus: r.layout.corpus(),
            pca: (mode == TrainMode::Offset).then(|| r.layout.pca()),
            init_from: fine_tune.then(|| checkpoint_dir(&r.layout.train(TrainMode::Standard), c.train.total_iters)),
            out_dir: r.layout.train(mode),
            ..c.train.clone()
        };
        if mode == TrainMode::Standard {
            tc.k = 0;
        }
        let settings = format!(
            "{:?} k={} batch={} iters={} hidden={} gate={} adam={:?} ckpt={} log={} fine_tune={}",
            c.schedule, tc.k, tc.batch_size, tc.total_iters, tc.hidden, tc.skip_gate, tc.adam,
            tc.checkpoint_interval, tc.log_interval, fine_tune
        );
        let final_ckpt = checkpoint_dir(&tc.out_dir, tc.total_iters);
        r.stage(&name, &upstream, settings, tc.seed, &[final_ckpt], |_| {
            run_training(&tc, &sched).map(|_| ())
        })?;
    }

    let d = geom.dim();
    let sample_settings = format!(
        "{:?} k={} clip={} seed={} chunk={} ppm={}",
        c.schedule, c.infer_k, c.clip_init, c.sample_seed, c.sample_chunk, c.ppm_export
    );
    for arm in &c.arms {
        let name = arm.name(c.infer_k);
        let train_stage = format!("train-{}", arm.train);
        let stage = format!("sample-{name}");
        let out = r.layout.samples(&name);
        r.stage(
            &stage,
            &["synth", "fit-pca", &train_stage],
            sample_settings.clone(),
            c.sample_seed,
            &[out.join("samples.bin")],
            |l| {
                let eval = Corpus::load(&l.eval_set())?;
                let mixture = PcaMixture::load(&l.pca())?;
                let params = load_params(l, arm.train, c.train.total_iters, d)?;
                let inits = draw_inits(arm.init, &eval, &sched, Some(&mixture), c.infer_k, c.clip_init, c.sample_seed)?;
                let conds: Vec<SynthCondition> = eval.images.iter().map(|i| i.condition).collect();
                let images = run_ddim(&params, &inits, &conds, &sched, c.sample_chunk)?;
                save_samples(&out, geom, &images, &conds, c.ppm_export)
            },
        )?;
    }

    if c.trace_count > 0 && !c.trace_arms.is_empty() {
        let mut upstream: Vec<String> = vec!["synth".into(), "fit-pca".into()];
        for a in &c.trace_arms {
            let s = format!("train-{}", a.train);
            if !upstream.contains(&s) {
                upstream.push(s);
            }
        }
        let up: Vec<&str> = upstream.iter().map(String::as_str).collect();
        let names: Vec<String> = c.trace_arms.iter().map(|a| a.name(c.infer_k)).collect();
        let tdir = r.layout.traces();
        r.stage(
            "trace",
            &up,
            format!("{sample_settings} count={} export={} arms={:?}", c.trace_count, c.trace_export, names),
            c.sample_seed,
            &[tdir.join("step1_border_std.csv")],
            |l| {
                let mut eval = Corpus::load(&l.eval_set())?;
                eval.images.truncate(c.trace_count);
                let mixture = PcaMixture::load(&l.pca())?;
                let conds: Vec<SynthCondition> = eval.images.iter().map(|i| i.condition).collect();
                let mut columns = Vec::new();
                for (arm, name) in c.trace_arms.iter().zip(&names) {
                    let params = load_params(l, arm.train, c.train.total_iters, d)?;
                    let inits = draw_inits(arm.init, &eval, &sched, Some(&mixture), c.infer_k, c.clip_init, c.sample_seed)?;
                    let traces = run_ddim_traces(&params, &inits, &conds, &sched, c.sample_chunk)?;
                    for (i, t) in traces.iter().take(c.trace_export).enumerate() {
                        export_trace(t, geom.height, geom.width, geom.channels, &tdir.join(name), &format!("trace_{i:04}"))?;
                    }
                    columns.push(
                        traces
                            .iter()
                            .map(|t| crate::sampler::border_std(&t.steps[0].x0_hat, geom.height, geom.width, geom.channels))
                            .collect::<Vec<f64>>(),
                    );
                }
                let mut csv = format!("index,{}\n", names.join(","));
                for i in 0..eval.images.len() {
                    let vals: Vec<String> = columns.iter().map(|col| format!("{:.8}", col[i])).collect();
                    csv.push_str(&format!("{i},{}\n", vals.join(",")));
                }
                write(&tdir.join("step1_border_std.csv"), &csv)
            },
        )?;
    }

    for name in c.arm_names() {
        let stage = format!("eval-{name}");
        let sample_stage = format!("sample-{name}");
        let report = r.layout.eval(&name);
        r.stage(&stage, &[&sample_stage], String::new(), 0, std::slice::from_ref(&report), |l| {
            let samples = Corpus::load(&l.samples(&name).join("samples.bin"))?;
            let rep = evaluate_saved(&name, &samples)?;
            rep.save_json(&report)?;
            rep.save_csv(&report.with_file_name("report.csv"))
        })?;
    }

    let eval_stages: Vec<String> = c.arm_names().iter().map(|n| format!("eval-{n}")).collect();
    let up: Vec<&str> = eval_stages.iter().map(String::as_str).collect();
    let cmp_path = r.layout.comparison();
    r.stage("compare", &up, format!("{:?}", c.arm_names()), 0, std::slice::from_ref(&cmp_path), |l| {
        let reports = c
            .arm_names()
            .iter()
            .map(|n| EvalReport::load_json(&l.eval(n)))
            .collect::<Result<Vec<_>>>()?;
        let cmp = compare_arms(&reports)?;
        cmp.save(&cmp_path, &cmp_path.with_file_name("comparison.csv"))?;
        write(&cmp_path.with_file_name("comparison.txt"), &cmp.to_table())
    })?;

    let reports = c
        .arm_names()
        .iter()
        .map(|n| EvalReport::load_json(&r.layout.eval(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineOutcome {
        stages: r.stages,
        comparison: compare_arms(&reports)?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads the paired step-1 border statistics written by the trace stage.
pub fn load_step1_border(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .split(',')
        .skip(1)
        .map(String::from)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        for (col, v) in cols.iter_mut().zip(line.split(',').skip(1)) {
            col.push(v.parse().map_err(|_| Error::format(path, format!("bad value `{v}`")))?);
        }
    }
    Ok((header, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut kv = KvConfig::default();
        kv.set("experiment.out_dir", out.display());
        kv.set("synth.n_per_class", 12);
        kv.set("synth.height", 8);
        kv.set("synth.width", 8);
        kv.set("sample.per_class", 3);
        kv.set("pca.k_max", 2);
        kv.set("train.iters", 3);
        kv.set("train.batch_size", 4);
        kv.set("train.hidden", 8);
        kv.set("analyze.samples", 100);
        kv.set("trace.count", 2);
        kv.set("trace.export", 1);
        ExperimentConfig::from_kv(&kv).unwrap()
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in DEFAULT_ARMS {
            assert_eq!(Arm::parse(&arm.name(0)).unwrap(), arm);
            assert_eq!(Arm::parse(&arm.name(3)).unwrap(), arm);
        }
        assert_eq!(DEFAULT_ARMS[0].name(0), crate::eval::ARM_DDIM_NOISE);
        assert_eq!(DEFAULT_ARMS[1].name(0), crate::eval::ARM_DDIM_MEAN);
        assert_eq!(DEFAULT_ARMS[2].name(0), crate::eval::ARM_OFFSET_MEAN);
        assert_eq!(DEFAULT_ARMS[3].name(0), crate::eval::ARM_DDIM_CONTROL);
        assert!(Arm::parse("ddim+noise").is_err());
    }

    #[test]
    fn config_validation() {
        let mut kv = KvConfig::default();
        kv.set("train.k", 40);
        assert!(ExperimentConfig::from_kv(&kv).unwrap_err().is_validation());
        let mut kv = KvConfig::default();
        kv.set("pipeline.arms", "ddim_train+banana_inf");
        assert!(ExperimentConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn paired_inits_share_noise() {
        let eval = generate_corpus(&SynthConfig { n_per_class: 2, height: 8, width: 8, ..Default::default() }).unwrap();
        let sched = build_schedule(ScheduleConfig::default()).unwrap();
        let mix = PcaMixture::fit(&eval, 0).unwrap();
        let noise = draw_inits(InitKind::Noise, &eval, &sched, None, 0, false, 9).unwrap();
        let off = draw_inits(InitKind::Offset, &eval, &sched, Some(&mix), 0, false, 9).unwrap();
        let a = sched.alpha_bar_final();
        for (i, (n, o)) in noise.iter().zip(&off).enumerate() {
            let mean = &mix.class(eval.images[i].condition.class.id()).unwrap().mean;
            for j in 0..n.len() {
                let want = (a.sqrt() * mean[j] + (1.0 - a).sqrt() * n[j] as f64) as f32;
                assert!((o[j] - want).abs() < 1e-5);
            }
        }
        assert_ne!(noise[0], noise[1]);
    }

    #[test]
    fn rerun_is_idempotent_and_deletion_reruns_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let first = run_pipeline(&cfg).unwrap();
        assert!(first.stages.iter().all(|s| s.ran));
        let second = run_pipeline(&cfg).unwrap();
        assert!(second.executed().is_empty(), "{:?}", second.executed());
        assert_eq!(first.comparison, second.comparison);

        let name = crate::eval::ARM_DDIM_NOISE;
        std::fs::remove_file(Layout::new(dir.path()).eval(name)).unwrap();
        let third = run_pipeline(&cfg).unwrap();
        assert_eq!(third.executed(), vec![format!("eval-{name}").as_str(), "compare"]);
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.pca_k_max = 50;
        cfg.train.k = 0;
        let err = run_pipeline(&cfg).unwrap_err();
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "fit-pca"),
            other => panic!("unexpected {other}"),
        }
    }
}
