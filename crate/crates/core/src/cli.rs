//! Command-line front end. Every subcommand accepts `--config <file>` (flat
//! `section.key: value` text) and `--set key=value`; dedicated flags override
//! both. Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::load_checkpoint;
use crate::error::{Error, Result};
use crate::eval::{compare_arms, EvalReport};
use crate::gap::{analyze_at, GapReport};
use crate::kvconfig::KvConfig;
use crate::pca::PcaMixture;
use crate::pipeline::{
    draw_inits, evaluate_saved, run_ddim_traces, run_pipeline, save_samples, schedule_from, ExperimentConfig,
    InitKind,
};
use crate::sampler::export_trace;
use crate::schedule::{alpha_threshold, build_schedule, sweep_linear_end};
use crate::synth::{generate_corpus, Corpus, SynthClass, SynthCondition, SynthImage};
use crate::trainer::{run_training, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "difflab", version, about = "Train/inference gap laboratory for diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file with `section.key: value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.iters=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub linear_start: Option<f64>,
    #[arg(long)]
    pub linear_end: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// DDIM skip S (also the offset-training window).
    #[arg(long)]
    pub skip: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-class corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Also export the first records as PPM into this directory.
        #[arg(long)]
        ppm_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        ppm_count: usize,
    },
    /// Fit the per-class PCA mixture.
    FitPca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kmax: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted and empirical gap statistics between x_T and pure noise.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        schedule: ScheduleFlags,
        /// Use this alpha_T instead of the schedule's.
        #[arg(long)]
        alpha_t: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON report path; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser (standard or offset objective).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pca: Option<PathBuf>,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        checkpoint_interval: Option<u64>,
        /// Continue from an existing checkpoint instead of a fresh init.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[command(flatten)]
        schedule: ScheduleFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate samples with DDIM.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SampleMode::Noise)]
        mode: SampleMode,
        /// Restrict to one class id.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        pca: Option<PathBuf>,
        /// Corpus file supplying conditions (and ground truth for control).
        #[arg(long)]
        conditions: Option<PathBuf>,
        #[arg(long)]
        clip: bool,
        #[command(flatten)]
        schedule: ScheduleFlags,
        #[arg(long)]
        out: PathBuf,
        /// Also export the per-step trace of every sample here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Side-by-side noise vs PCA-offset traces for conditioning records.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pca: PathBuf,
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        schedule: ScheduleFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sample directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `samples.bin`.
        #[arg(long)]
        images_dir: PathBuf,
        /// Corpus file whose conditions replace the stored ones.
        #[arg(long)]
        conditions: Option<PathBuf>,
        #[arg(long, default_value = "arm")]
        arm: String,
        /// report.json; report.csv is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge eval reports into a comparison table with verdicts.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Reports in order; the first is the delta reference.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// comparison.json; comparison.csv is written beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final alpha_bar over a set of linear_end values.
    SweepSchedule {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.012,0.02,0.025,0.03")]
        ends: Vec<f64>,
        #[command(flatten)]
        schedule: ScheduleFlags,
        /// Image dimension for the 1/d threshold column.
        #[arg(long, default_value_t = 16384)]
        d: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage, reusing up-to-date outputs.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Noise,
    Pca,
    Control,
}

fn base_config(common: &Common) -> Result<KvConfig> {
    let mut kv = match &common.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for o in &common.overrides {
        kv.apply_override(o)?;
    }
    Ok(kv)
}

fn put<T: ToString>(kv: &mut KvConfig, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn put_schedule(kv: &mut KvConfig, s: &ScheduleFlags) {
    put(kv, "schedule.linear_start", &s.linear_start);
    put(kv, "schedule.linear_end", &s.linear_end);
    put(kv, "schedule.total_steps", &s.total_steps);
    put(kv, "schedule.skip", &s.skip);
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn random_conditions(count: usize, class: Option<usize>, seed: u64) -> Result<Vec<SynthCondition>> {
    let class = class.map(SynthClass::from_id).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| SynthCondition::sample(class.unwrap_or(SynthClass::ALL[i % SynthClass::ALL.len()]), &mut rng))
        .collect())
}

fn condition_records(path: &Path, count: usize, class: Option<usize>) -> Result<Corpus> {
    let mut c = Corpus::load(path)?;
    if let Some(id) = class {
        SynthClass::from_id(id)?;
        c.images.retain(|i| i.condition.class.id() == id);
    }
    if c.images.len() < count {
        return Err(Error::Config(format!(
            "{} holds {} matching records, {count} requested",
            path.display(),
            c.images.len()
        )));
    }
    c.images.truncate(count);
    Ok(c)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, n_per_class, seed, height, width, ppm_dir, ppm_count } => {
            let mut kv = base_config(&common)?;
            put(&mut kv, "synth.n_per_class", &n_per_class);
            put(&mut kv, "synth.seed", &seed);
            put(&mut kv, "synth.height", &height);
            put(&mut kv, "synth.width", &width);
            let cfg = ExperimentConfig::from_kv(&kv)?;
            let corpus = generate_corpus(&cfg.synth)?;
            corpus.save(&out)?;
            if let Some(dir) = ppm_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for i in 0..ppm_count.min(corpus.len()) {
                    corpus.export_ppm(i, &dir.join(format!("record_{i:04}.ppm")))?;
                }
            }
            println!("wrote {} records ({:?}) to {} (seed {})", corpus.len(), corpus.class_counts(), out.display(), cfg.synth.seed);
        }
        Command::FitPca { common, corpus, kmax, out } => {
            let mut kv = base_config(&common)?;
            put(&mut kv, "pca.k_max", &kmax);
            let k_max: usize = kv.get_or("pca.k_max", 16)?;
            let mix = PcaMixture::fit(&Corpus::load(&corpus)?, k_max)?;
            mix.save(&out)?;
            for m in &mix.models {
                let top: Vec<String> = m.eigenvalues.iter().take(4).map(|v| format!("{v:.4e}")).collect();
                println!("class {}: top eigenvalues {}", m.class_id, top.join(" "));
            }
        }
        Command::Analyze { common, corpus, schedule, alpha_t, samples, seed, out } => {
            let mut kv = base_config(&common)?;
            put_schedule(&mut kv, &schedule);
            put(&mut kv, "analyze.samples", &samples);
            put(&mut kv, "analyze.seed", &seed);
            let sched = build_schedule(schedule_from(&kv)?)?;
            let alpha = alpha_t.unwrap_or(sched.alpha_bar_final());
            let corpus = Corpus::load(&corpus)?;
            let mut rng = ChaCha8Rng::seed_from_u64(kv.get_or("analyze.seed", 3)?);
            let report: GapReport = analyze_at(&corpus, alpha, kv.get_or("analyze.samples", 10_000)?, &mut rng)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write(&p, &report.to_json())?;
            }
        }
        Command::Train {
            common, corpus, pca, mode, k, iters, batch_size, lr, seed, hidden, checkpoint_interval, init_from, schedule, out,
        } => {
            let mut kv = base_config(&common)?;
            put_schedule(&mut kv, &schedule);
            put(&mut kv, "train.k", &k);
            put(&mut kv, "train.iters", &iters);
            put(&mut kv, "train.batch_size", &batch_size);
            put(&mut kv, "train.learning_rate", &lr);
            put(&mut kv, "train.seed", &seed);
            put(&mut kv, "train.hidden", &hidden);
            put(&mut kv, "train.checkpoint_interval", &checkpoint_interval);
            if let Some(k) = k.filter(|_| kv.get_str("pca.k_max").is_none()) {
                kv.set("pca.k_max", k.max(16));
            }
            put(&mut kv, "train.mode", &mode);
            let exp = ExperimentConfig::from_kv(&kv)?;
            let mode: TrainMode = kv.get_or("train.mode", TrainMode::Standard)?;
            let mut cfg = exp.train.clone();
            cfg.mode = mode;
            cfg.corpus = corpus;
            cfg.pca = pca;
            cfg.init_from = init_from;
            cfg.out_dir = out;
            let sched = build_schedule(exp.schedule)?;
            let outcome = run_training(&cfg, &sched)?;
            if let Some(last) = outcome.log.last() {
                println!("iter {} mean loss {:.6} ({:.1}s)", last.iter, last.mean_loss, last.wall_clock_s);
            }
            println!("checkpoint {} (seed {})", outcome.final_checkpoint.display(), cfg.seed);
        }
        Command::Sample {
            common, checkpoint, mode, class, k, seed, count, pca, conditions, clip, schedule, out, trace_out,
        } => {
            let mut kv = base_config(&common)?;
            put_schedule(&mut kv, &schedule);
            put(&mut kv, "sample.k", &k);
            put(&mut kv, "sample.seed", &seed);
            if let Some(k) = k.filter(|_| kv.get_str("pca.k_max").is_none()) {
                kv.set("pca.k_max", k.max(16));
            }
            let exp = ExperimentConfig::from_kv(&kv)?;
            let sched = build_schedule(exp.schedule)?;
            let (params, _) = load_checkpoint(&checkpoint, None)?;
            let d = params.config.d;
            let records = match &conditions {
                Some(p) => condition_records(p, count, class)?,
                None if mode == SampleMode::Control => {
                    return Err(Error::Missing("control mode needs --conditions with ground truth".into()))
                }
                None => {
                    let side = (d as f64 / 3.0).sqrt().round() as usize;
                    if side * side * 3 != d {
                        return Err(Error::Config(format!("cannot infer geometry for d = {d}; pass --conditions")));
                    }
                    let imgs = random_conditions(count, class, exp.sample_seed)?
                        .into_iter()
                        .map(|c| SynthImage { pixels: vec![0.0; d], condition: c })
                        .collect();
                    Corpus::new(side, side, 3, imgs)?
                }
            };
            if records.dim() != d {
                return Err(Error::Shape(format!("conditions have d = {}, checkpoint d = {d}", records.dim())));
            }
            let mixture = pca.as_deref().map(PcaMixture::load).transpose()?;
            let kind = match mode {
                SampleMode::Noise => InitKind::Noise,
                SampleMode::Pca => InitKind::Offset,
                SampleMode::Control => InitKind::Control,
            };
            let inits = draw_inits(kind, &records, &sched, mixture.as_ref(), exp.infer_k, clip, exp.sample_seed)?;
            let conds: Vec<SynthCondition> = records.images.iter().map(|i| i.condition).collect();
            let traces = run_ddim_traces(&params, &inits, &conds, &sched, exp.sample_chunk)?;
            let geom = crate::eval::ImageGeometry { height: records.height, width: records.width, channels: records.channels };
            let finals: Vec<Vec<f32>> = traces.iter().map(|t| t.final_image().to_vec()).collect();
            save_samples(&out, geom, &finals, &conds, count)?;
            if let Some(dir) = trace_out {
                for (i, t) in traces.iter().enumerate() {
                    export_trace(t, geom.height, geom.width, geom.channels, &dir, &format!("trace_{i:04}"))?;
                }
            }
            println!("wrote {count} samples to {} (seed {})", out.display(), exp.sample_seed);
        }
        Command::Trace { common, checkpoint, pca, conditions, count, k, seed, schedule, out } => {
            let mut kv = base_config(&common)?;
            put_schedule(&mut kv, &schedule);
            put(&mut kv, "sample.k", &k);
            put(&mut kv, "sample.seed", &seed);
            let exp = ExperimentConfig::from_kv(&kv)?;
            let sched = build_schedule(exp.schedule)?;
            let (params, _) = load_checkpoint(&checkpoint, None)?;
            let records = condition_records(&conditions, count, None)?;
            let mixture = PcaMixture::load(&pca)?;
            let conds: Vec<SynthCondition> = records.images.iter().map(|i| i.condition).collect();
            let mut summary = String::from("index,arm,step1_x0_hat_border_std\n");
            for (kind, name) in [(InitKind::Noise, "noise"), (InitKind::Offset, "pca_offset")] {
                let inits = draw_inits(kind, &records, &sched, Some(&mixture), exp.infer_k, exp.clip_init, exp.sample_seed)?;
                let traces = run_ddim_traces(&params, &inits, &conds, &sched, exp.sample_chunk)?;
                for (i, t) in traces.iter().enumerate() {
                    export_trace(t, records.height, records.width, records.channels, &out.join(name), &format!("trace_{i:04}"))?;
                    let b = crate::sampler::border_std(&t.steps[0].x0_hat, records.height, records.width, records.channels);
                    summary.push_str(&format!("{i},{name},{b:.8}\n"));
                }
            }
            write(&out.join("summary.csv"), &summary)?;
            print!("{summary}");
        }
        Command::Eval { common, images_dir, conditions, arm, out } => {
            base_config(&common)?;
            let mut samples = Corpus::load(&images_dir.join("samples.bin"))?;
            if let Some(p) = conditions {
                let c = Corpus::load(&p)?;
                if c.len() < samples.len() {
                    return Err(Error::Shape(format!("{} conditions for {} samples", c.len(), samples.len())));
                }
                for (s, r) in samples.images.iter_mut().zip(&c.images) {
                    s.condition = r.condition;
                }
            }
            let report = evaluate_saved(&arm, &samples)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            report.save_json(&out)?;
            report.save_csv(&out.with_extension("csv"))?;
            println!(
                "{arm}: background_mse {:.6}  centering {:.4}  attribute_fidelity {:.6}  pass_rate {:.3}",
                report.background_mse, report.centering_error, report.attribute_fidelity, report.property_pass_rate
            );
        }
        Command::Compare { common, reports, out } => {
            base_config(&common)?;
            let reports = reports.iter().map(|p| EvalReport::load_json(p)).collect::<Result<Vec<_>>>()?;
            let cmp = compare_arms(&reports)?;
            print!("{}", cmp.to_table());
            if let Some(p) = out {
                if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                cmp.save(&p, &p.with_extension("csv"))?;
            }
        }
        Command::SweepSchedule { common, ends, schedule, d, out } => {
            let mut kv = base_config(&common)?;
            put_schedule(&mut kv, &schedule);
            let base = schedule_from(&kv)?;
            let threshold = alpha_threshold(d);
            let mut csv = String::from("linear_end,alpha_bar_final,sqrt_alpha_bar_final,below_threshold\n");
            println!("threshold 1/d = {threshold:.6} (d = {d})");
            for row in sweep_linear_end(base, &ends)? {
                println!(
                    "linear_end {:<8} alpha_T {:.6e}  {}",
                    row.linear_end,
                    row.alpha_bar_final,
                    if row.alpha_bar_final < threshold { "< 1/d" } else { "not < 1/d" }
                );
                csv.push_str(&format!(
                    "{},{:.6e},{:.6e},{}\n",
                    row.linear_end,
                    row.alpha_bar_final,
                    row.sqrt_alpha_bar_final,
                    row.alpha_bar_final < threshold
                ));
            }
            if let Some(p) = out {
                write(&p, &csv)?;
            }
        }
        Command::Pipeline { common, out_dir, iters, seed } => {
            let mut kv = base_config(&common)?;
            put(&mut kv, "experiment.out_dir", &out_dir.map(|p| p.display().to_string()));
            put(&mut kv, "train.iters", &iters);
            put(&mut kv, "experiment.seed", &seed);
            let cfg = ExperimentConfig::from_kv(&kv)?;
            write(&cfg.out_dir.join("config.txt"), &kv.to_text())?;
            let outcome = run_pipeline(&cfg)?;
            for s in &outcome.stages {
                println!("{:<40} {}", s.stage, if s.ran { "ran" } else { "up to date" });
            }
            print!("{}", outcome.comparison.to_table());
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}
