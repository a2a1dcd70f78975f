//! Noise schedules and DDIM skip-step index maps.
//!
//! Timesteps are 1-based: `t ∈ {1, …, T}`. `alpha_bar(t)` is the cumulative
//! product `Π_{s≤t} (1 − β_s)`, i.e. the fraction of signal variance that
//! survives to timestep `t`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Stable Diffusion's default `linear_start`.
pub const SD_LINEAR_START: f64 = 0.00085;
/// Stable Diffusion's default `linear_end`.
pub const SD_LINEAR_END: f64 = 0.012;

/// How β evolves between `linear_start` and `linear_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSchedule {
    /// `β_t = (√start + (t−1)/(T−1)·(√end − √start))²`.
    #[default]
    ScaledLinear,
    /// `β_t = start + (t−1)/(T−1)·(end − start)`. Comparison only.
    Linear,
}

impl std::str::FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_linear" | "scaled-linear" => Ok(BetaSchedule::ScaledLinear),
            "linear" => Ok(BetaSchedule::Linear),
            other => Err(Error::Config(format!("unknown beta schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub linear_start: f64,
    pub linear_end: f64,
    pub total_steps: usize,
    /// DDIM inference skip; also the width of the offset-training window.
    pub skip: usize,
    pub beta_schedule: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            linear_start: SD_LINEAR_START,
            linear_end: SD_LINEAR_END,
            total_steps: 1000,
            skip: 50,
            beta_schedule: BetaSchedule::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn with_linear_end(mut self, linear_end: f64) -> Self {
        self.linear_end = linear_end;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.linear_start > 0.0 && self.linear_start < 1.0) {
            return Err(Error::Config(format!(
                "linear_start must lie in (0, 1), got {}",
                self.linear_start
            )));
        }
        if !(self.linear_end >= self.linear_start && self.linear_end < 1.0) {
            return Err(Error::Config(format!(
                "linear_end must lie in [linear_start, 1), got {}",
                self.linear_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.skip == 0 || self.skip > self.total_steps {
            return Err(Error::Config(format!(
                "skip must lie in [1, {}], got {}",
                self.total_steps, self.skip
            )));
        }
        Ok(())
    }
}

/// β and ᾱ tables plus the DDIM inference index list. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    inference_steps: Vec<usize>,
}

/// Builds β_t for `t = 1..=T` and their running product ᾱ_t.
pub fn build_schedule(cfg: ScheduleConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let n = cfg.total_steps;
    let frac = |i: usize| {
        if n == 1 {
            0.0
        } else {
            i as f64 / (n - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..n)
        .map(|i| match cfg.beta_schedule {
            BetaSchedule::ScaledLinear => {
                let (s, e) = (cfg.linear_start.sqrt(), cfg.linear_end.sqrt());
                let b = s + frac(i) * (e - s);
                b * b
            }
            BetaSchedule::Linear => {
                cfg.linear_start + frac(i) * (cfg.linear_end - cfg.linear_start)
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(n);
    let mut acc = 1.0f64;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let inference_steps = skip_indices(n, cfg.skip);
    Ok(NoiseSchedule {
        config: cfg,
        betas,
        alpha_bars,
        inference_steps,
    })
}

/// Spatial-average distinguishability threshold `1/d`.
pub fn alpha_threshold(d: usize) -> f64 {
    assert!(d >= 1, "image dimension must be positive");
    1.0 / d as f64
}

/// `[T, T−S, T−2S, …]` down to the last positive entry. When `S ∤ T` that
/// last entry is `T mod S`, otherwise it is `S`.
fn skip_indices(total: usize, skip: usize) -> Vec<usize> {
    (0..)
        .map(|k| total as isize - (k * skip) as isize)
        .take_while(|&t| t >= 1)
        .map(|t| t as usize)
        .collect()
}

/// Descending DDIM timesteps for a given skip.
pub fn inference_indices(sched: &NoiseSchedule, skip: usize) -> Vec<usize> {
    assert!(
        (1..=sched.total_steps()).contains(&skip),
        "skip must lie in [1, T]"
    );
    skip_indices(sched.total_steps(), skip)
}

impl NoiseSchedule {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn skip(&self) -> usize {
        self.config.skip
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Indices for the configured skip.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ_T.
    pub fn alpha_bar_final(&self) -> f64 {
        *self.alpha_bars.last().unwrap()
    }

    /// Offset-training window predicate `t ≥ T − S`.
    pub fn in_offset_window(&self, t: usize) -> bool {
        t + self.config.skip >= self.total_steps()
    }

    /// Writes `t,beta,alpha_bar` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,beta,alpha_bar")?;
        for (i, (b, a)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            writeln!(w, "{},{:.17e},{:.17e}", i + 1, b, a)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

/// One row of a linear-end sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub linear_end: f64,
    pub alpha_bar_final: f64,
    pub sqrt_alpha_bar_final: f64,
}

/// ᾱ_T for each `linear_end`, holding every other schedule parameter fixed.
pub fn sweep_linear_end(base: ScheduleConfig, ends: &[f64]) -> Result<Vec<SweepRow>> {
    ends.iter()
        .map(|&end| {
            let s = build_schedule(base.with_linear_end(end))?;
            let a = s.alpha_bar_final();
            Ok(SweepRow {
                linear_end: end,
                alpha_bar_final: a,
                sqrt_alpha_bar_final: a.sqrt(),
            })
        })
        .collect()
}
