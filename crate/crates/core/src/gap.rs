//! Distinguishability of fully noised training images from pure noise.
//!
//! The statistic is the spatial average `a·x` with `a = (1/d)·1`. For a
//! corpus with `E[a·x₀] = μ` and `Var[a·x₀] = σ²`, the fully noised images
//! have `a·x_T ~ N(√ᾱ_T·μ, ᾱ_T·σ² + (1−ᾱ_T)/d)` while pure noise has
//! `a·ε ~ N(0, 1/d)`.

use rand::Rng;
use serde::Serialize;

use crate::diffusion::{noise_with, standard_normal};
use crate::error::{Error, Result};
use crate::schedule::{alpha_threshold, NoiseSchedule};
use crate::synth::{corpus_stats, spatial_mean, Corpus};

/// Separation `(μ_T/σ_T)²` below which noised data counts as indistinguishable.
pub const SEPARATION_LIMIT: f64 = 0.01;
pub const MIN_EMPIRICAL_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedGap {
    pub d: usize,
    pub alpha_t: f64,
    pub mu: f64,
    pub sigma2_corpus: f64,
    pub sigma2_noise: f64,
    pub mu_t: f64,
    pub sigma2_t: f64,
    /// `(μ_T/σ)²` against the pure-noise spread `σ² = 1/d`.
    pub ratio1: f64,
    /// `(μ_T/σ_T)²`.
    pub ratio2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalGap {
    pub n_samples: usize,
    pub noisy_mean: f64,
    pub noisy_var: f64,
    pub noise_mean: f64,
    pub noise_var: f64,
    /// Difference of means over the pooled standard error.
    pub z_score: f64,
    /// `P(a·x_T > a·ε)`, ties counted half.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub predicted: PredictedGap,
    pub empirical: Option<EmpiricalGap>,
    pub alpha_threshold: f64,
    pub below_threshold: bool,
    pub indistinguishable: bool,
}

pub fn predict_gap(d: usize, alpha_t: f64, mu: f64, sigma2: f64) -> Result<PredictedGap> {
    if d == 0 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    if !(alpha_t > 0.0 && alpha_t < 1.0) {
        return Err(Error::Config(format!("alpha_T must lie in (0, 1), got {alpha_t}")));
    }
    if sigma2.is_nan() || sigma2 < 0.0 || !mu.is_finite() {
        return Err(Error::Config(format!("bad corpus statistics mu={mu}, sigma2={sigma2}")));
    }
    let df = d as f64;
    let mu_t = alpha_t.sqrt() * mu;
    let sigma2_t = alpha_t * sigma2 + (1.0 - alpha_t) / df;
    let ratio1 = df * alpha_t * mu * mu;
    let ratio2 = ratio1 / (alpha_t * (sigma2 * df - 1.0) + 1.0);
    Ok(PredictedGap {
        d,
        alpha_t,
        mu,
        sigma2_corpus: sigma2,
        sigma2_noise: 1.0 / df,
        mu_t,
        sigma2_t,
        ratio1,
        ratio2,
    })
}

impl GapReport {
    pub fn new(predicted: PredictedGap, empirical: Option<EmpiricalGap>) -> Self {
        let threshold = alpha_threshold(predicted.d);
        GapReport {
            alpha_threshold: threshold,
            below_threshold: predicted.alpha_t < threshold,
            indistinguishable: predicted.ratio2 < SEPARATION_LIMIT,
            predicted,
            empirical,
        }
    }

    pub fn verdict(&self) -> &'static str {
        if self.indistinguishable {
            "PASS"
        } else {
            "FAIL"
        }
    }

    /// The comparison against `1/d`, e.g. `0.0047 is not < 0.000061`.
    pub fn threshold_statement(&self) -> String {
        format!(
            "{:.4} is {}< {:.6}",
            self.predicted.alpha_t,
            if self.below_threshold { "" } else { "not " },
            self.alpha_threshold
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let p = &self.predicted;
        let mut s = format!(
            "d = {}  alpha_T = {:.6e}  threshold 1/d = {:.6e}  ({})\n",
            p.d,
            p.alpha_t,
            self.alpha_threshold,
            self.threshold_statement()
        );
        s.push_str(&format!("corpus mu = {:.6}  sigma2 = {:.6e}\n", p.mu, p.sigma2_corpus));
        s.push_str(&format!("{:<20} {:>14} {:>14}\n", "quantity", "predicted", "empirical"));
        let emp = self.empirical.as_ref();
        let row = |name: &str, pred: f64, e: Option<f64>| {
            format!(
                "{:<20} {:>14.6e} {:>14}\n",
                name,
                pred,
                e.map_or("-".to_string(), |v| format!("{v:.6e}"))
            )
        };
        s.push_str(&row("mean a.x_T", p.mu_t, emp.map(|e| e.noisy_mean)));
        s.push_str(&row("var a.x_T", p.sigma2_t, emp.map(|e| e.noisy_var)));
        s.push_str(&row("mean a.eps", 0.0, emp.map(|e| e.noise_mean)));
        s.push_str(&row("var a.eps", p.sigma2_noise, emp.map(|e| e.noise_var)));
        s.push_str(&row("ratio1", p.ratio1, None));
        s.push_str(&row("ratio2", p.ratio2, emp.map(|e| e.noisy_mean * e.noisy_mean / e.noisy_var)));
        if let Some(e) = emp {
            s.push_str(&format!("z-score {:.3}  AUC {:.4}  (n = {})\n", e.z_score, e.auc, e.n_samples));
        }
        s.push_str(&format!(
            "separation ratio2 {} {SEPARATION_LIMIT}: {}\n",
            if self.indistinguishable { "<" } else { ">=" },
            self.verdict()
        ));
        s
    }
}

/// Exact Mann–Whitney AUC `P(X > Y) + ½·P(X = Y)`.
pub fn mann_whitney_auc(x: &[f64], y: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    (rank_sum - nx * (nx + 1.0) / 2.0) / (nx * ny)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Monte-Carlo comparison at an explicit `ᾱ_T`.
pub fn empirical_gap_at<R: Rng + ?Sized>(
    corpus: &Corpus,
    alpha_t: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<EmpiricalGap> {
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    if n_samples < MIN_EMPIRICAL_SAMPLES {
        return Err(Error::Config(format!(
            "need at least {MIN_EMPIRICAL_SAMPLES} samples, got {n_samples}"
        )));
    }
    if !(alpha_t > 0.0 && alpha_t <= 1.0) {
        return Err(Error::Config(format!("alpha_T must lie in (0, 1], got {alpha_t}")));
    }
    let d = corpus.dim();
    let mut noisy = Vec::with_capacity(n_samples);
    let mut pure = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let img = &corpus.images[rng.random_range(0..corpus.len())];
        let eps = standard_normal(d, rng);
        noisy.push(spatial_mean(&noise_with(&img.pixels, &eps, alpha_t)));
        pure.push(spatial_mean(&standard_normal(d, rng)));
    }
    let (noisy_mean, noisy_var) = mean_var(&noisy);
    let (noise_mean, noise_var) = mean_var(&pure);
    let n = n_samples as f64;
    let z_score = (noisy_mean - noise_mean) / (noisy_var / n + noise_var / n).sqrt();
    Ok(EmpiricalGap {
        n_samples,
        noisy_mean,
        noisy_var,
        noise_mean,
        noise_var,
        z_score,
        auc: mann_whitney_auc(&noisy, &pure),
    })
}

pub fn empirical_gap<R: Rng + ?Sized>(
    corpus: &Corpus,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut R,
) -> Result<EmpiricalGap> {
    empirical_gap_at(corpus, sched.alpha_bar_final(), n_samples, rng)
}

/// Predicted and empirical statistics for a corpus at a given `ᾱ_T`.
pub fn analyze_at<R: Rng + ?Sized>(
    corpus: &Corpus,
    alpha_t: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<GapReport> {
    let stats = corpus_stats(corpus)?;
    let predicted = predict_gap(corpus.dim(), alpha_t, stats.overall.mu, stats.overall.sigma2)?;
    let empirical = empirical_gap_at(corpus, alpha_t, n_samples, rng)?;
    Ok(GapReport::new(predicted, Some(empirical)))
}
