//! Per-class PCA models and their mixture, the approximate clean-image
//! distribution used to start inference (and, in offset training, to build
//! the first-skip inputs).
//!
//! A class model is `x = μ + Σ_{i≤K} ξ_i p_i` with orthonormal `p_i` and
//! `ξ_i ~ N(0, λ_i)`; `λ_i` is a covariance eigenvalue (a variance). All
//! in-memory arithmetic is `f64`; persisted blobs are `f32`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::synth::{Corpus, SynthClass};
use crate::tensorio::{Tensor, TensorStore};

const STORE_KIND: &str = "difflab-pca";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaClassModel {
    pub class_id: usize,
    pub mean: Vec<f64>,
    /// `K_max` orthonormal rows of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
}

/// Fits the top-`k_max` eigenpairs of the population covariance of one
/// class's samples.
pub fn fit_pca(corpus: &Corpus, class: SynthClass, k_max: usize) -> Result<PcaClassModel> {
    let samples: Vec<Vec<f64>> = corpus
        .class_images(class)
        .map(|img| img.pixels.iter().map(|&v| v as f64).collect())
        .collect();
    fit_samples(class.id(), &samples, k_max)
}

/// [`fit_pca`] over explicit sample vectors.
pub fn fit_samples(class_id: usize, samples: &[Vec<f64>], k_max: usize) -> Result<PcaClassModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "class {class_id} has {n} samples; PCA needs at least 2"
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("samples have unequal dimension".into()));
    }
    let bound = d.min(n - 1);
    if k_max > bound {
        return Err(Error::Config(format!(
            "k_max {k_max} exceeds rank bound min(d, n-1) = {bound}"
        )));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);

    let (mut eigenvalues, mut components) = if n < d {
        gram_eigenpairs(&centered, k_max)
    } else {
        covariance_eigenpairs(&centered, k_max)
    };
    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
    for lambda in eigenvalues.iter_mut() {
        if *lambda < 1e-12 * scale {
            *lambda = 0.0;
        }
    }
    orthonormalize(&mut components, &eigenvalues, d);
    Ok(PcaClassModel {
        class_id,
        mean,
        components,
        eigenvalues,
    })
}

/// Descending eigenpairs of a symmetric matrix, truncated to `k`.
fn top_eigen(m: DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>, Vec<usize>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(k);
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    (values, eig.eigenvectors, order)
}

fn covariance_eigenpairs(centered: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = centered.nrows() as f64;
    let cov = (centered.transpose() * centered) / n;
    let (values, vectors, order) = top_eigen(cov, k);
    let comps = order
        .iter()
        .map(|&i| vectors.column(i).iter().copied().collect())
        .collect();
    (values, comps)
}

/// Decomposes the `n × n` Gram matrix and lifts `u ↦ Xᵀu / √(nλ)`.
fn gram_eigenpairs(centered: &DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = centered.nrows() as f64;
    let gram = (centered * centered.transpose()) / n;
    let (values, vectors, order) = top_eigen(gram, k);
    let comps = order
        .iter()
        .zip(&values)
        .map(|(&i, &lambda)| {
            let lifted = centered.transpose() * vectors.column(i);
            let norm = (n * lambda).sqrt();
            if norm > 0.0 {
                lifted.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; centered.ncols()]
            }
        })
        .collect();
    (values, comps)
}

/// Modified Gram-Schmidt (two passes). Directions with zero variance are
/// replaced by basis vectors orthogonal to the rest.
fn orthonormalize(components: &mut [Vec<f64>], eigenvalues: &[f64], d: usize) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(components.len());
    let mut next_axis = 0usize;
    for (c, &lambda) in components.iter_mut().zip(eigenvalues) {
        let mut v = if lambda > 0.0 { c.clone() } else { vec![0.0; d] };
        loop {
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
            v = vec![0.0; d];
            v[next_axis % d] = 1.0;
            next_axis += 1;
        }
        *c = v.clone();
        basis.push(v);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PcaClassModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k_max(&self) -> usize {
        self.components.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k > self.k_max() {
            Err(Error::Config(format!(
                "K = {k} exceeds K_max = {} for class {}",
                self.k_max(),
                self.class_id
            )))
        } else {
            Ok(())
        }
    }

    /// Draws `x_R = μ + Σ_{i≤K} ξ_i p_i`, `ξ_i ~ N(0, λ_i)`. `K = 0` returns
    /// the class mean exactly.
    pub fn sample_init<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_k(k)?;
        let mut x = self.mean.clone();
        for (p, &lambda) in self.components[..k].iter().zip(&self.eigenvalues) {
            let z: f64 = rng.sample(StandardNormal);
            let xi = z * lambda.sqrt();
            if xi != 0.0 {
                x.iter_mut().zip(p).for_each(|(xv, pv)| *xv += xi * pv);
            }
        }
        Ok(x)
    }

    /// `x_K = μ + Σ_{i≤K} (p_i·(x−μ)) p_i`.
    pub fn project(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "projection input has {} values, model d = {}",
                x.len(),
                self.dim()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = self.mean.clone();
        for p in &self.components[..k] {
            let coef = dot(p, &centered);
            out.iter_mut().zip(p).for_each(|(o, pv)| *o += coef * pv);
        }
        Ok(out)
    }

    /// Largest `|p_i·p_j − δ_ij|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - want).abs());
            }
        }
        worst
    }
}

/// One PCA model per class, sharing `d` and `K_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaMixture {
    pub models: Vec<PcaClassModel>,
}

impl PcaMixture {
    pub fn fit(corpus: &Corpus, k_max: usize) -> Result<Self> {
        let mut models = Vec::new();
        for class in SynthClass::ALL {
            if corpus.class_images(class).next().is_some() {
                models.push(fit_pca(corpus, class, k_max)?);
            }
        }
        Self::new(models)
    }

    pub fn new(models: Vec<PcaClassModel>) -> Result<Self> {
        if let Some(first) = models.first() {
            let (d, k) = (first.dim(), first.k_max());
            if models.iter().any(|m| m.dim() != d || m.k_max() != k) {
                return Err(Error::Shape("class models disagree on d or K_max".into()));
            }
        }
        Ok(Self { models })
    }

    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.dim())
    }

    pub fn k_max(&self) -> usize {
        self.models.first().map_or(0, |m| m.k_max())
    }

    pub fn class(&self, class_id: usize) -> Result<&PcaClassModel> {
        self.models
            .iter()
            .find(|m| m.class_id == class_id)
            .ok_or_else(|| Error::Missing(format!("PCA model for class {class_id}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut store = TensorStore::new(STORE_KIND);
        store.set("d", self.dim());
        store.set("k_max", self.k_max());
        let ids: Vec<String> = self.models.iter().map(|m| m.class_id.to_string()).collect();
        store.set("class_ids", ids.join(","));
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for m in &self.models {
            let c = m.class_id;
            store.push(Tensor::new(format!("mean.{c}"), vec![m.dim()], f32s(&m.mean)));
            let flat: Vec<f64> = m.components.iter().flatten().copied().collect();
            store.push(Tensor::new(
                format!("components.{c}"),
                vec![m.k_max(), m.dim()],
                f32s(&flat),
            ));
            store.push(Tensor::new(
                format!("eigenvalues.{c}"),
                vec![m.k_max()],
                f32s(&m.eigenvalues),
            ));
        }
        store.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let store = TensorStore::load(dir, STORE_KIND)?;
        let d: usize = store.require("d")?;
        let k_max: usize = store.require("k_max")?;
        let ids: String = store.require("class_ids")?;
        let f64s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut models = Vec::new();
        for id in ids.split(',').filter(|s| !s.is_empty()) {
            let class_id: usize = id
                .parse()
                .map_err(|_| Error::format(dir, format!("bad class id `{id}`")))?;
            let mean = store.tensor(&format!("mean.{class_id}"))?;
            let comps = store.tensor(&format!("components.{class_id}"))?;
            let eig = store.tensor(&format!("eigenvalues.{class_id}"))?;
            if mean.shape != [d] || comps.shape != [k_max, d] || eig.shape != [k_max] {
                return Err(Error::Shape(format!(
                    "class {class_id} tensors do not match d = {d}, K_max = {k_max}"
                )));
            }
            models.push(PcaClassModel {
                class_id,
                mean: f64s(&mean.data),
                components: comps.data.chunks(d.max(1)).map(f64s).collect(),
                eigenvalues: f64s(&eig.data),
            });
        }
        Self::new(models)
    }
}
