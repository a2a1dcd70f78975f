//! Conditional ε-prediction network with hand-written reverse mode.
//!
//! Architecture:
//!
//! ```text
//! h  = concat(x_t, time_emb(t), e)
//! a1 = SiLU(h W1 + b1)          hidden
//! a2 = SiLU(a1 W2 + b2)         hidden
//! ε̂  = a2 W3 + b3 + g(t)·x_t    g(t) = time_emb(t)·wg + bg
//! ```
//!
//! The scalar gate `g(t)` is a time-conditioned identity path from `x_t` to
//! the output. Without it the hidden width caps the rank of `ε̂` far below
//! `d`, and the network cannot reproduce the per-pixel noise it must
//! predict. It can be disabled through [`DenoiserConfig::skip_gate`].
//!
//! Parameters live in one flat buffer (see [`Layout`]) so that the optimizer,
//! checkpoints and finite-difference checks index them uniformly.

use std::fmt::Debug;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, LinalgScalar};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorio::{Tensor, TensorStore};

const STORE_KIND: &str = "difflab-checkpoint";

/// Floating-point types the network runs in: `f32` for training and
/// sampling, `f64` for gradient checks.
pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub skip_gate: bool,
}

impl DenoiserConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            cond_dim: crate::synth::COND_DIM,
            time_dim: 16,
            hidden: 256,
            skip_gate: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d + self.time_dim + self.cond_dim
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "invalid denoiser config {self:?} (time_dim must be even and positive)"
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Named slices of the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<(&'static str, Vec<usize>, usize)>,
    pub len: usize,
}

impl Layout {
    fn new(c: &DenoiserConfig) -> Self {
        let mut shapes: Vec<(&'static str, Vec<usize>)> = vec![
            ("w1", vec![c.input_dim(), c.hidden]),
            ("b1", vec![c.hidden]),
            ("w2", vec![c.hidden, c.hidden]),
            ("b2", vec![c.hidden]),
            ("w3", vec![c.hidden, c.d]),
            ("b3", vec![c.d]),
        ];
        if c.skip_gate {
            shapes.push(("gate_w", vec![c.time_dim]));
            shapes.push(("gate_b", vec![1]));
        }
        let mut off = 0;
        let entries = shapes
            .into_iter()
            .map(|(n, s)| {
                let start = off;
                off += s.iter().product::<usize>();
                (n, s, start)
            })
            .collect();
        Self { entries, len: off }
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let (_, shape, off) = self
            .entries
            .iter()
            .find(|(n, _, _)| *n == name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"));
        *off..off + shape.iter().product::<usize>()
    }
}

/// Sinusoidal embedding, interleaved `[sin(t·ω_k), cos(t·ω_k)]` with
/// `ω_k = 10000^{−2k/dim}`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Network weights in a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F: Scalar = f32> {
    pub config: DenoiserConfig,
    pub data: Vec<F>,
    layout: Layout,
}

/// Batched training examples: row `i` of each matrix is one sample.
#[derive(Debug, Clone)]
pub struct Batch<F: Scalar = f32> {
    pub x_t: Array2<F>,
    pub t: Vec<usize>,
    pub cond: Array2<F>,
    pub target: Array2<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

struct Cache<F> {
    input: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
    z2: Array2<F>,
    a2: Array2<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self {
            data: vec![F::zero(); layout.len],
            config,
            layout,
        })
    }

    /// `U(−1/√fan_in, 1/√fan_in)` for every dense layer; the gate starts as
    /// the identity (`wg = 0`, `bg = 1`).
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans = [
            ("w1", config.input_dim()),
            ("b1", config.input_dim()),
            ("w2", config.hidden),
            ("b2", config.hidden),
            ("w3", config.hidden),
            ("b3", config.hidden),
        ];
        for (name, fan_in) in fans {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let r = p.layout.range(name);
            for v in &mut p.data[r] {
                *v = F::of(rng.random_range(-bound..bound));
            }
        }
        if config.skip_gate {
            let r = p.layout.range("gate_b");
            p.data[r].fill(F::one());
        }
        Ok(p)
    }

    pub fn from_data(config: DenoiserConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if data.len() != layout.len {
            return Err(Error::Shape(format!(
                "parameter buffer has {} values, config needs {}",
                data.len(),
                layout.len
            )));
        }
        Ok(Self {
            config,
            data,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            config: self.config,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn mat(&self, name: &str) -> ArrayView2<'_, F> {
        let r = self.layout.range(name);
        let shape = &self.layout.entries.iter().find(|e| e.0 == name).unwrap().1;
        ArrayView2::from_shape((shape[0], shape[1]), &self.data[r]).unwrap()
    }

    fn vec(&self, name: &str) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[self.layout.range(name)])
    }

    fn build_input(&self, x_t: ArrayView2<F>, t: &[usize], cond: ArrayView2<F>) -> Result<Array2<F>> {
        let c = &self.config;
        let b = t.len();
        if x_t.dim() != (b, c.d) || cond.dim() != (b, c.cond_dim) {
            return Err(Error::Shape(format!(
                "batch of {b}: x_t is {:?} (want ({b}, {})), cond is {:?} (want ({b}, {}))",
                x_t.dim(),
                c.d,
                cond.dim(),
                c.cond_dim
            )));
        }
        let mut input = Array2::<F>::zeros((b, c.input_dim()));
        input.slice_mut(s![.., ..c.d]).assign(&x_t);
        for (i, &ti) in t.iter().enumerate() {
            let emb = time_embedding(ti, c.time_dim);
            for (k, v) in emb.into_iter().enumerate() {
                input[[i, c.d + k]] = F::of(v);
            }
        }
        input
            .slice_mut(s![.., c.d + c.time_dim..])
            .assign(&cond);
        Ok(input)
    }

    fn run(&self, x_t: ArrayView2<F>, t: &[usize], cond: ArrayView2<F>) -> Result<(Array2<F>, Cache<F>)> {
        let c = self.config;
        let input = self.build_input(x_t, t, cond)?;
        let z1 = input.dot(&self.mat("w1")) + self.vec("b1");
        let a1 = z1.mapv(|z| z * sigmoid(z));
        let z2 = a1.dot(&self.mat("w2")) + self.vec("b2");
        let a2 = z2.mapv(|z| z * sigmoid(z));
        let mut out = a2.dot(&self.mat("w3")) + self.vec("b3");
        if c.skip_gate {
            let temb = input.slice(s![.., c.d..c.d + c.time_dim]);
            let gb = self.data[self.layout.range("gate_b")][0];
            let g = temb.dot(&self.vec("gate_w")).mapv(|v| v + gb);
            for (mut row, (&gi, xrow)) in out
                .axis_iter_mut(Axis(0))
                .zip(g.iter().zip(x_t.axis_iter(Axis(0))))
            {
                row.scaled_add(gi, &xrow);
            }
        }
        Ok((
            out,
            Cache {
                input,
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    /// ε̂ for a batch; rows of `x_t` and `cond` pair with entries of `t`.
    pub fn forward(&self, x_t: ArrayView2<F>, t: &[usize], cond: ArrayView2<F>) -> Result<Array2<F>> {
        self.run(x_t, t, cond).map(|(out, _)| out)
    }

    /// Single-sample convenience wrapper.
    pub fn forward_one(&self, x_t: &[F], t: usize, cond: &[F]) -> Result<Vec<F>> {
        let x = ArrayView2::from_shape((1, x_t.len()), x_t)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let e = ArrayView2::from_shape((1, cond.len()), cond)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(x, &[t], e)?.into_raw_vec_and_offset().0)
    }

    /// Mean-squared noise loss `mean_{i,j} (ε̂_ij − ε_ij)²` (accumulated in
    /// `f64`) and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Batch<F>) -> Result<(f64, Vec<F>)> {
        let c = self.config;
        if batch.target.dim() != (batch.len(), c.d) {
            return Err(Error::Shape(format!(
                "target is {:?}, want ({}, {})",
                batch.target.dim(),
                batch.len(),
                c.d
            )));
        }
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let (out, cache) = self.run(batch.x_t.view(), &batch.t, batch.cond.view())?;
        let resid = out - &batch.target;
        let n = (batch.len() * c.d) as f64;
        let loss = resid.iter().map(|r| r.f64() * r.f64()).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let dy = resid.mapv(|r| r * F::of(2.0 / n));

        let mut grad = vec![F::zero(); self.layout.len];
        let put = |grad: &mut Vec<F>, name: &str, values: ArrayView2<F>| {
            let r = self.layout.range(name);
            let n = r.len();
            let mut dst = ArrayViewMut1::from(&mut grad[r]);
            dst.assign(&values.to_shape(n).unwrap());
        };
        let put_vec = |grad: &mut Vec<F>, name: &str, values: Array1<F>| {
            let r = self.layout.range(name);
            grad[r].copy_from_slice(values.as_slice().unwrap());
        };

        put(&mut grad, "w3", cache.a2.t().dot(&dy).view());
        put_vec(&mut grad, "b3", dy.sum_axis(Axis(0)));
        if c.skip_gate {
            let per_row: Array1<F> = (&dy * &batch.x_t).sum_axis(Axis(1));
            let temb = cache.input.slice(s![.., c.d..c.d + c.time_dim]);
            put_vec(&mut grad, "gate_w", temb.t().dot(&per_row));
            put_vec(&mut grad, "gate_b", Array1::from_elem(1, per_row.sum()));
        }

        let da2 = dy.dot(&self.mat("w3").t());
        let dz2 = da2 * cache.z2.mapv(silu_grad);
        put(&mut grad, "w2", cache.a1.t().dot(&dz2).view());
        put_vec(&mut grad, "b2", dz2.sum_axis(Axis(0)));
        let da1 = dz2.dot(&self.mat("w2").t());
        let dz1 = da1 * cache.z1.mapv(silu_grad);
        put(&mut grad, "w1", cache.input.t().dot(&dz1).view());
        put_vec(&mut grad, "b1", dz1.sum_axis(Axis(0)));
        Ok((loss, grad))
    }

    /// Loss only, in `f64`.
    pub fn loss(&self, batch: &Batch<F>) -> Result<f64> {
        let out = self.forward(batch.x_t.view(), &batch.t, batch.cond.view())?;
        let n = (batch.len() * self.config.d) as f64;
        Ok(out
            .iter()
            .zip(batch.target.iter())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            / n)
    }
}

fn silu_grad<F: Scalar>(z: F) -> F {
    let s = sigmoid(z);
    s * (F::one() + z * (F::one() - s))
}

/// Checkpoint metadata recorded beside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub extra: Vec<(String, String)>,
}

pub fn save_checkpoint(params: &DenoiserParams<f32>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let c = params.config;
    let mut store = TensorStore::new(STORE_KIND);
    store.set("d", c.d);
    store.set("cond_dim", c.cond_dim);
    store.set("time_dim", c.time_dim);
    store.set("hidden", c.hidden);
    store.set("skip_gate", c.skip_gate);
    store.set("step", meta.step);
    for (k, v) in &meta.extra {
        store.set(k.clone(), v);
    }
    for (name, shape, off) in &params.layout.entries {
        let n: usize = shape.iter().product();
        store.push(Tensor::new(*name, shape.clone(), params.data[*off..off + n].to_vec()));
    }
    store.save(dir)
}

/// Loads a checkpoint; when `expected_d` is given the stored image dimension
/// must match it.
pub fn load_checkpoint(dir: &Path, expected_d: Option<usize>) -> Result<(DenoiserParams<f32>, CheckpointMeta)> {
    let store = TensorStore::load(dir, STORE_KIND)?;
    let config = DenoiserConfig {
        d: store.require("d")?,
        cond_dim: store.require("cond_dim")?,
        time_dim: store.require("time_dim")?,
        hidden: store.require("hidden")?,
        skip_gate: store.require("skip_gate")?,
    };
    if let Some(d) = expected_d {
        if d != config.d {
            return Err(Error::Shape(format!(
                "checkpoint has d = {}, expected {d}",
                config.d
            )));
        }
    }
    config.validate()?;
    let layout = config.layout();
    if store.tensors.len() != layout.entries.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} tensors, config needs {}",
            store.tensors.len(),
            layout.entries.len()
        )));
    }
    let mut data = Vec::with_capacity(layout.len);
    for ((name, shape, _), t) in layout.entries.iter().zip(&store.tensors) {
        if t.name != *name || t.shape != *shape {
            return Err(Error::Shape(format!(
                "tensor `{}` {:?} does not match `{name}` {:?}",
                t.name, t.shape, shape
            )));
        }
        data.extend_from_slice(&t.data);
    }
    let known = ["d", "cond_dim", "time_dim", "hidden", "skip_gate", "step"];
    let extra = store
        .meta
        .iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .cloned()
        .collect();
    let meta = CheckpointMeta {
        step: store.require("step")?,
        extra,
    };
    Ok((DenoiserParams::from_data(config, data)?, meta))
}


#[cfg(test)]
mod golden {
    use super::*;

    const GOLDEN: [f32; 12] = [
        0.045457333, 0.34557474, 0.74736166, 0.9775107, 1.1162442, 0.8147462, 0.6801736, 0.25726384,
        0.0061386973, -0.14860323, -0.71743625, -0.8164532,
    ];

    #[test]
    fn forward_matches_recorded_output() {
        let c = DenoiserConfig { hidden: 16, ..DenoiserConfig::new(12) };
        let p = DenoiserParams::<f32>::init(c, 42).unwrap();
        let x: Vec<f32> = (0..c.d).map(|i| ((i as f32) * 0.37).sin()).collect();
        let e: Vec<f32> = (0..c.cond_dim).map(|i| 0.1 * i as f32 - 0.2).collect();
        let out = p.forward_one(&x, 500, &e).unwrap();
        for (a, b) in out.iter().zip(GOLDEN) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
