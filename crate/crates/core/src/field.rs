//! Conditional velocity fields.
//!
//! The trainable field is a small fully connected network over the
//! concatenated input `[z, t, condition]`. Parameters expose a flat view for
//! checkpointing and finite-difference checks; backprop is hand-rolled so the
//! gradient path stays inspectable.

use crate::rng::stream;
use crate::{CoreError, Result};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Evaluation interface shared by the trained field and closed-form oracles.
pub trait VelocityModel {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// û(z, t, c). Deterministic; dimensions are the caller's contract.
    fn velocity(&self, z: ArrayView1<f64>, t: f64, cond: ArrayView1<f64>) -> Array1<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

/// Layer widths and conditioning arity of an [`MlpVelocityField`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArchitecture {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl FieldArchitecture {
    pub fn new(latent_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            latent_dim,
            cond_dim,
            hidden,
            activation: Activation::Tanh,
        }
    }

    /// Input is `[z, t, cond]`.
    pub fn input_dim(&self) -> usize {
        self.latent_dim + 1 + self.cond_dim
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.latent_dim);
        sizes
    }
}

/// Fully connected velocity field with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocityField {
    pub arch: FieldArchitecture,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Per-layer activations cached by a forward pass (input first, output last;
/// hidden entries are post-tanh).
pub struct ForwardCache {
    acts: Vec<Array1<f64>>,
}

/// Batched variant of [`ForwardCache`]; rows are samples.
pub struct BatchCache {
    acts: Vec<Array2<f64>>,
}

/// Gradient accumulator shaped like the field's parameters.
#[derive(Debug, Clone)]
pub struct FieldGradient {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl FieldGradient {
    pub fn zeros_like(field: &MlpVelocityField) -> Self {
        Self {
            weights: field.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: field.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>()).sum();
        let b: f64 = self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum();
        w + b
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Flat layout matching [`MlpVelocityField::flat_parameters`].
    pub fn flat(&self) -> Array1<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        Array1::from_vec(out)
    }
}

/// On-disk container: architecture header plus the flat parameter array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldCheckpoint {
    pub format_version: u32,
    pub architecture: FieldArchitecture,
    pub parameters: Vec<f64>,
}

impl MlpVelocityField {
    /// Deterministic initialization: weights N(0, (0.5/√fan_in)²), zero biases.
    pub fn new(arch: FieldArchitecture, seed: u64) -> Self {
        let sizes = arch.layer_sizes();
        let mut rng = stream(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 0.5 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * scale
            });
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Self {
            arch,
            weights,
            biases,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn assemble_input(&self, z: ArrayView1<f64>, t: f64, cond: ArrayView1<f64>) -> Array1<f64> {
        debug_assert_eq!(z.len(), self.arch.latent_dim);
        debug_assert_eq!(cond.len(), self.arch.cond_dim);
        let mut x = Array1::zeros(self.arch.input_dim());
        x.slice_mut(ndarray::s![..z.len()]).assign(&z);
        x[z.len()] = t;
        x.slice_mut(ndarray::s![z.len() + 1..]).assign(&cond);
        x
    }

    /// Forward pass retaining activations for [`Self::backward_into`].
    pub fn forward_cached(
        &self,
        z: ArrayView1<f64>,
        t: f64,
        cond: ArrayView1<f64>,
    ) -> (Array1<f64>, ForwardCache) {
        let mut acts = vec![self.assemble_input(z, t, cond)];
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = w.dot(acts.last().expect("nonempty")) + b;
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        (acts.last().expect("nonempty").clone(), ForwardCache { acts })
    }

    /// Accumulate d(upstream·output)/dθ into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &Array1<f64>,
        grad: &mut FieldGradient,
    ) {
        let mut g = upstream.clone();
        for i in (0..self.weights.len()).rev() {
            let a_in = &cache.acts[i];
            for (mut row, &gi) in grad.weights[i].rows_mut().into_iter().zip(g.iter()) {
                row.scaled_add(gi, a_in);
            }
            grad.biases[i] += &g;
            if i > 0 {
                g = self.weights[i].t().dot(&g);
                // tanh'(x) = 1 - tanh(x)^2 on the stored post-activation
                g.zip_mut_with(&cache.acts[i], |gi, &ai| *gi *= 1.0 - ai * ai);
            }
        }
    }

    /// Batched forward over rows of `x` (each row `[z, t, cond]`).
    pub fn forward_batch(&self, x: &Array2<f64>) -> (Array2<f64>, BatchCache) {
        debug_assert_eq!(x.ncols(), self.arch.input_dim());
        let mut acts = vec![x.clone()];
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = acts.last().expect("nonempty").dot(&w.t());
            h += &b.view().insert_axis(Axis(0));
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        (acts.last().expect("nonempty").clone(), BatchCache { acts })
    }

    /// Batched companion of [`Self::backward_into`]; upstream rows align with
    /// the forward batch rows.
    pub fn backward_batch_into(
        &self,
        cache: &BatchCache,
        upstream: &Array2<f64>,
        grad: &mut FieldGradient,
    ) {
        let mut g = upstream.clone();
        for i in (0..self.weights.len()).rev() {
            let a_in = &cache.acts[i];
            grad.weights[i] += &g.t().dot(a_in);
            grad.biases[i] += &g.sum_axis(Axis(0));
            if i > 0 {
                g = g.dot(&self.weights[i]);
                g.zip_mut_with(&cache.acts[i], |gi, &ai| *gi *= 1.0 - ai * ai);
            }
        }
    }

    /// θ ← θ + scale · grad.
    pub fn apply_gradient(&mut self, grad: &FieldGradient, scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            w.scaled_add(scale, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grad.biases) {
            b.scaled_add(scale, g);
        }
    }

    /// Flat parameter vector: layers in order, weights row-major then bias.
    pub fn flat_parameters(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        Array1::from_vec(out)
    }

    pub fn set_flat_parameters(&mut self, flat: ArrayView1<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for x in w.iter_mut() {
                *x = flat[off];
                off += 1;
            }
            for x in b.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> FieldCheckpoint {
        FieldCheckpoint {
            format_version: 1,
            architecture: self.arch.clone(),
            parameters: self.flat_parameters().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &FieldCheckpoint) -> Result<Self> {
        if ckpt.format_version != 1 {
            return Err(CoreError::InvalidConfig(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut field = Self::new(ckpt.architecture.clone(), 0);
        field.set_flat_parameters(Array1::from_vec(ckpt.parameters.clone()).view())?;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: FieldCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(&ckpt)
    }
}

impl VelocityModel for MlpVelocityField {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn velocity(&self, z: ArrayView1<f64>, t: f64, cond: ArrayView1<f64>) -> Array1<f64> {
        self.forward_cached(z, t, cond).0
    }
}
