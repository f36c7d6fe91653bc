//! Fully connected ReLU classifier with a softmax head and hand-written
//! reverse-mode gradients.
//!
//! The penultimate activation (the input to the last affine layer) is exposed
//! as the sample embedding. With no hidden layers the embedding is the input
//! itself.
//!
//! # Checkpoint layout
//!
//! Little-endian binary:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `NCODMLP\0`                         |
//! | 4 (u32)          | format version, currently 1               |
//! | 4 (u32)          | number of layer dims `k`                  |
//! | 8·k (u64)        | layer dims `[d, h1, …, C]`                |
//! | per layer, f64   | weights row-major (`out × in`), then bias |
//!
//! Values are stored as raw IEEE-754 bits so a save/load round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Mat, Rng};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NCODMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    // Bumped by every parameter update so stale activation caches are caught.
    generation: u64,
}

/// Activations retained by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    dims: Vec<usize>,
    /// Input to each affine layer; `inputs[0]` is the sample.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Input to affine layer `l`; `layer_input(0)` is the sample itself.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.inputs[l]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| Mat::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn same_shape(&self, other: &Gradients) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols())
            && self
                .biases
                .iter()
                .zip(&other.biases)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl MlpModel {
    /// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::BadDims(dims.to_vec()));
        }
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| std * rng.standard_normal())
                .collect();
            weights.push(Mat::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpModel {
            dims: dims.to_vec(),
            weights,
            biases,
            generation: 0,
        })
    }

    /// Build a model from explicit parameters (weights are `out × in`).
    pub fn from_parameters(weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::ShapeMismatch);
        }
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *dims.last().unwrap() || w.rows() != b.len() {
                return Err(Error::ShapeMismatch);
            }
            dims.push(w.rows());
        }
        if dims.contains(&0) {
            return Err(Error::BadDims(dims));
        }
        Ok(MlpModel {
            dims,
            weights,
            biases,
            generation: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn embedding_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn num_parameters(&self) -> usize {
        self.dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Flat parameter vector in the same order as [`Gradients::flatten`].
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrite parameters from a flat vector (see [`MlpModel::parameters`]).
    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::ShapeMismatch);
        }
        let mut rest = flat;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (ws, tail) = rest.split_at(w.as_slice().len());
            w.as_mut_slice().copy_from_slice(ws);
            let (bs, tail) = tail.split_at(b.len());
            b.copy_from_slice(bs);
            rest = tail;
        }
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers - 1);
        let mut a = x.to_vec();
        for l in 0..layers - 1 {
            let z = self.weights[l].affine(&a, &self.biases[l]);
            let next = z.iter().map(|v| v.max(0.0)).collect();
            inputs.push(std::mem::replace(&mut a, next));
            pre_activations.push(z);
        }
        let logits = self.weights[layers - 1].affine(&a, &self.biases[layers - 1]);
        let embedding = a.clone();
        inputs.push(a);
        let probs = softmax(&logits);
        Ok(ForwardOutput {
            embedding,
            logits,
            probs,
            cache: ForwardCache {
                generation: self.generation,
                dims: self.dims.clone(),
                inputs,
                pre_activations,
            },
        })
    }

    /// Class probabilities only.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the logits is `dloss_dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dloss_dlogits: &[f64]) -> Result<Gradients> {
        let deltas = self.backward_deltas(cache, dloss_dlogits)?;
        let mut grads = Gradients::zeros_like(self);
        for (l, delta) in deltas.iter().enumerate() {
            grads.weights[l].add_outer(delta, &cache.inputs[l]);
            grads.biases[l].copy_from_slice(delta);
        }
        Ok(grads)
    }

    /// Error signal `∂loss/∂z` at the output of every affine layer; the
    /// weight gradient of layer `l` is `deltas[l] ⊗ cache.layer_input(l)`.
    pub fn backward_deltas(
        &self,
        cache: &ForwardCache,
        dloss_dlogits: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if cache.generation != self.generation || cache.dims != self.dims {
            return Err(Error::StaleCache);
        }
        if dloss_dlogits.len() != self.num_classes() {
            return Err(Error::DimMismatch {
                expected: self.num_classes(),
                got: dloss_dlogits.len(),
            });
        }
        let layers = self.weights.len();
        let mut deltas = vec![Vec::new(); layers];
        deltas[layers - 1] = dloss_dlogits.to_vec();
        for l in (1..layers).rev() {
            let mut back = self.weights[l].t_mul(&deltas[l]);
            for (d, z) in back.iter_mut().zip(&cache.pre_activations[l - 1]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            deltas[l - 1] = back;
        }
        Ok(deltas)
    }

    /// `θ ← θ − lr·(g + weight_decay·θ)`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::BadHyperparameter {
                name: "lr",
                value: lr,
            });
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::BadHyperparameter {
                name: "weight_decay",
                value: weight_decay,
            });
        }
        let fits = grads.weights.len() == self.weights.len()
            && grads.biases.len() == self.biases.len()
            && self
                .weights
                .iter()
                .zip(&grads.weights)
                .all(|(w, g)| w.rows() == g.rows() && w.cols() == g.cols())
            && self
                .biases
                .iter()
                .zip(&grads.biases)
                .all(|(b, g)| b.len() == g.len());
        if !fits {
            return Err(Error::ShapeMismatch);
        }
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (p, d) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *p -= lr * (d + weight_decay * *p);
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (p, d) in b.iter_mut().zip(g) {
                *p -= lr * (d + weight_decay * *p);
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.parameters() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input).map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let k = read_u32(&mut input).map_err(bad)? as usize;
        if !(2..=64).contains(&k) {
            return Err(Error::Checkpoint(format!("implausible layer count {k}")));
        }
        let mut dims = Vec::with_capacity(k);
        for _ in 0..k {
            dims.push(read_u64(&mut input).map_err(bad)? as usize);
        }
        let mut model =
            MlpModel::new(&dims, &mut Rng::new(0)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut flat = Vec::with_capacity(model.num_parameters());
        for _ in 0..model.num_parameters() {
            flat.push(f64::from_bits(read_u64(&mut input).map_err(bad)?));
        }
        model.set_parameters(&flat)?;
        model.generation = 0;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
