//! Small dense embedding network with an L2-normalized output, exact
//! backpropagation, and SGD with cosine learning-rate decay.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{check_dim, PrismError, Result};
use crate::numerics::{dot, norm, UnitVector, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

/// Dense layers with a ReLU between consecutive layers and L2 normalization
/// of the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

/// Activations saved by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    /// Final output before normalization and its norm.
    raw_norm: f64,
    embedding: Vec<f64>,
}

pub type Gradients = EncoderParams;

impl EncoderParams {
    /// Layer widths `dims[0] → dims[1] → … → dims[last]`, weights uniform in
    /// `±sqrt(6 / fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(PrismError::config("encoder needs at least an input and an output width"));
        }
        if *dims.last().unwrap() < 2 {
            return Err(PrismError::config("embedding dimension must be >= 2"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = (0..fan_in * out).map(|_| rng.random_range(-bound..bound)).collect();
                DenseLayer { in_dim: fan_in, out_dim: out, weights, bias: vec![0.0; out] }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Single square layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        let mut layer = DenseLayer::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        Self { layers: vec![layer] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn zeros_like(&self) -> Gradients {
        Self { layers: self.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect() }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PrismError::domain("encoder has no layers"));
        }
        for w in self.layers.windows(2) {
            check_dim(w[0].out_dim, w[1].in_dim)?;
        }
        for l in &self.layers {
            check_dim(l.in_dim * l.out_dim, l.weights.len())?;
            check_dim(l.out_dim, l.bias.len())?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(UnitVector, ForwardCache)> {
        check_dim(self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(std::mem::take(&mut h));
            h = if i < last { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            pre.push(z);
        }
        let raw_norm = norm(&h);
        if raw_norm <= NORM_EPS || !raw_norm.is_finite() {
            return Err(PrismError::degenerate(format!("encoder output norm {raw_norm}")));
        }
        let embedding: Vec<f64> = h.iter().map(|v| v / raw_norm).collect();
        let unit = UnitVector::new(embedding.clone())?;
        Ok((unit, ForwardCache { inputs, pre, raw_norm, embedding }))
    }

    /// Accumulates into `grads` the parameter gradient of a scalar loss whose
    /// gradient w.r.t. the normalized embedding is `grad_embedding`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_embedding: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        if cache.inputs.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(PrismError::domain("cache does not match encoder layers"));
        }
        check_dim(self.output_dim(), grad_embedding.len())?;
        check_dim(self.output_dim(), cache.embedding.len())?;
        for (layer, input) in self.layers.iter().zip(&cache.inputs) {
            check_dim(layer.in_dim, input.len())?;
        }

        // Through y ↦ y / ‖y‖: (I - ŷŷᵀ) g / ‖y‖.
        let along = dot(&cache.embedding, grad_embedding);
        let mut delta: Vec<f64> = grad_embedding
            .iter()
            .zip(&cache.embedding)
            .map(|(g, e)| (g - along * e) / cache.raw_norm)
            .collect();

        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU of the previous layer.
                for (p, z) in prev.iter_mut().zip(&cache.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64]) -> Result<Gradients> {
        let mut grads = self.zeros_like();
        self.backward_into(cache, grad_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Flat view of every parameter, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "prism-encoder v1")?;
        writeln!(out, "layers {}", self.layers.len())?;
        for l in &self.layers {
            writeln!(out, "dense {} {}", l.in_dim, l.out_dim)?;
            writeln!(out, "{}", join(&l.weights))?;
            writeln!(out, "{}", join(&l.bias))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| PrismError::Parse("truncated checkpoint".into()))?
                .map_err(PrismError::from)
        };
        if next()? != "prism-encoder v1" {
            return Err(PrismError::Parse("unsupported checkpoint header".into()));
        }
        let header = next()?;
        let count: usize = header
            .strip_prefix("layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| PrismError::Parse(format!("bad layer count line '{header}'")))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let dims = next()?;
            let parts: Vec<&str> = dims.split_whitespace().collect();
            let (in_dim, out_dim) = match parts.as_slice() {
                ["dense", a, b] => (
                    a.parse().map_err(|_| PrismError::Parse(format!("bad dims '{dims}'")))?,
                    b.parse().map_err(|_| PrismError::Parse(format!("bad dims '{dims}'")))?,
                ),
                _ => return Err(PrismError::Parse(format!("bad layer line '{dims}'"))),
            };
            let weights = parse_row(&next()?)?;
            let bias = parse_row(&next()?)?;
            layers.push(DenseLayer { in_dim, out_dim, weights, bias });
        }
        let params = Self { layers };
        params.validate().map_err(|e| PrismError::Parse(e.to_string()))?;
        Ok(params)
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| PrismError::Parse(format!("bad number '{t}'"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub total_iters: usize,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(base_lr: f64, total_iters: usize) -> Result<Self> {
        if base_lr.is_nan() || base_lr <= 0.0 || total_iters == 0 {
            return Err(PrismError::config("optimizer needs base_lr > 0 and total_iters >= 1"));
        }
        Ok(Self { base_lr, total_iters, iteration: 0 })
    }

    pub fn advance(&mut self) {
        self.iteration = (self.iteration + 1).min(self.total_iters);
    }
}

/// Cosine decay from `base_lr` at iteration 0 to 0 at `total_iters`.
pub fn lr_at(state: &OptimizerState) -> f64 {
    let frac = state.iteration as f64 / state.total_iters as f64;
    state.base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

/// `p ← p - lr · g`.
pub fn sgd_step(params: &mut EncoderParams, grads: &Gradients, lr: f64) -> Result<()> {
    if params.layers.len() != grads.layers.len() {
        return Err(PrismError::domain("gradient layer count mismatch"));
    }
    for (p, g) in params.layers.iter().zip(&grads.layers) {
        check_dim(p.weights.len(), g.weights.len())?;
        check_dim(p.bias.len(), g.bias.len())?;
    }
    for (p, g) in params.flat_mut().zip(grads.flat()) {
        *p -= lr * g;
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PrismError::config("momentum must be in [0, 1)"));
        }
        Ok(Self { momentum, velocity: None })
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &Gradients, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, lr);
        }
        let g = grads.flat();
        let v = self.velocity.get_or_insert_with(|| vec![0.0; g.len()]);
        check_dim(v.len(), g.len())?;
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi = self.momentum * *vi + gi;
        }
        let mut update = params.zeros_like();
        for (u, vi) in update.flat_mut().zip(v.iter()) {
            *u = *vi;
        }
        sgd_step(params, &update, lr)
    }
}
