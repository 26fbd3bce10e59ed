//! Training losses with analytic gradients.
//!
//! Features passed to these functions are expected to be L2-normalized
//! embeddings; similarity is their dot product, and gradients are taken with
//! respect to the normalized vectors. The encoder's backward pass carries
//! them through the normalization.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{check_dim, PrismError, Result};
use crate::membank::MemoryBank;
use crate::numerics::{dot, l2_normalize, log_sum_exp};
use crate::vmf::random_unit_vector;
use crate::ClassId;

/// Hinge margin `λ ∈ [0, 1]` of the contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveMargin(f64);

impl ContrastiveMargin {
    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Self(lambda))
        } else {
            Err(PrismError::config(format!("contrastive margin {lambda} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ContrastiveMargin {
    fn default() -> Self {
        Self(0.5)
    }
}

/// How pair terms of the contrastive losses are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairReduction {
    /// Plain sum over pairs.
    #[default]
    Sum,
    /// Positive and negative sums each divided by their own pair count.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_features: Vec<Vec<f64>>,
    /// Gradients w.r.t. each proxy, in [`ProxySet`] storage order.
    pub grad_proxies: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default)]
struct PairTerms {
    pos_sum: f64,
    neg_sum: f64,
    pos_count: usize,
    neg_count: usize,
}

impl PairTerms {
    fn scales(&self, reduction: PairReduction) -> (f64, f64) {
        match reduction {
            PairReduction::Sum => (1.0, 1.0),
            PairReduction::Mean => (
                if self.pos_count > 0 { 1.0 / self.pos_count as f64 } else { 0.0 },
                if self.neg_count > 0 { 1.0 / self.neg_count as f64 } else { 0.0 },
            ),
        }
    }

    fn value(&self, reduction: PairReduction) -> f64 {
        let (ps, ns) = self.scales(reduction);
        ns * self.neg_sum - ps * self.pos_sum
    }
}

fn check_batch<F: AsRef<[f64]>>(features: &[F], labels: &[ClassId]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(PrismError::domain("features and labels differ in length"));
    }
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    for f in features {
        check_dim(dim, f.as_ref().len())?;
    }
    Ok(dim)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Pair-based contrastive loss over unordered pairs of the batch:
/// hinge `[s - λ]₊` on negative pairs minus `s` on positive pairs.
pub fn contrastive_batch_loss<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[ClassId],
    margin: ContrastiveMargin,
    reduction: PairReduction,
) -> Result<LossOutput> {
    let dim = check_batch(features, labels)?;
    if features.len() < 2 {
        return Err(PrismError::InsufficientData { needed: 2, got: features.len() });
    }
    let n = features.len();
    let lambda = margin.value();
    let mut terms = PairTerms::default();
    // Per pair: (i, j, is_positive, active)
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = dot(features[i].as_ref(), features[j].as_ref());
            if labels[i] == labels[j] {
                terms.pos_sum += s;
                terms.pos_count += 1;
                pairs.push((i, j, true));
            } else {
                terms.neg_count += 1;
                if s > lambda {
                    terms.neg_sum += s - lambda;
                    pairs.push((i, j, false));
                }
            }
        }
    }
    let (ps, ns) = terms.scales(reduction);
    let mut grads = vec![vec![0.0; dim]; n];
    for (i, j, positive) in pairs {
        let coeff = if positive { -ps } else { ns };
        let (fi, fj) = (features[i].as_ref(), features[j].as_ref());
        axpy(&mut grads[i], coeff, fj);
        axpy(&mut grads[j], coeff, fi);
    }
    Ok(LossOutput { value: terms.value(reduction), grad_features: grads, grad_proxies: None })
}

/// Batch contrastive loss plus the same pair terms between each batch sample
/// and every stored bank feature. Bank features are constants.
pub fn memory_contrastive_loss<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[ClassId],
    bank: &MemoryBank,
    margin: ContrastiveMargin,
    reduction: PairReduction,
) -> Result<LossOutput> {
    let mut out = contrastive_batch_loss(features, labels, margin, reduction)?;
    if bank.is_empty() {
        return Ok(out);
    }
    let dim = features[0].as_ref().len();
    check_dim(bank.dim(), dim)?;
    let lambda = margin.value();

    let mut terms = PairTerms::default();
    // Per batch sample: Σ positive v_j, Σ active-negative v_j.
    let mut pos_acc = vec![vec![0.0; dim]; features.len()];
    let mut neg_acc = vec![vec![0.0; dim]; features.len()];
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        for e in bank.entries() {
            let s = dot(f, &e.feature);
            if e.label == labels[i] {
                terms.pos_sum += s;
                terms.pos_count += 1;
                axpy(&mut pos_acc[i], 1.0, &e.feature);
            } else {
                terms.neg_count += 1;
                if s > lambda {
                    terms.neg_sum += s - lambda;
                    axpy(&mut neg_acc[i], 1.0, &e.feature);
                }
            }
        }
    }
    let (ps, ns) = terms.scales(reduction);
    for ((g, p), q) in out.grad_features.iter_mut().zip(&pos_acc).zip(&neg_acc) {
        axpy(g, -ps, p);
        axpy(g, ns, q);
    }
    out.value += terms.value(reduction);
    Ok(out)
}

/// `H` learnable proxies per class for the SoftTriple loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    classes: Vec<ClassId>,
    index: BTreeMap<ClassId, usize>,
    per_class: usize,
    dim: usize,
    proxies: Vec<Vec<f64>>,
    /// Temperature `γ` of the within-class proxy softmax.
    pub scale_gamma: f64,
    /// Scale `λ` of the class softmax.
    pub scale_lambda: f64,
    /// Margin `δ` subtracted from the true-class similarity.
    pub margin_delta: f64,
}

impl ProxySet {
    /// Random unit proxies. Defaults: `γ = 10`, `λ = 20`, `δ = 0.01`.
    pub fn random<R: Rng + ?Sized>(
        classes: &[ClassId],
        per_class: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let count = classes.len() * per_class;
        let proxies = (0..count).map(|_| random_unit_vector(dim, rng).into_inner()).collect();
        Self::from_proxies(classes, per_class, proxies)
    }

    /// Proxies for `classes[c]` are `proxies[c * per_class .. (c + 1) * per_class]`.
    pub fn from_proxies(classes: &[ClassId], per_class: usize, proxies: Vec<Vec<f64>>) -> Result<Self> {
        if per_class == 0 {
            return Err(PrismError::domain("need at least one proxy per class"));
        }
        if classes.is_empty() {
            return Err(PrismError::domain("proxy set needs at least one class"));
        }
        if proxies.len() != classes.len() * per_class {
            return Err(PrismError::domain("proxy count does not match classes × H"));
        }
        let dim = proxies[0].len();
        for p in &proxies {
            check_dim(dim, p.len())?;
        }
        let index: BTreeMap<ClassId, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if index.len() != classes.len() {
            return Err(PrismError::domain("duplicate class in proxy set"));
        }
        Ok(Self {
            classes: classes.to_vec(),
            index,
            per_class,
            dim,
            proxies,
            scale_gamma: 10.0,
            scale_lambda: 20.0,
            margin_delta: 0.01,
        })
    }

    pub fn with_scales(mut self, gamma: f64, lambda: f64, delta: f64) -> Result<Self> {
        if !(gamma > 0.0 && lambda > 0.0 && delta >= 0.0) {
            return Err(PrismError::config("SoftTriple needs γ > 0, λ > 0, δ >= 0"));
        }
        self.scale_gamma = gamma;
        self.scale_lambda = lambda;
        self.margin_delta = delta;
        Ok(self)
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.proxies
    }

    pub fn all_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.proxies
    }

    pub fn class_position(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    pub fn proxies_of(&self, class: ClassId) -> Result<&[Vec<f64>]> {
        let c = self
            .class_position(class)
            .ok_or_else(|| PrismError::domain(format!("class {class} has no proxies")))?;
        Ok(&self.proxies[c * self.per_class..(c + 1) * self.per_class])
    }

    /// Gradient step followed by renormalization of every proxy.
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.proxies.len() {
            return Err(PrismError::domain("proxy gradient count mismatch"));
        }
        for (p, g) in self.proxies.iter_mut().zip(grads) {
            check_dim(p.len(), g.len())?;
            axpy(p, -lr, g);
            if let Ok(u) = l2_normalize(p) {
                *p = u.into_inner();
            }
        }
        Ok(())
    }

    /// Relaxed class similarity `S'` of `f` to every class, in class order,
    /// with the within-class proxy weights.
    fn relaxed_similarities(&self, f: &[f64]) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
        let h = self.per_class;
        (0..self.classes.len())
            .map(|c| {
                let sims: Vec<f64> =
                    self.proxies[c * h..(c + 1) * h].iter().map(|p| dot(f, p)).collect();
                let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = sims.iter().map(|s| (self.scale_gamma * (s - max)).exp()).collect();
                let z: f64 = w.iter().sum();
                let q: Vec<f64> = w.into_iter().map(|x| x / z).collect();
                let s_relaxed = q.iter().zip(&sims).map(|(a, b)| a * b).sum();
                (s_relaxed, q, sims)
            })
            .collect()
    }
}

/// SoftTriple loss averaged over the batch, with gradients w.r.t. features
/// and proxies. The denominator sums over every class other than the label.
pub fn soft_triple_loss<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[ClassId],
    proxies: &ProxySet,
) -> Result<LossOutput> {
    let dim = check_batch(features, labels)?;
    if features.is_empty() {
        return Err(PrismError::InsufficientData { needed: 1, got: 0 });
    }
    check_dim(proxies.dim(), dim)?;
    let n = features.len() as f64;
    let h = proxies.per_class();
    let (gamma, lambda, delta) = (proxies.scale_gamma, proxies.scale_lambda, proxies.margin_delta);

    let mut value = 0.0;
    let mut grad_f = vec![vec![0.0; dim]; features.len()];
    let mut grad_p = vec![vec![0.0; dim]; proxies.all().len()];
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        let y = proxies
            .class_position(labels[i])
            .ok_or_else(|| PrismError::domain(format!("class {} has no proxies", labels[i])))?;
        let rel = proxies.relaxed_similarities(f);
        let logits: Vec<f64> = rel
            .iter()
            .enumerate()
            .map(|(c, (s, _, _))| lambda * (s - if c == y { delta } else { 0.0 }))
            .collect();
        let lse = log_sum_exp(&logits)?;
        value += (lse - logits[y]) / n;

        for (c, (s_relaxed, q, sims)) in rel.iter().enumerate() {
            let pi = (logits[c] - lse).exp();
            let dz = (pi - if c == y { 1.0 } else { 0.0 }) / n;
            for k in 0..h {
                let g = dz * lambda * q[k] * (1.0 + gamma * (sims[k] - s_relaxed));
                let p = &proxies.all()[c * h + k];
                axpy(&mut grad_f[i], g, p);
                axpy(&mut grad_p[c * h + k], g, f);
            }
        }
    }
    Ok(LossOutput { value, grad_features: grad_f, grad_proxies: Some(grad_p) })
}
