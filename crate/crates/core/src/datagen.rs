//! Synthetic labeled datasets, label-noise synthesis and P×K batch sampling.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{PrismError, Result};
use crate::numerics::{dot, UnitVector};
use crate::rng::{self, derive_seed};
use crate::vmf::{random_unit_vector, vmf_sample, VmfParams};
use crate::ClassId;

pub const DEFAULT_CLUSTER_SIZE: usize = 5;
const KMEANS_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Within-class concentration in input space.
    pub concentration: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PrismError::config("need at least two classes"));
        }
        if self.samples_per_class == 0 {
            return Err(PrismError::config("samples_per_class must be positive"));
        }
        if self.input_dim < 2 {
            return Err(PrismError::config("input_dim must be >= 2"));
        }
        if self.concentration < 0.0 || !self.concentration.is_finite() {
            return Err(PrismError::config("concentration must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub num_classes: usize,
    pub inputs: Vec<UnitVector>,
    pub given_labels: Vec<ClassId>,
    pub true_labels: Vec<ClassId>,
    pub clean_mask: Vec<bool>,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.clean_mask.iter().filter(|&&c| !c).count() as f64 / self.len() as f64
    }

    fn set_given(&mut self, i: usize, label: ClassId) {
        self.given_labels[i] = label;
        self.clean_mask[i] = label == self.true_labels[i];
    }

    /// Indices grouped by true class.
    fn by_true_class(&self) -> BTreeMap<ClassId, Vec<usize>> {
        let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.true_labels.iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    /// `index,true_label,given_label,is_clean` with `is_clean` as 0/1.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,true_label,given_label,is_clean")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{}",
                i,
                self.true_labels[i],
                self.given_labels[i],
                u8::from(self.clean_mask[i])
            )?;
        }
        Ok(())
    }

    /// Inputs as row-major CSV with header `x0,x1,...`; row `i` is sample `i`.
    pub fn write_inputs<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.inputs.first().map_or(0, |v| v.dim());
        let header: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for v in &self.inputs {
            let row: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Training split: class means from the spec seed, samples from a derived stream.
pub fn gen_dataset(spec: &SyntheticSpec) -> Result<NoisyDataset> {
    gen_split(spec, derive_seed(spec.seed, 1))
}

/// A split sharing the class means of `spec` but drawing its samples from
/// `sample_seed`. Used for held-out evaluation data.
pub fn gen_split(spec: &SyntheticSpec, sample_seed: u64) -> Result<NoisyDataset> {
    spec.validate()?;
    let mut mean_rng = rng::stream(spec.seed, 0);
    let means: Vec<UnitVector> =
        (0..spec.num_classes).map(|_| random_unit_vector(spec.input_dim, &mut mean_rng)).collect();
    let mut sample_rng = rng::seeded(sample_seed);
    let n = spec.num_classes * spec.samples_per_class;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (class, mu) in means.into_iter().enumerate() {
        let params = VmfParams::new(mu, spec.concentration)?;
        inputs.extend(vmf_sample(&params, spec.samples_per_class, &mut sample_rng));
        labels.extend(std::iter::repeat_n(class, spec.samples_per_class));
    }
    Ok(NoisyDataset {
        num_classes: spec.num_classes,
        inputs,
        given_labels: labels.clone(),
        true_labels: labels,
        clean_mask: vec![true; n],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    None,
    Symmetric,
    SmallCluster,
}

impl FromStr for NoiseModel {
    type Err = PrismError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "symmetric" => Ok(Self::Symmetric),
            "small_cluster" => Ok(Self::SmallCluster),
            _ => Err(PrismError::config(format!("unknown noise model '{s}'"))),
        }
    }
}

impl NoiseModel {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Symmetric => "symmetric",
            Self::SmallCluster => "small_cluster",
        }
    }
}

/// Outcome of a noise synthesizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseReport {
    pub requested: f64,
    pub achieved: f64,
    /// False when every class was consumed before the requested rate.
    pub reached: bool,
}

fn uniform_other_class<R: Rng + ?Sized>(class: ClassId, num_classes: usize, rng: &mut R) -> ClassId {
    let t = rng.random_range(0..num_classes - 1);
    if t >= class {
        t + 1
    } else {
        t
    }
}

/// For every true class, relabels `round(rate · n_class)` of its samples
/// (halves round up) to a uniformly chosen other class.
pub fn apply_symmetric_noise<R: Rng + ?Sized>(
    ds: &NoisyDataset,
    rate: f64,
    rng: &mut R,
) -> Result<(NoisyDataset, NoiseReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PrismError::domain(format!("noise rate {rate} outside [0, 1)")));
    }
    if ds.num_classes < 2 {
        return Err(PrismError::domain("noise needs at least two classes"));
    }
    let mut out = ds.clone();
    for (class, members) in ds.by_true_class() {
        let count = (rate * members.len() as f64 + 0.5).floor() as usize;
        for pick in index::sample(rng, members.len(), count.min(members.len())) {
            let i = members[pick];
            out.set_given(i, uniform_other_class(class, ds.num_classes, rng));
        }
    }
    let achieved = out.noise_rate();
    Ok((out, NoiseReport { requested: rate, achieved, reached: true }))
}

/// Clustered noise: repeatedly picks an unprocessed true class, splits it
/// into k-means clusters of about `cluster_size` samples and moves each
/// cluster to a random other class, until the noisy fraction reaches `rate`.
/// Each class is processed at most once.
pub fn apply_small_cluster_noise<R: Rng + ?Sized>(
    ds: &NoisyDataset,
    rate: f64,
    cluster_size: usize,
    rng: &mut R,
) -> Result<(NoisyDataset, NoiseReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PrismError::domain(format!("noise rate {rate} outside [0, 1)")));
    }
    if cluster_size == 0 {
        return Err(PrismError::domain("cluster_size must be positive"));
    }
    if ds.num_classes < 2 {
        return Err(PrismError::domain("noise needs at least two classes"));
    }
    let mut out = ds.clone();
    let mut unprocessed: Vec<(ClassId, Vec<usize>)> = ds.by_true_class().into_iter().collect();
    while out.noise_rate() < rate && !unprocessed.is_empty() {
        let (class, members) = unprocessed.swap_remove(rng.random_range(0..unprocessed.len()));
        let k = members.len().div_ceil(cluster_size);
        let points: Vec<&UnitVector> = members.iter().map(|&i| &ds.inputs[i]).collect();
        let assign = kmeans(&points, k, KMEANS_ITERS, rng.random())?;
        let targets: Vec<ClassId> = (0..k).map(|_| uniform_other_class(class, ds.num_classes, rng)).collect();
        for (&i, &a) in members.iter().zip(&assign) {
            out.set_given(i, targets[a]);
        }
    }
    let achieved = out.noise_rate();
    let reached = achieved >= rate;
    if !reached {
        log::warn!("small-cluster noise reached only {achieved:.4} of requested {rate:.4}");
    }
    Ok((out, NoiseReport { requested: rate, achieved, reached }))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from `k` distinct random points. Whenever a cluster
/// ends up empty it takes over the point farthest from its current center,
/// so every returned cluster is non-empty.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(PrismError::domain(format!("k = {k} with {} points", points.len())));
    }
    let dim = points[0].as_ref().len();
    let mut r = rng::seeded(seed);
    let mut centers: Vec<Vec<f64>> =
        index::sample(&mut r, points.len(), k).into_iter().map(|i| points[i].as_ref().to_vec()).collect();
    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..iters.max(1) {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p.as_ref(), center);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[next[i]] > 1)
                    .max_by(|&i, &j| {
                        sq_dist(points[i].as_ref(), &centers[next[i]])
                            .total_cmp(&sq_dist(points[j].as_ref(), &centers[next[j]]))
                    })
                    .expect("k <= n leaves a cluster with two or more points");
                counts[next[far]] -= 1;
                counts[c] = 1;
                next[far] = c;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&next) {
            for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }
        for (center, (sum, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            *center = sum.iter().map(|s| s / n as f64).collect();
        }
        let done = next == assign;
        assign = next;
        if done {
            break;
        }
    }
    Ok(assign)
}

/// Per-class sample index by given label, for repeated P×K sampling.
#[derive(Debug, Clone)]
pub struct PkSampler {
    classes: Vec<(ClassId, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<ClassId>,
}

impl PkSampler {
    pub fn new(given_labels: &[ClassId]) -> Self {
        let mut by: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in given_labels.iter().enumerate() {
            by.entry(c).or_default().push(i);
        }
        Self { classes: by.into_iter().collect() }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `p` distinct classes uniformly, then `k` samples from each: without
    /// replacement when the class has at least `k` samples, with replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
        if p == 0 || k == 0 {
            return Err(PrismError::domain("P and K must be positive"));
        }
        if p > self.classes.len() {
            return Err(PrismError::domain(format!(
                "{p} classes requested, {} non-empty",
                self.classes.len()
            )));
        }
        let mut indices = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for ci in index::sample(rng, self.classes.len(), p) {
            let (class, members) = &self.classes[ci];
            if members.len() >= k {
                indices.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
            } else {
                indices.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
            }
            labels.extend(std::iter::repeat_n(*class, k));
        }
        Ok(PkBatch { indices, labels })
    }
}

pub fn pk_sample<R: Rng + ?Sized>(ds: &NoisyDataset, p: usize, k: usize, rng: &mut R) -> Result<PkBatch> {
    PkSampler::new(&ds.given_labels).sample(p, k, rng)
}

/// Mean input similarity over pairs of noisy samples that share a given label.
pub fn flipped_pair_similarity(ds: &NoisyDataset) -> Option<f64> {
    let mut by: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for i in (0..ds.len()).filter(|&i| !ds.clean_mask[i]) {
        by.entry(ds.given_labels[i]).or_default().push(i);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for members in by.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += dot(&ds.inputs[i], &ds.inputs[j]);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
