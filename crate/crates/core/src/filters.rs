//! Clean-probability estimators and the per-batch filtering protocol.
//!
//! Every estimator maps a (feature, label) query to a probability that the
//! label is correct. A label whose class has no usable statistics yields
//! [`PrismError::AbsentClass`]; [`filter_batch`] resolves that to 1.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{check_dim, PrismError, Result};
use crate::losses::ProxySet;
use crate::membank::MemoryBank;
use crate::numerics::{dot, softmax, softmax_at, UnitVector};
use crate::thresholds::ThresholdPolicy;
use crate::vmf::{fit_from_stats, KappaFormula, VmfParams};
use crate::ClassId;

/// Default number of iterations during which the vMF estimator defers to
/// the center-based average similarity.
pub const DEFAULT_WARMUP_ITERS: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    AvgSimNaive,
    AvgSimCenters,
    ProxySim,
    VmfSim,
    /// Mean similarity to same-label samples of the current batch only.
    BatchPositive,
    /// Mean similarity to same-label bank members only.
    MemoryPositive,
    /// No filtering: every sample is kept.
    None,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Self::AvgSimNaive,
        Self::AvgSimCenters,
        Self::ProxySim,
        Self::VmfSim,
        Self::BatchPositive,
        Self::MemoryPositive,
        Self::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::AvgSimNaive => "avgsim_naive",
            Self::AvgSimCenters => "avgsim_centers",
            Self::ProxySim => "proxysim",
            Self::VmfSim => "vmfsim",
            Self::BatchPositive => "batch_positive",
            Self::MemoryPositive => "memory_positive",
            Self::None => "none",
        }
    }

    /// Whether the estimator reads class statistics from the memory bank.
    pub fn uses_bank(self) -> bool {
        matches!(self, Self::AvgSimNaive | Self::AvgSimCenters | Self::VmfSim | Self::MemoryPositive)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = PrismError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "avgsim" {
            return Ok(Self::AvgSimCenters);
        }
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| PrismError::config(format!("unknown estimator '{s}'")))
    }
}

/// Per-class logits of the average-similarity posterior, computed by visiting
/// every stored feature.
pub fn avg_sim_naive_logits(bank: &MemoryBank, feature: &[f64]) -> Result<Vec<(ClassId, f64)>> {
    check_dim(bank.dim(), feature.len())?;
    let classes: Vec<ClassId> = bank.classes().map(|(c, _)| c).collect();
    let mut acc = vec![(0.0, 0usize); classes.len()];
    let span = classes.last().map_or(0, |&c| c + 1);
    // Compact labels get a direct slot table; sparse ones fall back to search.
    let table: Option<Vec<usize>> = (span <= 4 * classes.len()).then(|| {
        let mut t = vec![usize::MAX; span];
        for (k, &c) in classes.iter().enumerate() {
            t[c] = k;
        }
        t
    });
    for e in bank.entries() {
        let k = match &table {
            Some(t) => t[e.label],
            None => classes.binary_search(&e.label).expect("bank entry has class statistics"),
        };
        acc[k].0 += dot(feature, &e.feature);
        acc[k].1 += 1;
    }
    Ok(classes.into_iter().zip(acc).map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// Same logits from the per-class centers: the mean of dot products equals
/// the dot product with the mean.
pub fn avg_sim_centers_logits(bank: &MemoryBank, feature: &[f64]) -> Result<Vec<(ClassId, f64)>> {
    check_dim(bank.dim(), feature.len())?;
    Ok(centers_logits(&bank.centers(), feature))
}

fn centers_logits(centers: &[(ClassId, Vec<f64>)], feature: &[f64]) -> Vec<(ClassId, f64)> {
    centers.iter().map(|(c, w)| (*c, dot(w, feature))).collect()
}

pub fn proxy_sim_logits(proxies: &ProxySet, feature: &[f64]) -> Result<Vec<(ClassId, f64)>> {
    check_dim(proxies.dim(), feature.len())?;
    let h = proxies.per_class();
    Ok(proxies
        .classes()
        .iter()
        .zip(proxies.all().chunks(h))
        .map(|(&c, ps)| (c, ps.iter().map(|p| dot(p, feature)).fold(f64::NEG_INFINITY, f64::max)))
        .collect())
}

pub fn vmf_sim_logits(params: &BTreeMap<ClassId, FittedClass>, feature: &[f64]) -> Result<Vec<(ClassId, f64)>> {
    params
        .iter()
        .map(|(&c, fc)| {
            check_dim(fc.params.dim(), feature.len())?;
            Ok((c, fc.log_norm + fc.params.kappa * dot(&fc.params.mu, feature)))
        })
        .collect()
}

/// Posterior probability of `label` under softmax of the logits.
pub fn posterior_at(logits: &[(ClassId, f64)], label: ClassId) -> Result<f64> {
    let pos = logits
        .iter()
        .position(|(c, _)| *c == label)
        .ok_or(PrismError::AbsentClass(label))?;
    let xs: Vec<f64> = logits.iter().map(|(_, l)| *l).collect();
    softmax_at(&xs, pos)
}

/// Full posterior over the classes a logit list covers.
pub fn posterior(logits: &[(ClassId, f64)]) -> Result<Vec<(ClassId, f64)>> {
    let xs: Vec<f64> = logits.iter().map(|(_, l)| *l).collect();
    Ok(logits.iter().map(|(c, _)| *c).zip(softmax(&xs)?).collect())
}

pub fn avg_sim_naive(bank: &MemoryBank, feature: &UnitVector, label: ClassId) -> Result<f64> {
    posterior_at(&avg_sim_naive_logits(bank, feature)?, label)
}

pub fn avg_sim_centers(bank: &MemoryBank, feature: &UnitVector, label: ClassId) -> Result<f64> {
    posterior_at(&avg_sim_centers_logits(bank, feature)?, label)
}

pub fn proxy_sim(proxies: &ProxySet, feature: &UnitVector, label: ClassId) -> Result<f64> {
    posterior_at(&proxy_sim_logits(proxies, feature)?, label)
}

pub fn vmf_sim(state: &FilterState, feature: &UnitVector, label: ClassId) -> Result<f64> {
    posterior_at(&vmf_sim_logits(&state.vmf_params, feature)?, label)
}

/// Mean similarity to stored members of `label`, mapped from [-1, 1] to [0, 1].
pub fn memory_positive(bank: &MemoryBank, feature: &UnitVector, label: ClassId) -> Result<f64> {
    check_dim(bank.dim(), feature.dim())?;
    let n = bank.class_count(label);
    if n == 0 {
        return Err(PrismError::AbsentClass(label));
    }
    let sum = bank.class_sum(label)?;
    Ok(similarity_to_prob(dot(sum, feature) / n as f64))
}

/// Mean similarity to the other same-label samples of the batch, mapped to
/// [0, 1]. A sample without in-batch positives gets 1.
pub fn batch_positive(features: &[UnitVector], labels: &[ClassId], index: usize) -> Result<f64> {
    if features.len() != labels.len() || index >= features.len() {
        return Err(PrismError::domain("batch index out of range"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, (f, &l)) in features.iter().zip(labels).enumerate() {
        if j != index && l == labels[index] {
            sum += features[index].dot(f);
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { similarity_to_prob(sum / n as f64) })
}

fn similarity_to_prob(s: f64) -> f64 {
    (0.5 * (1.0 + s)).clamp(0.0, 1.0)
}

/// A fitted class distribution with its cached log-normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedClass {
    pub params: VmfParams,
    pub log_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    pub estimator: Estimator,
    pub warmup_iters: usize,
    pub iteration: usize,
    pub kappa_formula: KappaFormula,
    vmf_params: BTreeMap<ClassId, FittedClass>,
}

impl FilterState {
    pub fn new(estimator: Estimator, warmup_iters: usize) -> Self {
        Self {
            estimator,
            warmup_iters,
            iteration: 0,
            kappa_formula: KappaFormula::Standard,
            vmf_params: BTreeMap::new(),
        }
    }

    pub fn with_kappa_formula(mut self, formula: KappaFormula) -> Self {
        self.kappa_formula = formula;
        self
    }

    /// Estimator in effect at the current iteration.
    pub fn active_estimator(&self) -> Estimator {
        if self.estimator == Estimator::VmfSim && self.iteration < self.warmup_iters {
            Estimator::AvgSimCenters
        } else {
            self.estimator
        }
    }

    pub fn vmf_params(&self) -> &BTreeMap<ClassId, FittedClass> {
        &self.vmf_params
    }

    /// Refit every class with at least two bank members. Classes whose
    /// members cancel out get no parameters.
    pub fn refresh_params(&mut self, bank: &MemoryBank) -> Result<()> {
        self.vmf_params.clear();
        for (class, count) in bank.classes() {
            if count < 2 {
                continue;
            }
            match fit_from_stats(&bank.resultant_stats(class)?, self.kappa_formula) {
                Ok(params) => {
                    let log_norm = params.log_normalizer()?.ln();
                    self.vmf_params.insert(class, FittedClass { params, log_norm });
                }
                Err(PrismError::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// End-of-iteration bookkeeping: refit from the bank when the vMF
    /// estimator is configured, then advance the iteration counter.
    pub fn finish_iteration(&mut self, bank: &MemoryBank) -> Result<()> {
        if self.estimator == Estimator::VmfSim {
            self.refresh_params(bank)?;
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Indices of kept samples, ascending.
    pub kept: Vec<usize>,
    pub probs: Vec<f64>,
    pub threshold: f64,
    pub first_seen: Vec<bool>,
    pub estimator_used: Estimator,
}

impl FilterOutcome {
    pub fn diagnostic(&self, iter: usize) -> FilterDiag {
        let mut is_kept = vec![false; self.probs.len()];
        for &i in &self.kept {
            is_kept[i] = true;
        }
        let mean = |keep: bool| {
            let vals: Vec<f64> =
                self.probs.iter().zip(&is_kept).filter(|(_, &k)| k == keep).map(|(p, _)| *p).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        FilterDiag {
            iter,
            estimator: self.estimator_used,
            threshold: self.threshold,
            kept: self.kept.len(),
            discarded: self.probs.len() - self.kept.len(),
            mean_prob_kept: mean(true),
            mean_prob_discarded: mean(false),
        }
    }
}

/// Computes clean probabilities for a batch, derives the threshold and
/// selects the samples to keep.
///
/// Classes never observed before this batch are marked as seen in `bank`;
/// their samples get probability 1 and are always kept.
pub fn filter_batch(
    features: &[UnitVector],
    labels: &[ClassId],
    state: &FilterState,
    bank: &mut MemoryBank,
    proxies: Option<&ProxySet>,
    policy: &mut ThresholdPolicy,
) -> Result<FilterOutcome> {
    if features.is_empty() {
        return Err(PrismError::domain("empty batch"));
    }
    if features.len() != labels.len() {
        return Err(PrismError::domain("features and labels differ in length"));
    }
    for f in features {
        check_dim(bank.dim(), f.dim())?;
    }
    let first_seen: Vec<bool> = labels.iter().map(|&l| !bank.has_seen(l)).collect();
    bank.mark_seen(labels.iter().copied());

    let estimator = state.active_estimator();
    if estimator == Estimator::None {
        return Ok(FilterOutcome {
            kept: (0..features.len()).collect(),
            probs: vec![1.0; features.len()],
            threshold: 0.0,
            first_seen,
            estimator_used: estimator,
        });
    }
    if estimator == Estimator::ProxySim && proxies.is_none() {
        return Err(PrismError::config("proxysim needs a proxy set"));
    }

    let centers = if estimator == Estimator::AvgSimCenters { bank.centers() } else { Vec::new() };
    let mut probs = Vec::with_capacity(features.len());
    for (i, (f, &label)) in features.iter().zip(labels).enumerate() {
        if first_seen[i] {
            probs.push(1.0);
            continue;
        }
        let p = match estimator {
            Estimator::AvgSimNaive => avg_sim_naive(bank, f, label),
            Estimator::AvgSimCenters => posterior_at(&centers_logits(&centers, f), label),
            Estimator::ProxySim => proxy_sim(proxies.expect("checked above"), f, label),
            Estimator::VmfSim => vmf_sim(state, f, label),
            Estimator::MemoryPositive => memory_positive(bank, f, label),
            Estimator::BatchPositive => batch_positive(features, labels, i),
            Estimator::None => unreachable!(),
        };
        probs.push(match p {
            Ok(p) => p,
            Err(PrismError::AbsentClass(_)) => 1.0,
            Err(e) => return Err(e),
        });
    }

    let threshold = policy.compute_threshold(&probs)?;
    let kept = (0..probs.len()).filter(|&i| first_seen[i] || probs[i] > threshold).collect();
    Ok(FilterOutcome { kept, probs, threshold, first_seen, estimator_used: estimator })
}

/// One row of the per-iteration filter diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDiag {
    pub iter: usize,
    pub estimator: Estimator,
    pub threshold: f64,
    pub kept: usize,
    pub discarded: usize,
    pub mean_prob_kept: Option<f64>,
    pub mean_prob_discarded: Option<f64>,
}

pub const FILTER_DIAG_HEADER: &str = "iter,estimator,threshold,kept,discarded,mean_prob_kept,mean_prob_discarded";

impl FilterDiag {
    pub fn write_row<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            self.iter,
            self.estimator,
            self.threshold,
            self.kept,
            self.discarded,
            opt(self.mean_prob_kept),
            opt(self.mean_prob_discarded)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membank::MemoryEntry;
    use crate::numerics::l2_normalize;
    use crate::rng::{self, Rng};
    use crate::vmf::{random_unit_vector, vmf_log_pdf};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn uv(v: &[f64]) -> UnitVector {
        l2_normalize(v).unwrap()
    }

    fn random_bank(capacity: usize, fill: usize, dim: usize, classes: usize, r: &mut Rng) -> MemoryBank {
        let mut bank = MemoryBank::new(capacity, dim).unwrap();
        bank.enqueue_batch(
            (0..fill).map(|_| MemoryEntry::new(random_unit_vector(dim, r), r.random_range(0..classes))),
        )
        .unwrap();
        bank
    }

    /// Direct definition: double loop over every stored pair.
    fn brute_avg_sim(bank: &MemoryBank, f: &[f64], label: ClassId) -> f64 {
        let classes: Vec<ClassId> = bank.classes().map(|(c, _)| c).collect();
        let t: Vec<f64> = classes
            .iter()
            .map(|&c| {
                let members: Vec<&UnitVector> = bank.members_of(c);
                members.iter().map(|m| f.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
                    / members.len() as f64
            })
            .collect();
        let pos = classes.iter().position(|&c| c == label).unwrap();
        t[pos].exp() / t.iter().map(|x| x.exp()).sum::<f64>()
    }

    #[test]
    fn avg_sim_two_class_closed_form() {
        let u = uv(&[1.0, 0.0, 0.0]);
        let minus = uv(&[-1.0, 0.0, 0.0]);
        let mut bank = MemoryBank::new(4, 3).unwrap();
        bank.enqueue_batch([MemoryEntry::new(u.clone(), 0), MemoryEntry::new(minus, 1)]).unwrap();
        let want = 1f64.exp() / (1f64.exp() + (-1f64).exp());
        assert_relative_eq!(avg_sim_naive(&bank, &u, 0).unwrap(), want, epsilon = 1e-12);
        assert_relative_eq!(avg_sim_centers(&bank, &u, 0).unwrap(), want, epsilon = 1e-12);
        assert_relative_eq!(want, 0.8808, epsilon = 1e-4);
    }

    #[test]
    fn avg_sim_identical_classes_is_uniform() {
        let u = uv(&[0.3, 0.4, 0.5]);
        let mut bank = MemoryBank::new(8, 3).unwrap();
        bank.enqueue_batch((0..4).map(|c| MemoryEntry::new(u.clone(), c))).unwrap();
        let q = uv(&[1.0, -1.0, 0.2]);
        assert_relative_eq!(avg_sim_naive(&bank, &q, 2).unwrap(), 0.25, epsilon = 1e-12);
        assert_relative_eq!(avg_sim_centers(&bank, &q, 2).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn avg_sim_single_class_and_absent() {
        let mut bank = MemoryBank::new(8, 2).unwrap();
        bank.enqueue_batch([MemoryEntry::new(uv(&[1.0, 1.0]), 7)]).unwrap();
        let q = uv(&[1.0, -3.0]);
        assert_eq!(avg_sim_centers(&bank, &q, 7).unwrap(), 1.0);
        assert!(matches!(avg_sim_naive(&bank, &q, 3), Err(PrismError::AbsentClass(3))));
        assert!(matches!(avg_sim_centers(&bank, &q, 3), Err(PrismError::AbsentClass(3))));
    }

    #[test]
    fn avg_sim_matches_brute_force_and_centers() {
        let mut r = rng::seeded(11);
        for trial in 0..20 {
            let classes = 2 + trial % 30;
            let bank = random_bank(512, 300 + 7 * trial, 8, classes, &mut r);
            for _ in 0..10 {
                let q = random_unit_vector(8, &mut r);
                let label = bank.classes().nth(r.random_range(0..bank.classes().count())).unwrap().0;
                let naive = avg_sim_naive(&bank, &q, label).unwrap();
                assert_relative_eq!(naive, brute_avg_sim(&bank, &q, label), epsilon = 1e-9);
                assert!((avg_sim_centers(&bank, &q, label).unwrap() - naive).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn proxy_sim_examples() {
        // Symmetric two-class setup with one proxy each.
        let a = uv(&[1.0, 0.2]);
        let b = uv(&[0.2, 1.0]);
        let s = a.dot(&b);
        let proxies = ProxySet::from_proxies(&[0, 1], 1, vec![a.to_vec(), b.to_vec()]).unwrap();
        let want = 1f64.exp() / (1f64.exp() + s.exp());
        assert_relative_eq!(proxy_sim(&proxies, &a, 0).unwrap(), want, epsilon = 1e-12);

        let same = ProxySet::from_proxies(&[0, 1, 2], 1, vec![a.to_vec(); 3]).unwrap();
        assert_relative_eq!(proxy_sim(&same, &b, 1).unwrap(), 1.0 / 3.0, epsilon = 1e-12);

        // Three proxies per class, one equal to the query.
        let q = uv(&[0.6, -0.8]);
        let ps = vec![vec![1.0, 0.0], q.to_vec(), vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0], vec![0.0, 1.0]];
        let proxies = ProxySet::from_proxies(&[0, 1], 3, ps).unwrap();
        let logits = proxy_sim_logits(&proxies, &q).unwrap();
        assert_relative_eq!(logits[0].1, 1.0, epsilon = 1e-12);
        assert!(matches!(proxy_sim(&proxies, &q, 9), Err(PrismError::AbsentClass(9))));
    }

    fn state_with(params: Vec<(ClassId, VmfParams)>) -> FilterState {
        let mut s = FilterState::new(Estimator::VmfSim, 0);
        for (c, p) in params {
            let log_norm = p.log_normalizer().unwrap().ln();
            s.vmf_params.insert(c, FittedClass { params: p, log_norm });
        }
        s
    }

    #[test]
    fn vmf_sim_examples() {
        let mu = uv(&[1.0, 0.0, 0.0]);
        let same = state_with((0..4).map(|c| (c, VmfParams::new(mu.clone(), 5.0).unwrap())).collect());
        assert_relative_eq!(vmf_sim(&same, &uv(&[0.1, 0.7, 0.2]), 1).unwrap(), 0.25, epsilon = 1e-12);

        let mu2 = uv(&[0.0, 1.0, 0.0]);
        let kappa = 3.0;
        let st = state_with(vec![
            (0, VmfParams::new(mu.clone(), kappa).unwrap()),
            (1, VmfParams::new(mu2.clone(), kappa).unwrap()),
        ]);
        let want = softmax(&[kappa, 0.0]).unwrap()[0];
        assert_relative_eq!(vmf_sim(&st, &mu, 0).unwrap(), want, epsilon = 1e-12);
        assert!(matches!(vmf_sim(&st, &mu, 5), Err(PrismError::AbsentClass(5))));
    }

    #[test]
    fn vmf_sim_keeps_normalizers() {
        // Query equidistant from both means; only the concentrations differ.
        let m1 = uv(&[1.0, 0.0, 0.0, 0.0]);
        let m2 = uv(&[0.0, 1.0, 0.0, 0.0]);
        let q = uv(&[1.0, 1.0, 0.5, 0.0]);
        let p1 = VmfParams::new(m1, 40.0).unwrap();
        let p2 = VmfParams::new(m2, 2.0).unwrap();
        let st = state_with(vec![(0, p1.clone()), (1, p2.clone())]);
        let (l1, l2) = (vmf_log_pdf(&p1, &q).unwrap(), vmf_log_pdf(&p2, &q).unwrap());
        let direct = l1.exp() / (l1.exp() + l2.exp());
        let got = vmf_sim(&st, &q, 0).unwrap();
        assert_relative_eq!(got, direct, epsilon = 1e-12);
        assert!((got - vmf_sim(&st, &q, 1).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn ablation_estimators() {
        let a = uv(&[1.0, 0.0]);
        let b = uv(&[0.0, 1.0]);
        let feats = vec![a.clone(), a.clone(), b.clone()];
        let labels = [0, 0, 0];
        // Mean of similarities 1 and 0 → 0.5 → mapped to 0.75.
        assert_relative_eq!(batch_positive(&feats, &labels, 0).unwrap(), 0.75, epsilon = 1e-15);
        assert_eq!(batch_positive(&feats, &[0, 1, 2], 0).unwrap(), 1.0);

        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.enqueue_batch([MemoryEntry::new(b.clone(), 3), MemoryEntry::new(b, 3)]).unwrap();
        assert_relative_eq!(memory_positive(&bank, &a, 3).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(memory_positive(&bank, &a, 4), Err(PrismError::AbsentClass(4))));
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert_eq!("avgsim".parse::<Estimator>().unwrap(), Estimator::AvgSimCenters);
        assert!("bogus".parse::<Estimator>().is_err());
    }

    #[test]
    fn first_batch_keeps_everything() {
        let mut r = rng::seeded(3);
        let feats: Vec<UnitVector> = (0..6).map(|_| random_unit_vector(4, &mut r)).collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let mut bank = MemoryBank::new(16, 4).unwrap();
        let state = FilterState::new(Estimator::AvgSimCenters, 0);
        let mut policy = ThresholdPolicy::trm(50.0).unwrap();
        let out = filter_batch(&feats, &labels, &state, &mut bank, None, &mut policy).unwrap();
        assert_eq!(out.kept, (0..6).collect::<Vec<_>>());
        assert!(out.probs.iter().all(|&p| p == 1.0));
        assert!(out.first_seen.iter().all(|&f| f));
        assert!(bank.has_seen(2));
        // Seen but absent from the bank → probability 1, not first-seen.
        let out = filter_batch(&feats, &labels, &state, &mut bank, None, &mut policy).unwrap();
        assert!(out.first_seen.iter().all(|&f| !f));
        assert!(out.probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn planted_noise_is_discarded_by_trm() {
        let d = 4;
        let mut bank = MemoryBank::new(64, d).unwrap();
        let axes: Vec<UnitVector> = (0..4).map(|k| {
            let mut v = vec![0.0; d];
            v[k] = 1.0;
            UnitVector::new(v).unwrap()
        }).collect();
        bank.mark_seen(0..4);
        bank.enqueue_batch((0..4).flat_map(|k| (0..5).map(move |_| k)).map(|k| MemoryEntry::new(axes[k].clone(), k)))
            .unwrap();
        // Eight samples: even ones sit on their labeled axis, odd ones on another axis.
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            let label = i % 4;
            let axis = if i % 2 == 0 { label } else { (label + 1) % 4 };
            feats.push(axes[axis].clone());
            labels.push(label);
        }
        let state = FilterState::new(Estimator::AvgSimCenters, 0);
        let mut policy = ThresholdPolicy::trm(50.0).unwrap();
        let out = filter_batch(&feats, &labels, &state, &mut bank, None, &mut policy).unwrap();
        assert_eq!(out.kept, vec![0, 2, 4, 6]);
    }

    #[test]
    fn warmup_matches_centers_bitwise() {
        let mut r = rng::seeded(21);
        let mut bank = random_bank(256, 256, 6, 5, &mut r);
        bank.mark_seen(0..5);
        let feats: Vec<UnitVector> = (0..16).map(|_| random_unit_vector(6, &mut r)).collect();
        let labels: Vec<ClassId> = (0..16).map(|_| r.random_range(0..5)).collect();
        let mut vmf_state = FilterState::new(Estimator::VmfSim, 10);
        vmf_state.refresh_params(&bank).unwrap();
        let avg_state = FilterState::new(Estimator::AvgSimCenters, 10);
        for iter in 0..10 {
            vmf_state.iteration = iter;
            let mut p1 = ThresholdPolicy::strm(30.0, 3).unwrap();
            let mut p2 = p1.clone();
            let a = filter_batch(&feats, &labels, &vmf_state, &mut bank.clone(), None, &mut p1).unwrap();
            let b = filter_batch(&feats, &labels, &avg_state, &mut bank.clone(), None, &mut p2).unwrap();
            assert_eq!(a, b);
        }
        vmf_state.iteration = 10;
        assert_eq!(vmf_state.active_estimator(), Estimator::VmfSim);
        let mut p = ThresholdPolicy::trm(30.0).unwrap();
        let c = filter_batch(&feats, &labels, &vmf_state, &mut bank.clone(), None, &mut p).unwrap();
        assert_eq!(c.estimator_used, Estimator::VmfSim);
    }

    #[test]
    fn none_estimator_keeps_all() {
        let feats = vec![uv(&[1.0, 0.0]), uv(&[0.0, 1.0])];
        let mut bank = MemoryBank::new(4, 2).unwrap();
        let state = FilterState::new(Estimator::None, 0);
        let mut policy = ThresholdPolicy::fixed(2.0).unwrap();
        let out = filter_batch(&feats, &[0, 1], &state, &mut bank, None, &mut policy).unwrap();
        assert_eq!(out.kept, vec![0, 1]);
        assert_eq!(out.threshold, 0.0);
    }

    #[test]
    fn proxysim_without_proxies_is_config_error() {
        let feats = vec![uv(&[1.0, 0.0])];
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.mark_seen([0]);
        let state = FilterState::new(Estimator::ProxySim, 0);
        let mut policy = ThresholdPolicy::trm(50.0).unwrap();
        let err = filter_batch(&feats, &[0], &state, &mut bank, None, &mut policy);
        assert!(matches!(err, Err(PrismError::Config(_))));
    }

    #[test]
    fn refresh_skips_small_classes() {
        let mut bank = MemoryBank::new(8, 2).unwrap();
        let a = uv(&[1.0, 0.1]);
        bank.enqueue_batch([
            MemoryEntry::new(a.clone(), 0),
            MemoryEntry::new(uv(&[1.0, -0.1]), 0),
            MemoryEntry::new(a, 1),
        ])
        .unwrap();
        let mut st = FilterState::new(Estimator::VmfSim, 0);
        st.finish_iteration(&bank).unwrap();
        assert_eq!(st.vmf_params().keys().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn diagnostic_row() {
        let out = FilterOutcome {
            kept: vec![1],
            probs: vec![0.2, 0.8],
            threshold: 0.5,
            first_seen: vec![false, false],
            estimator_used: Estimator::VmfSim,
        };
        let mut buf = Vec::new();
        out.diagnostic(7).write_row(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "7,vmfsim,0.5,1,1,0.8,0.2\n");
        assert_eq!(FILTER_DIAG_HEADER.split(',').count(), 7);
    }

    proptest! {
        #[test]
        fn posteriors_sum_to_one(seed in 0u64..500, classes in 2usize..12) {
            let mut r = rng::seeded(seed);
            let bank = random_bank(128, 100, 5, classes, &mut r);
            let q = random_unit_vector(5, &mut r);
            let mut st = FilterState::new(Estimator::VmfSim, 0);
            st.refresh_params(&bank).unwrap();
            let proxies = ProxySet::random(&(0..classes).collect::<Vec<_>>(), 2, 5, &mut r).unwrap();
            for logits in [
                avg_sim_naive_logits(&bank, &q).unwrap(),
                avg_sim_centers_logits(&bank, &q).unwrap(),
                proxy_sim_logits(&proxies, &q).unwrap(),
                vmf_sim_logits(st.vmf_params(), &q).unwrap(),
            ] {
                let total: f64 = posterior(&logits).unwrap().iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn more_own_similarity_never_lowers_prob(seed in 0u64..500) {
            // Pull one member of the query's class onto the query itself.
            let mut r = rng::seeded(seed);
            let dim = 4;
            let q = random_unit_vector(dim, &mut r);
            let mut entries: Vec<MemoryEntry> =
                (0..30).map(|i| MemoryEntry::new(random_unit_vector(dim, &mut r), i % 3)).collect();
            let mut before = MemoryBank::new(64, dim).unwrap();
            before.enqueue_batch(entries.clone()).unwrap();
            entries[0] = MemoryEntry::new(q.clone(), 0);
            let mut after = MemoryBank::new(64, dim).unwrap();
            after.enqueue_batch(entries).unwrap();
            let p0 = avg_sim_centers(&before, &q, 0).unwrap();
            let p1 = avg_sim_centers(&after, &q, 0).unwrap();
            prop_assert!(p1 >= p0 - 1e-12);
        }

        #[test]
        fn first_seen_always_kept(seed in 0u64..300, rate in 0.0..100.0f64) {
            let mut r = rng::seeded(seed);
            let mut bank = random_bank(64, 64, 4, 3, &mut r);
            bank.mark_seen(0..3);
            let feats: Vec<UnitVector> = (0..12).map(|_| random_unit_vector(4, &mut r)).collect();
            let labels: Vec<ClassId> = (0..12).map(|i| if i < 4 { 10 + i % 2 } else { i % 3 }).collect();
            let state = FilterState::new(Estimator::AvgSimNaive, 0);
            let mut policy = ThresholdPolicy::trm(rate).unwrap();
            let out = filter_batch(&feats, &labels, &state, &mut bank, None, &mut policy).unwrap();
            for i in 0..4 {
                prop_assert!(out.kept.contains(&i));
            }
        }
    }
}
