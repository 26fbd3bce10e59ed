//! Retrieval metrics and noise-filter diagnostics.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{PrismError, Result};
use crate::filters::FilterState;
use crate::numerics::dot;
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub p_at_1: f64,
    pub map_at_r: f64,
    pub evaluated: usize,
    /// Queries whose class has no other member.
    pub skipped: usize,
}

/// Gallery indices other than `query`, by descending similarity, ties by
/// ascending index.
fn ranking<F: AsRef<[f64]>>(embeddings: &[F], query: usize) -> Vec<usize> {
    let q = embeddings[query].as_ref();
    let mut scored: Vec<(f64, usize)> = embeddings
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != query)
        .map(|(j, e)| (dot(q, e.as_ref()), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Precision@1 and MAP@R over every query whose class has at least two members.
pub fn retrieval_metrics<F: AsRef<[f64]>>(embeddings: &[F], labels: &[ClassId]) -> Result<RetrievalMetrics> {
    if embeddings.len() != labels.len() {
        return Err(PrismError::domain("embeddings and labels differ in length"));
    }
    if embeddings.len() < 2 {
        return Err(PrismError::domain("retrieval needs at least two samples"));
    }
    let mut sizes: BTreeMap<ClassId, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    let (mut p1, mut map, mut evaluated, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for q in 0..embeddings.len() {
        let r = sizes[&labels[q]] - 1;
        if r == 0 {
            skipped += 1;
            continue;
        }
        let ranked = ranking(embeddings, q);
        if labels[ranked[0]] == labels[q] {
            p1 += 1.0;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, &j) in ranked.iter().take(r).enumerate() {
            if labels[j] == labels[q] {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        map += ap / r as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(PrismError::domain("every query class is a singleton"));
    }
    Ok(RetrievalMetrics {
        p_at_1: p1 / evaluated as f64,
        map_at_r: map / evaluated as f64,
        evaluated,
        skipped,
    })
}

pub fn precision_at_1<F: AsRef<[f64]>>(embeddings: &[F], labels: &[ClassId]) -> Result<f64> {
    Ok(retrieval_metrics(embeddings, labels)?.p_at_1)
}

pub fn map_at_r<F: AsRef<[f64]>>(embeddings: &[F], labels: &[ClassId]) -> Result<f64> {
    Ok(retrieval_metrics(embeddings, labels)?.map_at_r)
}

/// Fraction of kept samples that are truly clean; `None` when nothing was kept.
pub fn filter_accuracy(kept: &[usize], clean_mask: &[bool]) -> Option<f64> {
    if kept.is_empty() {
        return None;
    }
    let clean = kept.iter().filter(|&&i| clean_mask[i]).count();
    Some(clean as f64 / kept.len() as f64)
}

/// ROC AUC of `probs` as a score for the clean class, from the rank-sum
/// statistic with average ranks for ties.
pub fn pclean_auc(probs: &[f64], clean_mask: &[bool]) -> Result<f64> {
    if probs.len() != clean_mask.len() {
        return Err(PrismError::domain("probs and mask differ in length"));
    }
    let n_clean = clean_mask.iter().filter(|&&c| c).count();
    let n_noisy = probs.len() - n_clean;
    if n_clean == 0 || n_noisy == 0 {
        return Err(PrismError::domain("AUC needs both clean and noisy samples"));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && probs[order[end]] == probs[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * order[start..end].iter().filter(|&&i| clean_mask[i]).count() as f64;
        start = end;
    }
    let (nc, nn) = (n_clean as f64, n_noisy as f64);
    Ok((rank_sum - nc * (nc + 1.0) / 2.0) / (nc * nn))
}

fn bin_of(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Equal-width bins on [0, 1]; bins are half-open except the last, which
/// includes 1.
pub fn pclean_histogram(probs: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(PrismError::domain("histogram needs at least one bin"));
    }
    let mut counts = vec![0; bins];
    for &p in probs {
        counts[bin_of(p, bins)] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_clean: usize,
    pub count_noisy: usize,
}

/// Histogram split by ground-truth cleanness.
pub fn split_histogram(probs: &[f64], clean_mask: &[bool], bins: usize) -> Result<Vec<HistogramRow>> {
    if probs.len() != clean_mask.len() {
        return Err(PrismError::domain("probs and mask differ in length"));
    }
    if bins == 0 {
        return Err(PrismError::domain("histogram needs at least one bin"));
    }
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|b| HistogramRow {
            bin_lo: b as f64 / bins as f64,
            bin_hi: (b + 1) as f64 / bins as f64,
            count_clean: 0,
            count_noisy: 0,
        })
        .collect();
    for (&p, &clean) in probs.iter().zip(clean_mask) {
        let row = &mut rows[bin_of(p, bins)];
        if clean {
            row.count_clean += 1;
        } else {
            row.count_noisy += 1;
        }
    }
    Ok(rows)
}

pub fn write_histogram_csv<W: Write>(rows: &[HistogramRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count_clean,count_noisy")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.bin_lo, r.bin_hi, r.count_clean, r.count_noisy)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaRecord {
    pub iter: usize,
    pub class: ClassId,
    pub kappa: f64,
}

/// Current concentration of every fitted class, stamped with the iteration.
pub fn kappa_snapshot(state: &FilterState) -> Vec<KappaRecord> {
    state
        .vmf_params()
        .iter()
        .map(|(&class, fc)| KappaRecord { iter: state.iteration, class, kappa: fc.params.kappa })
        .collect()
}

pub const KAPPA_HEADER: &str = "iter,class,kappa";

pub fn write_kappa_rows<W: Write>(rows: &[KappaRecord], mut out: W) -> std::io::Result<()> {
    for r in rows {
        writeln!(out, "{},{},{}", r.iter, r.class, r.kappa)?;
    }
    Ok(())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Among pairs sharing a given label, the fraction whose true labels also match.
pub fn true_positive_pair_fraction(given: &[ClassId], truth: &[ClassId]) -> Option<f64> {
    let mut counts: BTreeMap<ClassId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    for (&g, &t) in given.iter().zip(truth) {
        *counts.entry(g).or_default().entry(t).or_default() += 1;
    }
    let pairs = |n: usize| (n * n.saturating_sub(1) / 2) as f64;
    let (mut pos, mut total) = (0.0, 0.0);
    for by_true in counts.values() {
        total += pairs(by_true.values().sum());
        pos += by_true.values().map(|&n| pairs(n)).sum::<f64>();
    }
    (total > 0.0).then(|| pos / total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub p_at_1: f64,
    pub map_at_r: f64,
    pub filter_acc: Option<f64>,
    pub pclean_auc: Option<f64>,
    pub kept_frac: f64,
}

pub const METRICS_HEADER: &str = "iter,p_at_1,map_at_r,filter_acc,pclean_auc,kept_frac";

impl MetricsRow {
    pub fn write_row<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            self.iter,
            self.p_at_1,
            self.map_at_r,
            opt(self.filter_acc),
            opt(self.pclean_auc),
            self.kept_frac
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::Estimator;
    use crate::membank::{MemoryBank, MemoryEntry};
    use crate::rng;
    use crate::vmf::{random_unit_vector, vmf_sample, VmfParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Definition-level recomputation: full similarity matrix, explicit ranks.
    fn brute(emb: &[Vec<f64>], labels: &[ClassId]) -> (f64, f64, usize) {
        let n = emb.len();
        let (mut p1, mut map, mut count) = (0.0, 0.0, 0);
        for q in 0..n {
            let r = labels.iter().filter(|&&l| l == labels[q]).count() - 1;
            if r == 0 {
                continue;
            }
            let mut others: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            let sim = |j: usize| emb[q].iter().zip(&emb[j]).map(|(a, b)| a * b).sum::<f64>();
            // Bubble-sort style selection for independence from the library sort.
            for a in 0..others.len() {
                for b in 0..others.len() - 1 - a {
                    let (x, y) = (others[b], others[b + 1]);
                    if sim(y) > sim(x) || (sim(y) == sim(x) && y < x) {
                        others.swap(b, b + 1);
                    }
                }
            }
            if labels[others[0]] == labels[q] {
                p1 += 1.0;
            }
            let mut s = 0.0;
            for i in 1..=r {
                let rel = |k: usize| (labels[others[k - 1]] == labels[q]) as u8 as f64;
                let prec = (1..=i).map(rel).sum::<f64>() / i as f64;
                s += prec * rel(i);
            }
            map += s / r as f64;
            count += 1;
        }
        (p1 / count as f64, map / count as f64, count)
    }

    fn random_instance(n: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<ClassId>) {
        let mut r = rng::seeded(seed);
        let emb = (0..n).map(|_| random_unit_vector(4, &mut r).into_inner()).collect();
        let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
        (emb, labels)
    }

    #[test]
    fn retrieval_examples() {
        let emb = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let m = retrieval_metrics(&emb, &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.p_at_1, m.map_at_r), (1.0, 1.0));
        // Antipodal alternation: each point's nearest neighbor is the other class.
        let emb = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![-1.0, 0.0], vec![-0.9, -0.1]];
        assert_eq!(precision_at_1(&emb, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(retrieval_metrics(&emb[..1], &[0]).is_err());
    }

    #[test]
    fn map_window_excludes_late_hits() {
        // Query 0 has R = 1; its same-class neighbor sits at rank 2.
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.9, 0.1]];
        let m = retrieval_metrics(&emb, &[0, 0, 1]).unwrap();
        assert_eq!(m.skipped, 1);
        assert_eq!(m.evaluated, 2);
        // Query 1 also ranks sample 2 first (0.1 > 0.0).
        assert_eq!(m.map_at_r, 0.0);
    }

    #[test]
    fn ties_break_by_index() {
        let emb = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(ranking(&emb, 0), vec![1, 2]);
        // Equal similarity to both: the lower index wins rank 1.
        assert_eq!(precision_at_1(&emb, &[0, 0, 1]).unwrap(), (1.0 + 0.0) / 2.0);
    }

    #[test]
    fn retrieval_matches_brute_force() {
        for seed in 0..20 {
            let n = 10 + (seed as usize * 7) % 90;
            let (emb, labels) = random_instance(n, 2 + seed as usize % 6, seed);
            let m = retrieval_metrics(&emb, &labels).unwrap();
            let (p1, map, count) = brute(&emb, &labels);
            assert_eq!(m.p_at_1, p1);
            assert_eq!(m.evaluated, count);
            assert_relative_eq!(m.map_at_r, map, epsilon = 1e-9);
        }
        let (emb, labels) = random_instance(50, 5, 99);
        assert_eq!(precision_at_1(&emb, &labels).unwrap(), brute(&emb, &labels).0);
    }

    #[test]
    fn map_is_one_iff_windows_are_pure() {
        let mut r = rng::seeded(4);
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            let mu = random_unit_vector(16, &mut r);
            for v in vmf_sample(&VmfParams::new(mu, 2000.0).unwrap(), 5, &mut r) {
                emb.push(v.into_inner());
                labels.push(c);
            }
        }
        assert_eq!(map_at_r(&emb, &labels).unwrap(), 1.0);
        labels.swap(0, 19);
        assert!(map_at_r(&emb, &labels).unwrap() < 1.0);
    }

    #[test]
    fn filter_accuracy_examples() {
        let mask = [true, false, true, false];
        assert_eq!(filter_accuracy(&[0, 2], &mask), Some(1.0));
        assert_eq!(filter_accuracy(&[0, 1, 2, 3], &mask), Some(0.5));
        assert_eq!(filter_accuracy(&[], &mask), None);
        let mut r = rng::seeded(3);
        let mask: Vec<bool> = (0..100).map(|_| r.random_bool(0.6)).collect();
        let kept: Vec<usize> = (0..100).filter(|_| r.random_bool(0.5)).collect();
        let set: std::collections::BTreeSet<usize> = kept.iter().copied().collect();
        let clean: std::collections::BTreeSet<usize> = (0..100).filter(|&i| mask[i]).collect();
        let want = set.intersection(&clean).count() as f64 / set.len() as f64;
        assert_eq!(filter_accuracy(&kept, &mask), Some(want));
    }

    fn brute_auc(probs: &[f64], mask: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &ci) in mask.iter().enumerate() {
            for (j, &cj) in mask.iter().enumerate() {
                if ci && !cj {
                    pairs += 1.0;
                    wins += if probs[i] > probs[j] { 1.0 } else if probs[i] == probs[j] { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(pclean_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(pclean_auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(pclean_auc(&[0.5, 0.6], &[true, true]).is_err());
        let probs = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3, 0.5, 0.2, 0.7, 0.6];
        let mask = [true, false, true, false, true, true, false, false, true, false];
        assert_relative_eq!(pclean_auc(&probs, &mask).unwrap(), brute_auc(&probs, &mask), epsilon = 1e-15);
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(pclean_histogram(&[0.0, 1.0], 2).unwrap(), vec![1, 1]);
        assert_eq!(pclean_histogram(&[0.5; 3], 2).unwrap(), vec![0, 3]);
        assert!(pclean_histogram(&[0.5], 0).is_err());
        let rows = split_histogram(&[0.05, 0.95, 1.0], &[false, true, true], 10).unwrap();
        assert_eq!(rows[0].count_noisy, 1);
        assert_eq!(rows[9].count_clean, 2);
        let mut buf = Vec::new();
        write_histogram_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "bin_lo,bin_hi,count_clean,count_noisy");
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn kappa_snapshot_examples() {
        let st = FilterState::new(Estimator::VmfSim, 0);
        assert!(kappa_snapshot(&st).is_empty());

        let mut r = rng::seeded(6);
        let data = vmf_sample(&VmfParams::new(random_unit_vector(4, &mut r), 30.0).unwrap(), 50, &mut r);
        let mut bank = MemoryBank::new(200, 4).unwrap();
        bank.enqueue_batch((0..3).flat_map(|c| data.iter().map(move |v| MemoryEntry::new(v.clone(), c))))
            .unwrap();
        let mut st = FilterState::new(Estimator::VmfSim, 0);
        st.refresh_params(&bank).unwrap();
        st.iteration = 12;
        let snap = kappa_snapshot(&st);
        assert_eq!(snap.len(), 3);
        assert!(snap.iter().all(|k| k.iter == 12));
        assert_relative_eq!(snap[0].kappa, snap[2].kappa, max_relative = 1e-12);
        let mut buf = Vec::new();
        write_kappa_rows(&snap, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("12,0,"));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn pair_fraction() {
        assert_eq!(true_positive_pair_fraction(&[0, 0, 1, 1], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(true_positive_pair_fraction(&[0, 0], &[0, 1]), Some(0.0));
        assert_eq!(true_positive_pair_fraction(&[0, 1], &[0, 1]), None);
    }

    #[test]
    fn metrics_row_format() {
        let row = MetricsRow { iter: 5, p_at_1: 0.5, map_at_r: 0.25, filter_acc: None, pclean_auc: Some(0.75), kept_frac: 1.0 };
        let mut buf = Vec::new();
        row.write_row(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "5,0.5,0.25,,0.75,1\n");
        assert_eq!(METRICS_HEADER.split(',').count(), 6);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_map(
            probs in prop::collection::vec(0.0..1.0f64, 2..60),
            seed in 0u64..1000,
        ) {
            let mut r = rng::seeded(seed);
            let mut mask: Vec<bool> = probs.iter().map(|_| r.random_bool(0.5)).collect();
            mask[0] = true;
            mask[1] = false;
            let a = pclean_auc(&probs, &mask).unwrap();
            let mapped: Vec<f64> = probs.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            prop_assert!((a - pclean_auc(&mapped, &mask).unwrap()).abs() < 1e-12);
            prop_assert!((a - brute_auc(&probs, &mask)).abs() < 1e-12);
        }

        #[test]
        fn histogram_counts_sum(probs in prop::collection::vec(0.0..=1.0f64, 0..100), bins in 1usize..20) {
            prop_assert_eq!(pclean_histogram(&probs, bins).unwrap().iter().sum::<usize>(), probs.len());
        }

        #[test]
        fn map_is_bounded(seed in 0u64..1000) {
            let (emb, labels) = random_instance(30, 4, seed);
            let m = retrieval_metrics(&emb, &labels).unwrap();
            prop_assert!(m.map_at_r <= 1.0 && m.p_at_1 <= 1.0);
        }
    }
}
