//! FIFO feature memory with incrementally maintained per-class statistics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use crate::error::{check_dim, PrismError, Result};
use crate::numerics::UnitVector;
use crate::vmf::ResultantStats;
use crate::ClassId;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: UnitVector,
    pub label: ClassId,
}

impl MemoryEntry {
    pub fn new(feature: UnitVector, label: ClassId) -> Self {
        Self { feature, label }
    }
}

/// Kahan-compensated running sum of the features of one class.
#[derive(Debug, Clone)]
struct ClassStats {
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: usize,
}

impl ClassStats {
    fn new(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], comp: vec![0.0; dim], count: 0 }
    }

    fn accumulate(&mut self, v: &[f64], sign: f64) {
        for ((s, c), x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v) {
            let y = sign * x - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<MemoryEntry>,
    stats: BTreeMap<ClassId, ClassStats>,
    seen: BTreeSet<ClassId>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(PrismError::domain("memory capacity must be >= 1"));
        }
        if dim < 2 {
            return Err(PrismError::domain("feature dimension must be >= 2"));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            stats: BTreeMap::new(),
            seen: BTreeSet::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Stored entries, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Appends `batch` in order, evicting the oldest entries beyond capacity.
    /// The batch is validated before anything is stored.
    pub fn enqueue_batch<I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = MemoryEntry>,
    {
        let batch: Vec<MemoryEntry> = batch.into_iter().collect();
        for e in &batch {
            check_dim(self.dim, e.feature.dim())?;
        }
        for entry in batch {
            self.seen.insert(entry.label);
            self.stats
                .entry(entry.label)
                .or_insert_with(|| ClassStats::new(self.dim))
                .accumulate(&entry.feature, 1.0);
            self.stats.get_mut(&entry.label).expect("just inserted").count += 1;
            self.entries.push_back(entry);
            while self.entries.len() > self.capacity {
                self.evict_oldest();
            }
        }
        Ok(())
    }

    fn evict_oldest(&mut self) {
        let Some(old) = self.entries.pop_front() else { return };
        let stats = self.stats.get_mut(&old.label).expect("stored class has stats");
        stats.count -= 1;
        if stats.count == 0 {
            self.stats.remove(&old.label);
        } else {
            stats.accumulate(&old.feature, -1.0);
        }
    }

    /// Records classes observed in a minibatch, whether or not any of their
    /// samples end up stored.
    pub fn mark_seen<I: IntoIterator<Item = ClassId>>(&mut self, labels: I) {
        self.seen.extend(labels);
    }

    pub fn has_seen(&self, label: ClassId) -> bool {
        self.seen.contains(&label)
    }

    pub fn seen_classes(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn class_count(&self, label: ClassId) -> usize {
        self.stats.get(&label).map_or(0, |s| s.count)
    }

    /// Classes with at least one stored member, ascending, with their counts.
    pub fn classes(&self) -> impl Iterator<Item = (ClassId, usize)> + '_ {
        self.stats.iter().map(|(&k, s)| (k, s.count))
    }

    pub fn class_sum(&self, label: ClassId) -> Result<&[f64]> {
        self.stats
            .get(&label)
            .map(|s| s.sum.as_slice())
            .ok_or(PrismError::AbsentClass(label))
    }

    /// Mean stored feature `w_k` of class `label`; not renormalized.
    pub fn class_center(&self, label: ClassId) -> Result<Vec<f64>> {
        let s = self.stats.get(&label).ok_or(PrismError::AbsentClass(label))?;
        let n = s.count as f64;
        Ok(s.sum.iter().map(|x| x / n).collect())
    }

    /// Centers of every stored class, ascending by class id.
    pub fn centers(&self) -> Vec<(ClassId, Vec<f64>)> {
        self.stats
            .iter()
            .map(|(&k, s)| {
                let n = s.count as f64;
                (k, s.sum.iter().map(|x| x / n).collect())
            })
            .collect()
    }

    pub fn resultant_stats(&self, label: ClassId) -> Result<ResultantStats> {
        let s = self.stats.get(&label).ok_or(PrismError::AbsentClass(label))?;
        ResultantStats::from_sum(s.sum.clone(), s.count)
    }

    /// Stored features of class `label`, oldest first.
    pub fn members_of(&self, label: ClassId) -> Vec<&UnitVector> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| &e.feature)
            .collect()
    }

    /// Debug dump, one `label,f_1,...,f_D` line per entry, oldest first.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            write!(out, "{}", e.label)?;
            for x in e.feature.iter() {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
