//! Filter-only timing of the two average-similarity implementations.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::Rng as _;

use crate::error::{PrismError, Result};
use crate::filters::{filter_batch, Estimator, FilterState};
use crate::membank::{MemoryBank, MemoryEntry};
use crate::numerics::UnitVector;
use crate::rng;
use crate::thresholds::ThresholdPolicy;
use crate::vmf::random_unit_vector;
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSetup {
    pub memory: usize,
    pub classes: usize,
    pub batch: usize,
    pub iters: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub setup: BenchSetup,
    pub naive_secs: f64,
    pub centers_secs: f64,
    /// `naive_secs / centers_secs`.
    pub ratio: f64,
    /// Feature similarities evaluated by each implementation.
    pub naive_ops: u64,
    pub centers_ops: u64,
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "memory,classes,batch,iters,naive_secs,centers_secs,ratio,naive_ops,centers_ops")?;
        let s = &self.setup;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.memory, s.classes, s.batch, s.iters, self.naive_secs, self.centers_secs, self.ratio, self.naive_ops,
            self.centers_ops
        )
    }
}

/// Fills a bank of `memory` features over `classes` classes, then times
/// `iters` filtering passes over the same batch with each implementation.
pub fn bench_avgsim(setup: BenchSetup) -> Result<BenchReport> {
    if setup.classes < 2 || setup.memory < setup.classes || setup.batch == 0 || setup.iters == 0 {
        return Err(PrismError::config("bench needs classes >= 2, memory >= classes, batch and iters >= 1"));
    }
    let mut r = rng::stream(setup.seed, 0);
    let mut bank = MemoryBank::new(setup.memory, setup.dim)?;
    bank.enqueue_batch(
        (0..setup.memory).map(|i| MemoryEntry::new(random_unit_vector(setup.dim, &mut r), i % setup.classes)),
    )?;
    bank.mark_seen(0..setup.classes);
    let feats: Vec<UnitVector> = (0..setup.batch).map(|_| random_unit_vector(setup.dim, &mut r)).collect();
    let labels: Vec<ClassId> = (0..setup.batch).map(|_| r.random_range(0..setup.classes)).collect();

    let mut time = |estimator: Estimator| -> Result<f64> {
        let state = FilterState::new(estimator, 0);
        let mut policy = ThresholdPolicy::trm(50.0)?;
        let start = Instant::now();
        for _ in 0..setup.iters {
            black_box(filter_batch(&feats, &labels, &state, &mut bank, None, &mut policy)?);
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let naive_secs = time(Estimator::AvgSimNaive)?;
    let centers_secs = time(Estimator::AvgSimCenters)?;
    let per_pass = (setup.iters * setup.batch) as u64;
    Ok(BenchReport {
        setup,
        naive_secs,
        centers_secs,
        ratio: naive_secs / centers_secs.max(f64::MIN_POSITIVE),
        naive_ops: per_pass * setup.memory as u64,
        centers_ops: per_pass * setup.classes as u64,
    })
}
