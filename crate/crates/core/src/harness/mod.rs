//! Config-driven experiments: training runs, sweeps, the κ-estimation
//! experiment and the average-similarity benchmark.

pub mod bench;
pub mod config;
pub mod train;

use std::io::Write;

use crate::error::{PrismError, Result};
use crate::vmf::{kappa_mse_experiment, KappaMseRow};

pub use bench::{bench_avgsim, BenchReport, BenchSetup};
pub use config::{ExperimentConfig, LossKind, ThresholdChoice};
pub use train::{run_training, RunRecord, Trainer};

pub fn bench_setup(cfg: &ExperimentConfig) -> BenchSetup {
    BenchSetup {
        memory: cfg.bench_memory,
        classes: cfg.bench_classes,
        batch: cfg.bench_batch,
        iters: cfg.bench_iters,
        dim: cfg.embedding_dim,
        seed: cfg.seed,
    }
}

pub fn run_kappa_experiment(cfg: &ExperimentConfig) -> Result<Vec<KappaMseRow>> {
    kappa_mse_experiment(cfg.kappa_dim, cfg.kappa_true, &cfg.kappa_sizes, cfg.kappa_trials, cfg.seed, cfg.kappa_formula)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub record: RunRecord,
}

/// One independent run per value of `key`; point `i` uses seed `seed + i`.
/// Every point's configuration is validated before any run starts.
pub fn sweep(cfg: &ExperimentConfig, key: &str, values: &[String]) -> Result<Vec<SweepPoint>> {
    if cfg.get(key).is_none() {
        return Err(PrismError::config(format!("unknown sweep key '{key}'")));
    }
    if values.is_empty() {
        return Err(PrismError::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut c = cfg.clone();
            c.set(key, v)?;
            c.seed = cfg.seed.wrapping_add(i as u64);
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(c, v)| Ok(SweepPoint { value: v.clone(), seed: c.seed, record: run_training(c)? }))
        .collect()
}

pub fn write_sweep_summary<W: Write>(key: &str, points: &[SweepPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{key},seed,p_at_1,map_at_r,filter_acc_last500,best_iter,best_p_at_1")?;
    for p in points {
        let m = p.record.final_metrics();
        let best = p.record.best_metrics();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.value,
            p.seed,
            opt(m.map(|m| m.p_at_1)),
            opt(m.map(|m| m.map_at_r)),
            opt(p.record.mean_filter_acc_last(500)),
            best.map(|b| b.iter.to_string()).unwrap_or_default(),
            opt(best.map(|b| b.p_at_1))
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::Estimator;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            num_classes: 4,
            samples_per_class: 12,
            heldout_per_class: 4,
            input_dim: 6,
            hidden_dims: vec![8],
            embedding_dim: 4,
            total_iters: 12,
            eval_every: 6,
            memory_size: 64,
            warmup_iters: 5,
            batch_classes: 2,
            batch_per_class: 3,
            estimator: Estimator::AvgSimCenters,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn single_value_sweep_equals_single_run() {
        let cfg = tiny();
        let pts = sweep(&cfg, "window", &["10".to_string()]).unwrap();
        let mut a = pts[0].record.clone();
        let mut b = run_training(&cfg).unwrap();
        a.timings = Default::default();
        b.timings = Default::default();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_points_carry_distinct_seeds() {
        let values: Vec<String> = ["1", "5"].iter().map(|s| s.to_string()).collect();
        let pts = sweep(&tiny(), "window", &values).unwrap();
        assert_ne!(pts[0].seed, pts[1].seed);
        let mut buf = Vec::new();
        write_sweep_summary("window", &pts, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn sweep_rejects_unknown_key_and_bad_values() {
        assert!(sweep(&tiny(), "no_such", &["1".into()]).is_err());
        assert!(sweep(&tiny(), "window", &["0".into()]).is_err());
    }

    #[test]
    fn kappa_experiment_delegates() {
        let cfg = ExperimentConfig { kappa_dim: 8, kappa_true: 10.0, kappa_trials: 3, kappa_sizes: vec![5, 50], ..tiny() };
        let rows = run_kappa_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].n, 50);
    }
}
