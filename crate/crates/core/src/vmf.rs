//! von Mises-Fisher distribution on the unit sphere `S^(D-1)`.
//!
//! Densities are computed in log space throughout: for `D = 128` and
//! concentrations in the hundreds the normalizer `C_D(κ)` is far outside the
//! range of an `f64`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{check_dim, PrismError, Result};
use crate::numerics::{dot, l2_normalize, ln_gamma, log_bessel_i, norm, LogReal, UnitVector};
use crate::rng;

/// Upper clamp for fitted concentrations.
pub const KAPPA_MAX: f64 = 1e5;

/// Which closed-form concentration estimate [`vmf_fit_with`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaFormula {
    /// `κ = R̄ (D - R̄²) / (1 - R̄²)` with `R̄ = ‖Σ v_i‖ / n`.
    #[default]
    Standard,
    /// `κ = R (D - R) / (1 - R²)` with `R = ‖Σ v_i‖` (no division by `n`).
    /// Negative for concentrated data with `n ≥ 2`; clamped to 0. Kept only
    /// for comparison.
    PaperLiteral,
}

impl std::str::FromStr for KappaFormula {
    type Err = PrismError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(PrismError::config(format!("unknown kappa_formula '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    pub mu: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        if !(0.0..=KAPPA_MAX).contains(&kappa) {
            return Err(PrismError::domain(format!("kappa {kappa} outside [0, {KAPPA_MAX}]")));
        }
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn log_normalizer(&self) -> Result<LogReal> {
        log_normalizer(self.dim(), self.kappa)
    }
}

/// Sufficient statistics for a maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultantStats {
    pub sum_vector: Vec<f64>,
    pub count: usize,
    pub mean_resultant_length: f64,
}

impl ResultantStats {
    pub fn from_sum(sum_vector: Vec<f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(PrismError::InsufficientData { needed: 1, got: 0 });
        }
        let mean_resultant_length = norm(&sum_vector) / count as f64;
        Ok(Self { sum_vector, count, mean_resultant_length })
    }

    pub fn from_samples(samples: &[UnitVector]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or(PrismError::InsufficientData { needed: 1, got: 0 })?;
        let mut sum = vec![0.0; first.dim()];
        for s in samples {
            check_dim(first.dim(), s.dim())?;
            for (acc, x) in sum.iter_mut().zip(s.iter()) {
                *acc += x;
            }
        }
        Self::from_sum(sum, samples.len())
    }
}

/// `ln C_D(κ)`; at `κ = 0` the uniform density `1 / |S^(D-1)|`.
pub fn log_normalizer(dim: usize, kappa: f64) -> Result<LogReal> {
    if dim < 2 {
        return Err(PrismError::domain("vMF needs D >= 2"));
    }
    if kappa.is_nan() || kappa < 0.0 {
        return Err(PrismError::domain(format!("kappa {kappa} must be >= 0")));
    }
    let d = dim as f64;
    let order = 0.5 * d - 1.0;
    if kappa == 0.0 {
        // |S^(D-1)| = 2 π^(D/2) / Γ(D/2)
        let log_area = 2f64.ln() + 0.5 * d * PI.ln() - ln_gamma(0.5 * d);
        return LogReal::new(-log_area);
    }
    let value = order * kappa.ln() - 0.5 * d * (2.0 * PI).ln() - log_bessel_i(order, kappa)?;
    LogReal::new(value)
}

pub fn vmf_log_pdf(params: &VmfParams, x: &[f64]) -> Result<f64> {
    check_dim(params.dim(), x.len())?;
    Ok(params.log_normalizer()?.ln() + params.kappa * dot(&params.mu, x))
}

/// Expected mean resultant length `A_D(κ) = I_{D/2}(κ) / I_{D/2-1}(κ)`.
pub fn mean_resultant_length(dim: usize, kappa: f64) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let order = 0.5 * dim as f64 - 1.0;
    Ok((log_bessel_i(order + 1.0, kappa)? - log_bessel_i(order, kappa)?).exp())
}

/// Maximum-likelihood fit with the standard concentration estimate.
pub fn vmf_fit(samples: &[UnitVector]) -> Result<VmfParams> {
    vmf_fit_with(samples, KappaFormula::Standard)
}

pub fn vmf_fit_with(samples: &[UnitVector], formula: KappaFormula) -> Result<VmfParams> {
    if samples.len() < 2 {
        return Err(PrismError::InsufficientData { needed: 2, got: samples.len() });
    }
    fit_from_stats(&ResultantStats::from_samples(samples)?, formula)
}

/// Fit from a running sum, as maintained by the memory bank.
pub fn fit_from_stats(stats: &ResultantStats, formula: KappaFormula) -> Result<VmfParams> {
    if stats.count < 2 {
        return Err(PrismError::InsufficientData { needed: 2, got: stats.count });
    }
    let resultant = norm(&stats.sum_vector);
    if resultant <= 1e-12 * stats.count as f64 {
        return Err(PrismError::degenerate("resultant vector is zero; no mean direction"));
    }
    let d = stats.sum_vector.len() as f64;
    let mu = l2_normalize(&stats.sum_vector)?;
    let r = match formula {
        KappaFormula::Standard => stats.mean_resultant_length.min(1.0),
        KappaFormula::PaperLiteral => resultant,
    };
    let r2 = r * r;
    let (numer, denom) = match formula {
        KappaFormula::Standard => (r * (d - r2), 1.0 - r2),
        KappaFormula::PaperLiteral => (r * (d - r), 1.0 - r2),
    };
    let kappa = if denom.abs() < f64::EPSILON {
        KAPPA_MAX
    } else {
        numer / denom
    };
    let kappa = if kappa.is_nan() { KAPPA_MAX } else { kappa.clamp(0.0, KAPPA_MAX) };
    VmfParams::new(mu, kappa)
}

pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Draws `n` samples with Wood's rejection scheme: the cosine `w = μᵀx` from
/// its marginal, then a uniform direction in the tangent space at `μ`.
pub fn vmf_sample<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Vec<UnitVector> {
    let dim = params.dim();
    let dm1 = (dim - 1) as f64;
    let kappa = params.kappa;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(0.5 * dm1, 0.5 * dm1).expect("beta shape is positive");
    let mu = params.mu.as_slice();

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let tangent = loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&v, mu);
            for (vi, mi) in v.iter_mut().zip(mu) {
                *vi -= along * mi;
            }
            if let Ok(t) = l2_normalize(&v) {
                break t;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let x: Vec<f64> = mu.iter().zip(tangent.iter()).map(|(m, t)| w * m + s * t).collect();
        // Renormalize to absorb rounding.
        out.push(l2_normalize(&x).expect("sample lies on the sphere"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaMseRow {
    pub n: usize,
    pub mse: f64,
    pub trials: usize,
    pub dim: usize,
    pub kappa_true: f64,
}

/// Squared error of the fitted concentration, averaged over `trials` draws of
/// `n` samples from a vMF with a uniformly random mean direction.
///
/// Trial `t` draws from its own stream derived from `(seed, t)`; within a
/// trial the sample sizes are visited in order on that stream.
pub fn kappa_mse_experiment(
    dim: usize,
    true_kappa: f64,
    sample_counts: &[usize],
    trials: usize,
    seed: u64,
    formula: KappaFormula,
) -> Result<Vec<KappaMseRow>> {
    if trials == 0 {
        return Err(PrismError::domain("kappa MSE experiment needs trials >= 1"));
    }
    if let Some(&n) = sample_counts.iter().find(|&&n| n < 2) {
        return Err(PrismError::InsufficientData { needed: 2, got: n });
    }
    let mut sq_err = vec![0.0; sample_counts.len()];
    for t in 0..trials {
        let mut rng = rng::stream(seed, t as u64);
        let mu = random_unit_vector(dim, &mut rng);
        let params = VmfParams::new(mu, true_kappa)?;
        for (acc, &n) in sq_err.iter_mut().zip(sample_counts) {
            let samples = vmf_sample(&params, n, &mut rng);
            let fit = vmf_fit_with(&samples, formula)?;
            *acc += (fit.kappa - true_kappa).powi(2);
        }
    }
    Ok(sample_counts
        .iter()
        .zip(sq_err)
        .map(|(&n, s)| KappaMseRow { n, mse: s / trials as f64, trials, dim, kappa_true: true_kappa })
        .collect())
}

pub fn write_kappa_mse_csv<W: Write>(rows: &[KappaMseRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "n,mse,trials,dim,kappa_true")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.n, r.mse, r.trials, r.dim, r.kappa_true)?;
    }
    Ok(())
}
