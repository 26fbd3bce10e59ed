//! Per-batch filtering thresholds: fixed, top-R (TRM), and smoothed top-R
//! over a sliding window of batches (sTRM).

use std::collections::VecDeque;

use crate::error::{PrismError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdKind {
    Fixed { m: f64 },
    /// Discard the lowest `rate` percent of each batch.
    Trm { rate: f64 },
    /// Average the per-batch `rate`-th percentile over the last `tau` batches.
    Strm { rate: f64, tau: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPolicy {
    kind: ThresholdKind,
    history: VecDeque<f64>,
}

impl ThresholdPolicy {
    pub fn new(kind: ThresholdKind) -> Result<Self> {
        match kind {
            ThresholdKind::Fixed { m } if !m.is_finite() => {
                return Err(PrismError::config("fixed threshold must be finite"))
            }
            ThresholdKind::Trm { rate } | ThresholdKind::Strm { rate, .. }
                if !(0.0..=100.0).contains(&rate) =>
            {
                return Err(PrismError::config(format!("filter rate {rate} outside [0, 100]")))
            }
            ThresholdKind::Strm { tau: 0, .. } => {
                return Err(PrismError::config("sTRM window must be >= 1"))
            }
            _ => {}
        }
        Ok(Self { kind, history: VecDeque::new() })
    }

    pub fn fixed(m: f64) -> Result<Self> {
        Self::new(ThresholdKind::Fixed { m })
    }

    pub fn trm(rate: f64) -> Result<Self> {
        Self::new(ThresholdKind::Trm { rate })
    }

    pub fn strm(rate: f64, tau: usize) -> Result<Self> {
        Self::new(ThresholdKind::Strm { rate, tau })
    }

    pub fn kind(&self) -> ThresholdKind {
        self.kind
    }

    /// Percentiles currently in the sTRM window, oldest first.
    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    /// Threshold for this batch. For sTRM, pushes the batch percentile into
    /// the window first; a window not yet full averages what it holds.
    pub fn compute_threshold(&mut self, probs: &[f64]) -> Result<f64> {
        if probs.is_empty() {
            return Err(PrismError::domain("threshold of an empty batch"));
        }
        match self.kind {
            ThresholdKind::Fixed { m } => Ok(m),
            ThresholdKind::Trm { rate } => batch_percentile(probs, rate),
            ThresholdKind::Strm { rate, tau } => {
                let q = batch_percentile(probs, rate)?;
                self.history.push_back(q);
                while self.history.len() > tau {
                    self.history.pop_front();
                }
                Ok(self.history.iter().sum::<f64>() / self.history.len() as f64)
            }
        }
    }
}

/// Nearest-rank percentile: the element at `ceil(rate/100 · n) - 1` of the
/// ascending sort, clamped into range.
pub fn batch_percentile(probs: &[f64], rate: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(PrismError::domain("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&rate) {
        return Err(PrismError::domain(format!("percentile {rate} outside [0, 100]")));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (rate / 100.0 * n as f64).ceil() as isize - 1;
    Ok(sorted[rank.clamp(0, n as isize - 1) as usize])
}
