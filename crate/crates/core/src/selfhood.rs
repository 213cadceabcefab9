//! Self/other discrimination from model evidence: a stream whose recent
//! free energy stays below a threshold is attributed to the agent's own
//! body.

use std::collections::VecDeque;

use crate::error::{AifError, Result};
use crate::free_energy::FreeEnergyReport;

pub const DEFAULT_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceWindow {
    capacity: usize,
    values: VecDeque<f64>,
    threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfVerdict {
    pub is_self: bool,
    pub mean_evidence: f64,
}

impl EvidenceWindow {
    pub fn new(capacity: usize, threshold: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(AifError::invalid("evidence window capacity must be > 0"));
        }
        if threshold.is_nan() {
            return Err(AifError::invalid("evidence threshold must not be NaN"));
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
            threshold,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn push(&mut self, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(AifError::NonFinite("free-energy value"));
        }
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
        Ok(())
    }

    pub fn update(&mut self, report: &FreeEnergyReport) -> Result<()> {
        self.push(report.value)
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    pub fn classify(&self) -> Result<SelfVerdict> {
        let mean_evidence = self.mean().ok_or(AifError::EmptyWindow)?;
        Ok(SelfVerdict {
            is_self: mean_evidence < self.threshold,
            mean_evidence,
        })
    }
}

pub fn evidence_update(window: &mut EvidenceWindow, report: &FreeEnergyReport) -> Result<()> {
    window.update(report)
}

pub fn classify_self(window: &EvidenceWindow) -> Result<SelfVerdict> {
    window.classify()
}

/// Threshold that best separates the evidence of self-generated and
/// other-generated calibration runs: the cut between adjacent calibration
/// values with the fewest misclassifications, ties going to the widest gap.
pub fn calibrate_threshold(self_means: &[f64], other_means: &[f64]) -> Result<f64> {
    if self_means.is_empty() || other_means.is_empty() {
        return Err(AifError::invalid("threshold calibration needs self and other runs"));
    }
    let mut all: Vec<(f64, bool)> = self_means
        .iter()
        .map(|&v| (v, true))
        .chain(other_means.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(AifError::NonFinite("calibration evidence"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Cut after position i: everything up to i is called self. Start with
    // nothing called self, so every self run counts as an error.
    let mut errors = self_means.len();
    let mut best: Option<(usize, f64, f64)> = None;
    for i in 0..all.len() - 1 {
        if all[i].1 {
            errors -= 1;
        } else {
            errors += 1;
        }
        let gap = all[i + 1].0 - all[i].0;
        if gap <= 0.0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((e, g, _)) => errors < e || (errors == e && gap > g),
        };
        if better {
            best = Some((errors, gap, 0.5 * (all[i].0 + all[i + 1].0)));
        }
    }
    best.map(|(_, _, cut)| cut)
        .ok_or_else(|| AifError::invalid("calibration evidence has no spread"))
}
