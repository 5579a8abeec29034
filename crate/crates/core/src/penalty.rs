//! Relaxed rate-difference penalizers.
//!
//! The FP penalizer compares the mean margin `θᵀx` of the negative-label
//! points in the two protected groups, the FN penalizer does the same for
//! positive-label points. Because the margin is linear, both reduce to
//! `θᵀx̄` for a data-only vector `x̄`, which is computed once per training set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::trainer::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// `|θᵀx̄|`
    Avd,
    /// `(θᵀx̄)²`
    Sd,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Avd => "avd",
            PenaltyKind::Sd => "sd",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avd" => Ok(PenaltyKind::Avd),
            "sd" => Ok(PenaltyKind::Sd),
            _ => Err(Error::invalid(format!("unknown penalty kind `{s}`"))),
        }
    }
}

/// Which rate a penalizer targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    /// False positives: compares `S_00` against `S_10`.
    FalsePositive,
    /// False negatives: compares `S_01` against `S_11`.
    FalseNegative,
}

/// Mean feature vector of the group-0 cell minus that of the group-1 cell,
/// with a trailing 0 for the intercept coordinate.
pub fn group_mean_diff(ds: &Dataset, which: RateKind) -> Result<Vec<f64>> {
    let label = matches!(which, RateKind::FalseNegative);
    let g0 = Group::new(false, label);
    let g1 = Group::new(true, label);
    let d = ds.dim();
    let mut sum0 = vec![0.0; d];
    let mut sum1 = vec![0.0; d];
    for p in ds.points() {
        if p.label != label {
            continue;
        }
        let acc = if p.protected { &mut sum1 } else { &mut sum0 };
        for (s, x) in acc.iter_mut().zip(&p.features) {
            *s += x;
        }
    }
    let (n0, n1) = (ds.group_count(g0), ds.group_count(g1));
    if n0 == 0 {
        return Err(Error::EmptyGroup(g0));
    }
    if n1 == 0 {
        return Err(Error::EmptyGroup(g1));
    }
    let mut xbar: Vec<f64> = sum0
        .iter()
        .zip(&sum1)
        .map(|(a, b)| a / n0 as f64 - b / n1 as f64)
        .collect();
    xbar.push(0.0);
    Ok(xbar)
}

/// Penalizer kind, the cached mean-difference vectors and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub xbar_fp: Vec<f64>,
    pub xbar_fn: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

impl PenaltySpec {
    pub fn from_dataset(ds: &Dataset, kind: PenaltyKind, c1: f64, c2: f64) -> Result<Self> {
        PenaltySpec::new(
            kind,
            group_mean_diff(ds, RateKind::FalsePositive)?,
            group_mean_diff(ds, RateKind::FalseNegative)?,
            c1,
            c2,
        )
    }

    pub fn new(kind: PenaltyKind, xbar_fp: Vec<f64>, xbar_fn: Vec<f64>, c1: f64, c2: f64) -> Result<Self> {
        if xbar_fp.len() != xbar_fn.len() {
            return Err(Error::DimensionMismatch {
                expected: xbar_fp.len(),
                got: xbar_fn.len(),
            });
        }
        if !(c1 >= 0.0 && c2 >= 0.0) {
            return Err(Error::invalid(format!(
                "penalty weights must be >= 0, got ({c1}, {c2})"
            )));
        }
        Ok(PenaltySpec {
            kind,
            xbar_fp,
            xbar_fn,
            c1,
            c2,
        })
    }

    pub fn with_weights(&self, c1: f64, c2: f64) -> Result<Self> {
        PenaltySpec::new(self.kind, self.xbar_fp.clone(), self.xbar_fn.clone(), c1, c2)
    }

    fn check(&self, theta: &ModelParams) -> Result<()> {
        if theta.len() != self.xbar_fp.len() {
            return Err(Error::DimensionMismatch {
                expected: self.xbar_fp.len(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn apply(&self, m: f64) -> f64 {
        match self.kind {
            PenaltyKind::Avd => m.abs(),
            PenaltyKind::Sd => m * m,
        }
    }

    /// Derivative (or chosen subgradient, `sign(0) = 0`) with respect to the
    /// margin `m = θᵀx̄`.
    fn slope(&self, m: f64) -> f64 {
        match self.kind {
            PenaltyKind::Avd => {
                if m > 0.0 {
                    1.0
                } else if m < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            PenaltyKind::Sd => 2.0 * m,
        }
    }

    /// Unweighted `(R_FP, R_FN)`.
    pub fn value(&self, theta: &ModelParams) -> Result<(f64, f64)> {
        self.check(theta)?;
        Ok((
            self.apply(theta.dot(&self.xbar_fp)),
            self.apply(theta.dot(&self.xbar_fn)),
        ))
    }

    /// Unweighted (sub)gradients of `(R_FP, R_FN)`.
    pub fn subgradient(&self, theta: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(theta)?;
        let scale = |xbar: &[f64]| {
            let s = self.slope(theta.dot(xbar));
            xbar.iter().map(|x| s * x).collect::<Vec<f64>>()
        };
        Ok((scale(&self.xbar_fp), scale(&self.xbar_fn)))
    }

    /// `c1 * R_FP + c2 * R_FN`.
    pub fn weighted_value(&self, theta: &ModelParams) -> Result<f64> {
        let (fp, fnr) = self.value(theta)?;
        Ok(self.c1 * fp + self.c2 * fnr)
    }

    /// Adds `c1 * ∇R_FP + c2 * ∇R_FN` into `grad`.
    pub fn add_weighted_gradient(&self, theta: &ModelParams, grad: &mut [f64]) -> Result<()> {
        self.check(theta)?;
        for (w, xbar) in [(self.c1, &self.xbar_fp), (self.c2, &self.xbar_fn)] {
            if w == 0.0 {
                continue;
            }
            let s = w * self.slope(theta.dot(xbar));
            for (g, x) in grad.iter_mut().zip(xbar) {
                *g += s * x;
            }
        }
        Ok(())
    }
}

/// `(R_FP, R_FN)` at `theta`.
pub fn penalty_value(theta: &ModelParams, spec: &PenaltySpec) -> Result<(f64, f64)> {
    spec.value(theta)
}

/// `(∇R_FP, ∇R_FN)` at `theta`; AVD uses the zero subgradient at its kink.
pub fn penalty_subgradient(theta: &ModelParams, spec: &PenaltySpec) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.subgradient(theta)
}
