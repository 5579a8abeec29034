//! Per-group error rates and the unrelaxed fairness objective
//! `L01 + d1 * D_FPR + d2 * D_FNR`.
//!
//! Rates are ratios of integer counts, each rounded once when converted to
//! `f64`.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::trainer::ModelParams;
use crate::{Error, Result};

/// Confusion counts for one protected group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    /// `y = 0, yhat = 1`
    pub false_pos: usize,
    /// `y = 0`
    pub negatives: usize,
    /// `y = 1, yhat = 0`
    pub false_neg: usize,
    /// `y = 1`
    pub positives: usize,
}

/// Confusion counts for both groups, indexed by the protected bit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub groups: [GroupCounts; 2],
}

impl Confusion {
    pub fn tally(predictions: &[bool], ds: &Dataset) -> Result<Self> {
        if predictions.len() != ds.len() {
            return Err(Error::DimensionMismatch {
                expected: ds.len(),
                got: predictions.len(),
            });
        }
        let mut c = Confusion::default();
        for (p, &yhat) in ds.points().iter().zip(predictions) {
            let g = &mut c.groups[p.protected as usize];
            if p.label {
                g.positives += 1;
                g.false_neg += usize::from(!yhat);
            } else {
                g.negatives += 1;
                g.false_pos += usize::from(yhat);
            }
        }
        Ok(c)
    }

    pub fn errors(&self) -> usize {
        self.groups.iter().map(|g| g.false_pos + g.false_neg).sum()
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.negatives + g.positives).sum()
    }

    pub fn rates(&self) -> Result<GroupRates> {
        for (a, g) in self.groups.iter().enumerate() {
            if g.negatives == 0 {
                return Err(Error::EmptyGroup(Group::new(a == 1, false)));
            }
            if g.positives == 0 {
                return Err(Error::EmptyGroup(Group::new(a == 1, true)));
            }
        }
        let ratio = |num: usize, den: usize| num as f64 / den as f64;
        let [g0, g1] = self.groups;
        Ok(GroupRates::new(
            ratio(g0.false_pos, g0.negatives),
            ratio(g1.false_pos, g1.negatives),
            ratio(g0.false_neg, g0.positives),
            ratio(g1.false_neg, g1.positives),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub fpr_0: f64,
    pub fpr_1: f64,
    pub fnr_0: f64,
    pub fnr_1: f64,
    pub d_fpr: f64,
    pub d_fnr: f64,
}

impl GroupRates {
    pub fn new(fpr_0: f64, fpr_1: f64, fnr_0: f64, fnr_1: f64) -> Self {
        GroupRates {
            fpr_0,
            fpr_1,
            fnr_0,
            fnr_1,
            d_fpr: (fpr_0 - fpr_1).abs(),
            d_fnr: (fnr_0 - fnr_1).abs(),
        }
    }
}

/// Empirical FPR/FNR per protected group. Errors on any empty `S_ay`.
pub fn group_rates(predictions: &[bool], ds: &Dataset) -> Result<GroupRates> {
    Confusion::tally(predictions, ds)?.rates()
}

/// Accuracy and per-group rates of a predictor on a dataset.
///
/// Serializes as the flat object
/// `{accuracy, d_fpr, d_fnr, fpr_0, fpr_1, fnr_0, fnr_1, n}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlatSummary", from = "FlatSummary")]
pub struct EvalSummary {
    pub accuracy: f64,
    pub zero_one_loss: f64,
    pub rates: GroupRates,
    pub n_evaluated: usize,
}

impl EvalSummary {
    /// `accuracy` is derived as `1 - loss`, which makes the two sum to
    /// exactly 1.0 in floating point.
    pub fn from_loss(zero_one_loss: f64, rates: GroupRates, n_evaluated: usize) -> Self {
        EvalSummary {
            accuracy: 1.0 - zero_one_loss,
            zero_one_loss,
            rates,
            n_evaluated,
        }
    }

    pub fn from_predictions(predictions: &[bool], ds: &Dataset) -> Result<Self> {
        let c = Confusion::tally(predictions, ds)?;
        let rates = c.rates()?;
        Ok(EvalSummary::from_loss(
            c.errors() as f64 / c.total() as f64,
            rates,
            c.total(),
        ))
    }

    /// `L01 + d1 * D_FPR + d2 * D_FNR`.
    pub fn objective(&self, d1: f64, d2: f64) -> f64 {
        self.zero_one_loss + d1 * self.rates.d_fpr + d2 * self.rates.d_fnr
    }
}

#[derive(Serialize, Deserialize)]
struct FlatSummary {
    accuracy: f64,
    d_fpr: f64,
    d_fnr: f64,
    fpr_0: f64,
    fpr_1: f64,
    fnr_0: f64,
    fnr_1: f64,
    n: usize,
}

impl From<EvalSummary> for FlatSummary {
    fn from(s: EvalSummary) -> Self {
        FlatSummary {
            accuracy: s.accuracy,
            d_fpr: s.rates.d_fpr,
            d_fnr: s.rates.d_fnr,
            fpr_0: s.rates.fpr_0,
            fpr_1: s.rates.fpr_1,
            fnr_0: s.rates.fnr_0,
            fnr_1: s.rates.fnr_1,
            n: s.n_evaluated,
        }
    }
}

impl From<FlatSummary> for EvalSummary {
    fn from(f: FlatSummary) -> Self {
        EvalSummary {
            accuracy: f.accuracy,
            zero_one_loss: 1.0 - f.accuracy,
            rates: GroupRates::new(f.fpr_0, f.fpr_1, f.fnr_0, f.fnr_1),
            n_evaluated: f.n,
        }
    }
}

/// Hard predictions under the sign rule (a zero score predicts 1).
pub fn predictions(theta: &ModelParams, ds: &Dataset) -> Result<Vec<bool>> {
    theta.check_dim(ds.dim())?;
    Ok(ds.points().iter().map(|p| theta.score(&p.features) >= 0.0).collect())
}

pub fn evaluate(theta: &ModelParams, ds: &Dataset) -> Result<EvalSummary> {
    EvalSummary::from_predictions(&predictions(theta, ds)?, ds)
}

/// The unrelaxed objective at `theta`.
pub fn objective(theta: &ModelParams, ds: &Dataset, d1: f64, d2: f64) -> Result<f64> {
    Ok(evaluate(theta, ds)?.objective(d1, d2))
}
