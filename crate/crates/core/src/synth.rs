//! Two-feature synthetic distribution in which the accuracy-optimal rule is
//! maximally unfair.
//!
//! `Y` is a fair coin; the protected bit `A` equals `Y` with probability
//! `1 - ε`; the non-protected bit `X2` equals `Y` with probability `1 - 2ε`;
//! `A` and `X2` are independent given `Y`. Predicting `A` loses `ε` with
//! rate differences of 1, predicting `X2` loses `2ε` with rate differences
//! of 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMeta, LabeledPoint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DEpsParams {
    pub epsilon: f64,
    pub n: usize,
    pub seed: u64,
}

impl DEpsParams {
    pub fn new(epsilon: f64, n: usize, seed: u64) -> Result<Self> {
        let p = DEpsParams { epsilon, n, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.25) {
            return Err(Error::invalid(format!("epsilon {} not in (0, 0.25)", self.epsilon)));
        }
        if self.n == 0 {
            return Err(Error::invalid("sample size must be >= 1"));
        }
        Ok(())
    }
}

/// Draws `n` points with features `(A, X2)`, protected bit `A`.
///
/// The stream is ChaCha8 seeded from `seed`; per point, three uniforms are
/// consumed in the order `Y`, `A`, `X2`.
pub fn sample_d_epsilon(p: &DEpsParams) -> Result<Dataset> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let points = (0..p.n)
        .map(|_| {
            let y = rng.random::<f64>() < 0.5;
            let a = if rng.random::<f64>() < p.epsilon { !y } else { y };
            let x2 = if rng.random::<f64>() < 2.0 * p.epsilon { !y } else { y };
            LabeledPoint::new(vec![f64::from(u8::from(a)), f64::from(u8::from(x2))], a, y)
        })
        .collect();
    Dataset::new(
        points,
        FeatureMeta {
            feature_names: vec!["A".into(), "X2".into()],
            protected_index: Some(0),
            protected_name: "A".into(),
            label_name: "Y".into(),
        },
    )
}

/// Population 0-1 losses `(ε, 2ε)` of predicting `A` and predicting `X2`.
pub fn reference_losses(epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0 && epsilon < 0.25) {
        return Err(Error::invalid(format!("epsilon {epsilon} not in (0, 0.25)")));
    }
    Ok((epsilon, 2.0 * epsilon))
}

/// Predicts with a single feature coordinate: `ŷ = x_j`.
pub fn coordinate_rule(ds: &Dataset, j: usize) -> Vec<bool> {
    ds.points().iter().map(|p| p.features[j] >= 0.5).collect()
}
