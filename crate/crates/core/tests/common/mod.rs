//! Oracles shared by the integration tests. Nothing here calls into the
//! code paths it is used to check.
#![allow(dead_code)]

use fairpen::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rates by literal set-builder counting:
/// `FPR_a = |{ŷ=1, y=0, A=a}| / |{y=0, A=a}|`, `FNR_a` likewise.
/// Returns `None` when a denominator is zero.
pub fn counting_rates(pred: &[bool], ds: &Dataset) -> Option<[f64; 4]> {
    let count = |f: &dyn Fn(usize) -> bool| (0..ds.len()).filter(|&i| f(i)).count();
    let pts = ds.points();
    let mut out = [0.0; 4];
    for a in [false, true] {
        let neg = count(&|i| !pts[i].label && pts[i].protected == a);
        let pos = count(&|i| pts[i].label && pts[i].protected == a);
        if neg == 0 || pos == 0 {
            return None;
        }
        let fp = count(&|i| pred[i] && !pts[i].label && pts[i].protected == a);
        let fnr = count(&|i| !pred[i] && pts[i].label && pts[i].protected == a);
        out[a as usize] = fp as f64 / neg as f64;
        out[2 + a as usize] = fnr as f64 / pos as f64;
    }
    Some(out)
}

/// `wrong / n + d1 |FPR_0 - FPR_1| + d2 |FNR_0 - FNR_1|` by counting.
pub fn counting_objective(pred: &[bool], ds: &Dataset, d1: f64, d2: f64) -> Option<f64> {
    let r = counting_rates(pred, ds)?;
    let wrong = ds.points().iter().zip(pred).filter(|(p, &y)| p.label != y).count();
    Some(wrong as f64 / ds.len() as f64 + d1 * (r[0] - r[1]).abs() + d2 * (r[2] - r[3]).abs())
}

/// Central finite-difference gradient.
pub fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// Newton's method on `Σ log(1 + e^{-s_i z_i}) + q ‖w‖²` (intercept, the last
/// coordinate, unpenalized) using a dense Hessian solve. Returns the
/// minimizer and minimum.
pub fn newton_logistic(ds: &Dataset, q: f64) -> (Vec<f64>, f64) {
    let d = ds.dim();
    let n = ds.len();
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { ds.points()[i].features[j] });
    let y = DVector::from_fn(n, |i, _| if ds.points()[i].label { 1.0 } else { 0.0 });
    let mut reg = DMatrix::<f64>::identity(d + 1, d + 1) * (2.0 * q);
    reg[(d, d)] = 0.0;
    let objective = |w: &DVector<f64>| {
        let z = &x * w;
        let mut v = 0.0;
        for i in 0..n {
            // log(1 + e^z) - y z, written without a softplus helper.
            let zi = z[i];
            let lse = if zi > 0.0 {
                zi + (1.0 + (-zi).exp()).ln()
            } else {
                (1.0 + zi.exp()).ln()
            };
            v += lse - y[i] * zi;
        }
        v + q * w.rows(0, d).norm_squared()
    };
    let mut w = DVector::<f64>::zeros(d + 1);
    for _ in 0..100 {
        let z = &x * &w;
        let p = z.map(|t| 1.0 / (1.0 + (-t).exp()));
        let grad = x.transpose() * (&p - &y) + &reg * &w;
        let s = p.map(|t| t * (1.0 - t));
        let mut h = reg.clone();
        for i in 0..n {
            let row = x.row(i);
            h += row.transpose() * row * s[i];
        }
        let step = h.lu().solve(&grad).expect("positive definite Hessian");
        // Damped step: halve until the objective does not increase.
        let f0 = objective(&w);
        let mut t = 1.0;
        let mut next = &w - &step * t;
        while objective(&next) > f0 && t > 1e-10 {
            t *= 0.5;
            next = &w - &step * t;
        }
        w = next;
        if grad.norm() < 1e-12 {
            break;
        }
    }
    let f = objective(&w);
    (w.iter().copied().collect(), f)
}

/// A random dataset with every `S_ay` non-empty and Gaussian-ish features.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, extra_dims: usize) -> Dataset {
    loop {
        let rows: Vec<(Vec<f64>, bool, bool)> = (0..n)
            .map(|_| {
                let a = rng.random::<bool>();
                let y = rng.random::<bool>();
                let shift = if y { 0.7 } else { -0.7 };
                let x = (0..extra_dims)
                    .map(|j| rng.random_range(-1.5..1.5) + if j == 0 { shift } else { 0.0 })
                    .collect();
                (x, a, y)
            })
            .collect();
        let ds = Dataset::from_rows(rows, true).unwrap();
        if ds.require_all_groups().is_ok() {
            return ds;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// All `2^n` prediction vectors.
pub fn all_predictions(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..(1 << n)).map(move |mask| (0..n).map(|i| mask >> i & 1 == 1).collect())
}
