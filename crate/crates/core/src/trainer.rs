//! Logistic regression on the convex proxy objective
//!
//! ```text
//! -ll(θ; S) + c1 R_FP(θ; S) + c2 R_FN(θ; S) + q ‖θ‖²
//! ```
//!
//! where `ll` is the summed (not averaged) log-likelihood and the intercept
//! is left out of the ℓ2 term. The minimizer is a deterministic limited-memory
//! quasi-Newton descent with Armijo backtracking on the full objective value.
//! At an AVD kink the step follows the minimum-norm subgradient and stays on
//! the kink unless leaving it lowers the objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{DataSchema, Dataset, Encoding, Standardization};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;
const LBFGS_MEMORY: usize = 10;

/// Weights of a linear model over `features ++ [1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<f64>) -> Self {
        ModelParams { theta }
    }

    /// All-zero parameters for `dim` features plus the intercept.
    pub fn zeros(dim: usize) -> Self {
        ModelParams::new(vec![0.0; dim + 1])
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Number of features, i.e. without the intercept.
    pub fn feature_dim(&self) -> usize {
        self.theta.len().saturating_sub(1)
    }

    pub fn intercept(&self) -> f64 {
        *self.theta.last().expect("parameters include an intercept")
    }

    pub fn check_dim(&self, feature_dim: usize) -> Result<()> {
        if self.theta.len() != feature_dim + 1 {
            return Err(Error::DimensionMismatch {
                expected: feature_dim + 1,
                got: self.theta.len(),
            });
        }
        Ok(())
    }

    /// `θᵀv` over the full (intercept-included) coordinates.
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.theta.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Margin `θᵀ[x; 1]` of a raw feature vector.
    pub fn score(&self, x: &[f64]) -> f64 {
        let d = x.len();
        self.theta[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.theta[d]
    }
}

/// Predicts 1 iff `θᵀ[x; 1] >= 0`.
pub fn predict(theta: &ModelParams, x: &[f64]) -> Result<bool> {
    theta.check_dim(x.len())?;
    Ok(theta.score(x) >= 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub c1: f64,
    pub c2: f64,
    /// ℓ2 weight.
    pub q: f64,
    pub kind: PenaltyKind,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub obj_rel_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c1: 0.0,
            c2: 0.0,
            q: 0.0,
            kind: PenaltyKind::Sd,
            max_iters: 10_000,
            grad_tol: 1e-6,
            obj_rel_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn new(kind: PenaltyKind, c1: f64, c2: f64, q: f64) -> Self {
        TrainConfig {
            c1,
            c2,
            q,
            kind,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.q >= 0.0) {
            return Err(Error::invalid(format!(
                "c1, c2, q must be >= 0 (got {}, {}, {})",
                self.c1, self.c2, self.q
            )));
        }
        if !(self.grad_tol > 0.0 && self.obj_rel_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::invalid("tolerances must be positive and max_iters >= 1"));
        }
        Ok(())
    }

    fn check_spec(&self, spec: &PenaltySpec) -> Result<()> {
        if spec.c1 != self.c1 || spec.c2 != self.c2 || spec.kind != self.kind {
            return Err(Error::invalid("penalty spec does not match training config"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub final_proxy_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Proxy value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `Σ y log σ(z) + (1 - y) log(1 - σ(z))` with `z = θᵀ[x; 1]`.
pub fn log_likelihood(theta: &ModelParams, ds: &Dataset) -> Result<f64> {
    theta.check_dim(ds.dim())?;
    Ok(ds
        .points()
        .iter()
        .map(|p| {
            let z = theta.score(&p.features);
            if p.label {
                -softplus(-z)
            } else {
                -softplus(z)
            }
        })
        .sum())
}

/// The proxy objective bound to one training set.
struct Proxy<'a> {
    ds: &'a Dataset,
    q: f64,
    spec: &'a PenaltySpec,
}

impl Proxy<'_> {
    fn l2(&self, theta: &ModelParams) -> f64 {
        let d = theta.feature_dim();
        self.q * theta.theta[..d].iter().map(|t| t * t).sum::<f64>()
    }

    fn value(&self, theta: &ModelParams) -> Result<f64> {
        Ok(-log_likelihood(theta, self.ds)? + self.spec.weighted_value(theta)? + self.l2(theta))
    }

    /// Absolute-value penalty terms, which the minimizer treats separately.
    fn kinks(&self) -> Vec<Kink<'_>> {
        if self.spec.kind != PenaltyKind::Avd {
            return Vec::new();
        }
        [(self.spec.c1, &self.spec.xbar_fp), (self.spec.c2, &self.spec.xbar_fn)]
            .into_iter()
            .filter(|(c, a)| *c > 0.0 && a.iter().any(|x| *x != 0.0))
            .map(|(c, a)| Kink { c, a })
            .collect()
    }

    /// Value and gradient of everything except the AVD terms.
    fn smooth(&self, theta: &ModelParams) -> Result<(f64, Vec<f64>)> {
        let (nll_l2, mut grad) = self.unpenalized(theta)?;
        if self.spec.kind == PenaltyKind::Avd {
            return Ok((nll_l2, grad));
        }
        self.spec.add_weighted_gradient(theta, &mut grad)?;
        Ok((nll_l2 + self.spec.weighted_value(theta)?, grad))
    }

    fn value_and_gradient(&self, theta: &ModelParams) -> Result<(f64, Vec<f64>)> {
        let (nll_l2, mut grad) = self.unpenalized(theta)?;
        self.spec.add_weighted_gradient(theta, &mut grad)?;
        Ok((nll_l2 + self.spec.weighted_value(theta)?, grad))
    }

    fn unpenalized(&self, theta: &ModelParams) -> Result<(f64, Vec<f64>)> {
        theta.check_dim(self.ds.dim())?;
        let d = self.ds.dim();
        let mut grad = vec![0.0; d + 1];
        let mut nll = 0.0;
        for p in self.ds.points() {
            let z = theta.score(&p.features);
            let y = if p.label { 1.0 } else { 0.0 };
            nll += if p.label { softplus(-z) } else { softplus(z) };
            let r = sigmoid(z) - y;
            for (g, x) in grad[..d].iter_mut().zip(&p.features) {
                *g += r * x;
            }
            grad[d] += r;
        }
        for (g, t) in grad[..d].iter_mut().zip(&theta.theta) {
            *g += 2.0 * self.q * t;
        }
        Ok((nll + self.l2(theta), grad))
    }
}

/// `-ll + c1 R_FP + c2 R_FN + q ‖θ_{1..d}‖²`.
pub fn proxy_objective(theta: &ModelParams, ds: &Dataset, cfg: &TrainConfig, spec: &PenaltySpec) -> Result<f64> {
    cfg.check_spec(spec)?;
    Proxy { ds, q: cfg.q, spec }.value(theta)
}

/// Gradient of [`proxy_objective`]; the AVD term contributes its subgradient.
pub fn proxy_gradient(theta: &ModelParams, ds: &Dataset, cfg: &TrainConfig, spec: &PenaltySpec) -> Result<Vec<f64>> {
    cfg.check_spec(spec)?;
    Ok(Proxy { ds, q: cfg.q, spec }.value_and_gradient(theta)?.1)
}

/// Penalty spec for `cfg` on `ds`. Unweighted fits need no group statistics.
pub fn spec_for(ds: &Dataset, cfg: &TrainConfig) -> Result<PenaltySpec> {
    if cfg.c1 == 0.0 && cfg.c2 == 0.0 {
        let zero = vec![0.0; ds.dim() + 1];
        PenaltySpec::new(cfg.kind, zero.clone(), zero, 0.0, 0.0)
    } else {
        PenaltySpec::from_dataset(ds, cfg.kind, cfg.c1, cfg.c2)
    }
}

/// Minimizes the proxy objective on `ds` starting from `init`.
pub fn fit(ds: &Dataset, cfg: &TrainConfig, init: &ModelParams) -> Result<FitResult> {
    let spec = spec_for(ds, cfg)?;
    fit_with_spec(ds, cfg, &spec, init)
}

pub fn fit_with_spec(ds: &Dataset, cfg: &TrainConfig, spec: &PenaltySpec, init: &ModelParams) -> Result<FitResult> {
    cfg.validate()?;
    cfg.check_spec(spec)?;
    init.check_dim(ds.dim())?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot fit on an empty dataset"));
    }
    if ds.labels().all(|y| y) || ds.labels().all(|y| !y) {
        return Err(Error::invalid("training data must contain both labels"));
    }

    let proxy = Proxy { ds, q: cfg.q, spec };
    let kinks = proxy.kinks();
    let mut theta = init.clone();
    let (mut f, mut g) = proxy.smooth(&theta)?;
    f += kink_value(&kinks, &theta.theta);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut trace = vec![f];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iters {
        let (v, states) = pseudo_gradient(&g, &theta.theta, &kinks);
        let vnorm = norm(&v);
        if vnorm < cfg.grad_tol {
            converged = true;
            break;
        }

        let attempt = |direction: Vec<f64>, step: f64| -> Result<Option<ModelParams>> {
            let held = held_kinks(&kinks, &states, &direction);
            let direction = project_out(direction, &held);
            let slope = dot(&v, &direction);
            if slope.is_nan() || slope >= 0.0 {
                return Ok(None);
            }
            line_search(&proxy, &kinks, &states, &held, &theta, f, &v, &direction, step)
        };
        let steepest: Vec<f64> = v.iter().map(|x| -x).collect();
        let first_step = (1.0 / vnorm).min(1.0);
        let accepted = if memory.is_empty() {
            attempt(steepest, first_step)?
        } else {
            match attempt(two_loop(&v, &memory), 1.0)? {
                Some(c) => Some(c),
                None => {
                    // Quasi-Newton direction failed; retry once along the pseudo-gradient.
                    memory.clear();
                    attempt(steepest, first_step)?
                }
            }
        };
        let Some(candidate) = accepted else {
            break;
        };

        let (smooth_new, g_new) = proxy.smooth(&candidate)?;
        let f_new = smooth_new + kink_value(&kinks, &candidate.theta);
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: iterations + 1,
            });
        }
        let s: Vec<f64> = candidate.theta.iter().zip(&theta.theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }

        let decrease = f - f_new;
        theta = candidate;
        g = g_new;
        f = f_new;
        trace.push(f);
        iterations += 1;
        if decrease <= cfg.obj_rel_tol * f.abs() {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        params: theta,
        final_proxy_value: f,
        iterations,
        converged,
        trace,
    })
}

/// `c |aᵀθ|` with `a` nonzero.
struct Kink<'a> {
    c: f64,
    a: &'a [f64],
}

impl Kink<'_> {
    fn margin(&self, theta: &[f64]) -> f64 {
        dot(self.a, theta)
    }

    fn at_zero(&self, theta: &[f64]) -> bool {
        self.margin(theta).abs() <= 1e-12 * norm(self.a) * (1.0 + norm(theta))
    }
}

fn kink_value(kinks: &[Kink<'_>], theta: &[f64]) -> f64 {
    kinks.iter().map(|k| k.c * k.margin(theta).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum KinkState {
    /// Away from the kink; the sign of the margin.
    Off(f64),
    /// At the kink with a strictly interior subgradient coefficient.
    Held,
    /// At the kink, free to leave on the side with this sign.
    Leaving(f64),
}

/// Minimum-norm element of the subdifferential, and how each kink was treated.
fn pseudo_gradient(smooth_grad: &[f64], theta: &[f64], kinks: &[Kink<'_>]) -> (Vec<f64>, Vec<KinkState>) {
    let mut base = smooth_grad.to_vec();
    let mut states = Vec::with_capacity(kinks.len());
    let mut zero = Vec::new();
    for (i, k) in kinks.iter().enumerate() {
        if k.at_zero(theta) {
            zero.push(i);
            states.push(KinkState::Held);
        } else {
            let sign = k.margin(theta).signum();
            axpy(k.c * sign, k.a, &mut base);
            states.push(KinkState::Off(sign));
        }
    }
    if zero.is_empty() {
        return (base, states);
    }

    let w: Vec<Vec<f64>> = zero
        .iter()
        .map(|&i| kinks[i].a.iter().map(|x| kinks[i].c * x).collect())
        .collect();
    let n = zero.len();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    // Each coefficient is either free or pinned at ±1; the optimum is one of these.
    for code in 0..3usize.pow(n as u32) {
        let mut pinned = vec![None; n];
        let mut c = code;
        for p in pinned.iter_mut() {
            *p = match c % 3 {
                0 => None,
                1 => Some(-1.0),
                _ => Some(1.0),
            };
            c /= 3;
        }
        let mut r = base.clone();
        for (p, wi) in pinned.iter().zip(&w) {
            if let Some(s) = p {
                axpy(*s, wi, &mut r);
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
        let Some(sol) = solve_free(&w, &free, &r) else {
            continue;
        };
        if sol.iter().any(|s| s.abs() > 1.0 + 1e-12) {
            continue;
        }
        let mut coef: Vec<f64> = pinned.iter().map(|p| p.unwrap_or(0.0)).collect();
        for (&i, s) in free.iter().zip(&sol) {
            coef[i] = s.clamp(-1.0, 1.0);
            axpy(coef[i], &w[i], &mut r);
        }
        let sq = dot(&r, &r);
        if best.as_ref().is_none_or(|b| sq < b.0) {
            best = Some((sq, r, coef));
        }
    }
    let (_, v, coef) = best.expect("all-pinned combinations are always feasible");
    for (&i, s) in zero.iter().zip(&coef) {
        if s.abs() >= 1.0 - 1e-12 {
            states[i] = KinkState::Leaving(s.signum());
        }
    }
    (v, states)
}

/// Least-squares coefficients for the free columns: minimizes `‖r + Σ s_i w_i‖`.
fn solve_free(w: &[Vec<f64>], free: &[usize], r: &[f64]) -> Option<Vec<f64>> {
    match free {
        [] => Some(Vec::new()),
        [i] => Some(vec![-dot(&w[*i], r) / dot(&w[*i], &w[*i])]),
        [i, j] => {
            let (a, b, d) = (dot(&w[*i], &w[*i]), dot(&w[*i], &w[*j]), dot(&w[*j], &w[*j]));
            let det = a * d - b * b;
            if det <= 1e-12 * a * d {
                return None;
            }
            let (ri, rj) = (-dot(&w[*i], r), -dot(&w[*j], r));
            Some(vec![(d * ri - b * rj) / det, (a * rj - b * ri) / det])
        }
        _ => unreachable!("at most two penalty terms"),
    }
}

/// Kinks the step must not leave: interior ones, and boundary ones the
/// direction would push to the wrong side.
fn held_kinks<'a>(kinks: &'a [Kink<'a>], states: &[KinkState], direction: &[f64]) -> Vec<&'a [f64]> {
    kinks
        .iter()
        .zip(states)
        .filter(|(k, s)| match s {
            KinkState::Off(_) => false,
            KinkState::Held => true,
            KinkState::Leaving(sign) => sign * dot(k.a, direction) < 0.0,
        })
        .map(|(k, _)| k.a)
        .collect()
}

/// Removes from `x` its component in the span of `vs`.
fn project_out(mut x: Vec<f64>, vs: &[&[f64]]) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut u = v.to_vec();
        for b in &basis {
            let c = dot(b, &u);
            axpy(-c, b, &mut u);
        }
        let n = norm(&u);
        if n > 1e-10 * norm(v) {
            u.iter_mut().for_each(|x| *x /= n);
            basis.push(u);
        }
    }
    for b in &basis {
        let c = dot(b, &x);
        axpy(-c, b, &mut x);
    }
    x
}

/// Armijo backtracking on the full objective; only strict decreases are
/// accepted. A trial point whose margin would change sign is projected back
/// onto that kink.
#[allow(clippy::too_many_arguments)]
fn line_search(
    proxy: &Proxy<'_>,
    kinks: &[Kink<'_>],
    states: &[KinkState],
    held: &[&[f64]],
    theta: &ModelParams,
    f: f64,
    v: &[f64],
    direction: &[f64],
    initial_step: f64,
) -> Result<Option<ModelParams>> {
    let mut step = initial_step;
    while step >= MIN_STEP {
        let mut trial: Vec<f64> = theta.theta.iter().zip(direction).map(|(t, d)| t + step * d).collect();
        let mut pin: Vec<&[f64]> = held.to_vec();
        for (k, s) in kinks.iter().zip(states) {
            if let KinkState::Off(sign) = s {
                if sign * k.margin(&trial) < 0.0 {
                    pin.push(k.a);
                }
            }
        }
        if !pin.is_empty() {
            trial = project_out(trial, &pin);
        }
        let candidate = ModelParams::new(trial);
        let fc = proxy.value(&candidate)?;
        let moved: Vec<f64> = candidate.theta.iter().zip(&theta.theta).map(|(a, b)| a - b).collect();
        if fc.is_finite() && fc < f && fc <= f + ARMIJO_C * dot(v, &moved) {
            return Ok(Some(candidate));
        }
        step *= BACKTRACK;
    }
    Ok(None)
}

/// L-BFGS two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A trained model with everything needed to re-apply its preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub theta: Vec<f64>,
    pub standardization: Standardization,
    pub schema_hash: String,
    pub schema: DataSchema,
    pub encoding: Encoding,
    pub feature_names: Vec<String>,
    pub config: TrainConfig,
}

impl ModelFile {
    pub fn params(&self) -> ModelParams {
        ModelParams::new(self.theta.clone())
    }
}
