//! The train/select scheme and the post-processing baseline.
//!
//! For each repetition: split `Q` into `S`/`T`; for every `c` on the grid,
//! pick `q_c` by k-fold cross-validation on `S`, fit `θ_c` on all of `S`,
//! pick `θ*` minimizing the unrelaxed objective on `S`, and report metrics of
//! `θ*` on `T`. Every fit task is independent, so they run on the ambient
//! rayon pool; results are gathered in grid order and are identical for any
//! thread count.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Group};
use crate::metrics::{self, Confusion, EvalSummary, GroupRates};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::trainer::{self, ModelParams, TrainConfig};
use crate::{Error, Result};

/// Extra split attempts when a split leaves some `S_ay` empty.
pub const MAX_SPLIT_RETRIES: usize = 10;

/// How a single sweep weight `c` maps onto `(c1, c2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    FpOnly,
    FnOnly,
    Both,
}

impl WeightMode {
    pub fn weights(self, c: f64) -> (f64, f64) {
        match self {
            WeightMode::FpOnly => (c, 0.0),
            WeightMode::FnOnly => (0.0, c),
            WeightMode::Both => (c, c),
        }
    }
}

/// Candidate ℓ2 weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QGrid {
    Fixed(Vec<f64>),
    /// Multiplied by the size of the training split before use.
    PerSample(Vec<f64>),
}

impl QGrid {
    pub fn resolve(&self, n_train: usize) -> Vec<f64> {
        match self {
            QGrid::Fixed(v) => v.clone(),
            QGrid::PerSample(v) => v.iter().map(|q| q * n_train as f64).collect(),
        }
    }
}

/// `n` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

pub fn default_c_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend(geomspace(1.0, 2000.0, 16));
    g
}

pub fn default_q_grid() -> QGrid {
    QGrid::PerSample(geomspace(1e-4, 1.0, 8))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Weights of `D_FPR` and `D_FNR` in the selection objective.
    pub d1: f64,
    pub d2: f64,
    pub c_grid: Vec<f64>,
    pub q_grid: QGrid,
    pub weight_mode: WeightMode,
    pub kind: PenaltyKind,
    pub folds: usize,
    pub repetitions: usize,
    pub test_fraction: f64,
    pub seed: u64,
    /// Z-score features with training-split statistics.
    pub standardize: bool,
    /// Stratify the train/test split on the four `S_ay` cells.
    pub stratify: bool,
    /// Solver settings; the weights in it are overridden per task.
    pub solver: TrainConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            d1: 1.0,
            d2: 1.0,
            c_grid: default_c_grid(),
            q_grid: default_q_grid(),
            weight_mode: WeightMode::Both,
            kind: PenaltyKind::Avd,
            folds: 5,
            repetitions: 5,
            test_fraction: 0.3,
            seed: 1,
            standardize: true,
            stratify: false,
            solver: TrainConfig::default(),
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d1 >= 0.0 && self.d2 >= 0.0) {
            return Err(Error::invalid("d1, d2 must be >= 0"));
        }
        if self.c_grid.first() != Some(&0.0) {
            return Err(Error::invalid("c grid must start at 0"));
        }
        if self
            .c_grid
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::invalid("c grid must be strictly ascending"));
        }
        let qs = match &self.q_grid {
            QGrid::Fixed(v) | QGrid::PerSample(v) => v,
        };
        if qs.is_empty() || qs.iter().any(|q| q.is_nan() || *q < 0.0) {
            return Err(Error::invalid("q grid must be non-empty with values >= 0"));
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be >= 1"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds must be >= 2"));
        }
        self.solver.validate()
    }

    fn train_config(&self, c: f64, q: f64) -> TrainConfig {
        let (c1, c2) = self.weight_mode.weights(c);
        TrainConfig {
            c1,
            c2,
            q,
            kind: self.kind,
            ..self.solver.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Metrics of one fitted `θ_c` on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub q_selected: f64,
    pub split: Split,
    pub accuracy: f64,
    pub d_fpr: f64,
    pub d_fnr: f64,
    /// Unweighted relaxed penalizers at `θ_c`, with this split's `x̄`.
    pub relaxed_fp: f64,
    pub relaxed_fn: f64,
    /// Unrelaxed objective with the scheme's `d1, d2` on this split.
    pub objective_value: f64,
}

impl SweepPoint {
    fn new(c: f64, q: f64, split: Split, theta: &ModelParams, ds: &Dataset, cfg: &SchemeConfig) -> Result<Self> {
        let summary = metrics::evaluate(theta, ds)?;
        let (relaxed_fp, relaxed_fn) = PenaltySpec::from_dataset(ds, cfg.kind, 0.0, 0.0)?.value(theta)?;
        Ok(SweepPoint {
            c,
            q_selected: q,
            split,
            accuracy: summary.accuracy,
            d_fpr: summary.rates.d_fpr,
            d_fnr: summary.rates.d_fnr,
            relaxed_fp,
            relaxed_fn,
            objective_value: summary.objective(cfg.d1, cfg.d2),
        })
    }
}

/// Cross-validation outcome for one `(c1, c2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub q: f64,
    /// `(q, mean validation objective)` over the grid, in grid order.
    pub scores: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub rep: usize,
    pub split_seed: u64,
    pub split_retries: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub cv: Vec<CvSelection>,
    pub thetas: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub train_points: Vec<SweepPoint>,
    pub test_points: Vec<SweepPoint>,
    pub selected_index: usize,
    pub selected_c: f64,
    pub final_test: EvalSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub d_fpr: f64,
    pub d_fnr: f64,
}

impl MeanMetrics {
    fn of<'a>(items: impl Iterator<Item = (f64, f64, f64)> + 'a) -> Self {
        let (mut a, mut f, mut g, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (x, y, z) in items {
            a += x;
            f += y;
            g += z;
            n += 1;
        }
        let n = n.max(1) as f64;
        MeanMetrics {
            accuracy: a / n,
            d_fpr: f / n,
            d_fnr: g / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub config: SchemeConfig,
    pub repetitions: Vec<RepetitionReport>,
    /// Test metrics of `θ*`, averaged over repetitions.
    pub mean_selected: MeanMetrics,
    /// Test metrics per grid value, averaged over repetitions.
    pub mean_curve: Vec<(f64, MeanMetrics)>,
}

pub const TSV_COLUMNS: [&str; 10] = [
    "rep",
    "c",
    "q",
    "split",
    "accuracy",
    "d_fpr",
    "d_fnr",
    "relaxed_fp",
    "relaxed_fn",
    "objective",
];

impl SchemeReport {
    /// One row per (repetition, c) with test-split metrics.
    pub fn to_tsv(&self) -> String {
        let mut out = TSV_COLUMNS.join("\t");
        out.push('\n');
        for rep in &self.repetitions {
            for p in &rep.test_points {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    rep.rep,
                    p.c,
                    p.q_selected,
                    p.split.as_str(),
                    p.accuracy,
                    p.d_fpr,
                    p.d_fnr,
                    p.relaxed_fp,
                    p.relaxed_fn,
                    p.objective_value
                )
                .expect("writing to a String");
            }
        }
        out
    }
}

/// Selects `q` for fixed penalty weights by k-fold cross-validation on `s`,
/// scoring each fold's fit by the unrelaxed objective on its validation part.
/// The smallest mean wins; ties go to the larger `q`.
#[allow(clippy::too_many_arguments)]
pub fn cv_select_q(
    s: &Dataset,
    c1: f64,
    c2: f64,
    kind: PenaltyKind,
    q_grid: &[f64],
    folds: usize,
    seed: u64,
    d1: f64,
    d2: f64,
    solver: &TrainConfig,
) -> Result<CvSelection> {
    let folds = prepare_folds(s, folds, seed, kind)?;
    cv_with_folds(&folds, c1, c2, kind, q_grid, d1, d2, solver)
}

struct Fold {
    train: Dataset,
    validation: Dataset,
    spec: PenaltySpec,
}

fn prepare_folds(s: &Dataset, k: usize, seed: u64, kind: PenaltyKind) -> Result<Vec<Fold>> {
    data::kfold(s, k, seed)?
        .into_iter()
        .map(|(train, validation)| {
            train.require_all_groups()?;
            validation.require_all_groups()?;
            let spec = PenaltySpec::from_dataset(&train, kind, 0.0, 0.0)?;
            Ok(Fold {
                train,
                validation,
                spec,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cv_with_folds(
    folds: &[Fold],
    c1: f64,
    c2: f64,
    kind: PenaltyKind,
    q_grid: &[f64],
    d1: f64,
    d2: f64,
    solver: &TrainConfig,
) -> Result<CvSelection> {
    if q_grid.is_empty() {
        return Err(Error::invalid("empty q grid"));
    }
    let tasks: Vec<(usize, usize)> = (0..q_grid.len())
        .flat_map(|qi| (0..folds.len()).map(move |fi| (qi, fi)))
        .collect();
    let objectives: Vec<f64> = tasks
        .par_iter()
        .map(|&(qi, fi)| {
            let fold = &folds[fi];
            let cfg = TrainConfig {
                c1,
                c2,
                q: q_grid[qi],
                kind,
                ..solver.clone()
            };
            let spec = fold.spec.with_weights(c1, c2)?;
            let fit = trainer::fit_with_spec(&fold.train, &cfg, &spec, &ModelParams::zeros(fold.train.dim()))?;
            metrics::objective(&fit.params, &fold.validation, d1, d2)
        })
        .collect::<Result<_>>()?;

    let k = folds.len() as f64;
    let scores: Vec<(f64, f64)> = q_grid
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let total: f64 = objectives[qi * folds.len()..(qi + 1) * folds.len()].iter().sum();
            (q, total / k)
        })
        .collect();
    let best = scores
        .iter()
        .copied()
        .reduce(|best, cand| {
            if cand.1 < best.1 || (cand.1 == best.1 && cand.0 > best.0) {
                cand
            } else {
                best
            }
        })
        .expect("non-empty grid");
    Ok(CvSelection { q: best.0, scores })
}

/// Index of the smallest objective; ties keep the earlier (smaller `c`) entry.
pub fn select_index(objectives: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in objectives.iter().enumerate() {
        if v < objectives[best] {
            best = i;
        }
    }
    best
}

fn split_seed(seed: u64, rep: usize, retry: usize) -> u64 {
    seed.wrapping_add(1000 * rep as u64).wrapping_add(retry as u64)
}

fn cv_seed(split_seed: u64) -> u64 {
    split_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Runs the full scheme on `q_data`.
pub fn run_scheme(q_data: &Dataset, cfg: &SchemeConfig) -> Result<SchemeReport> {
    cfg.validate()?;
    let mut reps = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        reps.push(run_repetition(q_data, cfg, rep)?);
    }

    let mean_selected = MeanMetrics::of(reps.iter().map(|r| {
        (
            r.final_test.accuracy,
            r.final_test.rates.d_fpr,
            r.final_test.rates.d_fnr,
        )
    }));
    let mean_curve = cfg
        .c_grid
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let m = MeanMetrics::of(reps.iter().map(|r| {
                let p = &r.test_points[ci];
                (p.accuracy, p.d_fpr, p.d_fnr)
            }));
            (c, m)
        })
        .collect();

    Ok(SchemeReport {
        config: cfg.clone(),
        repetitions: reps,
        mean_selected,
        mean_curve,
    })
}

fn run_repetition(q_data: &Dataset, cfg: &SchemeConfig, rep: usize) -> Result<RepetitionReport> {
    let mut attempt = None;
    let mut last_err = None;
    for retry in 0..=MAX_SPLIT_RETRIES {
        let seed = split_seed(cfg.seed, rep, retry);
        let (train, test) = if cfg.stratify {
            data::split_stratified(q_data, cfg.test_fraction, seed)?
        } else {
            data::split(q_data, cfg.test_fraction, seed)?
        };
        match train.require_all_groups().and_then(|_| test.require_all_groups()) {
            Ok(()) => {
                attempt = Some((seed, retry, train, test));
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((seed, retries, train, test)) = attempt else {
        return Err(last_err.expect("at least one split attempted"));
    };
    let (train, test) = if cfg.standardize {
        let (a, b, _) = data::standardize(&train, &test)?;
        (a, b)
    } else {
        (train, test)
    };

    let q_grid = cfg.q_grid.resolve(train.len());
    let folds = prepare_folds(&train, cfg.folds, cv_seed(seed), cfg.kind).map_err(|e| Error::Sweep {
        rep,
        c: cfg.c_grid[0],
        source: Box::new(e),
    })?;
    let train_spec = PenaltySpec::from_dataset(&train, cfg.kind, 0.0, 0.0)?;

    struct Fitted {
        cv: CvSelection,
        theta: ModelParams,
        converged: bool,
        train_point: SweepPoint,
        test_point: SweepPoint,
    }

    let fitted: Vec<Fitted> = cfg
        .c_grid
        .par_iter()
        .map(|&c| {
            let wrap = |e: Error| Error::Sweep {
                rep,
                c,
                source: Box::new(e),
            };
            let (c1, c2) = cfg.weight_mode.weights(c);
            let cv = cv_with_folds(&folds, c1, c2, cfg.kind, &q_grid, cfg.d1, cfg.d2, &cfg.solver).map_err(wrap)?;
            let tc = cfg.train_config(c, cv.q);
            let spec = train_spec.with_weights(c1, c2)?;
            let fit = trainer::fit_with_spec(&train, &tc, &spec, &ModelParams::zeros(train.dim())).map_err(wrap)?;
            let train_point = SweepPoint::new(c, cv.q, Split::Train, &fit.params, &train, cfg).map_err(wrap)?;
            let test_point = SweepPoint::new(c, cv.q, Split::Test, &fit.params, &test, cfg).map_err(wrap)?;
            Ok(Fitted {
                cv,
                theta: fit.params,
                converged: fit.converged,
                train_point,
                test_point,
            })
        })
        .collect::<Result<_>>()?;

    let objectives: Vec<f64> = fitted.iter().map(|f| f.train_point.objective_value).collect();
    let selected_index = select_index(&objectives);
    let final_test = metrics::evaluate(&fitted[selected_index].theta, &test)?;

    let mut report = RepetitionReport {
        rep,
        split_seed: seed,
        split_retries: retries,
        train_size: train.len(),
        test_size: test.len(),
        cv: Vec::new(),
        thetas: Vec::new(),
        converged: Vec::new(),
        train_points: Vec::new(),
        test_points: Vec::new(),
        selected_index,
        selected_c: cfg.c_grid[selected_index],
        final_test,
    };
    for f in fitted {
        report.cv.push(f.cv);
        report.thetas.push(f.theta.theta);
        report.converged.push(f.converged);
        report.train_points.push(f.train_point);
        report.test_points.push(f.test_point);
    }
    Ok(report)
}

/// Group-dependent random flips applied on top of a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedPredictor {
    pub base: ModelParams,
    /// Probability of turning a predicted 1 into 0, per protected group.
    pub flip_pos_to_neg: [f64; 2],
    /// Probability of turning a predicted 0 into 1, per protected group.
    pub flip_neg_to_pos: [f64; 2],
    pub seed: u64,
}

/// Expected confusion counts of a randomized predictor, per group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub false_pos: [f64; 2],
    pub false_neg: [f64; 2],
    pub negatives: [usize; 2],
    pub positives: [usize; 2],
}

impl ExpectedCounts {
    pub fn rates(&self) -> GroupRates {
        GroupRates::new(
            self.false_pos[0] / self.negatives[0] as f64,
            self.false_pos[1] / self.negatives[1] as f64,
            self.false_neg[0] / self.positives[0] as f64,
            self.false_neg[1] / self.positives[1] as f64,
        )
    }

    pub fn errors(&self) -> f64 {
        self.false_pos.iter().chain(&self.false_neg).sum()
    }

    pub fn total(&self) -> usize {
        self.negatives.iter().chain(&self.positives).sum()
    }
}

/// Expected `(FP, FN)` of one group after flipping predicted positives with
/// probability `p` and predicted negatives with probability `r`.
fn flipped_counts(fp: usize, fnr: usize, neg: usize, pos: usize, p: f64, r: f64) -> (f64, f64) {
    let (fp, fnr, neg, pos) = (fp as f64, fnr as f64, neg as f64, pos as f64);
    (fp * (1.0 - p) + (neg - fp) * r, fnr * (1.0 - r) + (pos - fnr) * p)
}

impl RandomizedPredictor {
    pub fn unchanged(base: ModelParams, seed: u64) -> Self {
        RandomizedPredictor {
            base,
            flip_pos_to_neg: [0.0; 2],
            flip_neg_to_pos: [0.0; 2],
            seed,
        }
    }

    /// Closed-form expected counts on `ds`.
    pub fn expected_counts(&self, ds: &Dataset) -> Result<ExpectedCounts> {
        let c = Confusion::tally(&metrics::predictions(&self.base, ds)?, ds)?;
        let mut out = ExpectedCounts {
            false_pos: [0.0; 2],
            false_neg: [0.0; 2],
            negatives: [0; 2],
            positives: [0; 2],
        };
        for a in 0..2 {
            let g = c.groups[a];
            let (fp, fnr) = flipped_counts(
                g.false_pos,
                g.false_neg,
                g.negatives,
                g.positives,
                self.flip_pos_to_neg[a],
                self.flip_neg_to_pos[a],
            );
            out.false_pos[a] = fp;
            out.false_neg[a] = fnr;
            out.negatives[a] = g.negatives;
            out.positives[a] = g.positives;
        }
        Ok(out)
    }

    /// Expected accuracy and rates; errors if a group cell is empty.
    pub fn expected_summary(&self, ds: &Dataset) -> Result<EvalSummary> {
        let e = self.expected_counts(ds)?;
        for (a, (&neg, &pos)) in e.negatives.iter().zip(&e.positives).enumerate() {
            if neg == 0 {
                return Err(Error::EmptyGroup(Group::new(a == 1, false)));
            }
            if pos == 0 {
                return Err(Error::EmptyGroup(Group::new(a == 1, true)));
            }
        }
        Ok(EvalSummary::from_loss(
            e.errors() / e.total() as f64,
            e.rates(),
            e.total(),
        ))
    }

    /// One randomized draw per point from a ChaCha8 stream seeded by `seed`.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<bool>> {
        self.predict_with_seed(ds, self.seed)
    }

    pub fn predict_with_seed(&self, ds: &Dataset, seed: u64) -> Result<Vec<bool>> {
        let base = metrics::predictions(&self.base, ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ds
            .points()
            .iter()
            .zip(base)
            .map(|(p, yhat)| {
                let a = p.protected as usize;
                let flip = if yhat {
                    self.flip_pos_to_neg[a]
                } else {
                    self.flip_neg_to_pos[a]
                };
                let u: f64 = rng.random();
                yhat ^ (u < flip)
            })
            .collect())
    }

    /// Metrics of the seeded draw.
    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalSummary> {
        EvalSummary::from_predictions(&self.predict(ds)?, ds)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    p: f64,
    r: f64,
    fpr: f64,
    fnr: f64,
    errors: f64,
    /// `p + r` in grid steps; smaller is preferred among equal errors.
    steps: usize,
}

const TIE_EPS: f64 = 1e-9;
const FEASIBILITY_EPS: f64 = 1e-12;

/// Grid search over per-group flip probabilities minimizing expected 0-1
/// loss on `s` subject to expected `D_FPR <= target` and `D_FNR <= target`.
///
/// Among equal-loss solutions the one with the fewest total grid steps of
/// flipping wins, so an already-fair classifier is returned unchanged.
pub fn postprocess_equalize(
    theta: &ModelParams,
    s: &Dataset,
    target: f64,
    resolution: f64,
    seed: u64,
) -> Result<RandomizedPredictor> {
    if target.is_nan() || target < 0.0 {
        return Err(Error::invalid(format!("target {target} must be >= 0")));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::invalid(format!("resolution {resolution} not in (0, 1]")));
    }
    let steps = (1.0 / resolution).round() as usize;
    if ((steps as f64) * resolution - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("resolution {resolution} does not divide 1")));
    }
    s.require_all_groups()?;
    let conf = Confusion::tally(&metrics::predictions(theta, s)?, s)?;

    let grid: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let candidates: Vec<Vec<Candidate>> = conf
        .groups
        .iter()
        .map(|g| {
            let mut v = Vec::with_capacity(grid.len() * grid.len());
            for (kp, &p) in grid.iter().enumerate() {
                for (kr, &r) in grid.iter().enumerate() {
                    let (fp, fnr) = flipped_counts(g.false_pos, g.false_neg, g.negatives, g.positives, p, r);
                    v.push(Candidate {
                        p,
                        r,
                        fpr: fp / g.negatives as f64,
                        fnr: fnr / g.positives as f64,
                        errors: fp + fnr,
                        steps: kp + kr,
                    });
                }
            }
            v.sort_by(|a, b| a.errors.total_cmp(&b.errors).then(a.steps.cmp(&b.steps)));
            v
        })
        .collect();

    // Bucket group-1 candidates on a (fpr, fnr) lattice whose cell width is
    // at least the tolerance, so feasible partners lie in the 3x3 neighbourhood.
    let width = target + 1e-6;
    let cell = |v: f64| (v / width).floor() as i64;
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, c) in candidates[1].iter().enumerate() {
        buckets.entry((cell(c.fpr), cell(c.fnr))).or_default().push(i);
    }
    let min_err1 = candidates[1][0].errors;
    let tol = target + FEASIBILITY_EPS;

    let better = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 - TIE_EPS || (a.0 <= b.0 + TIE_EPS && a.1 < b.1);
    let mut best: Option<((f64, usize), Candidate, Candidate)> = None;
    for c0 in &candidates[0] {
        if let Some((score, _, _)) = best {
            if c0.errors + min_err1 > score.0 + TIE_EPS {
                break;
            }
        }
        let (bx, by) = (cell(c0.fpr), cell(c0.fnr));
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(list) = buckets.get(&(bx + dx, by + dy)) else {
                    continue;
                };
                // Lists are error-sorted: take the cheapest feasible partner,
                // then the fewest flip steps among those tied with it.
                let mut partner: Option<&Candidate> = None;
                for c1 in list.iter().map(|&i| &candidates[1][i]) {
                    if let Some(p) = partner {
                        if c1.errors > p.errors + TIE_EPS {
                            break;
                        }
                    }
                    let feasible = (c0.fpr - c1.fpr).abs() <= tol && (c0.fnr - c1.fnr).abs() <= tol;
                    if feasible && partner.is_none_or(|p| c1.steps < p.steps) {
                        partner = Some(c1);
                    }
                }
                if let Some(c1) = partner {
                    let score = (c0.errors + c1.errors, c0.steps + c1.steps);
                    if best.is_none_or(|(b, _, _)| better(score, b)) {
                        best = Some((score, *c0, *c1));
                    }
                }
            }
        }
    }
    let (_, c0, c1) = best.expect("full randomization is always feasible");
    Ok(RandomizedPredictor {
        base: theta.clone(),
        flip_pos_to_neg: [c0.p, c1.p],
        flip_neg_to_pos: [c0.r, c1.r],
        seed,
    })
}
