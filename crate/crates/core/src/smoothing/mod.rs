//! Weighted penalised smoothing of log-rate curves.
//!
//! Each year's curve minimises
//! `sum_j w_j |y_j - theta_j| + lambda * sum_j |theta'_{j+1} - theta'_j|`
//! over cubic B-spline fits, with the absolute values replaced by
//! `sqrt(u^2 + eps^2)`. The surrogate is minimised by iteratively reweighted
//! least squares, which is a majorise-minimise scheme and so never increases
//! the surrogate objective. Fitted values at and above `monotone_from_age` are
//! then projected onto non-decreasing sequences.

mod basis;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{AgeGrid, DomainError, FunctionalSeries, GroupedDataset, Scale, SeriesKey};
use basis::Design;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothingError {
    #[error("invalid smoothing configuration: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("non-positive exposure at row {row}, column {col}")]
    NonPositiveExposure { row: usize, col: usize },
    #[error("observation {0} has positive weight but is not finite")]
    NonFiniteObservation(usize),
    #[error("fewer than two observations carry weight")]
    TooFewObservations,
    #[error("smoothing `{key}` year {year}: {source}")]
    Series {
        key: String,
        year: i32,
        #[source]
        source: Box<SmoothingError>,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Weight given to zero-death cells.
pub const ZERO_DEATH_WEIGHT: f64 = 0.5;
/// Continuity correction added to zero death counts before taking logs.
pub const ZERO_DEATH_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// Five-fold cross-validation over `lambda_grid`.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingConfig {
    pub monotone_from_age: f64,
    pub lambda: Lambda,
    pub lambda_grid: Vec<f64>,
    /// Interior knot count; `None` means `min(p / 2, 30)`.
    pub basis_knots: Option<usize>,
    pub huber_epsilon: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            monotone_from_age: 65.0,
            lambda: Lambda::Auto,
            lambda_grid: (0..13).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect(),
            basis_knots: None,
            huber_epsilon: 1e-4,
            max_iterations: 200,
            tolerance: 1e-8,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self, grid: &AgeGrid) -> Result<(), SmoothingError> {
        let bad = |m: &str| Err(SmoothingError::Config(m.to_string()));
        if !(self.monotone_from_age >= grid.first() && self.monotone_from_age <= grid.last()) {
            return bad("monotone_from_age lies outside the age grid");
        }
        match self.lambda {
            Lambda::Fixed(l) if !(l > 0.0 && l.is_finite()) => return bad("lambda must be positive"),
            Lambda::Auto if self.lambda_grid.is_empty() => return bad("lambda grid is empty"),
            _ => {}
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return bad("lambda grid values must be positive");
        }
        if !(self.huber_epsilon > 0.0) || !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return bad("epsilon, tolerance and iteration cap must be positive");
        }
        Ok(())
    }

    fn interior_knots(&self, p: usize) -> usize {
        self.basis_knots.unwrap_or((p / 2).min(30))
    }
}

/// Inverse Poisson variances `w = m E = D`, with zero-death cells at [`ZERO_DEATH_WEIGHT`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWeights {
    pub weights: DMatrix<f64>,
}

pub fn poisson_weights(deaths: &DMatrix<f64>, exposure: &DMatrix<f64>) -> Result<ObservationWeights, SmoothingError> {
    if deaths.shape() != exposure.shape() {
        return Err(SmoothingError::Shape("deaths and exposure differ in shape".into()));
    }
    let mut weights = DMatrix::zeros(deaths.nrows(), deaths.ncols());
    for row in 0..deaths.nrows() {
        for col in 0..deaths.ncols() {
            let (d, e) = (deaths[(row, col)], exposure[(row, col)]);
            if !(e > 0.0) {
                return Err(SmoothingError::NonPositiveExposure { row, col });
            }
            // sigma^2 = 1 / (m E) with m = D / E
            let m = d / e;
            weights[(row, col)] = if d > 0.0 { m * e } else { ZERO_DEATH_WEIGHT };
        }
    }
    Ok(ObservationWeights { weights })
}

/// Raw log rates, with zero counts replaced by `log((D + 0.5) / E)`.
pub fn raw_log_rates(deaths: &DMatrix<f64>, exposure: &DMatrix<f64>) -> DMatrix<f64> {
    deaths.zip_map(exposure, |d, e| {
        if d > 0.0 {
            (d / e).ln()
        } else {
            ((d + ZERO_DEATH_OFFSET) / e).ln()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFit {
    pub values: Vec<f64>,
    /// Exact (non-smoothed) objective at `values`.
    pub objective: f64,
    pub lambda: f64,
    pub iterations: usize,
    /// False when the iteration cap was reached first; `values` is then the last iterate.
    pub converged: bool,
}

/// Exact L1 objective `sum w |y - theta| + lambda sum |slope differences|`.
pub fn exact_objective(grid: &AgeGrid, raw: &[f64], weights: &[f64], theta: &[f64], lambda: f64) -> f64 {
    let z = grid.ages();
    let loss: f64 = raw
        .iter()
        .zip(weights)
        .zip(theta)
        .filter(|((_, w), _)| **w > 0.0)
        .map(|((y, w), t)| w * (y - t).abs())
        .sum();
    let penalty: f64 = (0..theta.len().saturating_sub(2))
        .map(|j| {
            let s0 = (theta[j + 1] - theta[j]) / (z[j + 1] - z[j]);
            let s1 = (theta[j + 2] - theta[j + 1]) / (z[j + 2] - z[j + 1]);
            (s1 - s0).abs()
        })
        .sum();
    loss + lambda * penalty
}

/// Weighted pool-adjacent-violators projection onto non-decreasing sequences.
pub fn isotonic_non_decreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // (weighted mean, total weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (m1, w1, c1) = blocks[n - 2];
            let (m2, w2, c2) = blocks[n - 1];
            if m1 <= m2 {
                break;
            }
            let w = w1 + w2;
            blocks.truncate(n - 2);
            blocks.push(((m1 * w1 + m2 * w2) / w, w, c1 + c2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

struct Problem<'a> {
    design: &'a Design,
    raw: &'a [f64],
    weights: &'a [f64],
    lambda: f64,
    eps: f64,
}

impl Problem<'_> {
    fn surrogate(&self, theta: &[f64], slopes: &[f64]) -> f64 {
        let e2 = self.eps * self.eps;
        let loss: f64 = self
            .raw
            .iter()
            .zip(self.weights)
            .zip(theta)
            .filter(|((_, w), _)| **w > 0.0)
            .map(|((y, w), t)| w * ((y - t).powi(2) + e2).sqrt())
            .sum();
        let pen: f64 = slopes.iter().map(|s| (s * s + e2).sqrt()).sum();
        loss + self.lambda * pen
    }

    /// Minimiser of `sum a_j (y_j - theta_j)^2 + sum b_i (D theta)_i^2`.
    fn weighted_solve(&self, a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let k = self.design.n_coef;
        let mut lhs = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        let mut accumulate = |row: &basis::BandRow, weight: f64, target: Option<f64>| {
            for (i, vi) in row.values.iter().enumerate() {
                let gi = row.start + i;
                if let Some(y) = target {
                    rhs[gi] += weight * vi * y;
                }
                for (j, vj) in row.values.iter().enumerate() {
                    lhs[(gi, row.start + j)] += weight * vi * vj;
                }
            }
        };
        for (j, row) in self.design.basis.iter().enumerate() {
            if a[j] > 0.0 {
                accumulate(row, a[j], Some(self.raw[j]));
            }
        }
        for (i, row) in self.design.roughness.iter().enumerate() {
            accumulate(row, b[i], None);
        }
        let trace: f64 = (0..k).map(|i| lhs[(i, i)]).sum();
        for attempt in 0..3 {
            let mut m = lhs.clone();
            if attempt > 0 {
                let ridge = trace * 1e-12 * 1e3f64.powi(attempt - 1);
                for i in 0..k {
                    m[(i, i)] += ridge;
                }
            }
            if let Some(chol) = m.cholesky() {
                let sol = chol.solve(&rhs);
                if sol.iter().all(|v| v.is_finite()) {
                    return Some(sol.iter().copied().collect());
                }
            }
        }
        None
    }

    fn slopes(&self, coef: &[f64]) -> Vec<f64> {
        self.design.roughness.iter().map(|r| r.dot(coef)).collect()
    }

    fn run(&self, max_iterations: usize, tolerance: f64) -> Option<(Vec<f64>, usize, bool)> {
        let p = self.raw.len();
        let m = self.design.roughness.len();
        // Start from the quadratic problem with the given weights and penalty.
        let coef = self.weighted_solve(self.weights, &vec![self.lambda; m])?;
        let mut theta = self.design.fitted(&coef);
        let mut slopes = self.slopes(&coef);
        let mut f = self.surrogate(&theta, &slopes);
        for iter in 1..=max_iterations {
            let a: Vec<f64> = (0..p)
                .map(|j| {
                    let w = self.weights[j];
                    if w > 0.0 {
                        w / ((self.raw[j] - theta[j]).powi(2) + self.eps * self.eps).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            let b: Vec<f64> = slopes
                .iter()
                .map(|s| self.lambda / (s * s + self.eps * self.eps).sqrt())
                .collect();
            let next = self.weighted_solve(&a, &b)?;
            let next_theta = self.design.fitted(&next);
            let next_slopes = self.slopes(&next);
            let next_f = self.surrogate(&next_theta, &next_slopes);
            debug_assert!(
                next_f <= f * (1.0 + 1e-9) + 1e-12,
                "surrogate objective increased from {f} to {next_f}"
            );
            let change = (f - next_f).abs();
            theta = next_theta;
            slopes = next_slopes;
            let done = change <= tolerance * next_f.abs().max(f64::MIN_POSITIVE);
            f = next_f;
            if done {
                return Some((theta, iter, true));
            }
        }
        Some((theta, max_iterations, false))
    }
}

fn fit_fixed(
    grid: &AgeGrid,
    design: &Design,
    raw: &[f64],
    weights: &[f64],
    lambda: f64,
    config: &SmoothingConfig,
) -> Result<SmoothFit, SmoothingError> {
    let problem = Problem {
        design,
        raw,
        weights,
        lambda,
        eps: config.huber_epsilon,
    };
    let (theta, iterations, converged) = problem
        .run(config.max_iterations, config.tolerance)
        .ok_or(SmoothingError::TooFewObservations)?;
    let values = project_monotone(grid, &theta, weights, config.monotone_from_age);
    let objective = exact_objective(grid, raw, weights, &values, lambda);
    Ok(SmoothFit {
        values,
        objective,
        lambda,
        iterations,
        converged,
    })
}

fn project_monotone(grid: &AgeGrid, theta: &[f64], weights: &[f64], from_age: f64) -> Vec<f64> {
    let Some(start) = grid.ages().iter().position(|a| *a >= from_age) else {
        return theta.to_vec();
    };
    let w: Vec<f64> = weights[start..].iter().map(|w| w.max(1e-8)).collect();
    let mut out = theta.to_vec();
    out[start..].copy_from_slice(&isotonic_non_decreasing(&theta[start..], &w));
    out
}

const CV_FOLDS: usize = 5;

/// Smooths one year's raw log-rate curve. Cells with zero weight are treated as
/// missing and imputed by the smoother.
pub fn smooth_curve(
    grid: &AgeGrid,
    raw: &[f64],
    weights: &[f64],
    config: &SmoothingConfig,
) -> Result<SmoothFit, SmoothingError> {
    let p = grid.len();
    if raw.len() != p || weights.len() != p {
        return Err(SmoothingError::Shape(format!(
            "curve has {} values and {} weights for {p} grid points",
            raw.len(),
            weights.len()
        )));
    }
    config.validate(grid)?;
    for (j, (y, w)) in raw.iter().zip(weights).enumerate() {
        if *w < 0.0 || !w.is_finite() {
            return Err(SmoothingError::Config(format!("weight {j} is negative or non-finite")));
        }
        if *w > 0.0 && !y.is_finite() {
            return Err(SmoothingError::NonFiniteObservation(j));
        }
    }
    if weights.iter().filter(|w| **w > 0.0).count() < 2 {
        return Err(SmoothingError::TooFewObservations);
    }
    let design = Design::new(grid.ages(), config.interior_knots(p));
    let lambda = match config.lambda {
        Lambda::Fixed(l) => l,
        Lambda::Auto => select_lambda(grid, &design, raw, weights, config)?,
    };
    fit_fixed(grid, &design, raw, weights, lambda, config)
}

fn select_lambda(
    grid: &AgeGrid,
    design: &Design,
    raw: &[f64],
    weights: &[f64],
    config: &SmoothingConfig,
) -> Result<f64, SmoothingError> {
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &config.lambda_grid {
        let mut score = 0.0;
        for fold in 0..CV_FOLDS {
            let train: Vec<f64> = weights
                .iter()
                .enumerate()
                .map(|(j, w)| if j % CV_FOLDS == fold { 0.0 } else { *w })
                .collect();
            if train.iter().filter(|w| **w > 0.0).count() < 2 {
                continue;
            }
            let fit = fit_fixed(grid, design, raw, &train, lambda, config)?;
            score += (fold..raw.len())
                .step_by(CV_FOLDS)
                .filter(|&j| weights[j] > 0.0)
                .map(|j| weights[j] * (raw[j] - fit.values[j]).abs())
                .sum::<f64>();
        }
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, lambda));
        }
    }
    Ok(best.map(|(_, l)| l).unwrap_or(config.lambda_grid[0]))
}

/// Smooths every series of the dataset on the log scale, one curve per year.
pub fn smooth_dataset(
    dataset: &GroupedDataset,
    config: &SmoothingConfig,
) -> Result<BTreeMap<SeriesKey, FunctionalSeries>, SmoothingError> {
    config.validate(dataset.grid())?;
    let keys = dataset.all_keys();
    let n = dataset.n_years();
    let p = dataset.grid().len();
    let tasks: Vec<(usize, usize)> = (0..keys.len()).flat_map(|k| (0..n).map(move |t| (k, t))).collect();
    let prepared: Vec<(DMatrix<f64>, DMatrix<f64>)> = keys
        .iter()
        .map(|k| {
            let c = &dataset.series(k)?.counts;
            Ok((raw_log_rates(&c.deaths, &c.exposure), poisson_weights(&c.deaths, &c.exposure)?.weights))
        })
        .collect::<Result<_, SmoothingError>>()?;
    let curves: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|&(k, t)| {
            let (raw, w) = &prepared[k];
            let raw: Vec<f64> = raw.row(t).iter().copied().collect();
            let w: Vec<f64> = w.row(t).iter().copied().collect();
            smooth_curve(dataset.grid(), &raw, &w, config)
                .map(|f| f.values)
                .map_err(|e| SmoothingError::Series {
                    key: keys[k].to_string(),
                    year: dataset.years()[t],
                    source: Box::new(e),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut out = BTreeMap::new();
    for (k, key) in keys.iter().enumerate() {
        let values = DMatrix::from_fn(n, p, |t, j| curves[k * n + t][j]);
        let series = FunctionalSeries::new(dataset.grid().clone(), dataset.years().to_vec(), values, Scale::LogRate)?;
        out.insert(key.clone(), series);
    }
    Ok(out)
}
