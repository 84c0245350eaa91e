//! Empirical functional principal components and score-based curve forecasts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::arima::{ArimaError, UnivariateForecaster};
use crate::domain::{AgeGrid, FunctionalSeries, Scale};

pub const DEFAULT_DELTA: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("need at least 3 curves, got {0}")]
    TooFewCurves(usize),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("series must be on the log-rate scale")]
    WrongScale,
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("h_max must be at least 1")]
    InvalidHorizon,
    #[error("forecasting score column {component}: {source}")]
    Forecast {
        component: usize,
        #[source]
        source: ArimaError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpcModel {
    pub grid: AgeGrid,
    pub mean: DVector<f64>,
    /// K x p, orthonormal under the trapezoidal inner product.
    pub eigenfunctions: DMatrix<f64>,
    /// Leading K eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Every positive eigenvalue, non-increasing.
    pub spectrum: Vec<f64>,
    /// n x K.
    pub scores: DMatrix<f64>,
    /// n x p.
    pub residuals: DMatrix<f64>,
    pub delta: f64,
    pub total_variance: f64,
    /// Set when every curve is identical.
    pub degenerate: bool,
}

impl FpcModel {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }

    /// Curve `mean + sum_k scores[k] * phi_k`.
    pub fn reconstruct(&self, scores: &[f64]) -> DVector<f64> {
        let mut out = self.mean.clone();
        for (k, s) in scores.iter().enumerate() {
            out += self.eigenfunctions.row(k).transpose() * *s;
        }
        out
    }

    /// Cumulative proportion of variance explained by the first 1, 2, ... components.
    pub fn explained_variance(&self) -> Vec<f64> {
        cumulative_share(&self.spectrum)
    }

    /// The input curves, `mean + scores * eigenfunctions + residuals`.
    pub fn fitted_input(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = &self.scores * &self.eigenfunctions + &self.residuals;
        for t in 0..n {
            for j in 0..self.mean.len() {
                out[(t, j)] += self.mean[j];
            }
        }
        out
    }
}

fn cumulative_share(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    spectrum
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

/// Smallest K whose cumulative share reaches `delta` (at least 1).
pub fn select_k(spectrum: &[f64], delta: f64) -> usize {
    cumulative_share(spectrum)
        .iter()
        .position(|s| *s >= delta)
        .map_or(spectrum.len().max(1), |i| i + 1)
}

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

pub fn fit_fpca(series: &FunctionalSeries, delta: f64) -> Result<FpcModel, FpcaError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(FpcaError::InvalidDelta(delta));
    }
    if series.scale() != Scale::LogRate {
        return Err(FpcaError::WrongScale);
    }
    let x = series.values();
    let (n, p) = x.shape();
    if n < 3 {
        return Err(FpcaError::TooFewCurves(n));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FpcaError::NonFinite);
    }
    let grid = series.grid().clone();
    let w = grid.trapezoid_weights();
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mean = DVector::from_fn(p, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, p, |t, j| x[(t, j)] - mean[j]);

    // Eigenvectors of W^{1/2} C W^{1/2} are W^{1/2} phi. (A symmetric eigensolver
    // rather than an SVD of the data: the latter loses accuracy on wide inputs.)
    let y = DMatrix::from_fn(n, p, |t, j| centered[(t, j)] * sqrt_w[j]);
    let mut gram = y.transpose() * &y / (n - 1) as f64;
    gram = (&gram + gram.transpose()) * 0.5;
    let eigen = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|a, b| eigen.eigenvalues[*b].total_cmp(&eigen.eigenvalues[*a]).then(a.cmp(b)));
    let all: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
    // Variation at rounding level (e.g. from averaging identical curves) counts as none.
    let rounding = 1e-10 * x.amax();
    let absolute = rounding * rounding * (grid.last() - grid.first());
    let floor = (all.first().copied().unwrap_or(0.0) * RELATIVE_EIGEN_FLOOR).max(absolute);
    let spectrum: Vec<f64> = all.iter().copied().filter(|l| *l > floor && *l > 0.0).collect();
    let total_variance: f64 = spectrum.iter().sum();

    if spectrum.is_empty() {
        let span = grid.last() - grid.first();
        return Ok(FpcModel {
            eigenfunctions: DMatrix::from_element(1, p, 1.0 / span.sqrt()),
            eigenvalues: vec![0.0],
            spectrum,
            scores: DMatrix::zeros(n, 1),
            residuals: DMatrix::from_fn(n, p, |t, j| x[(t, j)] - mean[j]),
            grid,
            mean,
            delta,
            total_variance: 0.0,
            degenerate: true,
        });
    }

    let k = select_k(&spectrum, delta);
    let mut phi = DMatrix::zeros(k, p);
    for (row, &i) in order.iter().take(k).enumerate() {
        for j in 0..p {
            phi[(row, j)] = eigen.eigenvectors[(j, i)] / sqrt_w[j];
        }
        if phi.row(row).sum() < 0.0 {
            phi.row_mut(row).neg_mut();
        }
    }
    let weighted = DMatrix::from_fn(n, p, |t, j| centered[(t, j)] * w[j]);
    let scores = &weighted * phi.transpose();
    let residuals = &centered - &scores * &phi;
    Ok(FpcModel {
        grid,
        mean,
        eigenfunctions: phi,
        eigenvalues: spectrum[..k].to_vec(),
        spectrum,
        scores,
        residuals,
        delta,
        total_variance,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveForecast {
    /// h_max x p log-rate curves.
    pub curves: DMatrix<f64>,
    /// h_max x K forecast variances of the scores.
    pub score_variances: DMatrix<f64>,
    /// n x p one-step in-sample curve errors (score-model residuals combined
    /// with the eigenfunctions, plus the FPCA residual); NaN where a score
    /// model has no residual.
    pub one_step_errors: DMatrix<f64>,
}

impl CurveForecast {
    /// Mean square of the finite one-step errors, pooled over years and ages.
    pub fn one_step_variance(&self) -> f64 {
        let finite: Vec<f64> = self.one_step_errors.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return f64::NAN;
        }
        finite.iter().map(|e| e * e).sum::<f64>() / finite.len() as f64
    }
}

pub fn forecast_curves(
    model: &FpcModel,
    forecaster: &dyn UnivariateForecaster,
    h_max: usize,
) -> Result<CurveForecast, FpcaError> {
    forecast_curves_with(model, &vec![forecaster; model.k()], h_max)
}

/// As [`forecast_curves`], with a separate forecaster for each score column.
pub fn forecast_curves_with(
    model: &FpcModel,
    forecasters: &[&dyn UnivariateForecaster],
    h_max: usize,
) -> Result<CurveForecast, FpcaError> {
    if h_max == 0 {
        return Err(FpcaError::InvalidHorizon);
    }
    let (n, p, k) = (model.n(), model.mean.len(), model.k());
    assert_eq!(forecasters.len(), k, "one forecaster per component");
    let per_component: Vec<_> = (0..k)
        .into_par_iter()
        .map(|c| {
            let column: Vec<f64> = model.scores.column(c).iter().copied().collect();
            forecasters[c]
                .forecast(&column, h_max)
                .map_err(|source| FpcaError::Forecast { component: c, source })
        })
        .collect::<Result<_, _>>()?;
    let mut curves = DMatrix::zeros(h_max, p);
    let mut score_variances = DMatrix::zeros(h_max, k);
    for h in 0..h_max {
        let scores: Vec<f64> = per_component.iter().map(|f| f.means[h]).collect();
        curves.set_row(h, &model.reconstruct(&scores).transpose());
        for (c, f) in per_component.iter().enumerate() {
            score_variances[(h, c)] = f.variances[h];
        }
    }
    let mut one_step_errors = model.residuals.clone();
    for t in 0..n {
        for (c, f) in per_component.iter().enumerate() {
            let r = f.residuals.get(t).copied().unwrap_or(f64::NAN);
            for j in 0..p {
                one_step_errors[(t, j)] += r * model.eigenfunctions[(c, j)];
            }
        }
    }
    Ok(CurveForecast {
        curves,
        score_variances,
        one_step_errors,
    })
}
