//! Summing matrices and forecast reconciliation.
//!
//! Everything here works on the rate scale, where an aggregate is the
//! exposure-weighted sum of its bottom series.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::arima::{ArimaError, UnivariateForecaster};
use crate::domain::{DomainError, GroupedDataset, SeriesKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconcileError {
    #[error("summing matrix is rank deficient")]
    SingularSystem,
    #[error("weight variance for series {0} is not positive")]
    NonPositiveVariance(usize),
    #[error("forecast keys do not match the summing matrix")]
    KeyMismatch,
    #[error("need at least {needed} years of ratios, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("forecasting ratio {bottom} within {aggregate}: {source}")]
    Ratio {
        aggregate: String,
        bottom: String,
        #[source]
        source: ArimaError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Rows are all series in canonical order, columns the bottom series.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    pub row_keys: Vec<SeriesKey>,
    pub col_keys: Vec<SeriesKey>,
    pub entries: DMatrix<f64>,
    pub age_index: usize,
}

impl SummingMatrix {
    pub fn n_bottom(&self) -> usize {
        self.col_keys.len()
    }

    /// Largest `|x_g - sum_b S[g,b] x_b|` over rows, where the bottom values are
    /// taken from the last `n_bottom` entries of `x`.
    pub fn aggregation_residual(&self, x: &DVector<f64>) -> f64 {
        let m = self.n_bottom();
        let bottom = x.rows(x.len() - m, m);
        (&self.entries * bottom - x).amax()
    }
}

/// Nonzero pattern of the summing matrix: for each row, the column indices of its members.
fn member_columns(dataset: &GroupedDataset) -> Result<Vec<Vec<usize>>, DomainError> {
    let col_index: BTreeMap<&SeriesKey, usize> =
        dataset.bottom_keys().iter().enumerate().map(|(i, k)| (k, i)).collect();
    dataset
        .all_keys()
        .iter()
        .map(|g| Ok(dataset.members(g)?.iter().map(|b| col_index[b]).collect()))
        .collect()
}

/// `S_t` at year index `t` and age index `z`: entry `(g, b) = E_b / E_g` for members.
pub fn build_summing_matrix(dataset: &GroupedDataset, t: usize, z: usize) -> Result<SummingMatrix, ReconcileError> {
    let rows = dataset.all_keys();
    let cols = dataset.bottom_keys().to_vec();
    let pattern = member_columns(dataset)?;
    let mut entries = DMatrix::zeros(rows.len(), cols.len());
    for (r, g) in rows.iter().enumerate() {
        let eg = dataset.series(g)?.counts.exposure[(t, z)];
        for &c in &pattern[r] {
            let eb = dataset.bottom()[&cols[c]].exposure[(t, z)];
            if !(eg > 0.0 && eb > 0.0) {
                return Err(DomainError::ZeroExposure {
                    key: g.to_string(),
                    row: t,
                    col: z,
                }
                .into());
            }
            entries[(r, c)] = if pattern[r].len() == 1 { 1.0 } else { eb / eg };
        }
    }
    Ok(SummingMatrix {
        row_keys: rows,
        col_keys: cols,
        entries,
        age_index: z,
    })
}

/// Minimum number of historical ratios needed to forecast `S`.
pub const MIN_RATIO_YEARS: usize = 10;

/// Forecast summing matrices, indexed `[h - 1][age]`, for horizons `1..=h_max`.
///
/// Each exposure ratio is forecast independently, clamped to `[0, 1]` and each
/// row is rescaled to sum to one. Identity rows are left alone.
pub fn forecast_summing_matrices(
    dataset: &GroupedDataset,
    h_max: usize,
    forecaster: &dyn UnivariateForecaster,
) -> Result<Vec<Vec<SummingMatrix>>, ReconcileError> {
    let n = dataset.n_years();
    if n < MIN_RATIO_YEARS {
        return Err(ReconcileError::SeriesTooShort {
            needed: MIN_RATIO_YEARS,
            got: n,
        });
    }
    let rows = dataset.all_keys();
    let cols = dataset.bottom_keys().to_vec();
    let p = dataset.grid().len();
    let pattern = member_columns(dataset)?;
    // One task per (row, member, age).
    let tasks: Vec<(usize, usize, usize)> = pattern
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() > 1)
        .flat_map(|(r, m)| m.iter().flat_map(move |&c| (0..p).map(move |z| (r, c, z))))
        .collect();
    let ratio_series: Vec<Vec<f64>> = tasks
        .iter()
        .map(|&(r, c, z)| {
            let eg = &dataset.series(&rows[r])?.counts.exposure;
            let eb = &dataset.bottom()[&cols[c]].exposure;
            Ok((0..n).map(|t| eb[(t, z)] / eg[(t, z)]).collect())
        })
        .collect::<Result<_, ReconcileError>>()?;
    // Ratio histories agreeing to 12 significant digits (common when exposures share
    // an age profile) are forecast once.
    let mut unique: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut first_task = Vec::new();
    let slot: Vec<usize> = ratio_series
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let next = unique.len();
            *unique.entry(x.iter().map(|v| format!("{v:.11e}")).collect()).or_insert_with(|| {
                first_task.push(i);
                next
            })
        })
        .collect();
    let unique_forecasts: Vec<Vec<f64>> = first_task
        .par_iter()
        .map(|&i| {
            let (r, c, _) = tasks[i];
            forecaster
                .forecast(&ratio_series[i], h_max)
                .map(|f| f.means)
                .map_err(|source| ReconcileError::Ratio {
                    aggregate: rows[r].to_string(),
                    bottom: cols[c].to_string(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    let forecasts: Vec<&Vec<f64>> = slot.iter().map(|&u| &unique_forecasts[u]).collect();

    let mut base = DMatrix::zeros(rows.len(), cols.len());
    for (r, m) in pattern.iter().enumerate() {
        if m.len() == 1 {
            base[(r, m[0])] = 1.0;
        }
    }
    let mut out: Vec<Vec<SummingMatrix>> = (0..h_max)
        .map(|_| {
            (0..p)
                .map(|z| SummingMatrix {
                    row_keys: rows.clone(),
                    col_keys: cols.clone(),
                    entries: base.clone(),
                    age_index: z,
                })
                .collect()
        })
        .collect();
    for (&(r, c, z), f) in tasks.iter().zip(&forecasts) {
        for h in 0..h_max {
            let v = f[h];
            out[h][z].entries[(r, c)] = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    for per_age in out.iter_mut() {
        for s in per_age.iter_mut() {
            let z = s.age_index;
            for (r, m) in pattern.iter().enumerate() {
                if m.len() == 1 {
                    continue;
                }
                let total: f64 = m.iter().map(|&c| s.entries[(r, c)]).sum();
                if total > 0.0 {
                    for &c in m {
                        s.entries[(r, c)] /= total;
                    }
                } else {
                    // Every forecast ratio clamped to zero: fall back to the last observed ratios.
                    let eg = dataset.series(&rows[r])?.counts.exposure[(n - 1, z)];
                    for &c in m {
                        s.entries[(r, c)] = dataset.bottom()[&cols[c]].exposure[(n - 1, z)] / eg;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `S b`.
pub fn bottom_up(bottom: &DVector<f64>, s: &SummingMatrix) -> Result<DVector<f64>, ReconcileError> {
    if bottom.len() != s.n_bottom() {
        return Err(ReconcileError::KeyMismatch);
    }
    Ok(&s.entries * bottom)
}

/// Same as [`bottom_up`] but checks the keys of the forecasts as well as their count.
pub fn bottom_up_keyed(keys: &[SeriesKey], bottom: &DVector<f64>, s: &SummingMatrix) -> Result<DVector<f64>, ReconcileError> {
    if keys != s.col_keys.as_slice() {
        return Err(ReconcileError::KeyMismatch);
    }
    bottom_up(bottom, s)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Ols,
    /// Diagonal `W` holding one positive variance per row of `S`.
    Wls(Vec<f64>),
}

/// The linear map `R -> S (S' W^-1 S)^-1 S' W^-1 R`, factorised once.
#[derive(Debug, Clone)]
pub struct Projection {
    s: DMatrix<f64>,
    /// `W^{-1/2}` per row.
    scale: Vec<f64>,
    q_t: DMatrix<f64>,
    r: DMatrix<f64>,
}

/// Pivots below this fraction of the largest are taken as rank deficiency.
const RANK_TOLERANCE: f64 = 1e-12;

impl Projection {
    pub fn new(s: &SummingMatrix, weighting: &Weighting) -> Result<Self, ReconcileError> {
        let rows = s.entries.nrows();
        let scale = match weighting {
            Weighting::Ols => vec![1.0; rows],
            Weighting::Wls(v) => {
                if v.len() != rows {
                    return Err(ReconcileError::KeyMismatch);
                }
                v.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        if *x > 0.0 && x.is_finite() {
                            Ok(1.0 / x.sqrt())
                        } else {
                            Err(ReconcileError::NonPositiveVariance(i))
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        let a = DMatrix::from_fn(rows, s.n_bottom(), |i, j| s.entries[(i, j)] * scale[i]);
        let qr = a.qr();
        let r = qr.r();
        let diag_max = r.diagonal().amax();
        if diag_max == 0.0 || r.diagonal().iter().any(|d| d.abs() <= RANK_TOLERANCE * diag_max) {
            return Err(ReconcileError::SingularSystem);
        }
        Ok(Self {
            s: s.entries.clone(),
            scale,
            q_t: qr.q().transpose(),
            r,
        })
    }

    /// Reconciles each column of `base` (rows in summing-matrix order).
    pub fn apply_many(&self, base: &DMatrix<f64>) -> Result<DMatrix<f64>, ReconcileError> {
        if base.nrows() != self.s.nrows() {
            return Err(ReconcileError::KeyMismatch);
        }
        let scaled = DMatrix::from_fn(base.nrows(), base.ncols(), |i, j| base[(i, j)] * self.scale[i]);
        let rhs = &self.q_t * scaled;
        let beta = self
            .r
            .solve_upper_triangular(&rhs)
            .ok_or(ReconcileError::SingularSystem)?;
        Ok(&self.s * beta)
    }

    pub fn apply(&self, base: &DVector<f64>) -> Result<DVector<f64>, ReconcileError> {
        let m = DMatrix::from_column_slice(base.len(), 1, base.as_slice());
        Ok(self.apply_many(&m)?.column(0).into_owned())
    }
}

/// Optimal-combination reconciliation of forecasts for every row of `S`.
pub fn optimal_combination(
    base: &DVector<f64>,
    s: &SummingMatrix,
    weighting: &Weighting,
) -> Result<DVector<f64>, ReconcileError> {
    Projection::new(s, weighting)?.apply(base)
}
