//! Bootstrap prediction intervals built from in-sample forecast errors.
//!
//! Error curves are resampled whole, so dependence across ages survives. The
//! 2.5% and 97.5% percentiles of the resample give a band shape, which is then
//! scaled by a tuning factor until the requested share of in-sample error
//! curves (uniform) or error cells (pointwise) falls inside it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::arima::UnivariateForecaster;
use crate::fpca::{forecast_curves_with, FpcModel, FpcaError};
use crate::reconcile::{Projection, ReconcileError, SummingMatrix};
use crate::seeds::task_rng;

pub const MIN_ERROR_ROWS: usize = 5;
pub const MIN_REPLICATES: usize = 100;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.2;
pub const PHI_MAX: f64 = 100.0;
pub const TUNING_TOLERANCE: f64 = 1e-4;
const LOWER_PERCENTILE: f64 = 0.025;
const UPPER_PERCENTILE: f64 = 0.975;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntervalError {
    #[error("need at least {needed} in-sample error curves, got {got}")]
    SampleTooSmall { needed: usize, got: usize },
    #[error("need at least {MIN_REPLICATES} bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("coverage target not reached even with tuning factor {PHI_MAX}")]
    Unattainable,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalKind {
    Uniform,
    Pointwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalForecast {
    pub horizon: usize,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub kind: IntervalKind,
    /// The fitted band scale (`phi` for uniform, `pi` for pointwise bands).
    pub tuning: f64,
}

fn check_alpha(alpha: f64) -> Result<(), IntervalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(IntervalError::InvalidAlpha(alpha))
    }
}

/// `h`-step in-sample forecast errors, one row per origin `zeta = K, ..., n - h`
/// (the number of curves used), each the actual curve at `zeta + h` minus its
/// reconstruction from forecast scores.
pub fn insample_errors(
    model: &FpcModel,
    forecaster: &dyn UnivariateForecaster,
    h: usize,
) -> Result<DMatrix<f64>, IntervalError> {
    insample_errors_with(model, &vec![forecaster; model.k()], h)
}

/// As [`insample_errors`], with one forecaster per score column.
pub fn insample_errors_with(
    model: &FpcModel,
    forecasters: &[&dyn UnivariateForecaster],
    h: usize,
) -> Result<DMatrix<f64>, IntervalError> {
    if h == 0 {
        return Err(IntervalError::InvalidHorizon);
    }
    let (n, k, p) = (model.n(), model.k(), model.mean.len());
    let m = (n + 1).saturating_sub(h + k);
    if m < MIN_ERROR_ROWS {
        return Err(IntervalError::SampleTooSmall {
            needed: MIN_ERROR_ROWS,
            got: m,
        });
    }
    let actual = model.fitted_input();
    let rows: Vec<Vec<f64>> = (k..=n - h)
        .into_par_iter()
        .map(|zeta| {
            let scores = (0..k)
                .map(|c| {
                    let history: Vec<f64> = model.scores.column(c).rows(0, zeta).iter().copied().collect();
                    forecasters[c]
                        .forecast(&history, h)
                        .map(|f| f.means[h - 1])
                        .map_err(|source| FpcaError::Forecast { component: c, source })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let curve = model.reconstruct(&scores);
            Ok((0..p).map(|j| actual[(zeta + h - 1, j)] - curve[j]).collect())
        })
        .collect::<Result<_, IntervalError>>()?;
    Ok(DMatrix::from_fn(m, p, |i, j| rows[i][j]))
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-column 2.5% / 97.5% percentiles of the rows of `sample`, widened where
/// necessary so that `lower <= 0 <= upper`.
fn percentile_bounds(sample: &DMatrix<f64>) -> Bounds {
    let p = sample.ncols();
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for j in 0..p {
        let mut col: Vec<f64> = sample.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, LOWER_PERCENTILE).min(0.0));
        upper.push(quantile_sorted(&col, UPPER_PERCENTILE).max(0.0));
    }
    Bounds { lower, upper }
}

/// Resamples `b` whole error curves with replacement (replicate `i` drawn from
/// its own stream of `seed`) and returns their percentile band.
pub fn bootstrap_bounds(errors: &DMatrix<f64>, b: usize, seed: u64) -> Result<Bounds, IntervalError> {
    let m = errors.nrows();
    if m < MIN_ERROR_ROWS {
        return Err(IntervalError::SampleTooSmall {
            needed: MIN_ERROR_ROWS,
            got: m,
        });
    }
    if b < MIN_REPLICATES {
        return Err(IntervalError::TooFewReplicates(b));
    }
    let draws: Vec<usize> = (0..b).map(|i| task_rng(seed, i as u64).random_range(0..m)).collect();
    let sample = DMatrix::from_fn(b, errors.ncols(), |i, j| errors[(draws[i], j)]);
    Ok(percentile_bounds(&sample))
}

fn covered_rows(errors: &DMatrix<f64>, bounds: &Bounds, phi: f64) -> usize {
    (0..errors.nrows())
        .filter(|&i| {
            (0..errors.ncols()).all(|j| {
                let e = errors[(i, j)];
                phi * bounds.lower[j] <= e && e <= phi * bounds.upper[j]
            })
        })
        .count()
}

fn covered_cells(errors: &DMatrix<f64>, bounds: &Bounds, phi: f64) -> usize {
    let mut count = 0;
    for i in 0..errors.nrows() {
        for j in 0..errors.ncols() {
            let e = errors[(i, j)];
            if phi * bounds.lower[j] <= e && e <= phi * bounds.upper[j] {
                count += 1;
            }
        }
    }
    count
}

/// Share of rows (uniform) or cells (pointwise) inside the band scaled by `phi`.
pub fn coverage(errors: &DMatrix<f64>, bounds: &Bounds, phi: f64, kind: IntervalKind) -> f64 {
    match kind {
        IntervalKind::Uniform => covered_rows(errors, bounds, phi) as f64 / errors.nrows() as f64,
        IntervalKind::Pointwise => covered_cells(errors, bounds, phi) as f64 / errors.len() as f64,
    }
}

/// Smallest scale (to within [`TUNING_TOLERANCE`]) whose coverage reaches `1 - alpha`.
fn tune(errors: &DMatrix<f64>, bounds: &Bounds, alpha: f64, kind: IntervalKind) -> Result<f64, IntervalError> {
    check_alpha(alpha)?;
    if bounds.lower.len() != errors.ncols() || bounds.upper.len() != errors.ncols() {
        return Err(IntervalError::Shape("bounds and errors differ in width".into()));
    }
    let total = match kind {
        IntervalKind::Uniform => errors.nrows(),
        IntervalKind::Pointwise => errors.len(),
    };
    // Counts avoid comparing floating-point shares against the target.
    let needed = ((1.0 - alpha) * total as f64 - 1e-9).ceil().max(0.0) as usize;
    let count = |phi: f64| match kind {
        IntervalKind::Uniform => covered_rows(errors, bounds, phi),
        IntervalKind::Pointwise => covered_cells(errors, bounds, phi),
    };
    if count(TUNING_TOLERANCE) >= needed {
        return Ok(TUNING_TOLERANCE);
    }
    if count(PHI_MAX) < needed {
        return Err(IntervalError::Unattainable);
    }
    let (mut lo, mut hi) = (TUNING_TOLERANCE, PHI_MAX);
    let (mut count_lo, mut count_hi) = (count(lo), count(hi));
    while hi - lo > TUNING_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        let c = count(mid);
        debug_assert!(count_lo <= c && c <= count_hi, "coverage must be monotone in the scale");
        if c >= needed {
            hi = mid;
            count_hi = c;
        } else {
            lo = mid;
            count_lo = c;
        }
    }
    Ok(hi)
}

/// Uniform band scale: share of whole error curves inside `[phi l, phi u]` at every age.
pub fn tune_uniform(errors: &DMatrix<f64>, bounds: &Bounds, alpha: f64) -> Result<f64, IntervalError> {
    tune(errors, bounds, alpha, IntervalKind::Uniform)
}

/// Pointwise band scale: one scalar, coverage counted over all (curve, age) cells.
pub fn tune_pointwise(errors: &DMatrix<f64>, bounds: &Bounds, alpha: f64) -> Result<f64, IntervalError> {
    tune(errors, bounds, alpha, IntervalKind::Pointwise)
}

/// Interval around `point` from in-sample `errors`.
pub fn interval_from_errors(
    point: &[f64],
    errors: &DMatrix<f64>,
    horizon: usize,
    alpha: f64,
    kind: IntervalKind,
    b: usize,
    seed: u64,
) -> Result<IntervalForecast, IntervalError> {
    check_alpha(alpha)?;
    if point.len() != errors.ncols() {
        return Err(IntervalError::Shape("point forecast and errors differ in width".into()));
    }
    let bounds = bootstrap_bounds(errors, b, seed)?;
    let tuning = tune(errors, &bounds, alpha, kind)?;
    Ok(IntervalForecast {
        horizon,
        lower: point.iter().zip(&bounds.lower).map(|(x, l)| x + tuning * l).collect(),
        upper: point.iter().zip(&bounds.upper).map(|(x, u)| x + tuning * u).collect(),
        point: point.to_vec(),
        alpha,
        kind,
        tuning,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn forecast_intervals(
    model: &FpcModel,
    forecaster: &dyn UnivariateForecaster,
    h: usize,
    alpha: f64,
    kind: IntervalKind,
    b: usize,
    seed: u64,
) -> Result<IntervalForecast, IntervalError> {
    let forecasters = vec![forecaster; model.k()];
    forecast_intervals_with(model, &forecasters, h, alpha, kind, b, seed)
}

/// As [`forecast_intervals`], with one forecaster per score column.
#[allow(clippy::too_many_arguments)]
pub fn forecast_intervals_with(
    model: &FpcModel,
    forecasters: &[&dyn UnivariateForecaster],
    h: usize,
    alpha: f64,
    kind: IntervalKind,
    b: usize,
    seed: u64,
) -> Result<IntervalForecast, IntervalError> {
    check_alpha(alpha)?;
    if h == 0 {
        return Err(IntervalError::InvalidHorizon);
    }
    let errors = insample_errors_with(model, forecasters, h)?;
    let curves = forecast_curves_with(model, forecasters, h)?.curves;
    let point: Vec<f64> = curves.row(h - 1).iter().copied().collect();
    interval_from_errors(&point, &errors, h, alpha, kind, b, seed)
}

/// Reconciliation map applied to each bootstrap replicate, one entry per age.
pub enum ReplicateMap<'a> {
    BottomUp(&'a [SummingMatrix]),
    Optimal(&'a [Projection]),
}

impl ReplicateMap<'_> {
    fn n_ages(&self) -> usize {
        match self {
            ReplicateMap::BottomUp(s) => s.len(),
            ReplicateMap::Optimal(p) => p.len(),
        }
    }

    /// Reconciles the columns of `rates` (rows in summing-matrix order) at age `z`.
    fn apply(&self, z: usize, rates: &DMatrix<f64>) -> Result<DMatrix<f64>, IntervalError> {
        match self {
            ReplicateMap::BottomUp(s) => {
                let m = s[z].n_bottom();
                let rows = rates.nrows();
                if rows != s[z].entries.nrows() {
                    return Err(ReconcileError::KeyMismatch.into());
                }
                Ok(&s[z].entries * rates.rows(rows - m, m))
            }
            ReplicateMap::Optimal(p) => Ok(p[z].apply_many(rates)?),
        }
    }
}

/// Stand-in for a row whose reconciled replicates are all non-positive.
const RATE_FLOOR: f64 = 1e-300;

/// Reconciles bootstrap replicates of every series and re-derives intervals.
///
/// `points` holds one log-rate forecast curve per series (summing-matrix row
/// order) and `errors` that series' in-sample error curves. Replicate `i` adds
/// the error curve at position `floor(u_i * M_k)` to each series `k`, with one
/// uniform draw `u_i` per replicate shared by all series. Replicates are
/// reconciled on the rate scale, and each series' interval is the percentile
/// band of its reconciled replicate errors, tuned to cover `1 - alpha` of them.
#[allow(clippy::too_many_arguments)]
pub fn reconcile_interval_replicates(
    points: &DMatrix<f64>,
    errors: &[DMatrix<f64>],
    map: &ReplicateMap,
    horizon: usize,
    alpha: f64,
    kind: IntervalKind,
    b: usize,
    seed: u64,
) -> Result<Vec<IntervalForecast>, IntervalError> {
    check_alpha(alpha)?;
    if b < MIN_REPLICATES {
        return Err(IntervalError::TooFewReplicates(b));
    }
    let (rows, p) = points.shape();
    if errors.len() != rows || map.n_ages() != p || errors.iter().any(|e| e.ncols() != p) {
        return Err(IntervalError::Shape("replicate inputs do not line up".into()));
    }
    if let Some(e) = errors.iter().find(|e| e.nrows() < MIN_ERROR_ROWS) {
        return Err(IntervalError::SampleTooSmall {
            needed: MIN_ERROR_ROWS,
            got: e.nrows(),
        });
    }
    let draws: Vec<f64> = (0..b).map(|i| task_rng(seed, i as u64).random::<f64>()).collect();
    let pick = |k: usize, u: f64| ((u * errors[k].nrows() as f64) as usize).min(errors[k].nrows() - 1);

    // Reconciled log curves: point (column 0) and replicates (columns 1..=b), per age.
    let per_age: Vec<DMatrix<f64>> = (0..p)
        .into_par_iter()
        .map(|z| {
            let rates = DMatrix::from_fn(rows, b + 1, |k, c| {
                let base = points[(k, z)];
                let log = if c == 0 { base } else { base + errors[k][(pick(k, draws[c - 1]), z)] };
                log.exp()
            });
            let mut rec = map.apply(z, &rates)?;
            // A reconciled replicate can leave the positive orthant; it is read as the
            // lowest feasible value among the row's replicates.
            for mut row in rec.row_iter_mut() {
                let lowest = row.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
                let lowest = if lowest.is_finite() { lowest } else { RATE_FLOOR };
                row.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v = lowest);
            }
            Ok(rec.map(f64::ln))
        })
        .collect::<Result<_, IntervalError>>()?;

    (0..rows)
        .map(|k| {
            let point: Vec<f64> = (0..p).map(|z| per_age[z][(k, 0)]).collect();
            let sample = DMatrix::from_fn(b, p, |i, z| per_age[z][(k, i + 1)] - point[z]);
            let bounds = percentile_bounds(&sample);
            let tuning = tune(&sample, &bounds, alpha, kind)?;
            Ok(IntervalForecast {
                horizon,
                lower: point.iter().zip(&bounds.lower).map(|(x, l)| x + tuning * l).collect(),
                upper: point.iter().zip(&bounds.upper).map(|(x, u)| x + tuning * u).collect(),
                point,
                alpha,
                kind,
                tuning,
            })
        })
        .collect()
}

/// Element-wise width `upper - lower`.
pub fn widths(interval: &IntervalForecast) -> DVector<f64> {
    DVector::from_iterator(
        interval.lower.len(),
        interval.upper.iter().zip(&interval.lower).map(|(u, l)| u - l),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::{ArimaError, Forecast, NaiveForecaster};
    use crate::domain::{AgeGrid, FunctionalSeries, Scale};
    use crate::fpca::fit_fpca;
    use crate::domain::SeriesKey;
    use crate::reconcile::{bottom_up, Weighting};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(seed: u64, m: usize, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_errors_give_zero_bounds_and_minimal_tuning() {
        let e = DMatrix::zeros(10, 4);
        let b = bootstrap_bounds(&e, 200, 1).unwrap();
        assert!(b.lower.iter().chain(&b.upper).all(|v| *v == 0.0));
        assert_eq!(tune_uniform(&e, &b, 0.2).unwrap(), TUNING_TOLERANCE);
        assert_eq!(tune_pointwise(&e, &b, 0.2).unwrap(), TUNING_TOLERANCE);
        let iv = interval_from_errors(&[1.0, 2.0, 3.0, 4.0], &e, 1, 0.2, IntervalKind::Uniform, 200, 1).unwrap();
        assert_eq!(iv.lower, iv.point);
        assert_eq!(iv.upper, iv.point);
    }

    #[test]
    fn symmetric_unit_errors_bound_inside_support() {
        let e = DMatrix::from_fn(10, 3, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let b = bootstrap_bounds(&e, 500, 2).unwrap();
        for j in 0..3 {
            assert!(-1.0 <= b.lower[j] && b.lower[j] < 0.0);
            assert!(0.0 < b.upper[j] && b.upper[j] <= 1.0);
        }
    }

    #[test]
    fn standard_normal_bounds_near_normal_quantiles() {
        // The 2.5% quantile of 50 normal draws has a sampling sd near 0.38, so a
        // single age can miss +-0.35; the age-averaged bounds cannot.
        let e = normal_matrix(3, 50, 10);
        let b = bootstrap_bounds(&e, 1000, 3).unwrap();
        let lower = b.lower.iter().sum::<f64>() / 10.0;
        let upper = b.upper.iter().sum::<f64>() / 10.0;
        assert!((lower + 1.96).abs() <= 0.35, "{lower}");
        assert!((upper - 1.96).abs() <= 0.35, "{upper}");
        assert!(b.lower.iter().all(|v| *v < -0.9) && b.upper.iter().all(|v| *v > 0.9));
    }

    #[test]
    fn row_on_the_upper_bound_needs_scale_one() {
        let upper = vec![1.0, 2.0, 0.5];
        let bounds = Bounds {
            lower: vec![-1.0; 3],
            upper: upper.clone(),
        };
        let e = DMatrix::from_row_slice(1, 3, &upper);
        assert_eq!(coverage(&e, &bounds, 1.0, IntervalKind::Uniform), 1.0);
        let phi = tune_uniform(&e, &bounds, 0.2).unwrap();
        assert!(phi <= 1.0 + TUNING_TOLERANCE && phi >= 1.0 - TUNING_TOLERANCE, "{phi}");
    }

    #[test]
    fn tuned_coverage_is_close_to_target() {
        let e = normal_matrix(4, 200, 8);
        let b = bootstrap_bounds(&e, 1000, 4).unwrap();
        for kind in [IntervalKind::Uniform, IntervalKind::Pointwise] {
            let phi = tune(&e, &b, 0.2, kind).unwrap();
            let c = coverage(&e, &b, phi, kind);
            assert!((0.8..=0.85).contains(&c), "{kind:?} {c}");
            assert!(coverage(&e, &b, phi - 2.0 * TUNING_TOLERANCE, kind) < 0.8 || phi == TUNING_TOLERANCE);
        }
    }

    #[test]
    fn unattainable_coverage_is_reported() {
        let bounds = Bounds {
            lower: vec![0.0],
            upper: vec![0.0],
        };
        let e = DMatrix::from_element(5, 1, 1.0);
        assert_eq!(tune_uniform(&e, &bounds, 0.2), Err(IntervalError::Unattainable));
    }

    #[test]
    fn bounds_are_deterministic_in_the_seed() {
        let e = normal_matrix(5, 30, 4);
        assert_eq!(bootstrap_bounds(&e, 300, 9).unwrap(), bootstrap_bounds(&e, 300, 9).unwrap());
    }

    fn rank_one_model(n: usize, step: f64) -> FpcModel {
        let grid = AgeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        let g = [1.0, 2.0, 3.0];
        let values = DMatrix::from_fn(n, 3, |t, j| -5.0 + step * t as f64 * g[j]);
        let s = FunctionalSeries::new(grid, (0..n as i32).collect(), values, Scale::LogRate).unwrap();
        fit_fpca(&s, 0.9).unwrap()
    }

    /// Returns the true continuation of a known score path.
    struct Oracle(Vec<f64>);

    impl UnivariateForecaster for Oracle {
        fn forecast(&self, x: &[f64], h: usize) -> Result<Forecast, ArimaError> {
            let n = x.len();
            Ok(Forecast {
                means: self.0[n..n + h].to_vec(),
                variances: vec![0.0; h],
                residuals: vec![0.0; n],
            })
        }
    }

    #[test]
    fn perfect_forecaster_has_zero_errors() {
        let model = rank_one_model(12, 0.1);
        let oracle = Oracle(model.scores.column(0).iter().copied().collect());
        for h in [1, 4] {
            let e = insample_errors(&model, &oracle, h).unwrap();
            assert_eq!(e.nrows(), 12 - h - 1 + 1);
            assert!(e.amax() < 1e-12);
        }
    }

    #[test]
    fn naive_errors_follow_the_score_increment() {
        // Scores grow by a constant c per year, so h-step naive errors are h * c * phi.
        let model = rank_one_model(15, 0.1);
        let c = model.scores[(1, 0)] - model.scores[(0, 0)];
        for h in [1, 3] {
            let e = insample_errors(&model, &NaiveForecaster, h).unwrap();
            assert_eq!(e.nrows(), 15 - h - 1 + 1);
            for i in 0..e.nrows() {
                for j in 0..3 {
                    let expected = h as f64 * c * model.eigenfunctions[(0, j)];
                    assert!((e[(i, j)] - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn error_sample_size_rule() {
        // Three independent score paths on four ages give K = 3 at delta = 0.999.
        let grid = AgeGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = [[1.0, 1.0, 1.0, 1.0], [-1.0, -0.3, 0.3, 1.0], [1.0, -1.0, -1.0, 1.0]];
        let a: Vec<[f64; 3]> = (0..39)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
            .collect();
        let values = DMatrix::from_fn(39, 4, |t, j| (0..3).map(|c| a[t][c] * g[c][j]).sum::<f64>());
        let s = FunctionalSeries::new(grid, (0..39).collect(), values, Scale::LogRate).unwrap();
        let model = fit_fpca(&s, 0.999).unwrap();
        assert_eq!(model.k(), 3);
        assert_eq!(insample_errors(&model, &NaiveForecaster, 1).unwrap().nrows(), 36);
        let small = rank_one_model(6, 0.1);
        assert!(matches!(
            insample_errors(&small, &NaiveForecaster, 2),
            Err(IntervalError::SampleTooSmall { got: 4, .. })
        ));
    }

    #[test]
    fn symmetric_errors_give_near_symmetric_intervals() {
        let e = normal_matrix(6, 400, 5);
        let sym = DMatrix::from_fn(800, 5, |i, j| if i < 400 { e[(i, j)] } else { -e[(i - 400, j)] });
        let iv = interval_from_errors(&[0.0; 5], &sym, 1, 0.2, IntervalKind::Pointwise, 2000, 6).unwrap();
        for j in 0..5 {
            let width = iv.upper[j] - iv.lower[j];
            assert!(width >= 0.0);
            assert!((iv.upper[j] + iv.lower[j]).abs() <= 0.1 * width);
        }
    }

    fn two_bottom_s(e1: f64, e2: f64, p: usize) -> Vec<SummingMatrix> {
        let key = |s: &str| SeriesKey::from_pairs([("k", s)]);
        (0..p)
            .map(|z| SummingMatrix {
                row_keys: vec![SeriesKey::total(), key("a"), key("b")],
                col_keys: vec![key("a"), key("b")],
                entries: DMatrix::from_row_slice(3, 2, &[e1 / (e1 + e2), e2 / (e1 + e2), 1.0, 0.0, 0.0, 1.0]),
                age_index: z,
            })
            .collect()
    }

    #[test]
    fn reconciled_replicates_aggregate() {
        let p = 3;
        let s = two_bottom_s(100.0, 300.0, p);
        let points = DMatrix::from_row_slice(3, p, &[-4.0, -3.5, -3.0, -4.2, -3.6, -3.1, -3.9, -3.4, -2.9]);
        let errors: Vec<DMatrix<f64>> = (0..3).map(|k| normal_matrix(10 + k, 20, p) * 0.1).collect();
        let bu = reconcile_interval_replicates(&points, &errors, &ReplicateMap::BottomUp(&s), 1, 0.2, IntervalKind::Pointwise, 200, 7)
            .unwrap();
        // Reconciled points aggregate on the rate scale.
        for z in 0..p {
            let r: Vec<f64> = bu.iter().map(|iv| iv.point[z].exp()).collect();
            let total = bottom_up(&DVector::from_vec(vec![r[1], r[2]]), &s[z]).unwrap()[0];
            assert!((total - r[0]).abs() < 1e-10 * r[0]);
        }
        let proj: Vec<Projection> = s.iter().map(|m| Projection::new(m, &Weighting::Ols).unwrap()).collect();
        let oc = reconcile_interval_replicates(&points, &errors, &ReplicateMap::Optimal(&proj), 1, 0.2, IntervalKind::Uniform, 200, 7)
            .unwrap();
        assert!(oc.iter().all(|iv| iv.lower.iter().zip(&iv.upper).all(|(l, u)| l <= u)));
        // Bottom-up bottom intervals only see bottom replicates, so they match a direct construction
        // on consistent inputs: replicate widths of the total do not exceed the weighted bottom widths.
        for z in 0..p {
            let w: Vec<f64> = bu.iter().map(|iv| iv.upper[z].exp() - iv.lower[z].exp()).collect();
            let weighted = 0.25 * w[1] + 0.75 * w[2];
            assert!(w[0] <= weighted * (1.0 + 1e-9), "{} > {}", w[0], weighted);
        }
    }
}
