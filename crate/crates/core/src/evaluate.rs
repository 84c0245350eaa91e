//! Expanding-window backtests and forecast scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arima::{ArimaError, AutoArimaForecaster, FixedModelForecaster, UnivariateForecaster};
use crate::depth::moving_median_forecast;
use crate::domain::{DomainError, FunctionalSeries, GroupedDataset};
use crate::fpca::{fit_fpca, forecast_curves_with, FpcaError, DEFAULT_DELTA};
use crate::intervals::{
    insample_errors_with, interval_from_errors, reconcile_interval_replicates, IntervalError, IntervalKind,
    ReplicateMap, DEFAULT_ALPHA, DEFAULT_REPLICATES,
};
use crate::reconcile::{forecast_summing_matrices, Projection, ReconcileError, Weighting};
use crate::seeds::child_seed;
use crate::smoothing::{smooth_dataset, SmoothingConfig, SmoothingError};

/// Scores are multiplied by this before they are written out.
pub const REPORT_MULTIPLIER: f64 = 100.0;
pub const MIN_TRAINING_YEARS: usize = 15;
pub const DEFAULT_H_MAX: usize = 10;

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Arima(#[from] ArimaError),
    #[error(transparent)]
    Intervals(#[from] IntervalError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("invalid backtest plan: {0}")]
    Plan(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid interval: lower {lower} exceeds upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error("window ending {window}, series `{key}`: {source}")]
    Series {
        window: i32,
        key: String,
        #[source]
        source: StageError,
    },
    #[error("window ending {window}: {source}")]
    Window {
        window: i32,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EvaluateError {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            EvaluateError::Plan(_)
                | EvaluateError::ShapeMismatch(_)
                | EvaluateError::InvalidInterval { .. }
                | EvaluateError::Domain(_)
                | EvaluateError::Io(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Independent,
    BottomUp,
    OptimalCombination,
    FMedian,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Independent,
        Method::BottomUp,
        Method::OptimalCombination,
        Method::FMedian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Independent => "independent",
            Method::BottomUp => "bottom_up",
            Method::OptimalCombination => "optimal_combination",
            Method::FMedian => "fmedian",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Summary {
    Mean,
    Median,
}

/// How `Median` picks its two middle values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MedianRule {
    /// Mean of the two middle values after sorting.
    #[default]
    Ranked,
    /// Mean of the values at the two middle horizons, unsorted.
    HorizonIndexed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoringScale {
    #[default]
    LogRate,
    Rate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSettings {
    pub kind: IntervalKind,
    pub replicates: usize,
}

impl Default for IntervalSettings {
    fn default() -> Self {
        Self {
            kind: IntervalKind::Pointwise,
            replicates: DEFAULT_REPLICATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestPlan {
    pub train_start: i32,
    /// Last year of the first training window.
    pub train_end_initial: i32,
    /// Last year with data.
    pub data_end: i32,
    pub h_max: usize,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
    pub smoothing: SmoothingConfig,
    /// `None` skips interval forecasts and interval scores.
    pub intervals: Option<IntervalSettings>,
    pub scale: ScoringScale,
    pub median_rule: MedianRule,
}

impl BacktestPlan {
    /// All methods over the last `h_max` years of `dataset` as the holdout.
    pub fn for_dataset(dataset: &GroupedDataset, h_max: usize) -> Self {
        let years = dataset.years();
        let data_end = years[years.len() - 1];
        Self {
            train_start: years[0],
            train_end_initial: data_end - h_max as i32,
            data_end,
            h_max,
            methods: Method::ALL.to_vec(),
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            seed: 0,
            smoothing: SmoothingConfig::default(),
            intervals: Some(IntervalSettings::default()),
            scale: ScoringScale::default(),
            median_rule: MedianRule::default(),
        }
    }

    /// Last training year of every window.
    pub fn origins(&self) -> Vec<i32> {
        (self.train_end_initial..self.data_end).collect()
    }

    /// Forecasts each series receives at horizons `1..=h_max`.
    pub fn forecast_counts(&self) -> Vec<usize> {
        (1..=self.h_max)
            .map(|h| self.origins().iter().filter(|&&o| o + h as i32 <= self.data_end).count())
            .collect()
    }

    pub fn validate(&self, dataset: &GroupedDataset) -> Result<(), EvaluateError> {
        let bad = |m: String| Err(EvaluateError::Plan(m));
        let years = dataset.years();
        let (first, last) = (years[0], years[years.len() - 1]);
        if self.h_max == 0 {
            return bad("h_max must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        if self.train_start < first || self.data_end > last {
            return bad(format!("plan spans {}..{} outside the data {first}..{last}", self.train_start, self.data_end));
        }
        if self.train_end_initial >= self.data_end {
            return bad("the first training window leaves no holdout".into());
        }
        let training = (self.train_end_initial - self.train_start + 1).max(0) as usize;
        if training < MIN_TRAINING_YEARS {
            return bad(format!("{training} training years, need at least {MIN_TRAINING_YEARS}"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        Ok(())
    }

    /// Hex SHA-256 of the plan's canonical debug rendering.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Scores of one method at one level and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub level: usize,
    pub horizon: usize,
    /// Forecasts per series at this horizon.
    pub forecasts: usize,
    pub mafe: f64,
    pub rmsfe: f64,
    pub interval_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub method: Method,
    pub level: usize,
    pub mean_rmsfe: f64,
    pub median_mafe: f64,
    pub mean_score: Option<f64>,
    pub median_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub seed: u64,
    pub config_hash: String,
    pub level_labels: Vec<String>,
    pub methods: Vec<Method>,
    pub h_max: usize,
    /// Ordered by method (plan order), level, horizon.
    pub cells: Vec<Cell>,
    pub summaries: Vec<LevelSummary>,
}

impl BacktestReport {
    pub fn cell(&self, method: Method, level: usize, horizon: usize) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.level == level && c.horizon == horizon)
    }

    pub fn summary(&self, method: Method, level: usize) -> Option<&LevelSummary> {
        self.summaries.iter().find(|s| s.method == method && s.level == level)
    }

    /// Long format: `method,level,horizon,metric,value`, values times 100.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,level,horizon,metric,value")?;
        for c in &self.cells {
            let label = &self.level_labels[c.level];
            let mut metrics = vec![("mafe", c.mafe), ("rmsfe", c.rmsfe)];
            if let Some(s) = c.interval_score {
                metrics.push(("interval_score", s));
            }
            for (name, v) in metrics {
                writeln!(out, "{},{label},{},{name},{}", c.method.name(), c.horizon, v * REPORT_MULTIPLIER)?;
            }
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Backtest report\n");
        let _ = writeln!(md, "- seed: {}", self.seed);
        let _ = writeln!(md, "- config hash: {}", self.config_hash);
        let _ = writeln!(md, "- values are multiplied by {REPORT_MULTIPLIER}\n");
        type Pick = fn(&LevelSummary) -> Option<f64>;
        let tables: [(&str, Pick); 4] = [
            ("Mean(RMSFE)", |s| Some(s.mean_rmsfe)),
            ("Median(MAFE)", |s| Some(s.median_mafe)),
            ("Mean(interval score)", |s| s.mean_score),
            ("Median(interval score)", |s| s.median_score),
        ];
        for (title, pick) in tables {
            let _ = writeln!(md, "## {title}\n");
            let _ = write!(md, "| level |");
            for m in &self.methods {
                let _ = write!(md, " {} |", m.name());
            }
            let _ = write!(md, "\n|---|");
            for _ in &self.methods {
                let _ = write!(md, "---:|");
            }
            md.push('\n');
            for (level, label) in self.level_labels.iter().enumerate() {
                let _ = write!(md, "| {label} |");
                for &m in &self.methods {
                    match self.summary(m, level).and_then(pick) {
                        Some(v) => {
                            let _ = write!(md, " {:.3} |", v * REPORT_MULTIPLIER);
                        }
                        None => md.push_str(" - |"),
                    }
                }
                md.push('\n');
            }
            md.push('\n');
        }
        md
    }
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), EvaluateError> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(EvaluateError::ShapeMismatch(format!(
            "{}x{} against {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Mean absolute error over every age of every forecast origin (one row per origin).
pub fn mafe(actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<f64, EvaluateError> {
    check_shapes(actual, forecast)?;
    Ok((actual - forecast).abs().sum() / actual.len() as f64)
}

/// Root mean squared error over every age of every forecast origin.
pub fn rmsfe(actual: &DMatrix<f64>, forecast: &DMatrix<f64>) -> Result<f64, EvaluateError> {
    check_shapes(actual, forecast)?;
    Ok(((actual - forecast).norm_squared() / actual.len() as f64).sqrt())
}

/// Width plus `2 / alpha` times the distance by which `actual` falls outside.
pub fn interval_score(lower: f64, upper: f64, actual: f64, alpha: f64) -> Result<f64, EvaluateError> {
    if lower > upper || lower.is_nan() || upper.is_nan() {
        return Err(EvaluateError::InvalidInterval { lower, upper });
    }
    let mut s = upper - lower;
    if actual < lower {
        s += 2.0 / alpha * (lower - actual);
    }
    if actual > upper {
        s += 2.0 / alpha * (actual - upper);
    }
    Ok(s)
}

pub fn mean_interval_score(
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    actual: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64, EvaluateError> {
    check_shapes(lower, actual)?;
    check_shapes(upper, actual)?;
    let mut total = 0.0;
    for i in 0..actual.len() {
        total += interval_score(lower[i], upper[i], actual[i], alpha)?;
    }
    Ok(total / actual.len() as f64)
}

pub fn summarize(values: &[f64], stat: Summary, rule: MedianRule) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    match stat {
        Summary::Mean => values.iter().sum::<f64>() / n as f64,
        Summary::Median => {
            let v: Vec<f64> = match rule {
                MedianRule::Ranked => {
                    let mut s = values.to_vec();
                    s.sort_by(f64::total_cmp);
                    s
                }
                MedianRule::HorizonIndexed => values.to_vec(),
            };
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        }
    }
}

/// Forecasts of every series from one training window, rows in canonical key order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecasts {
    /// `[method][row][h - 1]` log-rate curves.
    pub points: BTreeMap<Method, Vec<Vec<Vec<f64>>>>,
    /// `[method][row][h - 1]` log-rate `(lower, upper)` bounds; absent without intervals.
    pub bounds: BTreeMap<Method, Vec<Vec<(Vec<f64>, Vec<f64>)>>>,
}

struct SeriesFit {
    /// `h x p` log-rate forecasts.
    curves: DMatrix<f64>,
    one_step_variance: f64,
    /// In-sample errors for horizons `1..=h`.
    errors: Vec<DMatrix<f64>>,
}

fn fit_series(train: &FunctionalSeries, plan: &BacktestPlan, h: usize) -> Result<SeriesFit, StageError> {
    let model = fit_fpca(train, plan.delta)?;
    let auto = AutoArimaForecaster::default();
    let fixed: Vec<FixedModelForecaster> = (0..model.k())
        .map(|c| {
            let scores: Vec<f64> = model.scores.column(c).iter().copied().collect();
            auto.fit(&scores).map(FixedModelForecaster)
        })
        .collect::<Result<_, _>>()?;
    let refs: Vec<&dyn UnivariateForecaster> = fixed.iter().map(|f| f as &dyn UnivariateForecaster).collect();
    let forecast = forecast_curves_with(&model, &refs, h)?;
    let errors = if plan.intervals.is_some() {
        (1..=h)
            .map(|step| insample_errors_with(&model, &refs, step))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    Ok(SeriesFit {
        one_step_variance: forecast.one_step_variance(),
        curves: forecast.curves,
        errors,
    })
}

/// Diagonal reconciliation weights; missing or zero variances borrow from the rest.
fn wls_weights(fits: &[SeriesFit]) -> Vec<f64> {
    let finite: Vec<f64> = fits
        .iter()
        .map(|f| f.one_step_variance)
        .filter(|v| v.is_finite() && *v > 0.0)
        .collect();
    let fallback = if finite.is_empty() {
        1.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    fits.iter()
        .map(|f| {
            let v = f.one_step_variance;
            if v.is_finite() && v > 0.0 {
                v
            } else {
                fallback
            }
        })
        .map(|v| v.max(1e-12))
        .collect()
}

/// Forecasts `h` steps past the first `train_rows` years with every method of `plan`.
///
/// `smoothed` holds one log-rate series per key of `dataset`, in canonical order.
/// `window` numbers the training window for seeding; `origin` labels errors.
#[allow(clippy::too_many_arguments)]
pub fn forecast_window(
    dataset: &GroupedDataset,
    smoothed: &[FunctionalSeries],
    plan: &BacktestPlan,
    window: usize,
    origin: i32,
    train_rows: usize,
    h: usize,
) -> Result<WindowForecasts, EvaluateError> {
    let keys = dataset.all_keys();
    let p = dataset.grid().len();
    let rows = keys.len();
    let n_bottom = dataset.bottom_keys().len();
    let window_seed = child_seed(plan.seed, window as u64);
    let wants = |m: Method| plan.methods.contains(&m);
    let reconciled = wants(Method::BottomUp) || wants(Method::OptimalCombination);
    let needs_fpca = wants(Method::Independent) || reconciled;

    let mut points = BTreeMap::new();
    let mut bounds = BTreeMap::new();

    if wants(Method::FMedian) {
        let median: Vec<Vec<Vec<f64>>> = smoothed
            .iter()
            .map(|s| {
                let curve = moving_median_forecast(&s.head(train_rows), h);
                vec![curve; h]
            })
            .collect();
        points.insert(Method::FMedian, median);
    }
    if !needs_fpca {
        return Ok(WindowForecasts { points, bounds });
    }

    let fits: Vec<SeriesFit> = smoothed
        .par_iter()
        .zip(&keys)
        .map(|(s, key)| {
            fit_series(&s.head(train_rows), plan, h).map_err(|source| EvaluateError::Series {
                window: origin,
                key: key.to_string(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let base: Vec<Vec<Vec<f64>>> = fits
        .iter()
        .map(|f| (0..h).map(|i| f.curves.row(i).iter().copied().collect()).collect())
        .collect();

    let window_err = |source: StageError| EvaluateError::Window { window: origin, source };
    if wants(Method::Independent) {
        points.insert(Method::Independent, base.clone());
        if let Some(settings) = &plan.intervals {
            let b: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..rows)
                .into_par_iter()
                .map(|r| {
                    (1..=h)
                        .map(|step| {
                            let seed = child_seed(window_seed, (r * h + step) as u64);
                            let f = interval_from_errors(
                                &base[r][step - 1],
                                &fits[r].errors[step - 1],
                                step,
                                plan.alpha,
                                settings.kind,
                                settings.replicates,
                                seed,
                            )
                            .map_err(|e| EvaluateError::Series {
                                window: origin,
                                key: keys[r].to_string(),
                                source: e.into(),
                            })?;
                            Ok((f.lower, f.upper))
                        })
                        .collect::<Result<_, EvaluateError>>()
                })
                .collect::<Result<_, _>>()?;
            bounds.insert(Method::Independent, b);
        }
    }
    if !reconciled {
        return Ok(WindowForecasts { points, bounds });
    }

    let train = dataset.head(train_rows).map_err(|e| window_err(e.into()))?;
    let s_all = forecast_summing_matrices(&train, h, &AutoArimaForecaster::default()).map_err(|e| window_err(e.into()))?;
    let weights = Weighting::Wls(wls_weights(&fits));
    let projections: Vec<Vec<Projection>> = if wants(Method::OptimalCombination) {
        s_all
            .par_iter()
            .map(|per_age| per_age.iter().map(|s| Projection::new(s, &weights)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()
            .map_err(|e| window_err(e.into()))?
    } else {
        Vec::new()
    };

    for method in [Method::BottomUp, Method::OptimalCombination] {
        if !wants(method) {
            continue;
        }
        let mut out = vec![vec![vec![0.0; p]; h]; rows];
        for step in 0..h {
            for z in 0..p {
                let x = DVector::from_fn(rows, |r, _| base[r][step][z].exp());
                let rec = match method {
                    Method::BottomUp => &s_all[step][z].entries * x.rows(rows - n_bottom, n_bottom),
                    _ => projections[step][z].apply(&x).map_err(|e| window_err(e.into()))?,
                };
                for r in 0..rows {
                    out[r][step][z] = if method == Method::BottomUp && r >= rows - n_bottom {
                        // Identity rows: keep the base forecast bit for bit.
                        base[r][step][z]
                    } else if rec[r] > 0.0 {
                        rec[r].ln()
                    } else {
                        // No log rate exists; score the series' own base forecast instead.
                        base[r][step][z]
                    };
                }
            }
        }
        if let Some(settings) = &plan.intervals {
            let mut b = vec![Vec::with_capacity(h); rows];
            for step in 1..=h {
                let pts = DMatrix::from_fn(rows, p, |r, z| base[r][step - 1][z]);
                let errs: Vec<DMatrix<f64>> = fits.iter().map(|f| f.errors[step - 1].clone()).collect();
                let map = match method {
                    Method::BottomUp => ReplicateMap::BottomUp(&s_all[step - 1]),
                    _ => ReplicateMap::Optimal(&projections[step - 1]),
                };
                let seed = child_seed(window_seed, (rows * h + step) as u64 + if method == Method::BottomUp { 0 } else { 1 << 32 });
                let intervals = reconcile_interval_replicates(
                    &pts,
                    &errs,
                    &map,
                    step,
                    plan.alpha,
                    settings.kind,
                    settings.replicates,
                    seed,
                )
                .map_err(|e| window_err(e.into()))?;
                for (r, f) in intervals.into_iter().enumerate() {
                    b[r].push((f.lower, f.upper));
                }
            }
            bounds.insert(method, b);
        }
        points.insert(method, out);
    }
    Ok(WindowForecasts { points, bounds })
}

pub fn run_backtest(dataset: &GroupedDataset, plan: &BacktestPlan) -> Result<BacktestReport, EvaluateError> {
    plan.validate(dataset)?;
    let years = dataset.years();
    let start = years.iter().position(|&y| y == plan.train_start).expect("validated");
    let len = (plan.data_end - plan.train_start + 1) as usize;
    let data = dataset.slice(start, len)?;
    let keys = data.all_keys();
    let smoothed_map = smooth_dataset(&data, &plan.smoothing)?;
    let smoothed: Vec<FunctionalSeries> = keys.iter().map(|k| smoothed_map[k].clone()).collect();
    let origins = plan.origins();
    let level_of: Vec<usize> = data
        .level_keys()
        .iter()
        .enumerate()
        .flat_map(|(l, ks)| std::iter::repeat_n(l, ks.len()))
        .collect();
    let n_levels = data.level_keys().len();
    let p = data.grid().len();
    let to_scale = |v: f64| match plan.scale {
        ScoringScale::LogRate => v,
        ScoringScale::Rate => v.exp(),
    };

    // [method][row][h - 1] -> (actual, forecast, lower, upper) rows across windows.
    type Rows = Vec<Vec<f64>>;
    let mut acc: BTreeMap<Method, Vec<Vec<(Rows, Rows, Rows, Rows)>>> = BTreeMap::new();
    for &m in &plan.methods {
        acc.insert(m, vec![vec![Default::default(); plan.h_max]; keys.len()]);
    }
    for (w, &origin) in origins.iter().enumerate() {
        let train_rows = (origin - plan.train_start + 1) as usize;
        let h = plan.h_max.min((plan.data_end - origin) as usize);
        let f = forecast_window(&data, &smoothed, plan, w, origin, train_rows, h)?;
        for &m in &plan.methods {
            let slots = acc.get_mut(&m).expect("initialised");
            for (r, series) in smoothed.iter().enumerate() {
                for step in 0..h {
                    let actual: Vec<f64> = series.values().row(train_rows + step).iter().map(|v| to_scale(*v)).collect();
                    let slot = &mut slots[r][step];
                    slot.0.push(actual);
                    slot.1.push(f.points[&m][r][step].iter().map(|v| to_scale(*v)).collect());
                    if let Some(b) = f.bounds.get(&m) {
                        let (l, u) = &b[r][step];
                        slot.2.push(l.iter().map(|v| to_scale(*v)).collect());
                        slot.3.push(u.iter().map(|v| to_scale(*v)).collect());
                    }
                }
            }
        }
    }

    let matrix = |rows: &Rows| DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let mut cells = Vec::new();
    let mut summaries = Vec::new();
    for &m in &plan.methods {
        let slots = &acc[&m];
        for level in 0..n_levels {
            let members: Vec<usize> = (0..keys.len()).filter(|&r| level_of[r] == level).collect();
            let mut level_cells = Vec::new();
            for step in 0..plan.h_max {
                let (mut sum_mafe, mut sum_rmsfe, mut sum_score) = (0.0, 0.0, 0.0);
                let mut has_score = true;
                for &r in &members {
                    let (a, fc, lo, up) = &slots[r][step];
                    let (a, fc) = (matrix(a), matrix(fc));
                    sum_mafe += mafe(&a, &fc)?;
                    sum_rmsfe += rmsfe(&a, &fc)?;
                    if lo.is_empty() {
                        has_score = false;
                    } else {
                        sum_score += mean_interval_score(&matrix(lo), &matrix(up), &a, plan.alpha)?;
                    }
                }
                let k = members.len() as f64;
                level_cells.push(Cell {
                    method: m,
                    level,
                    horizon: step + 1,
                    forecasts: slots[members[0]][step].0.len(),
                    mafe: sum_mafe / k,
                    rmsfe: sum_rmsfe / k,
                    interval_score: has_score.then_some(sum_score / k),
                });
            }
            let rm: Vec<f64> = level_cells.iter().map(|c| c.rmsfe).collect();
            let ma: Vec<f64> = level_cells.iter().map(|c| c.mafe).collect();
            let sc: Option<Vec<f64>> = level_cells.iter().map(|c| c.interval_score).collect();
            summaries.push(LevelSummary {
                method: m,
                level,
                mean_rmsfe: summarize(&rm, Summary::Mean, plan.median_rule),
                median_mafe: summarize(&ma, Summary::Median, plan.median_rule),
                mean_score: sc.as_ref().map(|s| summarize(s, Summary::Mean, plan.median_rule)),
                median_score: sc.as_ref().map(|s| summarize(s, Summary::Median, plan.median_rule)),
            });
            cells.extend(level_cells);
        }
    }
    Ok(BacktestReport {
        seed: plan.seed,
        config_hash: plan.config_hash(),
        level_labels: (0..n_levels).map(|l| data.scheme().level_label(l)).collect(),
        methods: plan.methods.clone(),
        h_max: plan.h_max,
        cells,
        summaries,
    })
}
