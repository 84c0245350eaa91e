//! Univariate ARIMA engine: KPSS-driven differencing, exact maximum likelihood,
//! stepwise AICc order search and h-step forecasts with variances.

mod auto;
mod kalman;
mod kpss;
mod optim;

use nalgebra::DMatrix;
use thiserror::Error;

pub use auto::{auto_arima, auto_arima_with, AutoArimaOptions};
pub use kpss::{kpss_level_test, select_d, KpssResult, KPSS_CRITICAL_5PCT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArimaError {
    #[error("series too short: need {needed} observations, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("optimizer failed to converge for ARIMA({p},{d},{q})")]
    NonConvergence { p: usize, d: usize, q: usize },
    #[error("ARIMA({p},{d},{q}) estimate lies on the stationarity/invertibility boundary")]
    NonInvertible { p: usize, d: usize, q: usize },
    #[error("no ARIMA candidate could be fitted")]
    AllCandidatesFailed,
    #[error("series contains non-finite values")]
    NonFinite,
}

/// Roots of fitted polynomials must lie at least this far outside the unit circle.
pub const ROOT_MARGIN: f64 = 1e-6;

/// Innovation variances below this are treated as this value so that exactly
/// deterministic series still have a finite likelihood.
const VARIANCE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Order {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Order {
    pub fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

/// A fitted ARIMA(p,d,q) model
/// `(1 - psi_1 B - ... - psi_p B^p)(1 - B)^d x_t = alpha + (1 + theta_1 B + ... + theta_q B^q) w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArimaModel {
    pub order: Order,
    /// The constant `alpha` of the difference equation (zero when excluded).
    pub intercept: f64,
    pub has_intercept: bool,
    pub ar_coefficients: Vec<f64>,
    pub ma_coefficients: Vec<f64>,
    pub innovation_variance: f64,
    pub log_likelihood: f64,
    pub aicc: f64,
    pub fitted_on: usize,
}

impl ArimaModel {
    /// Mean of the differenced process implied by the intercept.
    pub fn process_mean(&self) -> f64 {
        if !self.has_intercept {
            return 0.0;
        }
        self.intercept / (1.0 - self.ar_coefficients.iter().sum::<f64>())
    }

    /// Number of estimated parameters including the innovation variance.
    pub fn n_parameters(&self) -> usize {
        self.order.p + self.order.q + usize::from(self.has_intercept) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// One-step in-sample prediction errors aligned with the input series;
    /// `NaN` where no prediction exists.
    pub residuals: Vec<f64>,
}

/// `d`-fold differencing.
pub fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    out
}

/// Inverts `difference(x, d)` given the first `d` values of each differencing level
/// of the original series (`heads[i]` is the first value of the `i`-times differenced series).
pub fn undifference(diffed: &[f64], heads: &[f64]) -> Vec<f64> {
    let mut out = diffed.to_vec();
    for &head in heads.iter().rev() {
        let mut level = Vec::with_capacity(out.len() + 1);
        level.push(head);
        for v in &out {
            let last = *level.last().unwrap();
            level.push(last + v);
        }
        out = level;
    }
    out
}

/// Maps unconstrained reals to the coefficients of a stationary polynomial
/// `1 - c_1 B - ... - c_k B^k` via partial autocorrelations.
fn pacf_to_coefficients(u: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(u.len());
    for (k, &raw) in u.iter().enumerate() {
        let r = raw.tanh();
        let mut next = phi.clone();
        for j in 0..k {
            next[j] = phi[j] - r * phi[k - 1 - j];
        }
        next.push(r);
        phi = next;
    }
    phi
}

/// Inverse of `pacf_to_coefficients`; `None` if the polynomial is not stationary.
fn coefficients_to_pacf(c: &[f64]) -> Option<Vec<f64>> {
    let mut phi = c.to_vec();
    let mut u = vec![0.0; c.len()];
    for k in (0..c.len()).rev() {
        let r = phi[k];
        if !(r.abs() < 0.999) {
            return None;
        }
        u[k] = r.atanh();
        let denom = 1.0 - r * r;
        phi = (0..k).map(|j| (phi[j] + r * phi[k - 1 - j]) / denom).collect();
    }
    Some(u)
}

/// Hannan-Rissanen regression estimates used as optimizer starting values.
fn hannan_rissanen(y: &[f64], mean: f64, p: usize, q: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let z: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let m = z.len();
    let lstsq = |rows: Vec<Vec<f64>>, target: Vec<f64>| -> Option<Vec<f64>> {
        let k = rows.first()?.len();
        if rows.len() <= k {
            return None;
        }
        let a = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
        let b = nalgebra::DVector::from_vec(target);
        let sol = a.svd(true, true).solve(&b, 1e-10).ok()?;
        Some(sol.iter().copied().collect())
    };
    let resid = if q > 0 {
        let long = ((m as f64).ln().ceil() as usize * 2).max(p + q).min(m / 3);
        if long == 0 {
            return None;
        }
        let rows: Vec<Vec<f64>> = (long..m).map(|t| (1..=long).map(|l| z[t - l]).collect()).collect();
        let target: Vec<f64> = (long..m).map(|t| z[t]).collect();
        let coef = lstsq(rows, target)?;
        let mut e = vec![0.0; m];
        for t in long..m {
            e[t] = z[t] - (1..=long).map(|l| coef[l - 1] * z[t - l]).sum::<f64>();
        }
        e
    } else {
        vec![0.0; m]
    };
    let skip = if q > 0 { ((m as f64).ln().ceil() as usize * 2).max(p + q).min(m / 3) + q } else { p };
    let start = skip.max(p).max(1);
    if start >= m {
        return None;
    }
    let rows: Vec<Vec<f64>> = (start..m)
        .map(|t| (1..=p).map(|l| z[t - l]).chain((1..=q).map(|l| resid[t - l])).collect())
        .collect();
    let target: Vec<f64> = (start..m).map(|t| z[t]).collect();
    let coef = lstsq(rows, target)?;
    Some((coef[..p].to_vec(), coef[p..].to_vec()))
}

/// Largest modulus among the reciprocal roots of `1 - c_1 z - ... - c_k z^k`.
fn max_reciprocal_root(c: &[f64]) -> f64 {
    let k = c.len();
    if k == 0 {
        return 0.0;
    }
    let mut companion = DMatrix::zeros(k, k);
    for j in 0..k {
        companion[(0, j)] = c[j];
    }
    for i in 1..k {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn roots_ok(c: &[f64]) -> bool {
    max_reciprocal_root(c) < 1.0 / (1.0 + ROOT_MARGIN)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn aicc(log_likelihood: f64, k: usize, n_eff: usize) -> f64 {
    let k = k as f64;
    let n = n_eff as f64;
    if n - k - 1.0 <= 0.0 {
        return f64::INFINITY;
    }
    -2.0 * log_likelihood + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0)
}

/// Concentrated negative log-likelihood and the implied innovation variance.
fn concentrated_nll(y: &[f64], mu: f64, ar: &[f64], ma: &[f64]) -> Option<(f64, f64)> {
    let centred: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let inn = kalman::innovations(&centred, ar, ma)?;
    let m = y.len() as f64;
    let ssq: f64 = inn.errors.iter().zip(&inn.variances).map(|(v, f)| v * v / f).sum();
    let log_det: f64 = inn.variances.iter().map(|f| f.ln()).sum();
    let sigma2 = (ssq / m).max(VARIANCE_FLOOR);
    let nll = 0.5 * m * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + 0.5 * log_det;
    nll.is_finite().then_some((nll, sigma2))
}

/// Maximum-likelihood fit of ARIMA(p,d,q) on `x`.
pub fn fit_arima(x: &[f64], order: Order, with_intercept: bool) -> Result<ArimaModel, ArimaError> {
    let Order { p, d, q } = order;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ArimaError::NonFinite);
    }
    if x.len() <= d + p + q + 2 {
        return Err(ArimaError::SeriesTooShort {
            needed: d + p + q + 3,
            got: x.len(),
        });
    }
    let y = difference(x, d);
    let m = y.len();
    let y_mean = mean(&y);
    let k = p + q + usize::from(with_intercept) + 1;

    if p == 0 && q == 0 {
        let mu = if with_intercept { y_mean } else { 0.0 };
        let sigma2 = (y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64).max(VARIANCE_FLOOR);
        let ll = -0.5 * m as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
        return Ok(ArimaModel {
            order,
            intercept: mu,
            has_intercept: with_intercept,
            ar_coefficients: vec![],
            ma_coefficients: vec![],
            innovation_variance: sigma2,
            log_likelihood: ll,
            aicc: aicc(ll, k, m),
            fitted_on: x.len(),
        });
    }

    let sd = {
        let v = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / m as f64;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    };
    let offset = usize::from(with_intercept);
    let unpack = |theta: &[f64]| {
        let mu = if with_intercept { y_mean + sd * theta[0] } else { 0.0 };
        let ar = pacf_to_coefficients(&theta[offset..offset + p]);
        let ma: Vec<f64> = pacf_to_coefficients(&theta[offset + p..]).iter().map(|c| -c).collect();
        (mu, ar, ma)
    };
    let objective = |theta: &[f64]| {
        if theta.iter().skip(offset).any(|u| u.abs() > 20.0) {
            return f64::INFINITY;
        }
        let (mu, ar, ma) = unpack(theta);
        concentrated_nll(&y, mu, &ar, &ma).map_or(f64::INFINITY, |(nll, _)| nll)
    };
    let mut starts = Vec::new();
    if let Some((ar0, ma0)) = hannan_rissanen(&y, y_mean, p, q) {
        let neg: Vec<f64> = ma0.iter().map(|c| -c).collect();
        if let (Some(ua), Some(um)) = (coefficients_to_pacf(&ar0), coefficients_to_pacf(&neg)) {
            let mut s = vec![0.0; offset];
            s.extend(ua);
            s.extend(um);
            starts.push(s);
        }
    }
    // A zero start is tried when no regression start exists, or when the
    // regression start of a model with p + q >= 2 ends on the boundary.
    let retry_from_zero = starts.is_empty() || p + q >= 2;
    starts.push(vec![0.0; offset + p + q]);
    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    let mut boundary = false;
    for (i, start) in starts.iter().enumerate() {
        let is_zero_fallback = i > 0;
        if is_zero_fallback && (best.is_some() || !retry_from_zero) {
            break;
        }
        let min = optim::bfgs(&objective, start, 300);
        if !min.converged || !min.f.is_finite() {
            continue;
        }
        let (mu, ar, ma) = unpack(&min.x);
        let neg_ma: Vec<f64> = ma.iter().map(|c| -c).collect();
        if !roots_ok(&ar) || !roots_ok(&neg_ma) {
            boundary = true;
            continue;
        }
        if best.as_ref().is_none_or(|b| min.f < b.0) {
            best = Some((min.f, mu, ar, ma));
        }
    }
    let Some((_, mu, ar, ma)) = best else {
        return Err(if boundary {
            ArimaError::NonInvertible { p, d, q }
        } else {
            ArimaError::NonConvergence { p, d, q }
        });
    };
    let (nll, sigma2) = concentrated_nll(&y, mu, &ar, &ma).ok_or(ArimaError::NonConvergence { p, d, q })?;
    let ll = -nll;
    Ok(ArimaModel {
        order,
        intercept: if with_intercept { mu * (1.0 - ar.iter().sum::<f64>()) } else { 0.0 },
        has_intercept: with_intercept,
        ar_coefficients: ar,
        ma_coefficients: ma,
        innovation_variance: sigma2,
        log_likelihood: ll,
        aicc: aicc(ll, k, m),
        fitted_on: x.len(),
    })
}

/// Psi-weights of the integrated model, `psi_0 = 1`.
pub fn psi_weights(model: &ArimaModel, count: usize) -> Vec<f64> {
    // Full AR polynomial phi(B) (1 - B)^d as coefficients of B^0, B^1, ...
    let mut poly = vec![1.0];
    poly.extend(model.ar_coefficients.iter().map(|c| -c));
    for _ in 0..model.order.d {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c;
        }
        poly = next;
    }
    let a: Vec<f64> = poly[1..].iter().map(|c| -c).collect();
    let mut psi = Vec::with_capacity(count);
    for j in 0..count {
        if j == 0 {
            psi.push(1.0);
            continue;
        }
        let mut v = model.ma_coefficients.get(j - 1).copied().unwrap_or(0.0);
        for (i, ai) in a.iter().enumerate().take(j) {
            v += ai * psi[j - 1 - i];
        }
        psi.push(v);
    }
    psi
}

fn filter(model: &ArimaModel, x: &[f64]) -> Result<(Vec<f64>, kalman::Innovations), ArimaError> {
    let d = model.order.d;
    if x.len() <= d {
        return Err(ArimaError::SeriesTooShort { needed: d + 1, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ArimaError::NonFinite);
    }
    let y = difference(x, d);
    let mu = model.process_mean();
    let centred: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let inn = kalman::innovations(&centred, &model.ar_coefficients, &model.ma_coefficients).ok_or(
        ArimaError::NonInvertible {
            p: model.order.p,
            d,
            q: model.order.q,
        },
    )?;
    Ok((y, inn))
}

/// One-step in-sample prediction errors aligned with `x` (`NaN` for the first `d`).
pub fn residuals(model: &ArimaModel, x: &[f64]) -> Result<Vec<f64>, ArimaError> {
    let (_, inn) = filter(model, x)?;
    let mut out = vec![f64::NAN; model.order.d];
    out.extend(inn.errors);
    Ok(out)
}

/// `h`-step forecast means and variances on the original (integrated) scale.
pub fn forecast(model: &ArimaModel, x: &[f64], h: usize) -> Result<Forecast, ArimaError> {
    let d = model.order.d;
    let (_, inn) = filter(model, x)?;
    let mu = model.process_mean();
    let diffed: Vec<f64> = kalman::project(&inn.state, &model.ar_coefficients, &model.ma_coefficients, h)
        .into_iter()
        .map(|v| v + mu)
        .collect();
    // Integrate back using the last value of each differencing level.
    let mut means = diffed;
    for level in (0..d).rev() {
        let series = difference(x, level);
        let mut last = *series.last().unwrap();
        for v in means.iter_mut() {
            last += *v;
            *v = last;
        }
    }
    let psi = psi_weights(model, h);
    let mut acc = 0.0;
    let variances = psi
        .iter()
        .map(|w| {
            acc += w * w;
            model.innovation_variance * acc
        })
        .collect();
    let mut resid = vec![f64::NAN; d];
    resid.extend(inn.errors);
    Ok(Forecast {
        means,
        variances,
        residuals: resid,
    })
}

/// Per-column score forecasting strategy.
pub trait UnivariateForecaster: Sync {
    fn forecast(&self, x: &[f64], h: usize) -> Result<Forecast, ArimaError>;
}

/// Automatic ARIMA. Series shorter than the automatic search allows fall back to a
/// random walk with drift (at least two observations) or the last value.
#[derive(Debug, Clone, Default)]
pub struct AutoArimaForecaster {
    pub options: AutoArimaOptions,
}

impl AutoArimaForecaster {
    /// The model this forecaster would use for `x`.
    pub fn fit(&self, x: &[f64]) -> Result<ArimaModel, ArimaError> {
        if x.len() >= auto::MIN_LENGTH {
            return auto_arima_with(x, &self.options);
        }
        if x.len() >= 2 {
            return fit_arima(x, Order::new(0, 1, 0), x.len() >= 3);
        }
        Ok(random_walk(x.len()))
    }
}

impl UnivariateForecaster for AutoArimaForecaster {
    fn forecast(&self, x: &[f64], h: usize) -> Result<Forecast, ArimaError> {
        if x.len() < 2 {
            return NaiveForecaster.forecast(x, h);
        }
        forecast(&self.fit(x)?, x, h)
    }
}

/// ARIMA(0,1,0) without drift and unit innovation variance.
fn random_walk(fitted_on: usize) -> ArimaModel {
    ArimaModel {
        order: Order::new(0, 1, 0),
        intercept: 0.0,
        has_intercept: false,
        ar_coefficients: vec![],
        ma_coefficients: vec![],
        innovation_variance: 1.0,
        log_likelihood: f64::NAN,
        aicc: f64::NAN,
        fitted_on,
    }
}

/// Repeats the last observation; variances grow like a unit-variance random walk.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveForecaster;

impl UnivariateForecaster for NaiveForecaster {
    fn forecast(&self, x: &[f64], h: usize) -> Result<Forecast, ArimaError> {
        let last = *x.last().ok_or(ArimaError::SeriesTooShort { needed: 1, got: 0 })?;
        let mut residuals = vec![f64::NAN];
        residuals.extend(x.windows(2).map(|w| w[1] - w[0]));
        Ok(Forecast {
            means: vec![last; h],
            variances: (1..=h).map(|i| i as f64).collect(),
            residuals,
        })
    }
}

/// Forecasts with a fixed, already-estimated model. Inputs too short for the
/// model's differencing order get the last value repeated instead.
#[derive(Debug, Clone)]
pub struct FixedModelForecaster(pub ArimaModel);

impl UnivariateForecaster for FixedModelForecaster {
    fn forecast(&self, x: &[f64], h: usize) -> Result<Forecast, ArimaError> {
        if x.len() <= self.0.order.d {
            return NaiveForecaster.forecast(x, h);
        }
        forecast(&self.0, x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn simulate_arma(seed: u64, n: usize, ar: &[f64], ma: &[f64]) -> Vec<f64> {
        let burn = 200;
        let e = noise(seed, n + burn);
        let mut x = vec![0.0; n + burn];
        for t in 0..n + burn {
            let mut v = e[t];
            for (i, a) in ar.iter().enumerate() {
                if t > i {
                    v += a * x[t - 1 - i];
                }
            }
            for (i, m) in ma.iter().enumerate() {
                if t > i {
                    v += m * e[t - 1 - i];
                }
            }
            x[t] = v;
        }
        x.split_off(burn)
    }

    #[test]
    fn differencing_round_trip() {
        let x = [1.0, 4.0, 2.0, 8.0, -3.0, 0.5];
        for d in 0..3 {
            let heads: Vec<f64> = (0..d).map(|l| difference(&x, l)[0]).collect();
            assert_eq!(undifference(&difference(&x, d), &heads), x.to_vec());
        }
    }

    #[test]
    fn pacf_transform_is_stationary() {
        for u in [[0.3, -2.0, 5.0], [4.0, 4.0, -4.0]] {
            let c = pacf_to_coefficients(&u);
            assert!(max_reciprocal_root(&c) < 1.0);
        }
    }

    #[test]
    fn white_noise_model_is_closed_form() {
        let x = [1.0, 3.0, 2.0, 6.0, 4.0];
        let m = fit_arima(&x, Order::new(0, 0, 0), true).unwrap();
        assert_eq!(m.intercept, 3.2);
        let var = x.iter().map(|v| (v - 3.2f64).powi(2)).sum::<f64>() / 5.0;
        assert!((m.innovation_variance - var).abs() < 1e-15);
        let f = forecast(&m, &x, 3).unwrap();
        assert_eq!(f.means, vec![3.2; 3]);
        assert!(f.variances.iter().all(|v| (v - var).abs() < 1e-15));
    }

    #[test]
    fn random_walk_forecast_is_flat() {
        let x = [1.0, 3.0, 2.0, 6.0, 4.0];
        let m = fit_arima(&x, Order::new(0, 1, 0), false).unwrap();
        let f = forecast(&m, &x, 4).unwrap();
        assert_eq!(f.means, vec![4.0; 4]);
        let s2 = m.innovation_variance;
        assert_eq!(f.variances, vec![s2, 2.0 * s2, 3.0 * s2, 4.0 * s2]);
    }

    #[test]
    fn ar1_forecast_recursion() {
        let model = ArimaModel {
            order: Order::new(1, 0, 0),
            intercept: 0.0,
            has_intercept: false,
            ar_coefficients: vec![0.5],
            ma_coefficients: vec![],
            innovation_variance: 2.0,
            log_likelihood: 0.0,
            aicc: 0.0,
            fitted_on: 3,
        };
        let f = forecast(&model, &[0.3, -1.0, 2.0], 4).unwrap();
        let want_means = [1.0, 0.5, 0.25, 0.125];
        let want_vars = [2.0, 2.5, 2.625, 2.65625];
        for i in 0..4 {
            assert!((f.means[i] - want_means[i]).abs() < 1e-12);
            assert!((f.variances[i] - want_vars[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_forecast_reverts_to_mean() {
        let x = simulate_arma(7, 300, &[0.6], &[0.3]);
        let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        let m = fit_arima(&shifted, Order::new(1, 0, 1), true).unwrap();
        let f = forecast(&m, &shifted, 200).unwrap();
        assert!((f.means[199] - m.process_mean()).abs() < 1e-6);
        assert!(f.variances.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ar1_and_ma1_recovery() {
        let mut ar_hits = 0;
        let mut ma_hits = 0;
        for seed in 0..100 {
            let x = simulate_arma(seed, 500, &[0.7], &[]);
            let m = fit_arima(&x, Order::new(1, 0, 0), true).unwrap();
            ar_hits += ((m.ar_coefficients[0] - 0.7).abs() <= 0.1) as usize;
            let x = simulate_arma(10_000 + seed, 500, &[], &[0.5]);
            let m = fit_arima(&x, Order::new(0, 0, 1), true).unwrap();
            ma_hits += ((m.ma_coefficients[0] - 0.5).abs() <= 0.1) as usize;
        }
        assert!(ar_hits >= 90, "{ar_hits}");
        assert!(ma_hits >= 90, "{ma_hits}");
    }

    #[test]
    fn fitted_models_satisfy_root_invariants() {
        let x = simulate_arma(3, 200, &[1.2, -0.5], &[0.4]);
        let m = fit_arima(&x, Order::new(2, 0, 1), true).unwrap();
        assert!(roots_ok(&m.ar_coefficients));
        let neg: Vec<f64> = m.ma_coefficients.iter().map(|c| -c).collect();
        assert!(roots_ok(&neg));
        let k = 5.0;
        let expected = -2.0 * m.log_likelihood + 2.0 * k + 2.0 * k * (k + 1.0) / (200.0 - k - 1.0);
        assert!((m.aicc - expected).abs() < 1e-9);
    }

    #[test]
    fn residuals_are_innovations() {
        let x = simulate_arma(11, 100, &[0.5], &[]);
        let m = fit_arima(&x, Order::new(1, 1, 0), false).unwrap();
        let r = residuals(&m, &x).unwrap();
        assert!(r[0].is_nan());
        let dx = difference(&x, 1);
        let a = m.ar_coefficients[0];
        for t in 2..100 {
            assert!((r[t] - (dx[t - 1] - a * dx[t - 2])).abs() < 1e-10);
        }
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(matches!(
            fit_arima(&[1.0, 2.0, 3.0], Order::new(1, 0, 0), true),
            Err(ArimaError::SeriesTooShort { .. })
        ));
    }
}
