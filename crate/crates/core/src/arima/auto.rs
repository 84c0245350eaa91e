use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{difference, fit_arima, select_d, ArimaError, ArimaModel, Order};

pub(crate) const MIN_LENGTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoArimaOptions {
    pub max_p: usize,
    pub max_q: usize,
    pub max_d: usize,
    /// Stepwise neighbourhood search; `false` fits every (p, q) in the box.
    pub stepwise: bool,
}

impl Default for AutoArimaOptions {
    fn default() -> Self {
        Self {
            max_p: 5,
            max_q: 5,
            max_d: 2,
            stepwise: true,
        }
    }
}

/// Candidate ranking: lower AICc, then smaller p + q, then smaller p.
fn better(a: &ArimaModel, b: &ArimaModel) -> bool {
    let by_aicc = a.aicc.partial_cmp(&b.aicc).unwrap_or(Ordering::Equal);
    match by_aicc {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => {
            let ka = (a.order.p + a.order.q, a.order.p);
            let kb = (b.order.p + b.order.q, b.order.p);
            ka < kb
        }
    }
}

/// Constant policy: always for d = 0, for d = 1 only when the mean difference is
/// more than two standard errors from zero, never for d >= 2.
fn include_constant(x: &[f64], d: usize) -> bool {
    match d {
        0 => true,
        1 => {
            let y = difference(x, 1);
            let m = y.len() as f64;
            let mean = y.iter().sum::<f64>() / m;
            let var = if y.len() > 1 {
                y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            mean.abs() > 2.0 * (var / m).sqrt()
        }
        _ => false,
    }
}

pub fn auto_arima(x: &[f64]) -> Result<ArimaModel, ArimaError> {
    auto_arima_with(x, &AutoArimaOptions::default())
}

pub fn auto_arima_with(x: &[f64], options: &AutoArimaOptions) -> Result<ArimaModel, ArimaError> {
    if x.len() < MIN_LENGTH {
        return Err(ArimaError::SeriesTooShort {
            needed: MIN_LENGTH,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ArimaError::NonFinite);
    }
    let max_d = options.max_d.min(x.len() - 8);
    let d = select_d(x, max_d)?;
    let constant = include_constant(x, d);
    // A differenced series with no variation has a degenerate likelihood
    // surface; only the mean model is meaningful.
    let diffed = difference(x, d);
    if diffed.iter().all(|v| *v == diffed[0]) {
        return fit_arima(x, Order::new(0, d, 0), constant || d == 0);
    }

    let mut cache: BTreeMap<(usize, usize), Option<ArimaModel>> = BTreeMap::new();
    let mut fit = |p: usize, q: usize| -> Option<ArimaModel> {
        cache
            .entry((p, q))
            .or_insert_with(|| {
                fit_arima(x, Order::new(p, d, q), constant)
                    .ok()
                    .filter(|m| m.aicc.is_finite())
            })
            .clone()
    };
    let mut best: Option<ArimaModel> = None;
    let consider = |m: Option<ArimaModel>, best: &mut Option<ArimaModel>| -> bool {
        match (m, best.as_ref()) {
            (Some(m), None) => {
                *best = Some(m);
                true
            }
            (Some(m), Some(b)) if better(&m, b) => {
                *best = Some(m);
                true
            }
            _ => false,
        }
    };

    if !options.stepwise {
        for p in 0..=options.max_p {
            for q in 0..=options.max_q {
                let m = fit(p, q);
                consider(m, &mut best);
            }
        }
        return best.ok_or(ArimaError::AllCandidatesFailed);
    }

    for (p, q) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        if p <= options.max_p && q <= options.max_q {
            let m = fit(p, q);
            consider(m, &mut best);
        }
    }
    loop {
        let Some(current) = best.clone() else {
            return Err(ArimaError::AllCandidatesFailed);
        };
        let (p0, q0) = (current.order.p as i64, current.order.q as i64);
        let mut improved = false;
        for dp in -1i64..=1 {
            for dq in -1i64..=1 {
                if dp == 0 && dq == 0 {
                    continue;
                }
                let (p, q) = (p0 + dp, q0 + dq);
                if p < 0 || q < 0 || p > options.max_p as i64 || q > options.max_q as i64 {
                    continue;
                }
                let m = fit(p as usize, q as usize);
                improved |= consider(m, &mut best);
            }
        }
        if !improved {
            return best.ok_or(ArimaError::AllCandidatesFailed);
        }
    }
}
