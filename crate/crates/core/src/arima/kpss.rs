use super::ArimaError;

/// Upper 5% critical value of the level-stationarity KPSS statistic.
pub const KPSS_CRITICAL_5PCT: f64 = 0.463;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpssResult {
    pub statistic: f64,
    pub lags: usize,
    pub critical_value_5pct: f64,
    pub reject: bool,
}

/// KPSS test of level stationarity with a Bartlett-kernel long-run variance.
pub fn kpss_level_test(x: &[f64]) -> Result<KpssResult, ArimaError> {
    let n = x.len();
    if n < 8 {
        return Err(ArimaError::SeriesTooShort { needed: 8, got: n });
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let e: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let lags = (4.0 * (nf / 100.0).powf(0.25)).floor() as usize;

    let mut partial = 0.0;
    let mut sum_sq_partial = 0.0;
    for v in &e {
        partial += v;
        sum_sq_partial += partial * partial;
    }
    let autocov = |l: usize| e[l..].iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / nf;
    let mut long_run = autocov(0);
    for l in 1..=lags.min(n - 1) {
        long_run += 2.0 * (1.0 - l as f64 / (lags as f64 + 1.0)) * autocov(l);
    }
    let statistic = if long_run > 0.0 {
        sum_sq_partial / (nf * nf * long_run)
    } else {
        0.0
    };
    Ok(KpssResult {
        statistic,
        lags,
        critical_value_5pct: KPSS_CRITICAL_5PCT,
        reject: statistic > KPSS_CRITICAL_5PCT,
    })
}

/// Smallest differencing order whose KPSS test does not reject, capped at `d_max`.
pub fn select_d(x: &[f64], d_max: usize) -> Result<usize, ArimaError> {
    if x.len() < 8 + d_max {
        return Err(ArimaError::SeriesTooShort {
            needed: 8 + d_max,
            got: x.len(),
        });
    }
    let mut current = x.to_vec();
    for d in 0..d_max {
        if !kpss_level_test(&current)?.reject {
            return Ok(d);
        }
        current = super::difference(&current, 1);
    }
    Ok(d_max)
}
