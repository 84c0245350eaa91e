//! Fraiman–Muniz functional depth and the functional-median baseline forecast.

use crate::domain::FunctionalSeries;

/// How the pointwise empirical CDF treats ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CdfConvention {
    /// `(#{x_j < x} + #{x_j <= x}) / 2n`.
    #[default]
    Midrank,
    /// `#{x_j <= x} / n`.
    AtMost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRanking {
    /// One depth per curve, in `[1/2, 1]` under the midrank convention.
    pub depths: Vec<f64>,
    /// Deepest curve; the smallest index wins ties.
    pub median_index: usize,
}

/// Depth of each curve: the grid-normalised integral of `1 - |1/2 - F_z(x_i(z))|`.
pub fn fm_depth(series: &FunctionalSeries) -> DepthRanking {
    fm_depth_with(series, CdfConvention::Midrank)
}

pub fn fm_depth_with(series: &FunctionalSeries, convention: CdfConvention) -> DepthRanking {
    let x = series.values();
    let (n, p) = x.shape();
    let w = series.grid().trapezoid_weights();
    let span = series.grid().last() - series.grid().first();
    let mut depths = vec![0.0; n];
    let mut column = Vec::with_capacity(n);
    for j in 0..p {
        column.clear();
        column.extend(x.column(j).iter().copied());
        column.sort_by(f64::total_cmp);
        for (i, d) in depths.iter_mut().enumerate() {
            let v = x[(i, j)];
            let less = column.partition_point(|c| *c < v);
            let at_most = column.partition_point(|c| *c <= v);
            let f = match convention {
                CdfConvention::Midrank => (less + at_most) as f64 / (2 * n) as f64,
                CdfConvention::AtMost => at_most as f64 / n as f64,
            };
            *d += w[j] * (1.0 - (0.5 - f).abs());
        }
    }
    depths.iter_mut().for_each(|d| *d /= span);
    let median_index = depths
        .iter()
        .enumerate()
        .fold(0, |best, (i, d)| if *d > depths[best] { i } else { best });
    DepthRanking { depths, median_index }
}

/// Forecast at every horizon: the functional median of the training curves.
pub fn moving_median_forecast(series: &FunctionalSeries, _h: usize) -> Vec<f64> {
    series.curve(fm_depth(series).median_index)
}
