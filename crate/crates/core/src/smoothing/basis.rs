//! Banded design matrices: cubic B-splines on equally spaced knots and the
//! second-difference operator on the fitted values.

/// Sparse row: contiguous non-zero entries starting at column `start`.
#[derive(Debug, Clone)]
pub(crate) struct BandRow {
    pub start: usize,
    pub values: Vec<f64>,
}

impl BandRow {
    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v * coef[self.start + k])
            .sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub n_coef: usize,
    /// One row per grid point.
    pub basis: Vec<BandRow>,
    /// Rows of `D B` where `D` takes differences of forward-difference slopes.
    pub roughness: Vec<BandRow>,
}

impl Design {
    pub fn new(ages: &[f64], interior_knots: usize) -> Self {
        let p = ages.len();
        let basis = if interior_knots + 4 >= p {
            identity_rows(p)
        } else {
            cubic_bspline_rows(ages, interior_knots)
        };
        let n_coef = basis.iter().map(|r| r.start + r.values.len()).max().unwrap_or(0);
        let mut roughness = Vec::with_capacity(p.saturating_sub(2));
        for j in 0..p.saturating_sub(2) {
            let h0 = ages[j + 1] - ages[j];
            let h1 = ages[j + 2] - ages[j + 1];
            let weights = [1.0 / h0, -1.0 / h0 - 1.0 / h1, 1.0 / h1];
            let start = basis[j].start;
            let end = (0..3).map(|k| basis[j + k].start + basis[j + k].values.len()).max().unwrap();
            let mut values = vec![0.0; end - start];
            for (k, w) in weights.iter().enumerate() {
                let row = &basis[j + k];
                for (i, v) in row.values.iter().enumerate() {
                    values[row.start + i - start] += w * v;
                }
            }
            roughness.push(BandRow { start, values });
        }
        Self {
            n_coef,
            basis,
            roughness,
        }
    }

    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|r| r.dot(coef)).collect()
    }
}

fn identity_rows(p: usize) -> Vec<BandRow> {
    (0..p)
        .map(|j| BandRow {
            start: j,
            values: vec![1.0],
        })
        .collect()
}

/// Clamped cubic B-splines with `interior` equally spaced interior knots;
/// `interior + 4` basis functions.
fn cubic_bspline_rows(x: &[f64], interior: usize) -> Vec<BandRow> {
    const DEGREE: usize = 3;
    let (lo, hi) = (x[0], x[x.len() - 1]);
    let mut knots = vec![lo; DEGREE + 1];
    for i in 1..=interior {
        knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat_n(hi, DEGREE + 1));
    let n_basis = interior + DEGREE + 1;

    x.iter()
        .map(|&t| {
            // Knot span index `s` with knots[s] <= t < knots[s + 1]; the right end uses the last span.
            let mut s = DEGREE;
            while s < n_basis - 1 && t >= knots[s + 1] {
                s += 1;
            }
            // de Boor's triangular scheme for the DEGREE + 1 non-zero basis values.
            let mut n = [0.0; DEGREE + 1];
            n[0] = 1.0;
            let mut left = [0.0; DEGREE + 1];
            let mut right = [0.0; DEGREE + 1];
            for j in 1..=DEGREE {
                left[j] = t - knots[s + 1 - j];
                right[j] = knots[s + j] - t;
                let mut saved = 0.0;
                for r in 0..j {
                    let denom = right[r + 1] + left[j - r];
                    let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                    n[r] = saved + right[r + 1] * temp;
                    saved = left[j - r] * temp;
                }
                n[j] = saved;
            }
            BandRow {
                start: s - DEGREE,
                values: n.to_vec(),
            }
        })
        .collect()
}
