//! Exact Gaussian likelihood of a zero-mean ARMA process through the Kalman
//! filter on its Harvey state-space form.

/// One-step prediction errors `v_t` and their variances `F_t` (in units of the
/// innovation variance).
pub(crate) struct Innovations {
    pub errors: Vec<f64>,
    pub variances: Vec<f64>,
    /// Predicted state mean and covariance one step past the data.
    pub state: Vec<f64>,
}

struct StateSpace {
    r: usize,
    ar: Vec<f64>,
    /// Column `(1, theta_1, ..., theta_{r-1})`.
    loading: Vec<f64>,
}

impl StateSpace {
    fn new(ar: &[f64], ma: &[f64]) -> Self {
        let r = ar.len().max(ma.len() + 1);
        let mut a = vec![0.0; r];
        a[..ar.len()].copy_from_slice(ar);
        let mut loading = vec![0.0; r];
        loading[0] = 1.0;
        loading[1..=ma.len()].copy_from_slice(ma);
        Self { r, ar: a, loading }
    }

    /// `out = T M T'` for symmetric `M` stored row-major; `tm` is scratch space.
    fn sandwich_into(&self, m: &[f64], tm: &mut [f64], out: &mut [f64]) {
        let r = self.r;
        for i in 0..r {
            for j in 0..r {
                let below = if i + 1 < r { m[(i + 1) * r + j] } else { 0.0 };
                tm[i * r + j] = self.ar[i] * m[j] + below;
            }
        }
        for i in 0..r {
            for j in 0..r {
                let right = if j + 1 < r { tm[i * r + j + 1] } else { 0.0 };
                out[i * r + j] = self.ar[j] * tm[i * r] + right;
            }
        }
    }

    fn transition_in_place(&self, a: &mut [f64]) {
        let first = a[0];
        for i in 0..self.r {
            let next = if i + 1 < self.r { a[i + 1] } else { 0.0 };
            a[i] = self.ar[i] * first + next;
        }
    }

    /// Stationary state covariance solving `P = T P T' + R R'` by doubling.
    fn stationary_covariance(&self) -> Option<Vec<f64>> {
        let r = self.r;
        let mut p: Vec<f64> = (0..r * r)
            .map(|k| self.loading[k / r] * self.loading[k % r])
            .collect();
        // Powers of T stored densely for the doubling recursion.
        let mut t = vec![0.0; r * r];
        for i in 0..r {
            t[i * r] = self.ar[i];
            if i + 1 < r {
                t[i * r + i + 1] = 1.0;
            }
        }
        for _ in 0..64 {
            // p <- p + t p t'
            let mut tp = vec![0.0; r * r];
            for i in 0..r {
                for k in 0..r {
                    let tik = t[i * r + k];
                    if tik != 0.0 {
                        for j in 0..r {
                            tp[i * r + j] += tik * p[k * r + j];
                        }
                    }
                }
            }
            let mut delta_max: f64 = 0.0;
            let mut scale: f64 = 0.0;
            let mut next = p.clone();
            for i in 0..r {
                for j in 0..r {
                    let v: f64 = (0..r).map(|k| tp[i * r + k] * t[j * r + k]).sum();
                    next[i * r + j] += v;
                    delta_max = delta_max.max(v.abs());
                    scale = scale.max(next[i * r + j].abs());
                }
            }
            p = next;
            if !scale.is_finite() {
                return None;
            }
            if delta_max <= 1e-15 * scale {
                return Some(p);
            }
            // t <- t t
            let mut tt = vec![0.0; r * r];
            for i in 0..r {
                for k in 0..r {
                    let tik = t[i * r + k];
                    if tik != 0.0 {
                        for j in 0..r {
                            tt[i * r + j] += tik * t[k * r + j];
                        }
                    }
                }
            }
            t = tt;
        }
        None
    }
}

/// Runs the filter over a zero-mean series. Returns `None` when the model is
/// not stationary or the filter breaks down numerically.
pub(crate) fn innovations(y: &[f64], ar: &[f64], ma: &[f64]) -> Option<Innovations> {
    let ss = StateSpace::new(ar, ma);
    let r = ss.r;
    let q: Vec<f64> = (0..r * r)
        .map(|k| ss.loading[k / r] * ss.loading[k % r])
        .collect();
    let mut p = ss.stationary_covariance()?;
    let mut a = vec![0.0; r];
    let mut errors = Vec::with_capacity(y.len());
    let mut variances = Vec::with_capacity(y.len());
    let mut col = vec![0.0; r];
    let mut scratch = vec![0.0; r * r];
    let mut next = vec![0.0; r * r];
    let mut steady = false;
    for &obs in y {
        let v = obs - a[0];
        let f = p[0];
        if !(f.is_finite() && f > 0.0) {
            return None;
        }
        errors.push(v);
        variances.push(f);
        for i in 0..r {
            col[i] = p[i * r];
            a[i] += col[i] * v / f;
        }
        ss.transition_in_place(&mut a);
        if !steady {
            for i in 0..r {
                for j in 0..r {
                    p[i * r + j] -= col[i] * col[j] / f;
                }
            }
            ss.sandwich_into(&p, &mut scratch, &mut next);
            for (nv, qv) in next.iter_mut().zip(&q) {
                *nv += qv;
            }
            // Once F reaches 1 the gain is constant and P no longer changes.
            steady = (next[0] - 1.0).abs() < 1e-12;
            std::mem::swap(&mut p, &mut next);
        }
    }
    Some(Innovations {
        errors,
        variances,
        state: a,
    })
}

/// Predicted future values of a zero-mean ARMA process from its final predicted state.
pub(crate) fn project(state: &[f64], ar: &[f64], ma: &[f64], h: usize) -> Vec<f64> {
    let ss = StateSpace::new(ar, ma);
    let mut a = state.to_vec();
    let mut out = Vec::with_capacity(h);
    for _ in 0..h {
        out.push(a[0]);
        ss.transition_in_place(&mut a);
    }
    out
}
