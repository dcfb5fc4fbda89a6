use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DynslError, Result};

/// Natural cubic spline basis without intercept, in the truncated-power
/// form. `df` columns use `df + 1` knots: the two boundary knots and
/// `df - 1` interior knots. Beyond the boundary knots every column is
/// linear; `df = 1` is the single rescaled linear column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub interior_knots: Vec<f64>,
    pub boundary_knots: (f64, f64),
    pub df: usize,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl SplineBasis {
    /// Places interior knots at equally spaced quantiles of the `times`
    /// that fall inside `boundary`.
    pub fn from_times(times: &[f64], df: usize, boundary: (f64, f64)) -> Result<Self> {
        let (a, b) = boundary;
        if df == 0 {
            return Err(DynslError::domain("mixed_model", "spline df must be at least 1"));
        }
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(DynslError::domain(
                "mixed_model",
                format!("spline boundary ({a}, {b}) must be finite and increasing"),
            ));
        }
        let mut inside: Vec<f64> = times.iter().copied().filter(|x| *x >= a && *x <= b).collect();
        inside.sort_by(f64::total_cmp);
        let mut distinct = inside.clone();
        distinct.dedup();
        if distinct.len() < df + 1 {
            return Err(DynslError::domain(
                "mixed_model",
                format!(
                    "spline df {df} needs at least {} distinct times, found {}",
                    df + 1,
                    distinct.len()
                ),
            ));
        }
        let interior_knots: Vec<f64> = (1..df).map(|k| quantile(&inside, k as f64 / df as f64)).collect();
        let mut prev = a;
        for &k in interior_knots.iter().chain(std::iter::once(&b)) {
            if !(k > prev) {
                return Err(DynslError::domain(
                    "mixed_model",
                    format!("spline knots are not strictly increasing near {k}; reduce df"),
                ));
            }
            prev = k;
        }
        Ok(Self {
            interior_knots,
            boundary_knots: boundary,
            df,
        })
    }

    /// Basis row at `x`.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let (a, b) = self.boundary_knots;
        let scale = b - a;
        let z = (x - a) / scale;
        // normalized knots 0 = xi_1 < ... < xi_K = 1
        let mut knots = Vec::with_capacity(self.df + 1);
        knots.push(0.0);
        knots.extend(self.interior_knots.iter().map(|k| (k - a) / scale));
        knots.push(1.0);
        let kk = knots.len();
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |k: usize| (cube(z - knots[k]) - cube(z - knots[kk - 1])) / (knots[kk - 1] - knots[k]);
        let mut row = Vec::with_capacity(self.df);
        row.push(z);
        if kk > 2 {
            let last = d(kk - 2);
            for k in 0..kk - 2 {
                row.push(d(k) - last);
            }
        }
        row
    }
}

/// Design matrix of the natural cubic spline basis for `times`.
pub fn natural_cubic_basis(times: &[f64], df: usize, boundary: (f64, f64)) -> Result<DMatrix<f64>> {
    let basis = SplineBasis::from_times(times, df, boundary)?;
    let mut m = DMatrix::zeros(times.len(), df);
    for (i, &x) in times.iter().enumerate() {
        for (j, v) in basis.evaluate(x).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}
