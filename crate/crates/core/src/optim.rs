//! Small numerical kernels: Nelder–Mead, Euclidean projection onto the
//! probability simplex, adaptive Simpson quadrature and bisection.

use crate::error::{DynslError, Result};

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    /// Stop when the simplex diameter falls below this.
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            f_tol: 1e-10,
            x_tol: 1e-10,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` with the adaptive Nelder–Mead method (Gao & Han
/// coefficients). Non-finite objective values are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    if n == 0 {
        let value = eval(x0);
        return Minimum {
            x: vec![],
            value,
            iterations: 0,
            converged: true,
        };
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for j in 0..n {
        let mut p = x0.to_vec();
        p[j] += if p[j] != 0.0 {
            opts.initial_step * p[j].abs().max(1.0)
        } else {
            opts.initial_step
        };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];

    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let diameter = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol * (1.0 + vals[0].abs())) || diameter <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / nf;
            }
        }
        let along = |t: &mut Vec<f64>, coef: f64, worst: &[f64], c: &[f64]| {
            for k in 0..n {
                t[k] = c[k] + coef * (c[k] - worst[k]);
            }
        };

        along(&mut trial, alpha, &pts[n], &centroid);
        let fr = eval(&trial);
        if fr < vals[0] {
            let reflected = trial.clone();
            along(&mut trial, alpha * beta, &pts[n], &centroid);
            let fe = eval(&trial);
            if fe < fr {
                pts[n].copy_from_slice(&trial);
                vals[n] = fe;
            } else {
                pts[n] = reflected;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n].copy_from_slice(&trial);
            vals[n] = fr;
            continue;
        }
        let outside = fr < vals[n];
        let coef = if outside { alpha * gamma } else { -gamma };
        along(&mut trial, coef, &pts[n], &centroid);
        let fc = eval(&trial);
        if (outside && fc <= fr) || (!outside && fc < vals[n]) {
            pts[n].copy_from_slice(&trial);
            vals[n] = fc;
            continue;
        }
        let best = pts[0].clone();
        for j in 1..=n {
            for k in 0..n {
                pts[j][k] = best[k] + delta * (pts[j][k] - best[k]);
            }
            vals[j] = eval(&pts[j]);
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    Minimum {
        x: pts[best].clone(),
        value: vals[best],
        iterations,
        converged,
    }
}

/// Euclidean projection onto `{w : w >= 0, sum w = 1}` (sort-based,
/// Held et al.).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cum += s;
        let candidate = (cum - 1.0) / (j + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // absorb rounding so the sum is 1 to machine precision
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` with relative tolerance
/// `rel_tol`. Fails if the recursion depth cap is hit before convergence.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    const MAX_DEPTH: u32 = 48;
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // absolute floor keeps near-zero integrals from recursing forever
    let tol = rel_tol * whole.abs().max(1e-12);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return Err(DynslError::numerical("optim", "non-finite integrand in quadrature"));
    }
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(DynslError::numerical(
            "optim",
            format!("adaptive Simpson did not converge on [{a}, {b}]"),
        ));
    }
    Ok(simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Root of a function with `f(lo) <= 0 <= f(hi)` (or the reverse) by
/// bisection, to an interval width of `tol`. `None` without a sign change.
pub fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64>
where
    F: FnMut(f64) -> f64,
{
    let flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return None;
    }
    let rising = flo < 0.0;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if (fm < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nelder_mead_rosenbrock() {
        let r = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &NelderMeadOptions {
                f_tol: 1e-14,
                x_tol: 1e-12,
                ..Default::default()
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn nelder_mead_quadratic_4d() {
        let target = [0.3, -1.0, 2.0, 0.5];
        let r = nelder_mead(
            |x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2) * 3.0).sum(),
            &[0.0; 4],
            &NelderMeadOptions {
                f_tol: 1e-16,
                x_tol: 1e-10,
                ..Default::default()
            },
        );
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn simplex_projection_known_values() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let w = project_simplex(&[1.0, 1.0, 1.0]);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn simpson_polynomial_and_exponential() {
        let v = adaptive_simpson(|x| x * x * x, 0.0, 2.0, 1e-10).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let v = adaptive_simpson(f64::exp, 0.0, 3.0, 1e-10).unwrap();
        assert!((v - (3f64.exp() - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn bisection_finds_sqrt2() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-12).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-11);
        assert!(bisect(|x| x * x + 1.0, 0.0, 2.0, 1e-12).is_none());
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_closest(
            v in proptest::collection::vec(-3.0f64..3.0, 1..8),
            probe in proptest::collection::vec(0.0f64..1.0, 8),
        ) {
            let w = project_simplex(&v);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let total: f64 = probe[..v.len()].iter().sum::<f64>() + 1e-9;
            let q: Vec<f64> = probe[..v.len()].iter().map(|x| (x + 1e-9 / v.len() as f64) / total).collect();
            let dw: f64 = v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
            let dq: f64 = v.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dw <= dq + 1e-10);
        }
    }
}
