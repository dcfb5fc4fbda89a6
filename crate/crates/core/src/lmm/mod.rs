//! Linear mixed models for one biomarker,
//! `y_ij = x(t_ij)' beta + z(t_ij)' b_i + e_ij`, `b_i ~ N(0, D)`,
//! `e_ij ~ N(0, sigma^2)`, fitted by maximum likelihood.
//!
//! The likelihood is parameterized by the log-Cholesky factor `L` of
//! `D / sigma^2`. Both `beta` (generalized least squares) and `sigma^2`
//! (`RSS / N`) are profiled out, leaving at most three free parameters.
//! Per-subject inverses reduce to `q x q` systems through
//! `(I + Z L L'Z')^{-1} = I - Z L (I + L'Z'Z L)^{-1} L'Z'`.

mod spline;

pub use spline::{natural_cubic_basis, SplineBasis};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Measurement};
use crate::error::{DynslError, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

const MODULE: &str = "mixed_model";

/// Requested fixed-effects time trend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TimeBasisSpec {
    /// Intercept only.
    Constant,
    Linear,
    /// Intercept plus a natural cubic spline in time.
    Spline {
        df: usize,
    },
}

/// Fixed-effects time trend with knots resolved from the fitting data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TimeBasis {
    Constant,
    Linear,
    Spline(SplineBasis),
}

impl TimeBasis {
    pub fn row(&self, t: f64) -> Vec<f64> {
        match self {
            TimeBasis::Constant => vec![1.0],
            TimeBasis::Linear => vec![1.0, t],
            TimeBasis::Spline(s) => {
                let mut r = Vec::with_capacity(s.df + 1);
                r.push(1.0);
                r.extend(s.evaluate(t));
                r
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TimeBasis::Constant => 1,
            TimeBasis::Linear => 2,
            TimeBasis::Spline(s) => s.df + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    Intercept,
    #[default]
    InterceptSlope,
}

impl RandomEffects {
    pub fn dim(self) -> usize {
        match self {
            RandomEffects::Intercept => 1,
            RandomEffects::InterceptSlope => 2,
        }
    }

    pub fn row(self, t: f64) -> Vec<f64> {
        match self {
            RandomEffects::Intercept => vec![1.0],
            RandomEffects::InterceptSlope => vec![1.0, t],
        }
    }

    /// Number of free log-Cholesky parameters.
    pub fn n_theta(self) -> usize {
        let q = self.dim();
        q * (q + 1) / 2
    }
}

/// A fitted (or fully specified) linear mixed model for one biomarker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub biomarker: usize,
    pub time_basis: TimeBasis,
    pub random: RandomEffects,
    pub fixed_effects: Vec<f64>,
    /// Row-major `q x q` covariance of the random effects.
    pub re_covariance: Vec<Vec<f64>>,
    pub residual_variance: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub n_subjects: usize,
    pub n_observations: usize,
}

impl LmmFit {
    /// A model with known parameters, for example a data-generating truth.
    pub fn from_parameters(
        biomarker: usize,
        time_basis: TimeBasis,
        random: RandomEffects,
        fixed_effects: Vec<f64>,
        re_covariance: Vec<Vec<f64>>,
        residual_variance: f64,
    ) -> Result<Self> {
        let q = random.dim();
        if fixed_effects.len() != time_basis.dim() {
            return Err(DynslError::config(
                MODULE,
                format!(
                    "{} fixed effects for a basis of dimension {}",
                    fixed_effects.len(),
                    time_basis.dim()
                ),
            ));
        }
        if re_covariance.len() != q || re_covariance.iter().any(|r| r.len() != q) {
            return Err(DynslError::config(
                MODULE,
                format!("random-effects covariance must be {q}x{q}"),
            ));
        }
        if !(residual_variance > 0.0) {
            return Err(DynslError::config(MODULE, "residual variance must be positive"));
        }
        Ok(Self {
            biomarker,
            time_basis,
            random,
            fixed_effects,
            re_covariance,
            residual_variance,
            log_likelihood: f64::NAN,
            converged: true,
            n_subjects: 0,
            n_observations: 0,
        })
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        let q = self.random.dim();
        DMatrix::from_fn(q, q, |i, j| self.re_covariance[i][j])
    }

    /// Population mean `x(t)' beta`.
    pub fn population_mean(&self, t: f64) -> f64 {
        dot(&self.time_basis.row(t), &self.fixed_effects)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Empirical-Bayes random effects `D Z'(Z D Z' + sigma^2 I)^{-1}(y - X beta)`,
/// computed as `(D Z'Z + sigma^2 I)^{-1} D Z' r`. An empty history gives 0.
pub fn blup(fit: &LmmFit, history: &[Measurement]) -> Vec<f64> {
    let points: Vec<(f64, f64)> = history.iter().map(|m| (m.time, m.value)).collect();
    blup_points(fit, &points)
}

/// [`blup`] on raw `(time, value)` pairs.
pub fn blup_points(fit: &LmmFit, history: &[(f64, f64)]) -> Vec<f64> {
    let q = fit.random.dim();
    if history.is_empty() {
        return vec![0.0; q];
    }
    let mut ztz = DMatrix::<f64>::zeros(q, q);
    let mut ztr = DVector::<f64>::zeros(q);
    for &(t, y) in history {
        let z = fit.random.row(t);
        let r = y - fit.population_mean(t);
        for a in 0..q {
            ztr[a] += z[a] * r;
            for b in 0..q {
                ztz[(a, b)] += z[a] * z[b];
            }
        }
    }
    let d = fit.d_matrix();
    let lhs = &d * ztz + DMatrix::identity(q, q) * fit.residual_variance;
    let rhs = &d * ztr;
    match lhs.lu().solve(&rhs) {
        Some(b) => b.iter().copied().collect(),
        None => vec![0.0; q],
    }
}

/// `x(t)' beta + z(t)' b`.
pub fn predict_eta(fit: &LmmFit, b: &[f64], t: f64) -> f64 {
    fit.population_mean(t) + dot(&fit.random.row(t), b)
}

struct SubjectStats {
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

/// Sufficient statistics of one biomarker's measurements, ready for
/// likelihood evaluation.
pub struct LmmProblem {
    biomarker: usize,
    basis: TimeBasis,
    random: RandomEffects,
    subjects: Vec<SubjectStats>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n_obs: usize,
}

/// Quantities of the likelihood at fixed `theta`.
struct Profile {
    xvx: DMatrix<f64>,
    xvy: DVector<f64>,
    yvy: f64,
    logdet: f64,
}

/// Lower-triangular `L` from its log-Cholesky parameters.
pub fn theta_to_l(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

fn l_to_theta(l: &DMatrix<f64>) -> Vec<f64> {
    let q = l.nrows();
    let mut theta = Vec::with_capacity(q * (q + 1) / 2);
    for i in 0..q {
        for j in 0..=i {
            theta.push(if i == j { l[(i, j)].max(1e-8).ln() } else { l[(i, j)] });
        }
    }
    theta
}

impl LmmProblem {
    /// Collects measurements of biomarker `m` with time `<= until` (all when
    /// `None`). Spline knots are placed on the collected times.
    pub fn new(
        data: &Dataset,
        m: usize,
        basis: TimeBasisSpec,
        random: RandomEffects,
        until: Option<f64>,
    ) -> Result<Self> {
        if m >= data.n_biomarkers() {
            return Err(DynslError::domain(MODULE, format!("biomarker {m} does not exist")));
        }
        let cutoff = until.unwrap_or(f64::INFINITY);
        let histories: Vec<&[Measurement]> = (0..data.n())
            .map(|s| data.history_until(s, m, cutoff))
            .filter(|h| !h.is_empty())
            .collect();
        if histories.len() < 2 {
            return Err(DynslError::estimability(
                MODULE,
                format!(
                    "biomarker {}: {} subjects with measurements, need at least 2",
                    data.biomarker_names()[m],
                    histories.len()
                ),
            ));
        }
        let times: Vec<f64> = histories.iter().flat_map(|h| h.iter().map(|x| x.time)).collect();
        let basis = match basis {
            TimeBasisSpec::Constant => TimeBasis::Constant,
            TimeBasisSpec::Linear => TimeBasis::Linear,
            TimeBasisSpec::Spline { df } => {
                let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                TimeBasis::Spline(SplineBasis::from_times(&times, df, (lo, hi))?)
            }
        };
        let points: Vec<Vec<(f64, f64)>> = histories
            .iter()
            .map(|h| h.iter().map(|x| (x.time, x.value)).collect())
            .collect();
        Ok(Self::from_points(m, basis, random, &points))
    }

    /// Builds the problem from per-subject `(time, value)` lists.
    pub fn from_points(
        biomarker: usize,
        basis: TimeBasis,
        random: RandomEffects,
        subjects: &[Vec<(f64, f64)>],
    ) -> Self {
        let p = basis.dim();
        let q = random.dim();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut n_obs = 0;
        let mut stats = Vec::with_capacity(subjects.len());
        for pts in subjects.iter().filter(|s| !s.is_empty()) {
            let mut ztz = DMatrix::zeros(q, q);
            let mut ztx = DMatrix::zeros(q, p);
            let mut zty = DVector::zeros(q);
            for &(t, y) in pts {
                let x = basis.row(t);
                let z = random.row(t);
                for a in 0..p {
                    xty[a] += x[a] * y;
                    for b in 0..p {
                        xtx[(a, b)] += x[a] * x[b];
                    }
                }
                for a in 0..q {
                    zty[a] += z[a] * y;
                    for b in 0..q {
                        ztz[(a, b)] += z[a] * z[b];
                    }
                    for b in 0..p {
                        ztx[(a, b)] += z[a] * x[b];
                    }
                }
                yty += y * y;
                n_obs += 1;
            }
            stats.push(SubjectStats { ztz, ztx, zty });
        }
        Self {
            biomarker,
            basis,
            random,
            subjects: stats,
            xtx,
            xty,
            yty,
            n_obs,
        }
    }

    pub fn n_theta(&self) -> usize {
        self.random.n_theta()
    }

    pub fn n_observations(&self) -> usize {
        self.n_obs
    }

    fn profile(&self, theta: &[f64]) -> Option<Profile> {
        let q = self.random.dim();
        let l = theta_to_l(theta, q);
        let lt = l.transpose();
        let mut xvx = self.xtx.clone();
        let mut xvy = self.xty.clone();
        let mut yvy = self.yty;
        let mut logdet = 0.0;
        let eye = DMatrix::<f64>::identity(q, q);
        for s in &self.subjects {
            let a = &eye + &lt * &s.ztz * &l;
            let chol = a.cholesky()?;
            logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let p = &l * chol.inverse() * &lt;
            let pzx = &p * &s.ztx;
            xvx -= s.ztx.transpose() * &pzx;
            xvy -= pzx.transpose() * &s.zty;
            yvy -= s.zty.dot(&(&p * &s.zty));
        }
        Some(Profile { xvx, xvy, yvy, logdet })
    }

    /// Profile log-likelihood at `theta`, with the maximizing `beta` and
    /// `sigma^2`. `None` when the problem is numerically singular.
    pub fn profiled(&self, theta: &[f64]) -> Option<(f64, Vec<f64>, f64)> {
        let pr = self.profile(theta)?;
        let beta = pr.xvx.clone().cholesky()?.solve(&pr.xvy);
        let rss = pr.yvy - beta.dot(&pr.xvy);
        let n = self.n_obs as f64;
        let sigma2 = rss / n;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return None;
        }
        let ll = -0.5 * (n * (2.0 * std::f64::consts::PI * sigma2).ln() + pr.logdet + n);
        Some((ll, beta.iter().copied().collect(), sigma2))
    }

    /// Full marginal log-likelihood at arbitrary `(beta, theta, log sigma^2)`.
    pub fn log_likelihood(&self, beta: &[f64], theta: &[f64], log_sigma2: f64) -> f64 {
        let Some(pr) = self.profile(theta) else {
            return f64::NEG_INFINITY;
        };
        let b = DVector::from_column_slice(beta);
        let rss = pr.yvy - 2.0 * b.dot(&pr.xvy) + b.dot(&(&pr.xvx * &b));
        let n = self.n_obs as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + n * log_sigma2 + pr.logdet + rss / log_sigma2.exp())
    }

    fn neg_profiled(&self, theta: &[f64]) -> f64 {
        self.profiled(theta).map_or(f64::INFINITY, |r| -r.0)
    }

    /// Starting point from a moment-based guess: OLS residual variance for
    /// `sigma^2` and between-subject spread of per-subject OLS for `D`.
    fn start(&self) -> Vec<f64> {
        let q = self.random.dim();
        let pooled = match self.xtx.clone().cholesky() {
            Some(c) => c.solve(&self.xty),
            None => return vec![0.0; self.n_theta()],
        };
        let n = self.n_obs as f64;
        let rss = self.yty - pooled.dot(&self.xty);
        let s2 = (rss / n).max(1e-12);
        // deviations of per-subject random-effect least squares estimates
        let mut acc = DMatrix::<f64>::zeros(q, q);
        let mut used = 0.0;
        for s in &self.subjects {
            let r = &s.zty - &s.ztx * &pooled;
            if let Some(c) = s.ztz.clone().cholesky() {
                let b = c.solve(&r);
                acc += &b * b.transpose();
                used += 1.0;
            }
        }
        let mut rel = if used > 0.0 {
            acc / (used * s2)
        } else {
            DMatrix::identity(q, q)
        };
        for i in 0..q {
            rel[(i, i)] = rel[(i, i)].max(1e-2);
        }
        match rel.clone().cholesky() {
            Some(c) => l_to_theta(&c.l()),
            None => l_to_theta(&DMatrix::from_diagonal(&rel.diagonal().map(f64::sqrt))),
        }
    }

    /// Central finite-difference gradient and Hessian of the profile
    /// log-likelihood.
    fn fd_derivatives(&self, theta: &[f64], h: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let k = theta.len();
        let f = |x: &[f64]| self.profiled(x).map(|r| r.0);
        let f0 = f(theta)?;
        let mut g = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        let mut x = theta.to_vec();
        for i in 0..k {
            x[i] = theta[i] + h;
            let fp = f(&x)?;
            x[i] = theta[i] - h;
            let fm = f(&x)?;
            x[i] = theta[i];
            g[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        }
        for i in 0..k {
            for j in 0..i {
                let mut e = |di: f64, dj: f64| {
                    x[i] = theta[i] + di;
                    x[j] = theta[j] + dj;
                    let v = f(&x);
                    x[i] = theta[i];
                    x[j] = theta[j];
                    v
                };
                let v = (e(h, h)? - e(h, -h)? - e(-h, h)? + e(-h, -h)?) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Some((g, hess))
    }

    /// Maximizes the profile likelihood: Nelder–Mead restarted until two
    /// successive runs agree within 1e-8, then Newton steps on
    /// finite-difference derivatives.
    pub fn fit(&self) -> Result<LmmFit> {
        let q = self.random.dim();
        let opts = NelderMeadOptions {
            max_iter: 2000,
            f_tol: 1e-13,
            x_tol: 1e-9,
            initial_step: 0.5,
        };
        let mut theta = self.start();
        let mut best = self.neg_profiled(&theta);
        if !best.is_finite() {
            theta = vec![0.0; self.n_theta()];
            best = self.neg_profiled(&theta);
        }
        if !best.is_finite() {
            return Err(DynslError::numerical(
                MODULE,
                "marginal covariance or fixed-effects design is singular",
            ));
        }
        let mut converged = false;
        for _ in 0..6 {
            let r = nelder_mead(|x| self.neg_profiled(x), &theta, &opts);
            let gain = best - r.value;
            if r.value <= best {
                theta = r.x;
                best = r.value;
            }
            if r.converged && gain.abs() < 1e-8 {
                converged = true;
                break;
            }
        }

        // Newton polish; stops near the boundary where a variance component
        // collapses and -H is no longer positive definite.
        for _ in 0..20 {
            let Some((g, h)) = self.fd_derivatives(&theta, 1e-5) else {
                break;
            };
            if g.amax() < 1e-8 {
                break;
            }
            let Some(step) = (-&h).cholesky().map(|c| c.solve(&g)) else {
                break;
            };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
                let v = self.neg_profiled(&cand);
                if v <= best {
                    theta = cand;
                    best = v;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            // Close to the optimum the likelihood gain of a Newton step can be
            // below rounding in a badly scaled direction; a short step is then
            // judged by the gradient it leaves behind.
            if !accepted && step.amax() < 1e-4 {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                let v = self.neg_profiled(&cand);
                if v <= best + 1e-10 * best.abs().max(1.0) {
                    if let Some((g_new, _)) = self.fd_derivatives(&cand, 1e-5) {
                        if g_new.amax() < g.amax() {
                            theta = cand;
                            best = best.min(v);
                            accepted = true;
                        }
                    }
                }
            }
            if !accepted {
                break;
            }
        }

        let (ll, beta, sigma2) = self
            .profiled(&theta)
            .ok_or_else(|| DynslError::numerical(MODULE, "singular marginal covariance at the optimum"))?;
        // Residual variance collapsing to zero means every subject is fitted
        // exactly; the likelihood is unbounded there and the limit is kept.
        let n = self.n_obs as f64;
        let total = (self.yty / n).max(1e-300);
        if !converged && sigma2 < 1e-8 * total {
            converged = true;
        }
        let l = theta_to_l(&theta, q);
        let d = (&l * l.transpose()) * sigma2;
        let re_covariance = (0..q).map(|i| (0..q).map(|j| d[(i, j)]).collect()).collect();
        let fit = LmmFit {
            biomarker: self.biomarker,
            time_basis: self.basis.clone(),
            random: self.random,
            fixed_effects: beta,
            re_covariance,
            residual_variance: sigma2,
            log_likelihood: ll,
            converged,
            n_subjects: self.subjects.len(),
            n_observations: self.n_obs,
        };
        if !converged {
            return Err(DynslError::fit(
                MODULE,
                format!(
                    "biomarker {}: likelihood did not stabilize (best log-likelihood {ll:.6}, beta {:?}, sigma2 {sigma2:.3e})",
                    self.biomarker, fit.fixed_effects
                ),
            ));
        }
        Ok(fit)
    }

    /// Log-Cholesky parameters of a fit's `D / sigma^2`, for evaluating
    /// [`LmmProblem::log_likelihood`] at the optimum.
    pub fn theta_of(fit: &LmmFit) -> Vec<f64> {
        let d = fit.d_matrix() / fit.residual_variance;
        match d.clone().cholesky() {
            Some(c) => l_to_theta(&c.l()),
            None => l_to_theta(&DMatrix::from_diagonal(&d.diagonal().map(|x| x.max(0.0).sqrt()))),
        }
    }
}

/// Fits the mixed model for biomarker `m` by maximum likelihood, using only
/// measurements at or before `until` when given.
pub fn fit_lmm(
    data: &Dataset,
    m: usize,
    basis: TimeBasisSpec,
    random: RandomEffects,
    until: Option<f64>,
) -> Result<LmmFit> {
    LmmProblem::new(data, m, basis, random, until)?.fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn linear_fit(beta: [f64; 2], d: [[f64; 2]; 2], sigma2: f64) -> LmmFit {
        LmmFit::from_parameters(
            0,
            TimeBasis::Linear,
            RandomEffects::InterceptSlope,
            beta.to_vec(),
            d.iter().map(|r| r.to_vec()).collect(),
            sigma2,
        )
        .unwrap()
    }

    #[test]
    fn blup_trivial_cases() {
        let fit = linear_fit([1.0, 2.0], [[1.0, 0.0], [0.0, 0.5]], 0.3);
        assert_eq!(blup_points(&fit, &[]), vec![0.0, 0.0]);
        let b = blup_points(&fit, &[(3.0, 7.0)]);
        assert!(b.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn blup_two_observation_hand_value() {
        // D = diag(2, 1), sigma^2 = 1, Z = [[1,0],[1,1]], r = (1, 3).
        // Z D Z' + I = [[3,2],[2,4]], inverse = [[4,-2],[-2,3]] / 8,
        // D Z' = [[2,2],[0,1]], so b = [[2,2],[0,1]] (1/8)(-2, 7) = (1.25, 0.875).
        let fit = linear_fit([0.0, 0.0], [[2.0, 0.0], [0.0, 1.0]], 1.0);
        let b = blup_points(&fit, &[(0.0, 1.0), (1.0, 3.0)]);
        assert!((b[0] - 1.25).abs() < 1e-10);
        assert!((b[1] - 0.875).abs() < 1e-10);
    }

    #[test]
    fn predict_eta_arithmetic() {
        let fit = linear_fit([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 1.0);
        assert_eq!(predict_eta(&fit, &[1.0, 0.5], 4.0), 3.0);
        let fit = linear_fit([2.0, -0.5], [[1.0, 0.0], [0.0, 1.0]], 1.0);
        assert_eq!(predict_eta(&fit, &[0.0, 0.0], 2.0), 1.0);
    }

    #[test]
    fn shrinkage_vanishes_with_precise_data() {
        let fit = linear_fit([0.0, 0.0], [[4.0, 0.0], [0.0, 1.0]], 1e-6);
        let hist: Vec<(f64, f64)> = (0..20).map(|k| (k as f64 * 0.5, 3.0 - 0.7 * k as f64 * 0.5)).collect();
        let b = blup_points(&fit, &hist);
        assert!((predict_eta(&fit, &b, 5.0) - (3.0 - 0.7 * 5.0)).abs() < 0.05);
    }

    #[test]
    fn one_way_anova_oracle() {
        // balanced: a = 6 groups, n = 4 replicates, intercept-only model
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (a, n) = (6usize, 4usize);
        let groups: Vec<Vec<f64>> = (0..a)
            .map(|_| {
                let b = 2.0 * noise.sample(&mut rng);
                (0..n).map(|_| 5.0 + b + noise.sample(&mut rng)).collect()
            })
            .collect();
        let grand: f64 = groups.iter().flatten().sum::<f64>() / (a * n) as f64;
        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / n as f64).collect();
        let ssw: f64 = groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.iter().map(|y| (y - m).powi(2)).sum::<f64>())
            .sum();
        let ssb: f64 = means.iter().map(|m| n as f64 * (m - grand).powi(2)).sum();
        let msw = ssw / (a * (n - 1)) as f64;
        let sigma_a2 = (ssb / a as f64 - msw) / n as f64;
        assert!(sigma_a2 > 0.0);

        let pts: Vec<Vec<(f64, f64)>> = groups
            .iter()
            .map(|g| g.iter().enumerate().map(|(j, &y)| (j as f64, y)).collect())
            .collect();
        let fit = LmmProblem::from_points(0, TimeBasis::Constant, RandomEffects::Intercept, &pts)
            .fit()
            .unwrap();
        assert!((fit.fixed_effects[0] - grand).abs() < 1e-6);
        assert!((fit.residual_variance - msw).abs() < 1e-6 * msw.max(1.0));
        assert!((fit.re_covariance[0][0] - sigma_a2).abs() < 1e-6 * sigma_a2.max(1.0));
    }

    #[test]
    fn profiled_matches_full_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<(f64, f64)>> = (0..30)
            .map(|_| {
                let b0 = noise.sample(&mut rng);
                let b1 = 0.3 * noise.sample(&mut rng);
                (0..5)
                    .map(|k| {
                        let t = k as f64;
                        (t, 1.0 + b0 + (0.5 + b1) * t + 0.5 * noise.sample(&mut rng))
                    })
                    .collect()
            })
            .collect();
        let p = LmmProblem::from_points(0, TimeBasis::Linear, RandomEffects::InterceptSlope, &pts);
        let theta = [0.1, -0.2, -1.0];
        let (ll, beta, s2) = p.profiled(&theta).unwrap();
        assert!((p.log_likelihood(&beta, &theta, s2.ln()) - ll).abs() < 1e-9);
        // perturbing the profiled parameters can only lower the likelihood
        let mut b2 = beta.clone();
        b2[1] += 0.01;
        assert!(p.log_likelihood(&b2, &theta, s2.ln()) < ll);
        assert!(p.log_likelihood(&beta, &theta, s2.ln() + 0.01) < ll);
    }

    #[test]
    fn optimum_is_stationary_with_small_slope_variance() {
        // Visits up to 10 and a tiny slope variance make the off-diagonal
        // direction very steep; the optimum must still have a flat gradient.
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let pts: Vec<Vec<(f64, f64)>> = (0..500)
                .map(|_| {
                    let (b0, b1) = (0.7 * noise.sample(&mut rng), 0.05 * noise.sample(&mut rng));
                    (0..6)
                        .map(|k| {
                            let t = if k == 0 {
                                0.0
                            } else {
                                10.0 * rand::Rng::random::<f64>(&mut rng)
                            };
                            (t, 1.0 + b0 + (0.3 + b1) * t + 0.3 * noise.sample(&mut rng))
                        })
                        .collect()
                })
                .collect();
            let p = LmmProblem::from_points(0, TimeBasis::Linear, RandomEffects::InterceptSlope, &pts);
            let fit = p.fit().unwrap();
            let mut x = fit.fixed_effects.clone();
            x.extend(LmmProblem::theta_of(&fit));
            x.push(fit.residual_variance.ln());
            let f = |x: &[f64]| p.log_likelihood(&x[..2], &x[2..5], x[5]);
            for j in 0..x.len() {
                let (mut up, mut down) = (x.clone(), x.clone());
                up[j] += 1e-5;
                down[j] -= 1e-5;
                let g = (f(&up) - f(&down)) / 2e-5;
                assert!(g.abs() < 1e-4, "seed {seed} component {j}: {g}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn blup_shrinks_as_noise_grows(
            obs in proptest::collection::vec((0.0f64..10.0, -5.0f64..5.0), 1..8),
            d0 in 0.1f64..4.0,
            d1 in 0.01f64..1.0,
        ) {
            let norm = |s2: f64| {
                let fit = linear_fit([0.0, 0.0], [[d0, 0.0], [0.0, d1]], s2);
                let b = blup_points(&fit, &obs);
                // Mahalanobis norm in the prior metric is monotone
                (b[0] * b[0] / d0 + b[1] * b[1] / d1).sqrt()
            };
            let mut prev = f64::INFINITY;
            for s2 in [0.01, 0.1, 0.5, 1.0, 4.0, 20.0] {
                let v = norm(s2);
                prop_assert!(v <= prev + 1e-9);
                prev = v;
            }
        }
    }
}
