use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::features::{FeatureRecipe, LandmarkFeatures};
use crate::data::Dataset;
use crate::error::{DynslError, Result};
use crate::estimators::{breslow_curve, cox_survival, StepFunction};

const MODULE: &str = "landmark_learners";
const MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 20;
/// Reported convergence: predicted remaining gain below 5e-13.
const DECREMENT_TOL: f64 = 1e-12;
/// Iteration stops once a further step could not move the estimate.
const DECREMENT_STOP: f64 = 1e-24;
const QUADRATIC_REGION: f64 = 1e-6;

/// Cox proportional hazards fit on a landmark risk set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub feature_names: Vec<String>,
    /// One coefficient per feature; dropped constant columns hold 0.
    pub coefficients: Vec<f64>,
    /// Observed information for the non-dropped coefficients, in the
    /// original feature scale.
    pub information: Vec<Vec<f64>>,
    pub dropped: Vec<String>,
    pub log_partial_likelihood: f64,
    pub null_log_partial_likelihood: f64,
    /// Log partial likelihood after each accepted Newton step, starting at
    /// the null model.
    pub path: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub landmark: f64,
}

impl CoxFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum()
    }

    /// Standard errors from the inverse information (kept columns only, in
    /// their original order).
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let k = self.information.len();
        let info = DMatrix::from_fn(k, k, |i, j| self.information[i][j]);
        let inv = info.cholesky()?.inverse();
        Some((0..k).map(|i| inv[(i, i)].sqrt()).collect())
    }
}

/// Partial log-likelihood, score and information with Breslow ties.
/// `order` sorts subjects by decreasing time.
struct CoxData<'a> {
    x: &'a DMatrix<f64>,
    times: &'a [f64],
    events: &'a [bool],
    order: Vec<usize>,
}

impl<'a> CoxData<'a> {
    fn new(x: &'a DMatrix<f64>, times: &'a [f64], events: &'a [bool]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
        Self {
            x,
            times,
            events,
            order,
        }
    }

    fn loglik(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.x * beta;
        let n = self.times.len();
        let mut s0 = 0.0;
        let mut ll = 0.0;
        let mut k = 0;
        while k < n {
            let s = self.times[self.order[k]];
            let mut j = k;
            let mut d = 0.0;
            while j < n && self.times[self.order[j]] == s {
                let i = self.order[j];
                s0 += eta[i].exp();
                if self.events[i] {
                    d += 1.0;
                    ll += eta[i];
                }
                j += 1;
            }
            if d > 0.0 {
                ll -= d * s0.ln();
            }
            k = j;
        }
        ll
    }

    fn derivatives(&self, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.x.ncols();
        let eta = self.x * beta;
        let n = self.times.len();
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        let mut ll = 0.0;
        let mut g = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut k = 0;
        while k < n {
            let s = self.times[self.order[k]];
            let mut j = k;
            let mut d = 0.0;
            while j < n && self.times[self.order[j]] == s {
                let i = self.order[j];
                let w = eta[i].exp();
                let xi = self.x.row(i).transpose();
                s0 += w;
                s1 += &xi * w;
                s2 += &xi * xi.transpose() * w;
                if self.events[i] {
                    d += 1.0;
                    ll += eta[i];
                    g += &xi;
                }
                j += 1;
            }
            if d > 0.0 {
                let mean = &s1 / s0;
                ll -= d * s0.ln();
                g -= &mean * d;
                info += (&s2 / s0 - &mean * mean.transpose()) * d;
            }
            k = j;
        }
        (ll, g, info)
    }
}

fn column_sd(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Maximizes the Cox partial likelihood on the landmark risk set by
/// Newton–Raphson with step halving. Columns are standardized internally;
/// constant columns are dropped (coefficient 0).
pub fn fit_cox(features: &LandmarkFeatures, data: &Dataset) -> Result<CoxFit> {
    let times: Vec<f64> = features.subjects.iter().map(|&i| data.time(i)).collect();
    let events: Vec<bool> = features.subjects.iter().map(|&i| data.event(i)).collect();
    fit_cox_raw(
        &features.design,
        features.feature_names(),
        &times,
        &events,
        features.landmark(),
    )
}

/// [`fit_cox`] on a plain design matrix.
pub fn fit_cox_raw(
    design: &[Vec<f64>],
    names: &[String],
    times: &[f64],
    events: &[bool],
    landmark: f64,
) -> Result<CoxFit> {
    let n = design.len();
    if n != times.len() || n != events.len() {
        return Err(DynslError::domain(MODULE, "design, times and events differ in length"));
    }
    if !events.iter().any(|&e| e) {
        return Err(DynslError::estimability(
            MODULE,
            format!("no events after landmark {landmark}"),
        ));
    }
    let width = names.len();
    if design
        .iter()
        .any(|r| r.len() != width || r.iter().any(|v| !v.is_finite()))
    {
        return Err(DynslError::domain(
            MODULE,
            "design rows must be finite and match the feature names",
        ));
    }

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut centers = Vec::new();
    let mut scales = Vec::new();
    for j in 0..width {
        let col: Vec<f64> = design.iter().map(|r| r[j]).collect();
        let (mean, sd) = column_sd(&col);
        if sd <= 1e-12 * mean.abs().max(1.0) {
            dropped.push(names[j].clone());
        } else {
            kept.push(j);
            centers.push(mean);
            scales.push(sd);
        }
    }
    let p = kept.len();
    let x = DMatrix::from_fn(n, p, |i, k| (design[i][kept[k]] - centers[k]) / scales[k]);

    // greedy rank check on the standardized columns
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for k in 0..p {
        let mut v = x.column(k).into_owned();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        let norm = v.norm();
        if norm <= 1e-8 * (n as f64).sqrt() {
            dependent.push(names[kept[k]].clone());
        } else {
            basis.push(v / norm);
        }
    }
    if !dependent.is_empty() {
        return Err(DynslError::fit(
            MODULE,
            format!(
                "design is rank deficient; linearly dependent columns: {}",
                dependent.join(", ")
            ),
        ));
    }

    let cd = CoxData::new(&x, times, events);
    let mut beta = DVector::zeros(p);
    let (mut ll, mut g, mut info) = cd.derivatives(&beta);
    let null_ll = ll;
    let mut path = vec![ll];
    let mut converged = p == 0;
    let mut iterations = 0;
    // Newton decrement g' I^-1 g: twice the predicted log-likelihood gain,
    // invariant to column scaling
    let mut decrement = f64::INFINITY;
    while !converged && iterations < MAX_ITER {
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => {
                return Err(DynslError::fit(
                    MODULE,
                    "information matrix is not positive definite; likely separation",
                ))
            }
        };
        decrement = g.dot(&step);
        if decrement < DECREMENT_STOP {
            converged = true;
            break;
        }
        iterations += 1;
        let cand = if decrement < QUADRATIC_REGION {
            // the gain is below the rounding noise of the log-likelihood,
            // so comparing likelihoods would reject good steps
            Some(&beta + &step)
        } else {
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = &beta + &step * scale;
                let cl = cd.loglik(&cand);
                if cl.is_finite() && cl >= ll {
                    accepted = Some(cand);
                    break;
                }
                scale *= 0.5;
            }
            accepted
        };
        let Some(cand) = cand else { break };
        beta = cand;
        (ll, g, info) = cd.derivatives(&beta);
        path.push(ll);
        if beta.amax() > 25.0 {
            let worst = (0..p)
                .max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()))
                .unwrap_or(0);
            return Err(DynslError::fit(
                MODULE,
                format!(
                    "monotone likelihood: coefficient of `{}` diverges (separation)",
                    names[kept[worst]]
                ),
            ));
        }
    }
    if !converged {
        if let Some(c) = info.clone().cholesky() {
            decrement = g.dot(&c.solve(&g));
        }
        converged = decrement < DECREMENT_TOL;
    }
    if !converged {
        return Err(DynslError::fit(
            MODULE,
            format!("Newton–Raphson did not converge in {MAX_ITER} iterations (decrement {decrement:.3e})"),
        ));
    }

    let mut coefficients = vec![0.0; width];
    for (k, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[k] / scales[k];
    }
    let information = (0..p)
        .map(|a| (0..p).map(|b| info[(a, b)] / (scales[a] * scales[b])).collect())
        .collect();
    Ok(CoxFit {
        feature_names: names.to_vec(),
        coefficients,
        information,
        dropped,
        log_partial_likelihood: ll,
        null_log_partial_likelihood: null_ll,
        path,
        converged,
        iterations,
        landmark,
    })
}

/// Dynamic survival predictions on a new risk set.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPrediction {
    /// Dataset indices of the predicted subjects.
    pub subjects: Vec<usize>,
    /// `survival[h][i]` for horizon `h`.
    pub survival: Vec<Vec<f64>>,
    /// Some horizon lies past the last training event, where the baseline
    /// hazard is flat.
    pub beyond_last_event: bool,
}

/// A landmark Cox model ready to predict: feature recipe, coefficients and
/// the Breslow baseline from the training risk set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkCoxModel {
    pub recipe: FeatureRecipe,
    pub cox: CoxFit,
    pub baseline: StepFunction,
}

impl LandmarkCoxModel {
    pub fn fit(features: &LandmarkFeatures, data: &Dataset) -> Result<Self> {
        let cox = fit_cox(features, data)?;
        let lp: Vec<f64> = features.design.iter().map(|r| cox.linear_predictor(r)).collect();
        let times: Vec<f64> = features.subjects.iter().map(|&i| data.time(i)).collect();
        let events: Vec<bool> = features.subjects.iter().map(|&i| data.event(i)).collect();
        Ok(Self {
            recipe: features.recipe.clone(),
            baseline: breslow_curve(&lp, &times, &events),
            cox,
        })
    }

    pub fn predict(&self, newdata: &Dataset, horizons: &[f64]) -> Result<LandmarkPrediction> {
        let features = self.recipe.apply(newdata)?;
        Ok(predict_landmark(self, &features, horizons))
    }
}

/// `exp(-H_0(u) exp(lp_j))` for every row of `features` and every horizon.
pub fn predict_landmark(model: &LandmarkCoxModel, features: &LandmarkFeatures, horizons: &[f64]) -> LandmarkPrediction {
    let last = model.baseline.last_jump().unwrap_or(f64::NEG_INFINITY);
    let lp: Vec<f64> = features.design.iter().map(|r| model.cox.linear_predictor(r)).collect();
    let survival = horizons
        .iter()
        .map(|&u| {
            let h0 = model.baseline.eval(u);
            lp.iter().map(|&l| cox_survival(l, h0)).collect()
        })
        .collect();
    LandmarkPrediction {
        subjects: features.subjects.clone(),
        survival,
        beyond_last_event: horizons.iter().any(|&u| u > last),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    /// Literal partial likelihood with Breslow ties, single covariate.
    fn pl_1d(beta: f64, x: &[f64], times: &[f64], events: &[bool]) -> f64 {
        let mut ll = 0.0;
        for i in 0..x.len() {
            if events[i] {
                let denom: f64 = (0..x.len())
                    .filter(|&j| times[j] >= times[i])
                    .map(|j| (beta * x[j]).exp())
                    .sum();
                ll += beta * x[i] - denom.ln();
            }
        }
        ll
    }

    #[test]
    fn binary_covariate_matches_grid_search() {
        let x = [1.0, 0.0, 1.0, 0.0];
        let times = [2.0, 3.0, 5.0, 4.0];
        let events = [true, true, false, true];
        let design: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let fit = fit_cox_raw(&design, &names(1), &times, &events, 0.0).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut b = -5.0;
        while b <= 5.0 {
            let v = pl_1d(b, &x, &times, &events);
            if v > best.0 {
                best = (v, b);
            }
            b += 1e-5;
        }
        assert!((fit.coefficients[0] - best.1).abs() < 1e-4);
        assert!((fit.log_partial_likelihood - best.0).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn zero_column_is_dropped() {
        let design = vec![vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 0.5], vec![0.0, 3.0]];
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true, false, true, true];
        let fit = fit_cox_raw(&design, &names(2), &times, &events, 0.0).unwrap();
        assert_eq!(fit.coefficients[0], 0.0);
        assert_eq!(fit.dropped, vec!["x0".to_string()]);
        let only_zero: Vec<Vec<f64>> = design.iter().map(|r| vec![r[0]]).collect();
        let null = fit_cox_raw(&only_zero, &names(1), &times, &events, 0.0).unwrap();
        assert_eq!(null.log_partial_likelihood, null.null_log_partial_likelihood);
        assert_eq!(null.path.len(), 1);
    }

    #[test]
    fn collinear_columns_are_named() {
        let design: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let times: Vec<f64> = (0..6).map(|i| (6 - i) as f64).collect();
        let err = fit_cox_raw(&design, &names(2), &times, &[true; 6], 0.0).unwrap_err();
        assert!(err.to_string().contains("x1"));
    }

    #[test]
    fn separation_is_fit_error() {
        // larger x always fails first
        let design: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let times: Vec<f64> = (0..8).map(|i| (10 - i) as f64).collect();
        let err = fit_cox_raw(&design, &names(1), &times, &[true; 8], 0.0).unwrap_err();
        assert!(matches!(err, DynslError::Fit { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn ascent_scale_invariance_and_monotone_predictions(
            raw in proptest::collection::vec((-2.0f64..2.0, -1.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 25..60),
            c in 0.1f64..10.0,
        ) {
            let design: Vec<Vec<f64>> = raw.iter().map(|r| vec![r.0, r.1]).collect();
            let times: Vec<f64> = raw.iter().map(|r| 1.0 + 5.0 * r.2 * (-0.4 * r.0).exp()).collect();
            let events: Vec<bool> = raw.iter().map(|r| r.3 < 0.7).collect();
            prop_assume!(events.iter().filter(|&&e| e).count() >= 5);
            let Ok(fit) = fit_cox_raw(&design, &names(2), &times, &events, 0.0) else {
                return Ok(());
            };
            // ascent, up to rounding in the quadratic region
            for w in fit.path.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
            }
            let scaled: Vec<Vec<f64>> = design.iter().map(|r| vec![r[0] * c, r[1]]).collect();
            let fit2 = fit_cox_raw(&scaled, &names(2), &times, &events, 0.0).unwrap();
            prop_assert!((fit2.coefficients[0] * c - fit.coefficients[0]).abs() < 1e-8);
            let lp1: Vec<f64> = design.iter().map(|r| fit.linear_predictor(r)).collect();
            let lp2: Vec<f64> = scaled.iter().map(|r| fit2.linear_predictor(r)).collect();
            let h1 = breslow_curve(&lp1, &times, &events);
            let h2 = breslow_curve(&lp2, &times, &events);
            for (i, (&a, &b)) in lp1.iter().zip(&lp2).enumerate() {
                let s1 = cox_survival(a, h1.eval(3.0));
                let s2 = cox_survival(b, h2.eval(3.0));
                prop_assert!((s1 - s2).abs() < 1e-8, "row {i}");
                prop_assert!(cox_survival(a, h1.eval(2.0)) >= s1);
            }
        }
    }
}
