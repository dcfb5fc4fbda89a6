//! Gradient-boosted Cox learner with regression-tree sub-learners on single
//! features and feature pairs.
//!
//! Each iteration fits every candidate tree to the martingale-residual
//! negative gradient and adds the best one (least squares) scaled by `nu`.
//! The number of iterations is chosen by an inner cross-validation on the
//! held-out negative partial log-likelihood.

mod tree;

pub use tree::{fit_tree, Node, SortedColumns, Tree, TreeParams};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DynslError, Result};
use crate::estimators::{breslow_curve, cox_survival, StepFunction};
use crate::landmark::{FeatureRecipe, LandmarkFeatures};

const MODULE: &str = "boosted_cox";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub nu: f64,
    pub b_stop: usize,
    pub inner_folds: usize,
    pub single: TreeParams,
    pub pair: TreeParams,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            nu: 0.025,
            b_stop: 500,
            inner_folds: 5,
            single: TreeParams {
                max_depth: 2,
                min_split: 10,
                min_leaf: 1,
            },
            pair: TreeParams {
                max_depth: 3,
                min_split: 10,
                min_leaf: 1,
            },
            seed: 1,
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(DynslError::config(
                MODULE,
                format!("nu must lie in (0, 1], got {}", self.nu),
            ));
        }
        if self.b_stop == 0 {
            return Err(DynslError::config(MODULE, "b_stop must be at least 1"));
        }
        Ok(())
    }
}

/// Negative partial log-likelihood with Breslow ties.
pub fn neg_log_partial_likelihood(psi: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut s0 = 0.0;
    let mut ll = 0.0;
    let mut k = 0;
    while k < n {
        let s = times[order[k]];
        let mut j = k;
        let mut d = 0.0;
        while j < n && times[order[j]] == s {
            s0 += psi[order[j]].exp();
            if events[order[j]] {
                d += 1.0;
                ll += psi[order[j]];
            }
            j += 1;
        }
        if d > 0.0 {
            ll -= d * s0.ln();
        }
        k = j;
    }
    -ll
}

/// Martingale residuals `delta_i - exp(psi_i) H_0(T_i)`, the negative
/// gradient of [`neg_log_partial_likelihood`] with respect to `psi`.
pub fn cox_negative_gradient(psi: &[f64], times: &[f64], events: &[bool]) -> Vec<f64> {
    let h0 = breslow_curve(psi, times, events);
    (0..psi.len())
        .map(|i| f64::from(u8::from(events[i])) - psi[i].exp() * h0.eval(times[i]))
        .collect()
}

/// Candidate feature sets: every single feature, then every unordered pair.
pub fn candidate_sets(p: usize) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..p).map(|j| vec![j]).collect();
    for a in 0..p {
        for b in a + 1..p {
            sets.push(vec![a, b]);
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStep {
    pub iteration: usize,
    pub tree: Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostFit {
    pub nu: f64,
    pub offset: f64,
    pub selected: Vec<BoostStep>,
    /// Training negative partial log-likelihood at `b = 0..=len`.
    pub risk_path: Vec<f64>,
}

impl BoostFit {
    pub fn b(&self) -> usize {
        self.selected.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.offset + self.selected.iter().map(|s| self.nu * s.tree.predict(x)).sum::<f64>()
    }

    /// Keeps the first `b` iterations.
    pub fn truncate(&mut self, b: usize) {
        self.selected.truncate(b);
        self.risk_path.truncate(b + 1);
    }
}

fn to_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

/// Runs `b_stop` boosting iterations from `psi = 0`.
pub fn boost(rows: &[Vec<f64>], times: &[f64], events: &[bool], params: &BoostParams) -> Result<BoostFit> {
    params.validate()?;
    if !events.iter().any(|&e| e) {
        return Err(DynslError::estimability(MODULE, "boosting needs at least one event"));
    }
    if rows.len() != times.len() || rows.len() != events.len() {
        return Err(DynslError::domain(
            MODULE,
            "features, times and events differ in length",
        ));
    }
    let columns = to_columns(rows);
    let sorted = SortedColumns::new(&columns);
    let candidates = candidate_sets(columns.len());
    let n = rows.len();
    let mut psi = vec![0.0; n];
    let mut risk_path = vec![neg_log_partial_likelihood(&psi, times, events)];
    let mut selected = Vec::with_capacity(params.b_stop);
    for b in 1..=params.b_stop {
        let u = cox_negative_gradient(&psi, times, events);
        let (tree, _) = if candidates.is_empty() {
            let mean = u.iter().sum::<f64>() / n as f64;
            (
                Tree {
                    features: vec![],
                    nodes: vec![Node::Leaf { value: mean }],
                },
                0.0,
            )
        } else {
            candidates
                .par_iter()
                .map(|set| {
                    let p = if set.len() == 1 { &params.single } else { &params.pair };
                    fit_tree(&sorted, &u, set, p)
                })
                .collect::<Vec<_>>()
                .into_iter()
                // first minimal SSE in candidate order
                .fold(None::<(Tree, f64)>, |acc, (t, s)| match acc {
                    Some((at, asse)) if asse <= s => Some((at, asse)),
                    _ => Some((t, s)),
                })
                .expect("candidate set is nonempty")
        };
        for (i, r) in rows.iter().enumerate() {
            psi[i] += params.nu * tree.predict(r);
        }
        risk_path.push(neg_log_partial_likelihood(&psi, times, events));
        selected.push(BoostStep { iteration: b, tree });
    }
    Ok(BoostFit {
        nu: params.nu,
        offset: 0.0,
        selected,
        risk_path,
    })
}

/// Inner folds stratified on the event indicator.
fn inner_folds(events: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let (mut ev, mut rest): (Vec<usize>, Vec<usize>) = (0..events.len()).partition(|&i| events[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ev.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let mut fold_of = vec![0; events.len()];
    for (k, &i) in ev.iter().chain(rest.iter()).enumerate() {
        fold_of[i] = k % folds;
    }
    fold_of
}

/// Fold-averaged held-out negative partial log-likelihood at every
/// `b = 0..=b_stop`.
pub fn validation_curve(rows: &[Vec<f64>], times: &[f64], events: &[bool], params: &BoostParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n_events = events.iter().filter(|&&e| e).count();
    if params.inner_folds < 2 || n_events < params.inner_folds {
        return Err(DynslError::config(
            MODULE,
            format!(
                "{n_events} events cannot fill {} inner folds; lower inner_folds",
                params.inner_folds
            ),
        ));
    }
    let fold_of = inner_folds(events, params.inner_folds, params.seed);
    let curves = (0..params.inner_folds)
        .into_par_iter()
        .map(|p| {
            let train: Vec<usize> = (0..rows.len()).filter(|&i| fold_of[i] != p).collect();
            let test: Vec<usize> = (0..rows.len()).filter(|&i| fold_of[i] == p).collect();
            let pick = |idx: &[usize]| {
                (
                    idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(),
                    idx.iter().map(|&i| times[i]).collect::<Vec<_>>(),
                    idx.iter().map(|&i| events[i]).collect::<Vec<_>>(),
                )
            };
            let (xr, tr, er) = pick(&train);
            let (xs, ts, es) = pick(&test);
            let fit = boost(&xr, &tr, &er, params)?;
            let mut psi = vec![0.0; xs.len()];
            let mut curve = Vec::with_capacity(params.b_stop + 1);
            curve.push(neg_log_partial_likelihood(&psi, &ts, &es));
            for step in &fit.selected {
                for (v, x) in psi.iter_mut().zip(&xs) {
                    *v += fit.nu * step.tree.predict(x);
                }
                curve.push(neg_log_partial_likelihood(&psi, &ts, &es));
            }
            Ok(curve)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let k = curves.len() as f64;
    Ok((0..=params.b_stop)
        .map(|b| curves.iter().map(|c| c[b]).sum::<f64>() / k)
        .collect())
}

/// Number of iterations minimizing the inner-CV curve; ties go to the
/// smallest `b`.
pub fn select_b_opt(rows: &[Vec<f64>], times: &[f64], events: &[bool], params: &BoostParams) -> Result<usize> {
    let curve = validation_curve(rows, times, events, params)?;
    Ok(argmin_first(&curve))
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `exp(-H_0(u) exp(psi_j))` with the Breslow baseline from the training
/// scores.
pub fn predict_boosted(
    fit: &BoostFit,
    train_rows: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    new_rows: &[Vec<f64>],
    horizons: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let width = train_rows.first().map_or(0, Vec::len);
    if new_rows.iter().any(|r| r.len() != width) {
        return Err(DynslError::domain(
            MODULE,
            "new features do not match the training schema",
        ));
    }
    let psi: Vec<f64> = train_rows.iter().map(|r| fit.predict(r)).collect();
    let h0 = breslow_curve(&psi, times, events);
    let new_psi: Vec<f64> = new_rows.iter().map(|r| fit.predict(r)).collect();
    Ok(horizons
        .iter()
        .map(|&u| {
            let h = h0.eval(u);
            new_psi.iter().map(|&p| cox_survival(p, h)).collect()
        })
        .collect())
}

/// Boosted Cox learner on landmark features, ready to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedCoxModel {
    pub recipe: FeatureRecipe,
    pub fit: BoostFit,
    pub b_opt: usize,
    pub validation_curve: Vec<f64>,
    pub baseline: StepFunction,
}

impl BoostedCoxModel {
    /// Selects `b_opt` by inner cross-validation, then refits the path on
    /// the whole risk set and truncates it.
    pub fn fit(features: &LandmarkFeatures, data: &Dataset, params: &BoostParams) -> Result<Self> {
        let times: Vec<f64> = features.subjects.iter().map(|&i| data.time(i)).collect();
        let events: Vec<bool> = features.subjects.iter().map(|&i| data.event(i)).collect();
        let curve = validation_curve(&features.design, &times, &events, params)?;
        let b_opt = argmin_first(&curve);
        let mut fit = boost(
            &features.design,
            &times,
            &events,
            &BoostParams {
                b_stop: b_opt.max(1),
                ..*params
            },
        )?;
        fit.truncate(b_opt);
        let psi: Vec<f64> = features.design.iter().map(|r| fit.predict(r)).collect();
        Ok(Self {
            recipe: features.recipe.clone(),
            baseline: breslow_curve(&psi, &times, &events),
            fit,
            b_opt,
            validation_curve: curve,
        })
    }

    pub fn predict(&self, newdata: &Dataset, horizons: &[f64]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let f = self.recipe.apply(newdata)?;
        let psi: Vec<f64> = f.design.iter().map(|r| self.fit.predict(r)).collect();
        let surv = horizons
            .iter()
            .map(|&u| {
                let h = self.baseline.eval(u);
                psi.iter().map(|&p| cox_survival(p, h)).collect()
            })
            .collect();
        Ok((f.subjects, surv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gradient_two_subject_hand_value() {
        let u = cox_negative_gradient(&[0.0, 0.0], &[1.0, 2.0], &[true, false]);
        assert_eq!(u, vec![0.5, -0.5]);
    }

    fn random_problem(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let times: Vec<f64> = rows
            .iter()
            .map(|r| -(rng.random::<f64>()).ln() / (2.0 * r[0]).exp())
            .collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
        (rows, times, events)
    }

    #[test]
    fn single_step_definition() {
        let (rows, times, events) = random_problem(3, 40);
        let one: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0]]).collect();
        let params = BoostParams {
            b_stop: 1,
            ..BoostParams::default()
        };
        let fit = boost(&one, &times, &events, &params).unwrap();
        let u = cox_negative_gradient(&vec![0.0; 40], &times, &events);
        let cols = vec![one.iter().map(|r| r[0]).collect::<Vec<_>>()];
        let (stump, _) = fit_tree(&SortedColumns::new(&cols), &u, &[0], &params.single);
        for r in &one {
            assert_eq!(fit.predict(r), 0.025 * stump.predict(r));
        }
    }

    #[test]
    fn training_risk_decreases_and_null_model_is_breslow() {
        let (rows, times, events) = random_problem(5, 120);
        let params = BoostParams {
            b_stop: 60,
            ..BoostParams::default()
        };
        let fit = boost(&rows, &times, &events, &params).unwrap();
        for w in fit.risk_path.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let mut null = fit.clone();
        null.truncate(0);
        let p = predict_boosted(&null, &rows, &times, &events, &rows[..5], &[0.5, 0.0]).unwrap();
        let na = breslow_curve(&vec![0.0; rows.len()], &times, &events);
        for v in &p[0] {
            assert_eq!(*v, (-na.eval(0.5)).exp());
        }
        assert!(p[1].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn b_opt_is_deterministic_and_minimal() {
        let (rows, times, events) = random_problem(8, 100);
        let params = BoostParams {
            b_stop: 40,
            seed: 4,
            ..BoostParams::default()
        };
        let curve = validation_curve(&rows, &times, &events, &params).unwrap();
        let b = select_b_opt(&rows, &times, &events, &params).unwrap();
        assert_eq!(b, select_b_opt(&rows, &times, &events, &params).unwrap());
        assert!(curve[b] <= curve[40]);
        assert!(curve[..b].iter().all(|&v| v > curve[b]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gradient_matches_finite_differences(
            raw in proptest::collection::vec((-1.0f64..1.0, 0.0f64..5.0, proptest::bool::ANY), 10),
        ) {
            let psi: Vec<f64> = raw.iter().map(|r| r.0).collect();
            // rounded times create ties
            let times: Vec<f64> = raw.iter().map(|r| (r.1 * 2.0).round() / 2.0).collect();
            let events: Vec<bool> = raw.iter().map(|r| r.2).collect();
            let u = cox_negative_gradient(&psi, &times, &events);
            prop_assert!(u.iter().sum::<f64>().abs() < 1e-12);
            let h = 1e-6;
            for i in 0..10 {
                let mut p = psi.clone();
                p[i] += h;
                let up = neg_log_partial_likelihood(&p, &times, &events);
                p[i] -= 2.0 * h;
                let down = neg_log_partial_likelihood(&p, &times, &events);
                let fd = -(up - down) / (2.0 * h);
                prop_assert!((fd - u[i]).abs() < 1e-6, "subject {i}: {fd} vs {}", u[i]);
            }
        }
    }
}
