use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::cv::PredictionMatrix;
use crate::data::Dataset;
use crate::error::{DynslError, Result};
use crate::estimators::ipcw;
use crate::metrics::{auc_raw, brier_raw, brier_targets, cases, simpson_ibs, AucOrientation, BrierPairing, Metric};
use crate::optim::{nelder_mead, project_simplex, NelderMeadOptions};

const MODULE: &str = "superlearner";

/// IPCW weights and outcome indicators for the rows of a prediction matrix.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub pairing: BrierPairing,
    pub orientation: AucOrientation,
    w_end: Vec<f64>,
    y_end: Vec<f64>,
    w_mid: Vec<f64>,
    y_mid: Vec<f64>,
    is_case: Vec<bool>,
}

impl LossTargets {
    pub fn new(
        z: &PredictionMatrix,
        data: &Dataset,
        pairing: BrierPairing,
        orientation: AucOrientation,
    ) -> Result<Self> {
        let w_end = ipcw(data, &z.window)?;
        let w_mid = ipcw(data, &z.window.half())?;
        if w_end.subjects != z.subjects {
            return Err(DynslError::domain(
                MODULE,
                "prediction matrix rows do not match the risk set",
            ));
        }
        Ok(Self {
            pairing,
            orientation,
            y_end: brier_targets(data, &w_end, pairing),
            y_mid: brier_targets(data, &w_mid, pairing),
            is_case: cases(data, &w_end),
            w_end: w_end.weights,
            w_mid: w_mid.weights,
        })
    }

    /// Loss of a prediction vector pair (`mid` is only read for IBS).
    pub fn loss(&self, metric: Metric, end: &[f64], mid: &[f64]) -> Result<f64> {
        match metric {
            Metric::Bs => Ok(brier_raw(end, &self.w_end, &self.y_end)),
            Metric::Ibs => Ok(simpson_ibs(
                brier_raw(mid, &self.w_mid, &self.y_mid),
                brier_raw(end, &self.w_end, &self.y_end),
            )),
            Metric::TvAuc => auc_raw(end, &self.w_end, &self.is_case, self.orientation)
                .ok_or_else(|| DynslError::estimability(MODULE, "no case/control pairs with positive weight")),
        }
    }

    /// Loss of every single-learner column.
    pub fn column_losses(&self, z: &PredictionMatrix, metric: Metric) -> Result<Vec<f64>> {
        (0..z.n_learners())
            .map(|k| self.loss(metric, &z.column(k, false), &z.column(k, true)))
            .collect()
    }

    /// Loss of the mixture `Z omega`.
    pub fn mixture_loss(&self, z: &PredictionMatrix, omega: &[f64], metric: Metric) -> Result<f64> {
        self.loss(metric, &z.mix(omega, false), &z.mix(omega, true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub learner_ids: Vec<String>,
    pub omega: Vec<f64>,
    pub loss: Metric,
    /// Cross-validated loss of the weighted ensemble.
    pub achieved_loss: f64,
    pub converged: bool,
    pub n_starts_used: usize,
    pub iterations: usize,
}

/// Index of the best column; ties go to the first in library order.
pub fn discrete_select(z: &PredictionMatrix, targets: &LossTargets, metric: Metric) -> Result<(usize, Vec<f64>)> {
    let losses = targets.column_losses(z, metric)?;
    let mut best = 0;
    for (k, &v) in losses.iter().enumerate() {
        if metric.better(v, losses[best]) {
            best = k;
        }
    }
    Ok((best, losses))
}

/// Quadratic form `omega'Q omega - 2 c'omega + k0` of a Brier-type loss.
struct Quadratic {
    q: DMatrix<f64>,
    c: DVector<f64>,
}

impl Quadratic {
    fn new(z: &PredictionMatrix, t: &LossTargets, metric: Metric) -> Self {
        let k = z.n_learners();
        let n = z.n_rows() as f64;
        let mut q = DMatrix::zeros(k, k);
        let mut c = DVector::zeros(k);
        let mut add = |coef: f64, rows: &[Vec<f64>], w: &[f64], y: &[f64]| {
            for ((r, &wi), &yi) in rows.iter().zip(w).zip(y) {
                if wi == 0.0 {
                    continue;
                }
                let s = coef * wi / n;
                for a in 0..k {
                    c[a] += s * yi * r[a];
                    for b in 0..k {
                        q[(a, b)] += s * r[a] * r[b];
                    }
                }
            }
        };
        match metric {
            Metric::Ibs => {
                add(2.0 / 3.0, &z.mid, &t.w_mid, &t.y_mid);
                add(1.0 / 6.0, &z.end, &t.w_end, &t.y_end);
            }
            _ => add(1.0, &z.end, &t.w_end, &t.y_end),
        }
        Self { q, c }
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.q * w)) - 2.0 * self.c.dot(w)
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.q * w - &self.c) * 2.0
    }
}

/// Minimizes BS or IBS of `Z omega` over the probability simplex by
/// accelerated projected gradient with adaptive restart, started at the
/// uniform weights. If a single learner does better, its vertex is
/// returned instead.
pub fn optimize_weights_convex(z: &PredictionMatrix, targets: &LossTargets, metric: Metric) -> Result<EnsembleWeights> {
    if metric == Metric::TvAuc {
        return Err(DynslError::config(MODULE, "tv-AUC weights use optimize_weights_auc"));
    }
    let k = z.n_learners();
    let quad = Quadratic::new(z, targets, metric);
    let lipschitz = 2.0 * quad.q.clone().symmetric_eigen().eigenvalues.max().max(0.0);
    let mut x = DVector::from_element(k, 1.0 / k as f64);
    let mut iterations = 0;
    let mut converged = k == 1 || lipschitz == 0.0;
    if !converged {
        let step = 1.0 / lipschitz;
        let mut y = x.clone();
        let mut tk: f64 = 1.0;
        let mut fx = quad.value(&x);
        let mut quiet = 0;
        // y == x: the next step is a plain projected-gradient step.
        let mut plain = true;
        while iterations < 50_000 {
            iterations += 1;
            let g = quad.gradient(&y);
            let next = DVector::from_vec(project_simplex((&y - &g * step).as_slice()));
            let f_next = quad.value(&next);
            // gradient mapping at the extrapolated point
            let mapping = (&y - &next).amax() * lipschitz;
            if f_next > fx {
                if plain {
                    // A 1/L step from x cannot increase f in exact
                    // arithmetic, so x is stationary up to rounding.
                    converged = true;
                    break;
                }
                y = x.clone();
                tk = 1.0;
                plain = true;
                continue;
            }
            plain = false;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            y = &next + (&next - &x) * ((tk - 1.0) / t_next);
            tk = t_next;
            let delta = fx - f_next;
            x = next;
            fx = f_next;
            quiet = if delta < 1e-12 { quiet + 1 } else { 0 };
            if mapping < 1e-10 || quiet >= 25 {
                converged = true;
                break;
            }
        }
    }
    let mut omega: Vec<f64> = x.iter().copied().collect();
    let mut achieved = targets.mixture_loss(z, &omega, metric)?;
    let (best, losses) = discrete_select(z, targets, metric)?;
    if losses[best] < achieved {
        omega = vec![0.0; k];
        omega[best] = 1.0;
        achieved = losses[best];
    }
    Ok(EnsembleWeights {
        learner_ids: z.learner_ids.clone(),
        omega,
        loss: metric,
        achieved_loss: achieved,
        converged,
        n_starts_used: 1,
        iterations,
    })
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Maximizes tv-AUC of `Z omega` with Nelder–Mead on softmax parameters from
/// several starts: uniform, near each vertex, then random Dirichlet points.
/// If no start reaches the best single learner, the weights fall back to
/// that learner's vertex and `converged` is false.
pub fn optimize_weights_auc(
    z: &PredictionMatrix,
    targets: &LossTargets,
    n_starts: usize,
    seed: u64,
) -> Result<EnsembleWeights> {
    let k = z.n_learners();
    let (best_vertex, vertex_auc) = discrete_select(z, targets, Metric::TvAuc)?;
    if k == 1 {
        return Ok(EnsembleWeights {
            learner_ids: z.learner_ids.clone(),
            omega: vec![1.0],
            loss: Metric::TvAuc,
            achieved_loss: vertex_auc[0],
            converged: true,
            n_starts_used: 0,
            iterations: 0,
        });
    }
    let n_starts = n_starts.max(1);
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; k]];
    for j in 0..k.min(n_starts - 1) {
        let mut th = vec![0.0; k];
        th[j] = 10.0;
        starts.push(th);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::<f64>::new(1.0, 1.0).expect("valid gamma");
    while starts.len() < n_starts {
        starts.push((0..k).map(|_| gamma.sample(&mut rng).max(1e-300).ln()).collect());
    }
    let opts = NelderMeadOptions {
        max_iter: 200 * k,
        f_tol: 1e-12,
        x_tol: 1e-8,
        initial_step: 1.0,
    };
    let objective = |theta: &[f64]| {
        let w = softmax(theta);
        -auc_raw(&z.mix(&w, false), &targets.w_end, &targets.is_case, targets.orientation).unwrap_or(0.0)
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    for s in &starts {
        let r = nelder_mead(objective, s, &opts);
        iterations += r.iterations;
        if best.as_ref().is_none_or(|b| -r.value > b.1) {
            best = Some((softmax(&r.x), -r.value));
        }
    }
    let (mut omega, mut achieved) = best.expect("at least one start");
    let converged = achieved >= vertex_auc[best_vertex] - 1e-10;
    if !converged {
        omega = vec![0.0; k];
        omega[best_vertex] = 1.0;
        achieved = vertex_auc[best_vertex];
    }
    Ok(EnsembleWeights {
        learner_ids: z.learner_ids.clone(),
        omega,
        loss: Metric::TvAuc,
        achieved_loss: achieved,
        converged,
        n_starts_used: starts.len(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PredictionWindow, SubjectRecord};
    use crate::metrics::{brier, integrated_brier};
    use proptest::prelude::*;
    use rand::Rng;

    fn window() -> PredictionWindow {
        PredictionWindow::new(1.0, 5.0).unwrap()
    }

    /// Subjects all at risk at 1; about a third censored before 5.
    fn dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                baseline: vec![],
                observed_time: 1.0 + rng.random::<f64>() * 8.0,
                event: rng.random::<f64>() < 0.7,
            })
            .collect();
        Dataset::new(vec![], vec!["y".into()], subjects, vec![]).unwrap()
    }

    fn matrix(data: &Dataset, columns: &[Vec<f64>], mid: &[Vec<f64>]) -> PredictionMatrix {
        let risk = data.risk_set(window().t);
        let n = risk.len();
        let rows = |c: &[Vec<f64>]| (0..n).map(|i| c.iter().map(|col| col[i]).collect()).collect();
        PredictionMatrix {
            window: window(),
            learner_ids: (0..columns.len()).map(|k| format!("M{}", k + 1)).collect(),
            subjects: risk.indices.clone(),
            fold_of: vec![0; n],
            end: rows(columns),
            mid: rows(mid),
            dropped: vec![],
        }
    }

    fn random_columns(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn targets(z: &PredictionMatrix, d: &Dataset) -> LossTargets {
        LossTargets::new(z, d, BrierPairing::Conventional, AucOrientation::Conventional).unwrap()
    }

    /// Observed survival past `u` for every risk-set row.
    fn truth(d: &Dataset, u: f64) -> Vec<f64> {
        d.risk_set(window().t)
            .indices
            .iter()
            .map(|&i| f64::from(u8::from(d.time(i) > u)))
            .collect()
    }

    fn assert_simplex(w: &[f64]) {
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    /// Two almost identical columns make the objective nearly flat along
    /// their difference; the optimizer must still stop by its own rule.
    #[test]
    fn nearly_collinear_columns_converge() {
        let d = dataset(300, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..d.n()).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + 1e-7 * rng.random::<f64>()).min(1.0)).collect();
        let c: Vec<f64> = (0..d.n()).map(|_| rng.random::<f64>()).collect();
        let cols = vec![a, b, c];
        let z = matrix(&d, &cols, &cols);
        let w = optimize_weights_convex(&z, &targets(&z, &d), Metric::Ibs).unwrap();
        assert!(w.converged && w.iterations < 50_000, "{w:?}");
        assert_simplex(&w.omega);
    }

    /// Minimum over all simplex points whose coordinates are multiples of `1/steps`.
    fn grid_min(k: usize, steps: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        fn rec(k: usize, left: usize, steps: usize, cur: &mut Vec<f64>, f: &dyn Fn(&[f64]) -> f64, best: &mut f64) {
            if cur.len() == k - 1 {
                cur.push(left as f64 / steps as f64);
                *best = best.min(f(cur));
                cur.pop();
                return;
            }
            for j in 0..=left {
                cur.push(j as f64 / steps as f64);
                rec(k, left - j, steps, cur, f, best);
                cur.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(k, steps, steps, &mut Vec::new(), f, &mut best);
        best
    }

    #[test]
    fn pointwise_closer_column_gets_all_weight() {
        let d = dataset(60, 1);
        let y = truth(&d, 5.0);
        let ym = truth(&d, 3.0);
        let good = |y: &[f64]| y.iter().map(|v| 0.8 * v + 0.1).collect::<Vec<f64>>();
        let bad = |y: &[f64]| y.iter().map(|v| 0.4 * v + 0.3).collect::<Vec<f64>>();
        let z = matrix(&d, &[good(&y), bad(&y)], &[good(&ym), bad(&ym)]);
        let t = targets(&z, &d);
        for m in [Metric::Bs, Metric::Ibs] {
            let w = optimize_weights_convex(&z, &t, m).unwrap();
            assert_eq!(w.omega, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn duplicate_columns_keep_uniform_weights() {
        let d = dataset(50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_columns(50, 1, &mut rng).remove(0);
        let z = matrix(&d, &[c.clone(), c.clone()], &[c.clone(), c.clone()]);
        let t = targets(&z, &d);
        let w = optimize_weights_convex(&z, &t, Metric::Bs).unwrap();
        assert_eq!(w.achieved_loss, t.loss(Metric::Bs, &c, &c).unwrap());
        assert_eq!(w.omega, vec![0.5, 0.5]);
        assert_eq!(discrete_select(&z, &t, Metric::Bs).unwrap().0, 0);
        assert_eq!(discrete_select(&z, &t, Metric::TvAuc).unwrap().0, 0);
    }

    #[test]
    fn convex_weights_match_grid_search() {
        let d = dataset(80, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = truth(&d, 5.0);
        let mut cols = random_columns(80, 5, &mut rng);
        for (k, c) in cols.iter_mut().enumerate() {
            for (v, &yi) in c.iter_mut().zip(&y) {
                *v = 0.25 * k as f64 / 4.0 * yi + (1.0 - 0.25 * k as f64 / 4.0) * *v;
            }
        }
        let mid = random_columns(80, 5, &mut rng);
        let z = matrix(&d, &cols, &mid);
        let t = targets(&z, &d);
        for (m, k) in [(Metric::Bs, 5), (Metric::Ibs, 5)] {
            let w = optimize_weights_convex(&z, &t, m).unwrap();
            assert_simplex(&w.omega);
            let oracle = grid_min(k, 50, &|om| t.mixture_loss(&z, om, m).unwrap());
            assert!(
                w.achieved_loss <= oracle + 1e-12,
                "{m}: {} vs grid {oracle}",
                w.achieved_loss
            );
            assert!(oracle - w.achieved_loss < 1e-4);
        }
    }

    #[test]
    fn auc_single_learner_is_trivial() {
        let d = dataset(40, 6);
        let c = vec![0.5; 40];
        let z = matrix(&d, &[c.clone()], &[c]);
        let w = optimize_weights_auc(&z, &targets(&z, &d), 10, 1).unwrap();
        assert_eq!(w.omega, vec![1.0]);
        assert!(w.converged);
    }

    #[test]
    fn auc_perfect_learner_is_attained() {
        let d = dataset(60, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = truth(&d, 5.0);
        let perfect: Vec<f64> = y.iter().map(|v| 0.2 + 0.6 * v).collect();
        let mut cols = random_columns(60, 2, &mut rng);
        cols.insert(1, perfect);
        let z = matrix(&d, &cols, &cols);
        let w = optimize_weights_auc(&z, &targets(&z, &d), 10, 1).unwrap();
        assert!((w.achieved_loss - 1.0).abs() < 1e-12);
        assert!(w.converged);
    }

    #[test]
    fn auc_multistart_reaches_best_vertex() {
        let mut converged = 0;
        for seed in 0..100 {
            let d = dataset(60, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = truth(&d, 5.0);
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|_| y.iter().map(|v| 0.3 * v + 0.7 * rng.random::<f64>()).collect())
                .collect();
            let z = matrix(&d, &cols, &cols);
            let t = targets(&z, &d);
            let w = optimize_weights_auc(&z, &t, 10, seed).unwrap();
            assert_simplex(&w.omega);
            let (_, vertex) = discrete_select(&z, &t, Metric::TvAuc).unwrap();
            assert!(w.achieved_loss >= vertex.iter().copied().fold(0.0, f64::max) - 1e-10);
            converged += usize::from(w.converged);
        }
        assert!(converged >= 95, "{converged} of 100 converged");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn convex_losses_dominate_every_learner(seed in 0u64..1000, k in 1usize..6) {
            let d = dataset(40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let end = random_columns(40, k, &mut rng);
            let mid = random_columns(40, k, &mut rng);
            let z = matrix(&d, &end, &mid);
            let t = targets(&z, &d);
            for m in [Metric::Bs, Metric::Ibs] {
                let w = optimize_weights_convex(&z, &t, m).unwrap();
                assert_simplex(&w.omega);
                let (best, losses) = discrete_select(&z, &t, m).unwrap();
                prop_assert!(w.achieved_loss <= losses[best]);
                prop_assert!(losses.iter().all(|&l| losses[best] <= l));
            }
        }

        #[test]
        fn mixture_loss_is_the_metric_of_mixed_predictions(seed in 0u64..1000, k in 1usize..5) {
            let d = dataset(40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x123);
            let end = random_columns(40, k, &mut rng);
            let mid = random_columns(40, k, &mut rng);
            let z = matrix(&d, &end, &mid);
            let t = targets(&z, &d);
            let omega = project_simplex(&(0..k).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            let (pe, pm) = (z.mix(&omega, false), z.mix(&omega, true));
            let w_end = ipcw(&d, &window()).unwrap();
            let w_mid = ipcw(&d, &window().half()).unwrap();
            let bs = brier(&pe, &d, &w_end, BrierPairing::Conventional).unwrap().value;
            let ibs = integrated_brier(&pm, &pe, &d, &w_mid, &w_end, BrierPairing::Conventional).unwrap().value;
            prop_assert!((t.mixture_loss(&z, &omega, Metric::Bs).unwrap() - bs).abs() < 1e-12);
            prop_assert!((t.mixture_loss(&z, &omega, Metric::Ibs).unwrap() - ibs).abs() < 1e-12);
        }
    }
}
