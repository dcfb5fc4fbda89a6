//! Nonparametric survival machinery: Kaplan–Meier, the conditional
//! censoring distribution, inverse-probability-of-censoring weights and the
//! Breslow cumulative baseline hazard.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionWindow};
use crate::error::{DynslError, Result};

/// Right-continuous step function.
///
/// `eval(s)` returns the value attached to the last jump time `<= s`, or
/// `initial` before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub initial: f64,
    pub jump_times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn constant(value: f64) -> Self {
        Self {
            initial: value,
            jump_times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&x| x <= s);
        if idx == 0 {
            self.initial
        } else {
            self.values[idx - 1]
        }
    }

    /// Value just before `s`.
    pub fn left_limit(&self, s: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&x| x < s);
        if idx == 0 {
            self.initial
        } else {
            self.values[idx - 1]
        }
    }

    pub fn last_jump(&self) -> Option<f64> {
        self.jump_times.last().copied()
    }
}

/// Product-limit estimator. At tied times events are processed before
/// censorings, so a subject censored at `s` still counts as at risk at `s`.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    if times.is_empty() || times.len() != events.len() {
        return Err(DynslError::domain(
            "survival_estimators",
            format!(
                "kaplan_meier needs equal, nonzero lengths (got {} and {})",
                times.len(),
                events.len()
            ),
        ));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(DynslError::domain(
            "survival_estimators",
            "kaplan_meier times must be finite and nonnegative",
        ));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let n = times.len();
    let mut surv = 1.0;
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut k = 0;
    while k < n {
        let s = times[order[k]];
        let at_risk = n - k;
        let mut deaths = 0usize;
        let mut j = k;
        while j < n && times[order[j]] == s {
            if events[order[j]] {
                deaths += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            jump_times.push(s);
            values.push(surv);
        }
        k = j;
    }
    Ok(StepFunction {
        initial: 1.0,
        jump_times,
        values,
    })
}

/// Censoring survival `G(s | t)` estimated by reverse Kaplan–Meier on the
/// subjects at risk at `t`, so that `G(t | t) = 1`.
pub fn censoring_survival(data: &Dataset, t: f64) -> Result<StepFunction> {
    let risk = data.risk_set(t);
    if risk.is_empty() {
        return Err(DynslError::domain(
            "survival_estimators",
            format!("no subjects at risk at {t}"),
        ));
    }
    let times: Vec<f64> = risk.indices.iter().map(|&i| data.time(i)).collect();
    let censored: Vec<bool> = risk.indices.iter().map(|&i| !data.event(i)).collect();
    kaplan_meier(&times, &censored)
}

/// IPCW weights `W_i(u, t)` for the risk set at `t`, aligned with
/// [`Dataset::risk_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct IpcwWeights {
    pub window: PredictionWindow,
    pub subjects: Vec<usize>,
    pub weights: Vec<f64>,
}

impl IpcwWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_effective(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Inverse probability of censoring weights.
///
/// In-window event-havers get `1 / G(T_i- | t)` (left limit, so a censoring
/// tied with the event does not cancel it), subjects still event-free at `u`
/// get `1 / G(u | t)`, and subjects censored inside the window get 0.
pub fn ipcw(data: &Dataset, window: &PredictionWindow) -> Result<IpcwWeights> {
    let g = censoring_survival(data, window.t)?;
    let risk = data.risk_set(window.t);
    let g_u = g.eval(window.u);
    let mut weights = Vec::with_capacity(risk.len());
    for &i in &risk.indices {
        let ti = data.time(i);
        let w = if ti > window.u {
            if g_u <= 0.0 {
                return Err(DynslError::estimability(
                    "survival_estimators",
                    format!(
                        "censoring survival is 0 at horizon {} (subject {})",
                        window.u,
                        data.subject(i).id
                    ),
                ));
            }
            1.0 / g_u
        } else if data.event(i) {
            let gi = g.left_limit(ti);
            if gi <= 0.0 {
                return Err(DynslError::estimability(
                    "survival_estimators",
                    format!(
                        "censoring survival is 0 before the event of subject {}",
                        data.subject(i).id
                    ),
                ));
            }
            1.0 / gi
        } else {
            0.0
        };
        weights.push(w);
    }
    Ok(IpcwWeights {
        window: *window,
        subjects: risk.indices,
        weights,
    })
}

/// Breslow cumulative baseline hazard as a step function of absolute time.
///
/// `times`/`events`/`linear_predictors` describe the fitting risk set. The
/// denominator at each event time sums `exp(lp)` over subjects with
/// `T_j >= T_i`.
pub fn breslow_curve(linear_predictors: &[f64], times: &[f64], events: &[bool]) -> StepFunction {
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    // distinct event times descending with their increments
    let mut incs: Vec<(f64, f64)> = Vec::new();
    let mut risk_sum = 0.0;
    let mut k = 0;
    while k < n {
        let s = times[order[k]];
        let mut deaths = 0usize;
        let mut j = k;
        while j < n && times[order[j]] == s {
            risk_sum += linear_predictors[order[j]].exp();
            if events[order[j]] {
                deaths += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            incs.push((s, deaths as f64 / risk_sum));
        }
        k = j;
    }
    incs.reverse();
    let mut cum = 0.0;
    let mut jump_times = Vec::with_capacity(incs.len());
    let mut values = Vec::with_capacity(incs.len());
    for (s, h) in incs {
        cum += h;
        jump_times.push(s);
        values.push(cum);
    }
    StepFunction {
        initial: 0.0,
        jump_times,
        values,
    }
}

/// Breslow estimate `H_0(u)` for a fit whose time origin is the landmark.
pub fn breslow_cumhaz(linear_predictors: &[f64], times: &[f64], events: &[bool], landmark: f64, u: f64) -> Result<f64> {
    if u < landmark {
        return Err(DynslError::domain(
            "survival_estimators",
            format!("horizon {u} precedes landmark {landmark}"),
        ));
    }
    if linear_predictors.len() != times.len() || times.len() != events.len() {
        return Err(DynslError::domain(
            "survival_estimators",
            "breslow inputs have different lengths",
        ));
    }
    Ok(breslow_curve(linear_predictors, times, events).eval(u))
}

/// `exp(-H_0(u) exp(lp))`.
pub fn cox_survival(lp: f64, cumhaz: f64) -> f64 {
    (-cumhaz * lp.exp()).exp()
}
