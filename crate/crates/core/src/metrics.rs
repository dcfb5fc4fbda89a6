//! IPCW-weighted loss functions for dynamic predictions: Brier score,
//! integrated Brier score (two-node Simpson rule) and time-varying AUC.
//!
//! All functions take survival predictions aligned with the risk set at the
//! landmark, in the order of [`IpcwWeights::subjects`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictionWindow};
use crate::error::{DynslError, Result};
use crate::estimators::IpcwWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bs,
    Ibs,
    TvAuc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Bs, Metric::Ibs, Metric::TvAuc];

    /// BS and IBS are minimized, tv-AUC is maximized.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::TvAuc)
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Bs => "BS",
            Metric::Ibs => "IBS",
            Metric::TvAuc => "tvAUC",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = DynslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bs" | "brier" => Ok(Metric::Bs),
            "ibs" => Ok(Metric::Ibs),
            "tvauc" | "auc" => Ok(Metric::TvAuc),
            _ => Err(DynslError::config("metrics", format!("unknown loss `{s}`"))),
        }
    }
}

/// Which outcome indicator the Brier score compares a survival prediction
/// against.
///
/// `Verbatim` pairs the event indicator `1(T_i <= u)` with the survival
/// prediction. `Conventional` pairs the survival indicator `1(T_i > u)` with
/// it (Graf et al.), under which better survival predictions score lower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrierPairing {
    Verbatim,
    #[default]
    Conventional,
}

/// Which ordering of a case/control pair counts as concordant in tv-AUC.
///
/// `Verbatim` counts `pred_case > pred_control`. `Conventional`
/// counts `pred_case < pred_control` (event-havers should have the lower
/// survival). Both use a strict inequality, so ties never score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucOrientation {
    Verbatim,
    #[default]
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub kind: Metric,
    pub window: PredictionWindow,
    pub n_effective: usize,
}

fn check_alignment(preds: &[f64], w: &IpcwWeights) -> Result<()> {
    if preds.len() != w.len() {
        return Err(DynslError::domain(
            "metrics",
            format!("{} predictions for a risk set of {} subjects", preds.len(), w.len()),
        ));
    }
    Ok(())
}

/// Outcome indicators for the Brier score, aligned with `w.subjects`.
pub fn brier_targets(data: &Dataset, w: &IpcwWeights, pairing: BrierPairing) -> Vec<f64> {
    w.subjects
        .iter()
        .map(|&i| {
            let survived = data.time(i) > w.window.u;
            match pairing {
                BrierPairing::Conventional => f64::from(u8::from(survived)),
                BrierPairing::Verbatim => f64::from(u8::from(!survived)),
            }
        })
        .collect()
}

/// Weighted mean square over the full risk set. Zero-weight entries are
/// skipped without reading their prediction.
pub(crate) fn brier_raw(preds: &[f64], weights: &[f64], targets: &[f64]) -> f64 {
    let mut sum = 0.0;
    for ((&p, &w), &y) in preds.iter().zip(weights).zip(targets) {
        if w != 0.0 {
            let r = y - p;
            sum += w * r * r;
        }
    }
    sum / preds.len() as f64
}

/// IPCW Brier score at the horizon of `w.window`, divided by the size of
/// the risk set (zero-weight subjects included in the denominator).
pub fn brier(preds: &[f64], data: &Dataset, w: &IpcwWeights, pairing: BrierPairing) -> Result<MetricValue> {
    check_alignment(preds, w)?;
    if preds.is_empty() {
        return Err(DynslError::domain("metrics", "empty risk set"));
    }
    let targets = brier_targets(data, w, pairing);
    Ok(MetricValue {
        value: brier_raw(preds, &w.weights, &targets),
        kind: Metric::Bs,
        window: w.window,
        n_effective: w.n_effective(),
    })
}

/// Simpson approximation `(2/3) BS((t+u)/2 | t) + (1/6) BS(u | t)`; the
/// `BS(t | t)` node is identically zero.
pub fn integrated_brier(
    preds_mid: &[f64],
    preds_end: &[f64],
    data: &Dataset,
    w_mid: &IpcwWeights,
    w_end: &IpcwWeights,
    pairing: BrierPairing,
) -> Result<MetricValue> {
    if w_mid.window.t != w_end.window.t || w_mid.window.u != w_end.window.midpoint() {
        return Err(DynslError::domain(
            "metrics",
            "midpoint weights must be computed for the half window {t, (t+u)/2}",
        ));
    }
    let mid = brier(preds_mid, data, w_mid, pairing)?;
    let end = brier(preds_end, data, w_end, pairing)?;
    Ok(MetricValue {
        value: simpson_ibs(mid.value, end.value),
        kind: Metric::Ibs,
        window: w_end.window,
        n_effective: end.n_effective,
    })
}

pub fn simpson_ibs(bs_mid: f64, bs_end: f64) -> f64 {
    2.0 / 3.0 * bs_mid + 1.0 / 6.0 * bs_end
}

/// Case indicators `D_i(u, t) = 1(t < T_i <= u) delta_i` aligned with `w`.
pub fn cases(data: &Dataset, w: &IpcwWeights) -> Vec<bool> {
    w.subjects.iter().map(|&i| data.event_in_window(i, &w.window)).collect()
}

/// Weighted concordance over case/control pairs; `None` when no pair has
/// positive weight.
pub(crate) fn auc_raw(preds: &[f64], weights: &[f64], is_case: &[bool], orientation: AucOrientation) -> Option<f64> {
    let mut controls: Vec<(f64, f64)> = Vec::new();
    let mut case_weight = 0.0;
    for ((&p, &w), &c) in preds.iter().zip(weights).zip(is_case) {
        if w == 0.0 {
            continue;
        }
        if c {
            case_weight += w;
        } else {
            controls.push((p, w));
        }
    }
    let control_weight: f64 = controls.iter().map(|c| c.1).sum();
    let denom = case_weight * control_weight;
    if denom <= 0.0 {
        return None;
    }
    controls.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prefix = Vec::with_capacity(controls.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for c in &controls {
        acc += c.1;
        prefix.push(acc);
    }
    let mut num = 0.0;
    for ((&p, &w), &c) in preds.iter().zip(weights).zip(is_case) {
        if !c || w == 0.0 {
            continue;
        }
        let concordant = match orientation {
            // controls with prediction strictly below the case
            AucOrientation::Verbatim => prefix[controls.partition_point(|x| x.0 < p)],
            // controls with prediction strictly above the case
            AucOrientation::Conventional => acc - prefix[controls.partition_point(|x| x.0 <= p)],
        };
        num += w * concordant;
    }
    Some(num / denom)
}

/// Time-varying AUC over case/control pairs of the risk set.
pub fn tv_auc(preds: &[f64], data: &Dataset, w: &IpcwWeights, orientation: AucOrientation) -> Result<MetricValue> {
    check_alignment(preds, w)?;
    let is_case = cases(data, w);
    let value = auc_raw(preds, &w.weights, &is_case, orientation).ok_or_else(|| {
        DynslError::estimability(
            "metrics",
            format!("no case/control pairs with positive weight in window {}", w.window),
        )
    })?;
    Ok(MetricValue {
        value,
        kind: Metric::TvAuc,
        window: w.window,
        n_effective: w.n_effective(),
    })
}
