use serde::{Deserialize, Serialize};

use crate::error::{DynslError, Result};
use crate::lmm::{blup_points, predict_eta, LmmFit, TimeBasis};
use crate::optim::adaptive_simpson;

const MODULE: &str = "simulator";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum BaselineHazard {
    Exponential {
        rate: f64,
    },
    /// `h_0(s) = (shape / scale) (s / scale)^(shape - 1)`.
    Weibull {
        shape: f64,
        scale: f64,
    },
}

impl BaselineHazard {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaselineHazard::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            BaselineHazard::Weibull { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DynslError::config(
                MODULE,
                "baseline hazard parameters must be positive",
            ))
        }
    }

    pub fn hazard(&self, s: f64) -> f64 {
        match *self {
            BaselineHazard::Exponential { rate } => rate,
            BaselineHazard::Weibull { shape, scale } => shape / scale * (s / scale).powf(shape - 1.0),
        }
    }

    pub fn cumulative(&self, s: f64) -> f64 {
        match *self {
            BaselineHazard::Exponential { rate } => rate * s,
            BaselineHazard::Weibull { shape, scale } => (s / scale).powf(shape),
        }
    }

    /// Inverse of `cumulative`.
    pub fn inverse_cumulative(&self, h: f64) -> f64 {
        match *self {
            BaselineHazard::Exponential { rate } => h / rate,
            BaselineHazard::Weibull { shape, scale } => scale * h.powf(1.0 / shape),
        }
    }
}

/// Known-parameter joint model: the longitudinal mixed model plus the
/// hazard `h_0(s) exp(gamma'w + alpha * eta(s))` driven by the current
/// latent value of one biomarker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub longitudinal: LmmFit,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub hazard: BaselineHazard,
}

impl JointModel {
    fn baseline_lp(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.gamma).map(|(a, b)| a * b).sum()
    }

    pub fn hazard_at(&self, w: &[f64], b: &[f64], s: f64) -> f64 {
        self.hazard.hazard(s) * (self.baseline_lp(w) + self.alpha * predict_eta(&self.longitudinal, b, s)).exp()
    }

    /// Intercept and slope of `eta` when it is linear in time.
    fn linear_eta(&self, b: &[f64]) -> Option<(f64, f64)> {
        if self.longitudinal.time_basis != TimeBasis::Linear {
            return None;
        }
        let a = predict_eta(&self.longitudinal, b, 0.0);
        let c = predict_eta(&self.longitudinal, b, 1.0) - a;
        Some((a, c))
    }

    /// `H_i(to) - H_i(from)`. Closed form for an exponential baseline with a
    /// linear trajectory, adaptive Simpson otherwise.
    pub fn cumulative_hazard(&self, w: &[f64], b: &[f64], from: f64, to: f64) -> Result<f64> {
        if to <= from {
            return Ok(0.0);
        }
        if let (BaselineHazard::Exponential { rate }, Some((a, c))) = (self.hazard, self.linear_eta(b)) {
            let k = self.alpha * c;
            let scale = rate * (self.baseline_lp(w) + self.alpha * a).exp();
            let span = to - from;
            let integral = if k.abs() < 1e-12 {
                span * (k * from).exp()
            } else {
                (k * from).exp() * (k * span).exp_m1() / k
            };
            return Ok(scale * integral);
        }
        adaptive_simpson(|s| self.hazard_at(w, b, s), from, to, 1e-10)
    }

    /// `S(u | b) / S(t | b)` for each horizon, with `b` the posterior mean of
    /// the random effects given the history up to `t`.
    pub fn conditional_survival(
        &self,
        w: &[f64],
        history: &[(f64, f64)],
        t: f64,
        horizons: &[f64],
    ) -> Result<Vec<f64>> {
        let b = blup_points(&self.longitudinal, history);
        horizons
            .iter()
            .map(|&u| Ok((-self.cumulative_hazard(w, &b, t, u)?).exp()))
            .collect()
    }
}
