//! Super Learner stacking of dynamic survival predictions.
//!
//! A library of learners is cross-validated on the landmark risk set, one
//! weight vector on the simplex is fitted per loss, and the learners are
//! refitted on the full training data to produce the ensemble (eSL) and the
//! single best learner (dSL).

mod cv;
mod learner;
mod weights;

pub use cv::{cv_predictions, PredictionMatrix};
pub use learner::{FittedLearner, FittedModel, Learner, LearnerKind, LearnerSpec, Prediction, Predictor};
pub use weights::{discrete_select, optimize_weights_auc, optimize_weights_convex, EnsembleWeights, LossTargets};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_folds, Dataset, PredictionWindow};
use crate::error::{DynslError, Result};
use crate::estimators::ipcw;
use crate::metrics::{brier, integrated_brier, tv_auc, AucOrientation, BrierPairing, Metric};

const MODULE: &str = "superlearner";

/// Label of the Kaplan–Meier reference in evaluations.
pub const REFERENCE_ID: &str = "KM";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperLearnerConfig {
    pub folds: usize,
    /// Seed of the fold assignment and the tv-AUC random starts.
    pub seed: u64,
    pub pairing: BrierPairing,
    pub orientation: AucOrientation,
    pub auc_starts: usize,
}

impl Default for SuperLearnerConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 1,
            pairing: BrierPairing::Conventional,
            orientation: AucOrientation::Conventional,
            auc_starts: 10,
        }
    }
}

/// Weights and discrete selection for one loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFit {
    pub weights: EnsembleWeights,
    /// Index of the dSL among the retained learners.
    pub dsl: usize,
    /// Cross-validated loss of every retained learner.
    pub cv_losses: Vec<f64>,
}

impl LossFit {
    pub fn dsl_id(&self) -> &str {
        &self.weights.learner_ids[self.dsl]
    }

    /// One-hot weights of the dSL.
    pub fn dsl_omega(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.cv_losses.len()];
        w[self.dsl] = 1.0;
        w
    }
}

/// Fits the weights of every loss on a fixed cross-validated matrix.
pub fn fit_weights(z: &PredictionMatrix, data: &Dataset, config: &SuperLearnerConfig) -> Result<Vec<LossFit>> {
    let targets = LossTargets::new(z, data, config.pairing, config.orientation)?;
    Metric::ALL
        .par_iter()
        .map(|&metric| {
            let weights = match metric {
                Metric::TvAuc => optimize_weights_auc(z, &targets, config.auc_starts, config.seed)?,
                _ => optimize_weights_convex(z, &targets, metric)?,
            };
            let (dsl, cv_losses) = discrete_select(z, &targets, metric)?;
            Ok(LossFit {
                weights,
                dsl,
                cv_losses,
            })
        })
        .collect()
}

/// A fitted Super Learner: weights for each loss plus the full-data refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperLearner {
    pub window: PredictionWindow,
    pub config: SuperLearnerConfig,
    /// Retained learners, in library order.
    pub learners: Vec<FittedLearner>,
    /// Learners removed during cross-validation, with the reason.
    pub dropped: Vec<(String, String)>,
    /// One entry per loss, in the order of [`Metric::ALL`].
    pub losses: Vec<LossFit>,
    /// Covariate-free Kaplan–Meier fitted on the same data.
    pub reference: FittedLearner,
}

/// Predictions of every retained learner on a held-out risk set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub window: PredictionWindow,
    pub learner_ids: Vec<String>,
    /// Dataset indices of the predicted subjects.
    pub subjects: Vec<usize>,
    /// `end[k][i]`: learner `k` at `u`.
    pub end: Vec<Vec<f64>>,
    /// Same at the window midpoint.
    pub mid: Vec<Vec<f64>>,
}

impl EnsemblePrediction {
    /// Subject-wise mixture `sum_k omega_k pi_k`.
    pub fn mix(&self, omega: &[f64], mid: bool) -> Vec<f64> {
        let m = if mid { &self.mid } else { &self.end };
        (0..self.subjects.len())
            .map(|i| m.iter().zip(omega).map(|(col, w)| w * col[i]).sum())
            .collect()
    }
}

impl SuperLearner {
    pub fn fit(
        library: &[LearnerSpec],
        data: &Dataset,
        window: &PredictionWindow,
        config: &SuperLearnerConfig,
    ) -> Result<Self> {
        for spec in library {
            spec.validate()?;
        }
        let folds = stratified_folds(data, window, config.folds, config.seed)?;
        let z = cv_predictions(library, data, window, &folds)?;
        Self::from_matrix(library, &z, data, config)
    }

    /// Fits weights on a precomputed matrix and refits the retained
    /// learners on `data`.
    pub fn from_matrix(
        library: &[LearnerSpec],
        z: &PredictionMatrix,
        data: &Dataset,
        config: &SuperLearnerConfig,
    ) -> Result<Self> {
        let losses = fit_weights(z, data, config)?;
        let specs: Vec<&LearnerSpec> = z
            .learner_ids
            .iter()
            .map(|id| {
                library
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| DynslError::config(MODULE, format!("learner `{id}` is not in the library")))
            })
            .collect::<Result<_>>()?;
        let learners = specs
            .par_iter()
            .map(|s| s.fit_model(data, z.window.t))
            .collect::<Result<Vec<_>>>()?;
        let reference = LearnerSpec::new(REFERENCE_ID, LearnerKind::KaplanMeier).fit_model(data, z.window.t)?;
        Ok(Self {
            window: z.window,
            config: *config,
            learners,
            dropped: z.dropped.clone(),
            losses,
            reference,
        })
    }

    pub fn learner_ids(&self) -> Vec<String> {
        self.learners.iter().map(|l| l.id.clone()).collect()
    }

    pub fn loss_fit(&self, metric: Metric) -> &LossFit {
        &self.losses[Metric::ALL
            .iter()
            .position(|&m| m == metric)
            .expect("every metric is fitted")]
    }

    /// Predictions of every retained learner at `u` and the midpoint.
    pub fn predict_learners(&self, newdata: &Dataset) -> Result<EnsemblePrediction> {
        let horizons = [self.window.u, self.window.midpoint()];
        let preds = self
            .learners
            .par_iter()
            .map(|l| l.predict(newdata, &horizons))
            .collect::<Result<Vec<_>>>()?;
        let subjects = preds.first().map(|p| p.subjects.clone()).unwrap_or_default();
        if preds.iter().any(|p| p.subjects != subjects) {
            return Err(DynslError::numerical(MODULE, "learners predicted different risk sets"));
        }
        let (end, mid) = preds
            .into_iter()
            .map(|p| {
                let mut s = p.survival.into_iter();
                (s.next().unwrap_or_default(), s.next().unwrap_or_default())
            })
            .unzip();
        Ok(EnsemblePrediction {
            window: self.window,
            learner_ids: self.learner_ids(),
            subjects,
            end,
            mid,
        })
    }

    /// eSL survival probabilities at `u` under the weights of `metric`.
    pub fn predict(&self, newdata: &Dataset, metric: Metric) -> Result<(Vec<usize>, Vec<f64>)> {
        let p = self.predict_learners(newdata)?;
        let mixed = p.mix(&self.loss_fit(metric).weights.omega, false);
        Ok((p.subjects, mixed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Learner,
    Esl,
    Dsl,
    Reference,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Learner => "learner",
            Role::Esl => "eSL",
            Role::Dsl => "dSL",
            Role::Reference => "KM",
        }
    }
}

/// One metric value of one model on an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub model: String,
    pub role: Role,
    pub metric: Metric,
    pub value: f64,
    /// The learner behind a dSL row.
    pub selected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub window: PredictionWindow,
    pub n_at_risk: usize,
    pub rows: Vec<EvaluationRow>,
}

impl Evaluation {
    pub fn value(&self, model: &str, metric: Metric) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.metric == metric)
            .map(|r| r.value)
    }
}

/// Values of all three metrics for predictions at `u` and the midpoint.
pub fn score(
    data: &Dataset,
    window: &PredictionWindow,
    end: &[f64],
    mid: &[f64],
    pairing: BrierPairing,
    orientation: AucOrientation,
) -> Result<[f64; 3]> {
    let w_end = ipcw(data, window)?;
    let w_mid = ipcw(data, &window.half())?;
    Ok([
        brier(end, data, &w_end, pairing)?.value,
        integrated_brier(mid, end, data, &w_mid, &w_end, pairing)?.value,
        tv_auc(end, data, &w_end, orientation)?.value,
    ])
}

impl SuperLearner {
    /// Every learner, the eSL and dSL of each loss, and the Kaplan–Meier
    /// reference, scored on `newdata`.
    pub fn evaluate(&self, newdata: &Dataset) -> Result<Evaluation> {
        let p = self.predict_learners(newdata)?;
        if p.subjects.is_empty() {
            return Err(DynslError::domain(
                MODULE,
                format!("no evaluation subjects at risk at {}", self.window.t),
            ));
        }
        let sc = |end: &[f64], mid: &[f64]| {
            score(
                newdata,
                &self.window,
                end,
                mid,
                self.config.pairing,
                self.config.orientation,
            )
        };
        let mut rows = Vec::new();
        let mut learner_scores = Vec::new();
        for (k, id) in p.learner_ids.iter().enumerate() {
            let v = sc(&p.end[k], &p.mid[k])?;
            for (j, &metric) in Metric::ALL.iter().enumerate() {
                rows.push(EvaluationRow {
                    model: id.clone(),
                    role: Role::Learner,
                    metric,
                    value: v[j],
                    selected: None,
                });
            }
            learner_scores.push(v);
        }
        for (j, &metric) in Metric::ALL.iter().enumerate() {
            let fit = self.loss_fit(metric);
            let v = sc(&p.mix(&fit.weights.omega, false), &p.mix(&fit.weights.omega, true))?;
            rows.push(EvaluationRow {
                model: "eSL".into(),
                role: Role::Esl,
                metric,
                value: v[j],
                selected: None,
            });
            rows.push(EvaluationRow {
                model: "dSL".into(),
                role: Role::Dsl,
                metric,
                value: learner_scores[fit.dsl][j],
                selected: Some(fit.dsl_id().to_string()),
            });
        }
        let km = self
            .reference
            .predict(newdata, &[self.window.u, self.window.midpoint()])?;
        let v = sc(&km.survival[0], &km.survival[1])?;
        for (j, &metric) in Metric::ALL.iter().enumerate() {
            rows.push(EvaluationRow {
                model: REFERENCE_ID.into(),
                role: Role::Reference,
                metric,
                value: v[j],
                selected: None,
            });
        }
        Ok(Evaluation {
            window: self.window,
            n_at_risk: p.subjects.len(),
            rows,
        })
    }
}

/// Refits `library` on `train` and returns the weighted prediction at `u`
/// for every subject of `newdata` at risk at `t`, with its dataset index.
///
/// Learners absent from `weights` (dropped during cross-validation) must not
/// carry weight; they are skipped.
pub fn fit_full_and_predict<L: Learner>(
    library: &[L],
    weights: &EnsembleWeights,
    train: &Dataset,
    newdata: &Dataset,
    window: &PredictionWindow,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if weights.learner_ids.len() != weights.omega.len() {
        return Err(DynslError::config(MODULE, "weights and learner ids differ in length"));
    }
    let mut used = Vec::new();
    for (id, &w) in weights.learner_ids.iter().zip(&weights.omega) {
        let l = library
            .iter()
            .find(|l| l.id() == id)
            .ok_or_else(|| DynslError::config(MODULE, format!("weighted learner `{id}` is not in the library")))?;
        if w != 0.0 {
            used.push((l, w));
        }
    }
    let subjects = newdata.risk_set(window.t).indices;
    let parts = used
        .par_iter()
        .map(|(l, w)| {
            let p = l.fit(train, window.t)?.predict(newdata, &[window.u])?;
            if p.subjects != subjects {
                return Err(DynslError::numerical(
                    MODULE,
                    format!("learner `{}` skipped subjects", l.id()),
                ));
            }
            Ok(p.survival[0].iter().map(|v| v * w).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; subjects.len()];
    for part in parts {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok((subjects, out))
}
