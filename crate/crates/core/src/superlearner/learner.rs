use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boost::{BoostParams, BoostedCoxModel};
use crate::data::Dataset;
use crate::error::{DynslError, Result};
use crate::estimators::{kaplan_meier, StepFunction};
use crate::landmark::{lvcf_features, two_stage_features, LandmarkCoxModel};
use crate::lmm::{RandomEffects, TimeBasisSpec};
use crate::simulate::JointModel;

const MODULE: &str = "superlearner";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    OneStageCox,
    TwoStageCox,
    OneStageBoost,
    TwoStageBoost,
    /// Joint model with known generating parameters (simulation only).
    OracleJoint,
    /// Covariate-free Kaplan–Meier on the landmark risk set.
    KaplanMeier,
    /// The same survival probability for everyone (`value`).
    Constant,
}

impl LearnerKind {
    fn allowed_keys(self) -> &'static [&'static str] {
        match self {
            LearnerKind::OneStageBoost | LearnerKind::TwoStageBoost => &[
                "nu",
                "b_stop",
                "inner_folds",
                "seed",
                "max_depth_single",
                "max_depth_pair",
                "min_split",
            ],
            LearnerKind::Constant => &["value"],
            _ => &[],
        }
    }
}

/// Declarative description of a base learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub id: String,
    pub kind: LearnerKind,
    /// Fixed-effects trend of the mixed models used by two-stage kinds.
    #[serde(default = "default_trajectory")]
    pub trajectory: TimeBasisSpec,
    #[serde(default)]
    pub random_effects: RandomEffects,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    /// Generating parameters for `oracle_joint`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<JointModel>,
}

fn default_trajectory() -> TimeBasisSpec {
    TimeBasisSpec::Linear
}

impl LearnerSpec {
    pub fn new(id: impl Into<String>, kind: LearnerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            trajectory: TimeBasisSpec::Linear,
            random_effects: RandomEffects::InterceptSlope,
            hyperparameters: BTreeMap::new(),
            truth: None,
        }
    }

    pub fn with_trajectory(mut self, trajectory: TimeBasisSpec) -> Self {
        self.trajectory = trajectory;
        self
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyperparameters.insert(key.to_string(), value);
        self
    }

    pub fn with_truth(mut self, truth: JointModel) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.allowed_keys();
        if let Some(bad) = self.hyperparameters.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(DynslError::config(
                MODULE,
                format!(
                    "learner `{}`: hyperparameter `{bad}` does not apply to {:?}",
                    self.id, self.kind
                ),
            ));
        }
        match self.kind {
            LearnerKind::OracleJoint if self.truth.is_none() => Err(DynslError::config(
                MODULE,
                format!("learner `{}`: oracle_joint needs generating parameters", self.id),
            )),
            LearnerKind::Constant => match self.hyperparameters.get("value") {
                Some(v) if (0.0..=1.0).contains(v) => Ok(()),
                _ => Err(DynslError::config(
                    MODULE,
                    format!("learner `{}`: constant needs `value` in [0, 1]", self.id),
                )),
            },
            LearnerKind::OneStageBoost | LearnerKind::TwoStageBoost => self.boost_params().map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn boost_params(&self) -> Result<BoostParams> {
        let mut p = BoostParams::default();
        let h = &self.hyperparameters;
        let count = |key: &str, v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(DynslError::config(
                    MODULE,
                    format!("learner `{}`: `{key}` must be a whole number", self.id),
                ))
            }
        };
        if let Some(&v) = h.get("nu") {
            p.nu = v;
        }
        if let Some(&v) = h.get("b_stop") {
            p.b_stop = count("b_stop", v)?;
        }
        if let Some(&v) = h.get("inner_folds") {
            p.inner_folds = count("inner_folds", v)?;
        }
        if let Some(&v) = h.get("seed") {
            p.seed = count("seed", v)? as u64;
        }
        if let Some(&v) = h.get("max_depth_single") {
            p.single.max_depth = count("max_depth_single", v)?;
        }
        if let Some(&v) = h.get("max_depth_pair") {
            p.pair.max_depth = count("max_depth_pair", v)?;
        }
        if let Some(&v) = h.get("min_split") {
            p.single.min_split = count("min_split", v)?;
            p.pair.min_split = p.single.min_split;
        }
        if !(p.nu > 0.0 && p.nu <= 1.0) || p.b_stop == 0 {
            return Err(DynslError::config(
                MODULE,
                format!("learner `{}`: need 0 < nu <= 1 and b_stop >= 1", self.id),
            ));
        }
        Ok(p)
    }
}

/// Survival predictions for the risk set of some dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Dataset indices of the predicted subjects.
    pub subjects: Vec<usize>,
    /// `survival[h][i]` at horizon `h`.
    pub survival: Vec<Vec<f64>>,
}

/// Anything that can be trained on a dataset at a landmark.
pub trait Learner: Sync {
    fn id(&self) -> &str;
    fn fit(&self, train: &Dataset, landmark: f64) -> Result<Box<dyn Predictor>>;
}

/// A trained learner.
pub trait Predictor: Send + Sync {
    /// Predictions at `horizons` for every subject of `newdata` at risk at
    /// the training landmark.
    fn predict(&self, newdata: &Dataset, horizons: &[f64]) -> Result<Prediction>;
}

impl<L: Learner + ?Sized> Learner for Box<L> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn fit(&self, train: &Dataset, landmark: f64) -> Result<Box<dyn Predictor>> {
        (**self).fit(train, landmark)
    }
}

/// Trained state of a built-in learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum FittedModel {
    LandmarkCox(LandmarkCoxModel),
    BoostedCox(BoostedCoxModel),
    OracleJoint { truth: JointModel },
    KaplanMeier { curve: StepFunction },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub id: String,
    pub kind: LearnerKind,
    pub landmark: f64,
    pub model: FittedModel,
}

impl LearnerSpec {
    /// Trains the learner on `train` at `landmark`.
    pub fn fit_model(&self, train: &Dataset, landmark: f64) -> Result<FittedLearner> {
        self.validate()?;
        let model = match self.kind {
            LearnerKind::OneStageCox => {
                let f = lvcf_features(train, landmark)?;
                FittedModel::LandmarkCox(LandmarkCoxModel::fit(&f, train)?)
            }
            LearnerKind::TwoStageCox => {
                let f = two_stage_features(train, landmark, self.trajectory, self.random_effects)?;
                FittedModel::LandmarkCox(LandmarkCoxModel::fit(&f, train)?)
            }
            LearnerKind::OneStageBoost => {
                let f = lvcf_features(train, landmark)?;
                FittedModel::BoostedCox(BoostedCoxModel::fit(&f, train, &self.boost_params()?)?)
            }
            LearnerKind::TwoStageBoost => {
                let f = two_stage_features(train, landmark, self.trajectory, self.random_effects)?;
                FittedModel::BoostedCox(BoostedCoxModel::fit(&f, train, &self.boost_params()?)?)
            }
            LearnerKind::OracleJoint => FittedModel::OracleJoint {
                truth: self.truth.clone().expect("validated"),
            },
            LearnerKind::KaplanMeier => {
                let risk = train.risk_set(landmark);
                if risk.is_empty() {
                    return Err(DynslError::domain(MODULE, format!("no subjects at risk at {landmark}")));
                }
                let times: Vec<f64> = risk.indices.iter().map(|&i| train.time(i)).collect();
                let events: Vec<bool> = risk.indices.iter().map(|&i| train.event(i)).collect();
                FittedModel::KaplanMeier {
                    curve: kaplan_meier(&times, &events)?,
                }
            }
            LearnerKind::Constant => FittedModel::Constant {
                value: self.hyperparameters["value"],
            },
        };
        Ok(FittedLearner {
            id: self.id.clone(),
            kind: self.kind,
            landmark,
            model,
        })
    }
}

impl Learner for LearnerSpec {
    fn id(&self) -> &str {
        &self.id
    }

    fn fit(&self, train: &Dataset, landmark: f64) -> Result<Box<dyn Predictor>> {
        Ok(Box::new(self.fit_model(train, landmark)?))
    }
}

impl FittedLearner {
    pub fn predict(&self, newdata: &Dataset, horizons: &[f64]) -> Result<Prediction> {
        if let Some(&u) = horizons.iter().find(|&&u| u < self.landmark) {
            return Err(DynslError::domain(
                MODULE,
                format!("horizon {u} precedes landmark {}", self.landmark),
            ));
        }
        let subjects = newdata.risk_set(self.landmark).indices;
        let constant = |v: f64| vec![vec![v; subjects.len()]; horizons.len()];
        let (subjects, mut survival) = match &self.model {
            FittedModel::LandmarkCox(m) => {
                let p = m.predict(newdata, horizons)?;
                (p.subjects, p.survival)
            }
            FittedModel::BoostedCox(m) => m.predict(newdata, horizons)?,
            FittedModel::OracleJoint { truth } => {
                let m = truth.longitudinal.biomarker;
                let mut by_subject = Vec::with_capacity(subjects.len());
                for &i in &subjects {
                    let hist: Vec<(f64, f64)> = newdata
                        .history_until(i, m, self.landmark)
                        .iter()
                        .map(|x| (x.time, x.value))
                        .collect();
                    by_subject.push(truth.conditional_survival(
                        &newdata.subject(i).baseline,
                        &hist,
                        self.landmark,
                        horizons,
                    )?);
                }
                let surv = (0..horizons.len())
                    .map(|h| by_subject.iter().map(|s| s[h]).collect())
                    .collect();
                (subjects, surv)
            }
            FittedModel::KaplanMeier { curve } => {
                let s = horizons.iter().map(|&u| vec![curve.eval(u); subjects.len()]).collect();
                (subjects, s)
            }
            FittedModel::Constant { value } => {
                let s = constant(*value);
                (subjects, s)
            }
        };
        for row in &mut survival {
            for v in row.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(Prediction { subjects, survival })
    }
}

impl Predictor for FittedLearner {
    fn predict(&self, newdata: &Dataset, horizons: &[f64]) -> Result<Prediction> {
        FittedLearner::predict(self, newdata, horizons)
    }
}
