use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::joint::{BaselineHazard, JointModel};
use crate::data::PredictionWindow;
use crate::error::{DynslError, Result};
use crate::lmm::{LmmFit, RandomEffects, TimeBasis};
use crate::superlearner::{LearnerKind, LearnerSpec, SuperLearnerConfig};

const MODULE: &str = "simulator";

/// Linear-trend mixed model `y = b0 + beta0 + (beta1 + b1) s + e` with
/// `b ~ N(0, D)` and `e ~ N(0, sigma2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongitudinalTruth {
    pub beta: [f64; 2],
    pub d: [[f64; 2]; 2],
    pub sigma2: f64,
}

impl Default for LongitudinalTruth {
    fn default() -> Self {
        Self {
            beta: [0.0, 0.3],
            d: [[0.5, 0.0], [0.0, 0.0025]],
            sigma2: 0.09,
        }
    }
}

impl LongitudinalTruth {
    /// Square root `L` with `L L' = D`; D must be symmetric PSD.
    pub fn d_root(&self) -> Result<DMatrix<f64>> {
        let d = DMatrix::from_fn(2, 2, |i, j| self.d[i][j]);
        if (d[(0, 1)] - d[(1, 0)]).abs() > 1e-12 {
            return Err(DynslError::config(MODULE, "lmm_truth.d must be symmetric"));
        }
        let scale = d.amax().max(1e-300);
        let eig = d.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) || !(self.sigma2 >= 0.0) {
            return Err(DynslError::config(
                MODULE,
                "lmm_truth.d must be positive semidefinite and sigma2 non-negative",
            ));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    }

    pub fn mean(&self, s: f64) -> f64 {
        self.beta[0] + self.beta[1] * s
    }

    pub fn to_fit(&self) -> Result<LmmFit> {
        LmmFit::from_parameters(
            0,
            TimeBasis::Linear,
            RandomEffects::InterceptSlope,
            self.beta.to_vec(),
            self.d.iter().map(|r| r.to_vec()).collect(),
            self.sigma2,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law", deny_unknown_fields)]
pub enum CovariateLaw {
    Bernoulli { name: String, p: f64 },
    Normal { name: String, mean: f64, sd: f64 },
}

impl CovariateLaw {
    pub fn name(&self) -> &str {
        match self {
            CovariateLaw::Bernoulli { name, .. } | CovariateLaw::Normal { name, .. } => name,
        }
    }
}

fn default_covariates() -> Vec<CovariateLaw> {
    vec![
        CovariateLaw::Bernoulli {
            name: "w1".into(),
            p: 0.5,
        },
        CovariateLaw::Normal {
            name: "w2".into(),
            mean: 0.0,
            sd: 1.0,
        },
    ]
}

/// Hazard `h_0(s) exp(gamma'w + alpha x(s))`, where `x` is the last observed
/// biomarker value (landmark generator) or the latent trajectory (joint
/// generator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTruth {
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub hazard: BaselineHazard,
}

impl Default for EventTruth {
    fn default() -> Self {
        Self {
            gamma: vec![0.5, 0.3],
            alpha: 0.8,
            hazard: BaselineHazard::Exponential { rate: 0.02 },
        }
    }
}

/// Visit schedule: an optional visit at time 0 plus `count` times drawn
/// uniformly on `(0, span)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementLaw {
    pub span: f64,
    pub count: usize,
    pub baseline_visit: bool,
}

impl Default for MeasurementLaw {
    fn default() -> Self {
        Self {
            span: 10.0,
            count: 7,
            baseline_visit: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// No censoring before the administrative horizon.
    None,
    /// `C = c_max U`.
    Random,
    /// Drop-out at visits with a logistic probability in the biomarker.
    Informative,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::None, Scenario::Random, Scenario::Informative];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::Random => "random",
            Scenario::Informative => "informative",
        }
    }
}

/// Which event process generates a replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Landmark,
    Joint,
}

impl Process {
    pub fn label(self) -> &'static str {
        match self {
            Process::Landmark => "landmark",
            Process::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum Generator {
    Landmark,
    Joint,
    /// Even replicates use the landmark process, odd ones the joint process.
    Alternate,
    /// Each subject draws its process; `joint_fraction` is P(joint).
    Mixture {
        joint_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensoringConfig {
    /// Target fraction of the risk set at `t` censored inside `(t, u]`.
    pub target_in_window: f64,
    /// Coefficient of the current biomarker value in the drop-out logit.
    pub informative_slope: f64,
    /// Coefficients of the baseline covariates in the drop-out logit.
    pub informative_covariates: Vec<f64>,
    /// Size of the pilot population used for calibration.
    pub calibration_n: usize,
}

impl Default for CensoringConfig {
    fn default() -> Self {
        Self {
            target_in_window: 0.10,
            informative_slope: -1.5,
            informative_covariates: vec![-1.0, -0.5],
            calibration_n: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub test_n: usize,
    pub replications: usize,
    pub lmm_truth: LongitudinalTruth,
    pub covariates: Vec<CovariateLaw>,
    /// Event process of the landmark generator.
    pub landmark_events: EventTruth,
    /// Event process of the joint generator; also the oracle learner's truth.
    pub joint_events: EventTruth,
    pub measurements: MeasurementLaw,
    /// Administrative censoring time.
    pub horizon: f64,
    pub generator: Generator,
    pub scenarios: Vec<Scenario>,
    pub censoring: CensoringConfig,
    pub window: PredictionWindow,
    pub seed: u64,
    pub superlearner: SuperLearnerConfig,
    /// Base learners; `oracle_joint` entries without parameters get
    /// `joint_events` and `lmm_truth`.
    pub library: Vec<LearnerSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 625,
            test_n: 125,
            replications: 100,
            lmm_truth: LongitudinalTruth::default(),
            covariates: default_covariates(),
            landmark_events: EventTruth::default(),
            joint_events: EventTruth::default(),
            measurements: MeasurementLaw::default(),
            horizon: 100.0,
            generator: Generator::Alternate,
            scenarios: Scenario::ALL.to_vec(),
            censoring: CensoringConfig::default(),
            window: PredictionWindow { t: 4.0, u: 7.0 },
            seed: 20_240_601,
            superlearner: SuperLearnerConfig::default(),
            library: default_library(),
        }
    }
}

/// One-stage landmark Cox, two-stage landmark Cox and the joint oracle.
pub fn default_library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::new("landmark_lvcf", LearnerKind::OneStageCox),
        LearnerSpec::new("landmark_lmm", LearnerKind::TwoStageCox),
        LearnerSpec::new("joint_oracle", LearnerKind::OracleJoint),
    ]
}

impl SimConfig {
    /// Desk-scale profile: 20 replicates.
    pub fn desk() -> Self {
        Self {
            replications: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(DynslError::config(MODULE, format!("`{field}` {why}")));
        if !(self.n > self.test_n && self.test_n >= 1) {
            return bad("test_n", "must satisfy 1 <= test_n < n");
        }
        if self.replications == 0 {
            return bad("replications", "must be at least 1");
        }
        self.lmm_truth.d_root()?;
        let p = self.covariates.len();
        for (field, e) in [
            ("landmark_events", &self.landmark_events),
            ("joint_events", &self.joint_events),
        ] {
            if e.gamma.len() != p {
                return bad(field, &format!("gamma needs {p} entries, one per covariate"));
            }
            e.hazard.validate()?;
        }
        for c in &self.covariates {
            match *c {
                CovariateLaw::Bernoulli { p, .. } if !(0.0..=1.0).contains(&p) => {
                    return bad("covariates", "Bernoulli p must be in [0, 1]")
                }
                CovariateLaw::Normal { sd, .. } if !(sd >= 0.0) => return bad("covariates", "sd must be >= 0"),
                _ => {}
            }
        }
        if !(self.measurements.span > 0.0) {
            return bad("measurements.span", "must be positive");
        }
        if !(self.horizon >= self.window.u) {
            return bad("horizon", "must be at least the window end");
        }
        if let Generator::Mixture { joint_fraction } = self.generator {
            if !(0.0..=1.0).contains(&joint_fraction) {
                return bad("generator.joint_fraction", "must be in [0, 1]");
            }
        }
        if self.scenarios.is_empty() {
            return bad("scenarios", "must list at least one scenario");
        }
        let c = &self.censoring;
        if !(c.target_in_window > 0.0 && c.target_in_window < 1.0) {
            return bad("censoring.target_in_window", "must be in (0, 1)");
        }
        if c.informative_covariates.len() != p {
            return bad("censoring.informative_covariates", &format!("needs {p} entries"));
        }
        if c.calibration_n < 100 {
            return bad("censoring.calibration_n", "must be at least 100");
        }
        if self.superlearner.folds < 2 {
            return bad("superlearner.folds", "must be at least 2");
        }
        PredictionWindow::new(self.window.t, self.window.u)?;
        if self.library.is_empty() {
            return bad("library", "must contain at least one learner");
        }
        for spec in self.resolved_library()? {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name().to_string()).collect()
    }

    /// Known-parameter joint model of the joint generator.
    pub fn joint_model(&self) -> Result<JointModel> {
        Ok(JointModel {
            longitudinal: self.lmm_truth.to_fit()?,
            gamma: self.joint_events.gamma.clone(),
            alpha: self.joint_events.alpha,
            hazard: self.joint_events.hazard,
        })
    }

    /// The library with generating parameters filled in for oracle learners.
    pub fn resolved_library(&self) -> Result<Vec<LearnerSpec>> {
        self.library
            .iter()
            .map(|s| {
                if s.kind == LearnerKind::OracleJoint && s.truth.is_none() {
                    Ok(s.clone().with_truth(self.joint_model()?))
                } else {
                    Ok(s.clone())
                }
            })
            .collect()
    }
}
