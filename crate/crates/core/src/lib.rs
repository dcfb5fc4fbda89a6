//! Super Learner ensembles for dynamic survival prediction.
//!
//! A *prediction window* `{t, u}` asks for `P(T > u | T > t, history up to t)`
//! for every subject still at risk at the landmark `t`. The crate fits a
//! library of base learners on landmark data, estimates their out-of-fold
//! predictions by V-fold cross-validation, and combines them in two ways:
//!
//! * the ensemble Super Learner (eSL), a convex combination whose weights
//!   minimize the cross-validated loss;
//! * the discrete Super Learner (dSL), the single learner with the best
//!   cross-validated loss.
//!
//! Losses are the IPCW Brier score at `u`, its Simpson-rule integral over the
//! window, and one minus the time-varying AUC. Every weight vector lies on
//! the simplex.
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | subjects, longitudinal measurements, risk sets, folds, CSV I/O |
//! | [`estimators`] | Kaplan–Meier, reverse Kaplan–Meier, IPCW weights, Breslow |
//! | [`metrics`] | Brier score, integrated Brier score, time-varying AUC |
//! | [`lmm`] | linear mixed models and BLUPs |
//! | [`landmark`] | landmark Cox models on last values or BLUP features |
//! | [`boost`] | gradient-boosted Cox trees |
//! | [`superlearner`] | cross-validated prediction matrix, weights, eSL and dSL |
//! | [`simulate`] | data generators, censoring scenarios and the study runner |
//! | [`report`] | plain-text and CSV tables |
//!
//! ```
//! use dynsl::data::PredictionWindow;
//! use dynsl::metrics::Metric;
//! use dynsl::simulate::{simulate_dataset, ReplicateProcess, Scenario, SimConfig};
//! use dynsl::superlearner::{LearnerKind, LearnerSpec, SuperLearner, SuperLearnerConfig};
//!
//! let sim = SimConfig::default();
//! let data = simulate_dataset(&sim, ReplicateProcess::Joint, Scenario::Random, 400)?;
//! let library = [
//!     LearnerSpec::new("lvcf", LearnerKind::OneStageCox),
//!     LearnerSpec::new("lmm", LearnerKind::TwoStageCox),
//! ];
//! let window = PredictionWindow::new(4.0, 7.0)?;
//! let sl = SuperLearner::fit(&library, &data, &window, &SuperLearnerConfig::default())?;
//! let omega = &sl.loss_fit(Metric::Bs).weights.omega;
//! assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-10);
//! # Ok::<(), dynsl::DynslError>(())
//! ```

pub mod boost;
pub mod data;
pub mod error;
pub mod estimators;
pub mod landmark;
pub mod lmm;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod simulate;
pub mod superlearner;

pub use error::{DynslError, Result};
