//! Landmark Cox learners. Longitudinal histories are summarized at the
//! landmark, either by the last observed value or by a mixed-model
//! trajectory estimate, and a Cox model is fitted on the subjects still at
//! risk using every event after the landmark.

mod cox;
mod features;

pub use cox::{fit_cox, fit_cox_raw, predict_landmark, CoxFit, LandmarkCoxModel, LandmarkPrediction};
pub use features::{lvcf_features, two_stage_features, FeatureRecipe, LandmarkFeatures, Stage};
