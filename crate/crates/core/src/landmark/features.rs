use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DynslError, Result};
use crate::lmm::{blup, fit_lmm, predict_eta, LmmFit, RandomEffects, TimeBasisSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Last value carried forward.
    OneStage,
    /// Mixed-model estimate of the latent trajectory at the landmark.
    TwoStage,
}

/// Everything learned from training data that is needed to build the same
/// feature columns for new subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub landmark: f64,
    pub stage: Stage,
    pub covariate_medians: Vec<f64>,
    pub covariate_indicator: Vec<bool>,
    pub biomarker_medians: Vec<f64>,
    pub biomarker_indicator: Vec<bool>,
    pub lmm_fits: Vec<LmmFit>,
    pub feature_names: Vec<String>,
}

/// Feature matrix over the risk set at the landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFeatures {
    /// Dataset indices of the rows, in risk-set order.
    pub subjects: Vec<usize>,
    pub design: Vec<Vec<f64>>,
    pub recipe: FeatureRecipe,
}

impl LandmarkFeatures {
    pub fn feature_names(&self) -> &[String] {
        &self.recipe.feature_names
    }

    pub fn landmark(&self) -> f64 {
        self.recipe.landmark
    }

    pub fn n_features(&self) -> usize {
        self.recipe.feature_names.len()
    }

    /// Column `j` as a vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.design.iter().map(|r| r[j]).collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Raw (possibly missing) values per risk-set subject: baseline covariates
/// followed by one biomarker summary each.
fn raw_values(data: &Dataset, rows: &[usize], recipe_like: (&Stage, &[LmmFit]), t: f64) -> Vec<Vec<f64>> {
    let (stage, fits) = recipe_like;
    rows.iter()
        .map(|&i| {
            let mut r = data.subject(i).baseline.clone();
            for m in 0..data.n_biomarkers() {
                let v = match stage {
                    Stage::OneStage => data.last_value(i, m, t).unwrap_or(f64::NAN),
                    Stage::TwoStage => {
                        let fit = &fits[m];
                        let b = blup(fit, data.history_until(i, m, t));
                        predict_eta(fit, &b, t)
                    }
                };
                r.push(v);
            }
            r
        })
        .collect()
}

fn train_recipe(data: &Dataset, t: f64, stage: Stage, lmm_fits: Vec<LmmFit>) -> Result<LandmarkFeatures> {
    let rows = data.risk_set(t).indices;
    if rows.is_empty() {
        return Err(DynslError::domain(
            "landmark_learners",
            format!("no subjects at risk at landmark {t}"),
        ));
    }
    let raw = raw_values(data, &rows, (&stage, &lmm_fits), t);
    let p = data.covariate_names().len();
    let width = p + data.n_biomarkers();
    let mut medians = Vec::with_capacity(width);
    let mut indicator = Vec::with_capacity(width);
    for j in 0..width {
        let observed: Vec<f64> = raw.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
        indicator.push(observed.len() < raw.len());
        medians.push(median(observed));
    }
    let mut feature_names: Vec<String> = data.covariate_names().to_vec();
    feature_names.extend(data.biomarker_names().iter().cloned());
    let base_names = feature_names.clone();
    for (j, name) in base_names.iter().enumerate() {
        if indicator[j] {
            feature_names.push(format!("{name}_missing"));
        }
    }
    let recipe = FeatureRecipe {
        landmark: t,
        stage,
        covariate_medians: medians[..p].to_vec(),
        covariate_indicator: indicator[..p].to_vec(),
        biomarker_medians: medians[p..].to_vec(),
        biomarker_indicator: indicator[p..].to_vec(),
        lmm_fits,
        feature_names,
    };
    let design = recipe.resolve(&raw);
    Ok(LandmarkFeatures {
        subjects: rows,
        design,
        recipe,
    })
}

impl FeatureRecipe {
    fn resolve(&self, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let medians: Vec<f64> = self
            .covariate_medians
            .iter()
            .chain(&self.biomarker_medians)
            .copied()
            .collect();
        let indicator: Vec<bool> = self
            .covariate_indicator
            .iter()
            .chain(&self.biomarker_indicator)
            .copied()
            .collect();
        raw.iter()
            .map(|r| {
                let mut row: Vec<f64> = r
                    .iter()
                    .zip(&medians)
                    .map(|(v, m)| if v.is_nan() { *m } else { *v })
                    .collect();
                for (j, &flag) in indicator.iter().enumerate() {
                    if flag {
                        row.push(f64::from(u8::from(r[j].is_nan())));
                    }
                }
                row
            })
            .collect()
    }

    /// Features for the risk set of `data` at the recipe's landmark.
    pub fn apply(&self, data: &Dataset) -> Result<LandmarkFeatures> {
        if data.covariate_names().len() != self.covariate_medians.len()
            || data.n_biomarkers() != self.biomarker_medians.len()
        {
            return Err(DynslError::domain(
                "landmark_learners",
                "new data has a different covariate or biomarker layout than the training data",
            ));
        }
        let rows = data.risk_set(self.landmark).indices;
        let raw = raw_values(data, &rows, (&self.stage, &self.lmm_fits), self.landmark);
        Ok(LandmarkFeatures {
            subjects: rows,
            design: self.resolve(&raw),
            recipe: self.clone(),
        })
    }
}

/// One-stage landmark features: baseline covariates and the last value of
/// each biomarker at or before `t`. Missing values get the risk-set median
/// plus a missing-indicator column.
pub fn lvcf_features(data: &Dataset, t: f64) -> Result<LandmarkFeatures> {
    train_recipe(data, t, Stage::OneStage, Vec::new())
}

/// Two-stage landmark features: one mixed model per biomarker fitted to the
/// measurements at or before `t`, then the subject-specific trajectory
/// estimate at `t`.
pub fn two_stage_features(
    data: &Dataset,
    t: f64,
    basis: TimeBasisSpec,
    random: RandomEffects,
) -> Result<LandmarkFeatures> {
    let fits = (0..data.n_biomarkers())
        .map(|m| {
            fit_lmm(data, m, basis, random, Some(t)).map_err(|e| match e {
                DynslError::Fit { module, message } => DynslError::Fit {
                    module,
                    message: format!("biomarker `{}`: {message}", data.biomarker_names()[m]),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_recipe(data, t, Stage::TwoStage, fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Measurement, SubjectRecord};

    fn toy() -> Dataset {
        let subjects = (0..4)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                baseline: vec![i as f64],
                observed_time: 10.0,
                event: i % 2 == 0,
            })
            .collect();
        let mut ms = vec![];
        for (t, v) in [(1.0, 10.0), (4.0, 20.0), (7.0, 30.0)] {
            ms.push(Measurement {
                subject: 0,
                biomarker: 0,
                time: t,
                value: v,
            });
        }
        ms.push(Measurement {
            subject: 1,
            biomarker: 0,
            time: 6.0,
            value: 5.0,
        });
        ms.push(Measurement {
            subject: 2,
            biomarker: 0,
            time: 2.0,
            value: 8.0,
        });
        ms.push(Measurement {
            subject: 3,
            biomarker: 0,
            time: 8.0,
            value: 1.0,
        });
        Dataset::new(vec!["age".into()], vec!["y".into()], subjects, ms).unwrap()
    }

    #[test]
    fn lvcf_definition_and_closed_interval() {
        let f = lvcf_features(&toy(), 6.0).unwrap();
        assert_eq!(f.design[0][1], 20.0);
        assert_eq!(f.design[1][1], 5.0);
    }

    #[test]
    fn missing_gets_median_and_indicator() {
        let f = lvcf_features(&toy(), 6.0).unwrap();
        assert_eq!(f.feature_names(), &["age", "y", "y_missing"]);
        // subject 3 has nothing before 6; median of {20, 5, 8} is 8
        assert_eq!(f.design[3], vec![3.0, 8.0, 1.0]);
        assert_eq!(f.design[0][2], 0.0);
    }

    #[test]
    fn recipe_reapplies_training_medians() {
        let f = lvcf_features(&toy(), 6.0).unwrap();
        let other = toy().subset(&[3]);
        let g = f.recipe.apply(&other).unwrap();
        assert_eq!(g.design, vec![vec![3.0, 8.0, 1.0]]);
    }

    #[test]
    fn two_stage_noiseless_lines() {
        let subjects: Vec<SubjectRecord> = (0..12)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                baseline: vec![],
                observed_time: 20.0,
                event: false,
            })
            .collect();
        let mut ms = vec![];
        let line = |i: usize, t: f64| 1.0 + 0.3 * i as f64 + (0.5 - 0.07 * i as f64) * t;
        for i in 0..12 {
            for k in 0..5 {
                let t = k as f64 * 1.5 + 0.1 * i as f64;
                ms.push(Measurement {
                    subject: i,
                    biomarker: 0,
                    time: t,
                    value: line(i, t),
                });
            }
        }
        // a subject without history falls back to the population line
        let mut subs = subjects.clone();
        subs.push(SubjectRecord {
            id: "empty".into(),
            baseline: vec![],
            observed_time: 20.0,
            event: false,
        });
        let d = Dataset::new(vec![], vec!["y".into()], subs, ms).unwrap();
        let f = two_stage_features(&d, 8.0, TimeBasisSpec::Linear, RandomEffects::InterceptSlope).unwrap();
        for i in 0..12 {
            assert!((f.design[i][0] - line(i, 8.0)).abs() < 1e-6, "subject {i}");
        }
        let fit = &f.recipe.lmm_fits[0];
        assert!((f.design[12][0] - fit.population_mean(8.0)).abs() < 1e-12);
    }
}
