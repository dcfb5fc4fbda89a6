//! Longitudinal and time-to-event data model.
//!
//! A [`Dataset`] holds one [`SubjectRecord`] per subject (baseline
//! covariates, observed time, event indicator) and the long-format
//! biomarker [`Measurement`]s. Measurements are kept sorted by
//! `(subject, biomarker, time)` so that per-subject histories are contiguous
//! slices.

mod folds;
mod io;

pub use folds::{stratified_folds, FoldAssignment};
pub use io::{load_dataset, write_dataset, Schema};

use serde::{Deserialize, Serialize};

use crate::error::{DynslError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Baseline covariates in the order of [`Dataset::covariate_names`].
    /// Missing values are stored as NaN.
    pub baseline: Vec<f64>,
    pub observed_time: f64,
    pub event: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Index into [`Dataset::subjects`].
    pub subject: usize,
    pub biomarker: usize,
    pub time: f64,
    pub value: f64,
}

/// A prediction window `{t, u}`: condition on survival past the landmark
/// `t` and predict survival up to the horizon `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub t: f64,
    pub u: f64,
}

impl PredictionWindow {
    pub fn new(t: f64, u: f64) -> Result<Self> {
        if !(t.is_finite() && u.is_finite()) || t < 0.0 || t >= u {
            return Err(DynslError::domain(
                "data",
                format!("prediction window requires 0 <= t < u, got {{{t}, {u}}}"),
            ));
        }
        Ok(Self { t, u })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t + self.u)
    }

    /// The window `{t, (t+u)/2}` used for the first Simpson node of the IBS.
    pub fn half(&self) -> PredictionWindow {
        PredictionWindow {
            t: self.t,
            u: self.midpoint(),
        }
    }
}

impl std::fmt::Display for PredictionWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{{}, {}}}", self.t, self.u)
    }
}

/// Subjects still at risk at a landmark, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSet {
    pub landmark: f64,
    pub indices: Vec<usize>,
}

impl RiskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    biomarker_names: Vec<String>,
    subjects: Vec<SubjectRecord>,
    measurements: Vec<Measurement>,
    /// `offsets[s * M + m]..offsets[s * M + m + 1]` is the history of
    /// subject `s` on biomarker `m`.
    offsets: Vec<usize>,
}

impl Dataset {
    /// Validates and sorts the inputs.
    pub fn new(
        covariate_names: Vec<String>,
        biomarker_names: Vec<String>,
        subjects: Vec<SubjectRecord>,
        mut measurements: Vec<Measurement>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(DynslError::domain("data", "dataset has no subjects"));
        }
        if biomarker_names.is_empty() {
            return Err(DynslError::domain("data", "dataset has no biomarkers"));
        }
        let p = covariate_names.len();
        for s in &subjects {
            if !s.observed_time.is_finite() || s.observed_time < 0.0 {
                return Err(DynslError::domain(
                    "data",
                    format!("subject {} has invalid observed time {}", s.id, s.observed_time),
                ));
            }
            if s.baseline.len() != p {
                return Err(DynslError::domain(
                    "data",
                    format!(
                        "subject {} has {} baseline covariates, expected {p}",
                        s.id,
                        s.baseline.len()
                    ),
                ));
            }
        }
        let m_count = biomarker_names.len();
        for m in &measurements {
            if m.subject >= subjects.len() || m.biomarker >= m_count {
                return Err(DynslError::domain(
                    "data",
                    "measurement references an unknown subject or biomarker",
                ));
            }
            if !m.time.is_finite() || m.time < 0.0 || !m.value.is_finite() {
                return Err(DynslError::domain(
                    "data",
                    format!("measurement for subject {} is not finite", subjects[m.subject].id),
                ));
            }
            if m.time > subjects[m.subject].observed_time {
                return Err(DynslError::domain(
                    "data",
                    format!(
                        "measurement at time {} for subject {} exceeds observed time {}",
                        m.time, subjects[m.subject].id, subjects[m.subject].observed_time
                    ),
                ));
            }
        }
        measurements.sort_by(|a, b| {
            (a.subject, a.biomarker)
                .cmp(&(b.subject, b.biomarker))
                .then(a.time.total_cmp(&b.time))
        });
        for w in measurements.windows(2) {
            if w[0].subject == w[1].subject && w[0].biomarker == w[1].biomarker && w[0].time == w[1].time {
                return Err(DynslError::domain(
                    "data",
                    format!(
                        "subject {} has two measurements of biomarker {} at time {}",
                        subjects[w[0].subject].id, biomarker_names[w[0].biomarker], w[0].time
                    ),
                ));
            }
        }
        let mut data = Self {
            covariate_names,
            biomarker_names,
            subjects,
            measurements,
            offsets: Vec::new(),
        };
        data.rebuild_offsets();
        Ok(data)
    }

    fn rebuild_offsets(&mut self) {
        let m_count = self.biomarker_names.len();
        let slots = self.subjects.len() * m_count;
        let mut counts = vec![0usize; slots + 1];
        for m in &self.measurements {
            counts[m.subject * m_count + m.biomarker + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        self.offsets = counts;
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_biomarkers(&self) -> usize {
        self.biomarker_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn biomarker_names(&self) -> &[String] {
        &self.biomarker_names
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &SubjectRecord {
        &self.subjects[i]
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn time(&self, i: usize) -> f64 {
        self.subjects[i].observed_time
    }

    pub fn event(&self, i: usize) -> bool {
        self.subjects[i].event
    }

    /// Full history of one subject on one biomarker, sorted by time.
    pub fn history(&self, subject: usize, biomarker: usize) -> &[Measurement] {
        let slot = subject * self.biomarker_names.len() + biomarker;
        &self.measurements[self.offsets[slot]..self.offsets[slot + 1]]
    }

    /// Measurements taken at or before `t` (closed interval).
    pub fn history_until(&self, subject: usize, biomarker: usize, t: f64) -> &[Measurement] {
        let h = self.history(subject, biomarker);
        let end = h.partition_point(|m| m.time <= t);
        &h[..end]
    }

    /// Last value carried forward to `t`, if any measurement exists by then.
    pub fn last_value(&self, subject: usize, biomarker: usize, t: f64) -> Option<f64> {
        self.history_until(subject, biomarker, t).last().map(|m| m.value)
    }

    /// Subjects with `observed_time > t`, original order preserved.
    pub fn risk_set(&self, t: f64) -> RiskSet {
        let indices = self
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.observed_time > t)
            .map(|(i, _)| i)
            .collect();
        RiskSet { landmark: t, indices }
    }

    /// Whether subject `i` has the event inside `(t, u]`.
    pub fn event_in_window(&self, i: usize, window: &PredictionWindow) -> bool {
        let s = &self.subjects[i];
        s.event && s.observed_time > window.t && s.observed_time <= window.u
    }

    /// A new dataset holding only the listed subjects, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut new_index = vec![usize::MAX; self.subjects.len()];
        for (k, &i) in indices.iter().enumerate() {
            new_index[i] = k;
        }
        let subjects = indices.iter().map(|&i| self.subjects[i].clone()).collect();
        let mut measurements = Vec::new();
        for &i in indices {
            for m in 0..self.biomarker_names.len() {
                measurements.extend(self.history(i, m).iter().map(|x| Measurement {
                    subject: new_index[i],
                    ..*x
                }));
            }
        }
        let mut data = Dataset {
            covariate_names: self.covariate_names.clone(),
            biomarker_names: self.biomarker_names.clone(),
            subjects,
            measurements,
            offsets: Vec::new(),
        };
        data.rebuild_offsets();
        data
    }
}
