use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learner::Learner;
use crate::data::{Dataset, FoldAssignment, PredictionWindow};
use crate::error::{DynslError, Result};

/// Cross-validated survival predictions for the training risk set, at the
/// horizon `u` and at the window midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub window: PredictionWindow,
    pub learner_ids: Vec<String>,
    /// Dataset indices of the rows: the risk set at `t`, in order.
    pub subjects: Vec<usize>,
    pub fold_of: Vec<usize>,
    /// `end[i][k]`: prediction of learner `k` for row `i` at `u`.
    pub end: Vec<Vec<f64>>,
    /// Same at `(t + u) / 2`.
    pub mid: Vec<Vec<f64>>,
    /// Learners removed because they failed on some fold, with the reason.
    pub dropped: Vec<(String, String)>,
}

impl PredictionMatrix {
    pub fn n_learners(&self) -> usize {
        self.learner_ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.subjects.len()
    }

    /// Column `k` at the horizon (`mid = false`) or the midpoint.
    pub fn column(&self, k: usize, mid: bool) -> Vec<f64> {
        let m = if mid { &self.mid } else { &self.end };
        m.iter().map(|r| r[k]).collect()
    }

    /// Row-wise mixture `Z omega`.
    pub fn mix(&self, omega: &[f64], mid: bool) -> Vec<f64> {
        let m = if mid { &self.mid } else { &self.end };
        m.iter()
            .map(|r| r.iter().zip(omega).map(|(z, w)| z * w).sum())
            .collect()
    }

    /// Keeps only the listed learner columns, in the given order.
    pub fn select(&self, keep: &[usize]) -> PredictionMatrix {
        let pick = |m: &Vec<Vec<f64>>| m.iter().map(|r| keep.iter().map(|&k| r[k]).collect()).collect();
        PredictionMatrix {
            window: self.window,
            learner_ids: keep.iter().map(|&k| self.learner_ids[k].clone()).collect(),
            subjects: self.subjects.clone(),
            fold_of: self.fold_of.clone(),
            end: pick(&self.end),
            mid: pick(&self.mid),
            dropped: self.dropped.clone(),
        }
    }
}

/// Trains every learner on each fold complement and predicts the held-out
/// risk-set subjects at `u` and the window midpoint. A learner that fails on
/// any fold is dropped from the whole library.
pub fn cv_predictions<L: Learner>(
    library: &[L],
    data: &Dataset,
    window: &PredictionWindow,
    folds: &FoldAssignment,
) -> Result<PredictionMatrix> {
    if library.is_empty() {
        return Err(DynslError::config("superlearner", "the learner library is empty"));
    }
    if folds.fold_of.len() != data.n() {
        return Err(DynslError::domain(
            "superlearner",
            "fold assignment does not match the data",
        ));
    }
    let risk = data.risk_set(window.t);
    if risk.is_empty() {
        return Err(DynslError::domain(
            "superlearner",
            format!("no subjects at risk at landmark {}", window.t),
        ));
    }
    let mut row_of = vec![usize::MAX; data.n()];
    for (r, &i) in risk.indices.iter().enumerate() {
        row_of[i] = r;
    }
    let horizons = [window.u, window.midpoint()];
    let k = library.len();
    let v = folds.folds;

    type Block = Result<(Vec<usize>, Vec<f64>, Vec<f64>)>;
    let jobs: Vec<(usize, usize)> = (0..v).flat_map(|f| (0..k).map(move |l| (f, l))).collect();
    let blocks: Vec<Block> = jobs
        .par_iter()
        .map(|&(f, l)| {
            let train_idx = folds.training(f);
            let test_idx = folds.members(f);
            let train = data.subset(&train_idx);
            let test = data.subset(&test_idx);
            let model = library[l].fit(&train, window.t)?;
            let p = model.predict(&test, &horizons)?;
            let rows: Vec<usize> = p.subjects.iter().map(|&s| row_of[test_idx[s]]).collect();
            Ok((rows, p.survival[0].clone(), p.survival[1].clone()))
        })
        .collect();

    let n = risk.len();
    let mut end = vec![vec![f64::NAN; k]; n];
    let mut mid = vec![vec![f64::NAN; k]; n];
    let mut failed: Vec<Option<String>> = vec![None; k];
    for (&(f, l), block) in jobs.iter().zip(blocks) {
        match block {
            Ok((rows, e, m)) => {
                for ((r, a), b) in rows.into_iter().zip(e).zip(m) {
                    end[r][l] = a;
                    mid[r][l] = b;
                }
            }
            Err(err) => {
                if failed[l].is_none() {
                    failed[l] = Some(format!("fold {}: {err}", f + 1));
                }
            }
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&l| failed[l].is_none()).collect();
    let dropped: Vec<(String, String)> = (0..k)
        .filter_map(|l| failed[l].clone().map(|why| (library[l].id().to_string(), why)))
        .collect();
    if keep.is_empty() {
        return Err(DynslError::fit(
            "superlearner",
            format!(
                "every learner failed: {}",
                dropped
                    .iter()
                    .map(|(id, why)| format!("{id} ({why})"))
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
        ));
    }
    let full = PredictionMatrix {
        window: *window,
        learner_ids: library.iter().map(|l| l.id().to_string()).collect(),
        subjects: risk.indices.clone(),
        fold_of: risk.indices.iter().map(|&i| folds.fold_of[i]).collect(),
        end,
        mid,
        dropped,
    };
    let out = full.select(&keep);
    if out.end.iter().chain(&out.mid).flatten().any(|v| !v.is_finite()) {
        return Err(DynslError::numerical(
            "superlearner",
            "prediction matrix has missing entries",
        ));
    }
    Ok(out)
}
