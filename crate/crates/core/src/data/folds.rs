use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, PredictionWindow};
use crate::error::{DynslError, Result};

/// Assignment of every subject to one of `folds` cross-validation folds.
///
/// Fold indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Subjects used to train the models that predict fold `v`.
    pub fn training(&self, v: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != v).collect()
    }

    pub fn members(&self, v: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == v).collect()
    }

    /// Number of in-window events per fold.
    pub fn event_counts(&self, data: &Dataset, window: &PredictionWindow) -> Vec<usize> {
        let mut counts = vec![0; self.folds];
        for i in 0..data.n() {
            if data.event_in_window(i, window) {
                counts[self.fold_of[i]] += 1;
            }
        }
        counts
    }
}

/// Assigns folds so that in-window events are spread as evenly as possible.
///
/// Event-havers inside `(t, u]` and all remaining subjects are shuffled
/// separately and dealt round-robin, the second group continuing where the
/// first stopped. Subjects outside the risk set still receive a fold.
pub fn stratified_folds(data: &Dataset, window: &PredictionWindow, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(DynslError::config(
            "data",
            format!("need at least 2 folds, got {folds}"),
        ));
    }
    if data.risk_set(window.t).is_empty() {
        return Err(DynslError::domain(
            "data",
            format!("no subjects at risk at landmark {}", window.t),
        ));
    }
    let (mut events, mut others): (Vec<usize>, Vec<usize>) =
        (0..data.n()).partition(|&i| data.event_in_window(i, window));
    if events.len() < folds {
        return Err(DynslError::config(
            "data",
            format!(
                "only {} events in window {window} for {folds} folds; use fewer folds so every fold has events",
                events.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    events.shuffle(&mut rng);
    others.shuffle(&mut rng);
    let mut fold_of = vec![0; data.n()];
    for (k, &i) in events.iter().chain(others.iter()).enumerate() {
        fold_of[i] = k % folds;
    }
    Ok(FoldAssignment { fold_of, folds, seed })
}
