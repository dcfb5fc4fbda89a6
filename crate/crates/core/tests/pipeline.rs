//! End-to-end use of the public API: simulate, write and reload, fit,
//! serialize, predict and score.

use dynsl::data::{load_dataset, write_dataset, PredictionWindow, Schema};
use dynsl::estimators::ipcw;
use dynsl::metrics::{brier, tv_auc, AucOrientation, BrierPairing, Metric};
use dynsl::simulate::{simulate_dataset, ReplicateProcess, Scenario, SimConfig};
use dynsl::superlearner::{LearnerKind, LearnerSpec, Role, SuperLearner, SuperLearnerConfig, REFERENCE_ID};

fn library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::new("lvcf", LearnerKind::OneStageCox),
        LearnerSpec::new("lmm", LearnerKind::TwoStageCox),
        LearnerSpec::new("boost", LearnerKind::OneStageBoost)
            .with("b_stop", 40.0)
            .with("inner_folds", 3.0),
    ]
}

#[test]
fn csv_round_trip_preserves_the_fit() {
    let sim = SimConfig::default();
    let data = simulate_dataset(&sim, ReplicateProcess::Landmark, Scenario::Informative, 400).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (b, l) = (dir.path().join("base.csv"), dir.path().join("long.csv"));
    write_dataset(&data, &b, &l).unwrap();
    let reloaded = load_dataset(&b, &l, &Schema::default()).unwrap();
    assert_eq!(reloaded.n(), data.n());
    assert_eq!(reloaded.measurements(), data.measurements());

    let window = PredictionWindow::new(4.0, 7.0).unwrap();
    let config = SuperLearnerConfig { folds: 4, ..SuperLearnerConfig::default() };
    let a = SuperLearner::fit(&library(), &data, &window, &config).unwrap();
    let b = SuperLearner::fit(&library(), &reloaded, &window, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stored_ensemble_predicts_and_scores_like_the_original() {
    let sim = SimConfig::default();
    let train = simulate_dataset(&sim, ReplicateProcess::Joint, Scenario::Random, 500).unwrap();
    let test = simulate_dataset(&SimConfig { seed: 5, ..sim }, ReplicateProcess::Joint, Scenario::Random, 250).unwrap();
    let window = PredictionWindow::new(4.0, 7.0).unwrap();
    let sl = SuperLearner::fit(&library(), &train, &window, &SuperLearnerConfig::default()).unwrap();

    let stored: SuperLearner = serde_json::from_str(&serde_json::to_string(&sl).unwrap()).unwrap();
    assert_eq!(stored, sl);

    let eval = stored.evaluate(&test).unwrap();
    let w = ipcw(&test, &window).unwrap();
    assert_eq!(eval.n_at_risk, w.len());
    for metric in [Metric::Bs, Metric::TvAuc] {
        let (subjects, esl) = stored.predict(&test, metric).unwrap();
        assert_eq!(subjects, w.subjects);
        let direct = match metric {
            Metric::Bs => brier(&esl, &test, &w, BrierPairing::Conventional).unwrap().value,
            _ => tv_auc(&esl, &test, &w, AucOrientation::Conventional).unwrap().value,
        };
        let row = eval.rows.iter().find(|r| r.role == Role::Esl && r.metric == metric).unwrap();
        assert_eq!(row.value, direct);
    }
    // The reference and every retained learner are scored on all metrics.
    for id in sl.learner_ids().iter().map(String::as_str).chain([REFERENCE_ID]) {
        for metric in Metric::ALL {
            assert!(eval.value(id, metric).is_some(), "{id} {metric}");
        }
    }
    // Predictions are survival probabilities.
    let p = stored.predict_learners(&test).unwrap();
    assert!(p.end.iter().chain(&p.mid).flatten().all(|v| (0.0..=1.0).contains(v)));
    // Survival at the midpoint is at least survival at u for every learner.
    for (m, e) in p.mid.iter().zip(&p.end) {
        assert!(m.iter().zip(e).all(|(a, b)| a + 1e-12 >= *b));
    }
}
