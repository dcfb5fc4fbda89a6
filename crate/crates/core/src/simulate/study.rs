use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Generator, Process, Scenario, SimConfig};
use super::generate::{
    censor_time, gen_event_joint, gen_event_landmark, gen_longitudinal, in_window_censoring, to_dataset, Censoring,
    CensoringDraws, SimSubject,
};
use crate::error::{DynslError, Result};
use crate::metrics::Metric;
use crate::optim::bisect;
use crate::superlearner::{Role, SuperLearner, SuperLearnerConfig};

const MODULE: &str = "simulator";

/// Independent stream `index` of purpose `tag` under the master seed.
pub fn stream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((tag << 40) | index);
    rng
}

const TAG_POPULATION: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_CENSOR: u64 = 3;
const TAG_SL: u64 = 4;
const TAG_PILOT: u64 = 5;
const TAG_DATASET: u64 = 6;

/// Which event process a replicate (or a pilot population) uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateProcess {
    Landmark,
    Joint,
    Mixture,
}

impl ReplicateProcess {
    pub fn of(generator: Generator, replicate: usize) -> Self {
        match generator {
            Generator::Landmark => ReplicateProcess::Landmark,
            Generator::Joint => ReplicateProcess::Joint,
            Generator::Alternate if replicate % 2 == 0 => ReplicateProcess::Landmark,
            Generator::Alternate => ReplicateProcess::Joint,
            Generator::Mixture { .. } => ReplicateProcess::Mixture,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ReplicateProcess::Landmark => "landmark",
            ReplicateProcess::Joint => "joint",
            ReplicateProcess::Mixture => "mixture",
        }
    }
}

/// Covariates, trajectories and uncensored event times for `n` subjects.
pub fn gen_population<R: Rng>(
    config: &SimConfig,
    process: ReplicateProcess,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SimSubject>> {
    let mut subjects = gen_longitudinal(config, n, rng)?;
    let joint = config.joint_model()?;
    let mean0 = config.lmm_truth.mean(0.0);
    for s in subjects.iter_mut() {
        let p = match process {
            ReplicateProcess::Landmark => Process::Landmark,
            ReplicateProcess::Joint => Process::Joint,
            ReplicateProcess::Mixture => {
                let Generator::Mixture { joint_fraction } = config.generator else {
                    unreachable!("mixture process comes from a mixture generator")
                };
                if rng.random::<f64>() < joint_fraction {
                    Process::Joint
                } else {
                    Process::Landmark
                }
            }
        };
        match p {
            Process::Landmark => gen_event_landmark(s, &config.landmark_events, mean0, config.horizon, rng),
            Process::Joint => gen_event_joint(s, &joint, config.horizon, rng)?,
        }
    }
    Ok(subjects)
}

/// Censoring parameter calibrated on a pilot population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub process: ReplicateProcess,
    pub censoring: Censoring,
    /// In-window censoring fraction realized on the pilot population.
    pub achieved: f64,
}

/// Chooses the scenario's free parameter so that the expected fraction of
/// the risk set at `t` censored inside the window matches the target.
///
/// Random censoring: the fraction rises and then falls in `c_max`; the
/// root is taken on the falling branch, where most censoring happens after
/// the window. Informative censoring: the fraction increases with the
/// intercept. The same uniforms are reused for every trial value.
pub fn calibrate(config: &SimConfig, process: ReplicateProcess, scenario: Scenario) -> Result<Calibration> {
    let window = config.window;
    let target = config.censoring.target_in_window;
    let mut rng = stream(config.seed, TAG_PILOT, process as u64);
    let mut pilot = gen_population(config, process, config.censoring.calibration_n, &mut rng)?;
    let draws: Vec<CensoringDraws> = pilot.iter().map(|s| CensoringDraws::draw(s, &mut rng)).collect();
    let covs = &config.censoring.informative_covariates;
    let mut fraction = |c: &Censoring| {
        for (s, d) in pilot.iter_mut().zip(&draws) {
            s.censor_time = censor_time(s, d, c, covs);
        }
        in_window_censoring(&pilot, &window, config.horizon)
    };
    let censoring = match scenario {
        Scenario::None => Censoring::None,
        Scenario::Random => {
            let grid: Vec<f64> = (0..=400)
                .map(|k| window.t * (1000.0 * window.u / window.t).powf(k as f64 / 400.0))
                .collect();
            let values: Vec<f64> = grid
                .iter()
                .map(|&c| fraction(&Censoring::Random { c_max: c }))
                .collect();
            let peak = (0..values.len()).fold(0, |b, k| if values[k] > values[b] { k } else { b });
            if values[peak] < target {
                return Err(DynslError::config(
                    MODULE,
                    format!(
                        "`censoring.target_in_window` = {target} exceeds the largest fraction {:.3} that uniform censoring reaches; lower it",
                        values[peak]
                    ),
                ));
            }
            let Some(j) = (peak + 1..grid.len()).find(|&j| values[j] < target) else {
                return Err(DynslError::config(
                    MODULE,
                    "`censoring.target_in_window` is below the calibration range; raise it",
                ));
            };
            let c = bisect(
                |c| fraction(&Censoring::Random { c_max: c }) - target,
                grid[j - 1],
                grid[j],
                1e-9,
            )
            .unwrap_or(grid[j]);
            Censoring::Random { c_max: c }
        }
        Scenario::Informative => {
            let slope = config.censoring.informative_slope;
            let at = |a: f64| Censoring::Informative { intercept: a, slope };
            let (lo, hi) = (-30.0, 30.0);
            if !(fraction(&at(lo)) < target && fraction(&at(hi)) > target) {
                return Err(DynslError::config(
                    MODULE,
                    "informative censoring cannot reach `censoring.target_in_window`; adjust the target or `informative_slope`",
                ));
            }
            let a = bisect(|a| fraction(&at(a)) - target, lo, hi, 1e-9).unwrap_or(hi);
            at(a)
        }
    };
    let achieved = fraction(&censoring);
    Ok(Calibration {
        process,
        censoring,
        achieved,
    })
}

/// A single censored dataset of `n` subjects from the configured truth,
/// with the scenario calibrated as in the study.
pub fn simulate_dataset(
    config: &SimConfig,
    process: ReplicateProcess,
    scenario: Scenario,
    n: usize,
) -> Result<crate::data::Dataset> {
    config.validate()?;
    let calibration = calibrate(config, process, scenario)?;
    let mut subjects = gen_population(config, process, n, &mut stream(config.seed, TAG_DATASET, 0))?;
    let mut rng = stream(config.seed, TAG_DATASET, 1);
    for s in subjects.iter_mut() {
        let d = CensoringDraws::draw(s, &mut rng);
        s.censor_time = censor_time(s, &d, &calibration.censoring, &config.censoring.informative_covariates);
    }
    to_dataset(&subjects, config.covariate_names(), config.horizon)
}

/// One number of the study: a model's loss on the training CV and test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub replicate: usize,
    pub process: ReplicateProcess,
    pub scenario: Scenario,
    pub loss: Metric,
    /// Learner id, `eSL`, `dSL`, `OM` or `KM`.
    pub model: String,
    /// Learner chosen by dSL or OM.
    pub selected: Option<String>,
    /// Cross-validated value on the training set.
    pub train: Option<f64>,
    pub test: f64,
    /// Ensemble weights by learner id, for eSL rows.
    pub omega: Vec<(String, f64)>,
    pub converged: Option<bool>,
    /// In-window censoring fraction of the whole replicate.
    pub censored_in_window: f64,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFailure {
    pub replicate: usize,
    pub scenario: Scenario,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub config: SimConfig,
    pub calibrations: Vec<Calibration>,
    pub rows: Vec<StudyRow>,
    pub failures: Vec<StudyFailure>,
}

fn processes(config: &SimConfig) -> Vec<ReplicateProcess> {
    let mut p: Vec<ReplicateProcess> = (0..config.replications.min(2))
        .map(|r| ReplicateProcess::of(config.generator, r))
        .collect();
    p.dedup();
    p
}

/// Runs every replicate and scenario. Replicates run in parallel; each
/// draws from its own streams of the master seed, so the output does not
/// depend on the thread count. A failed replicate/scenario is recorded in
/// `failures` and contributes no rows.
pub fn run_study(config: &SimConfig) -> Result<StudyResults> {
    config.validate()?;
    let library = config.resolved_library()?;
    let mut calibrations = Vec::new();
    for p in processes(config) {
        for &s in &config.scenarios {
            calibrations.push(calibrate(config, p, s)?);
        }
    }
    let outcomes: Vec<Vec<std::result::Result<Vec<StudyRow>, StudyFailure>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replicate(config, &library, &calibrations, r))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for per_scenario in outcomes {
        for o in per_scenario {
            match o {
                Ok(mut r) => rows.append(&mut r),
                Err(f) => failures.push(f),
            }
        }
    }
    Ok(StudyResults {
        config: config.clone(),
        calibrations,
        rows,
        failures,
    })
}

/// Censored copy of replicate `r`'s population under scenario slot `k`.
fn censor_replicate(
    config: &SimConfig,
    censoring: &Censoring,
    population: &[SimSubject],
    r: usize,
    k: usize,
) -> Vec<SimSubject> {
    let mut subjects = population.to_vec();
    let mut rng = stream(config.seed, TAG_CENSOR, (r * 8 + k) as u64);
    for s in subjects.iter_mut() {
        let d = CensoringDraws::draw(s, &mut rng);
        s.censor_time = censor_time(s, &d, censoring, &config.censoring.informative_covariates);
    }
    subjects
}

fn run_replicate(
    config: &SimConfig,
    library: &[crate::superlearner::LearnerSpec],
    calibrations: &[Calibration],
    r: usize,
) -> Vec<std::result::Result<Vec<StudyRow>, StudyFailure>> {
    let process = ReplicateProcess::of(config.generator, r);
    let population = gen_population(
        config,
        process,
        config.n,
        &mut stream(config.seed, TAG_POPULATION, r as u64),
    );
    let test_idx = {
        let mut rng = stream(config.seed, TAG_SPLIT, r as u64);
        let mut idx = sample(&mut rng, config.n, config.test_n).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut is_test = vec![false; config.n];
    for &i in &test_idx {
        is_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..config.n).filter(|&i| !is_test[i]).collect();
    config
        .scenarios
        .iter()
        .enumerate()
        .map(|(k, &scenario)| {
            let fail = |e: DynslError| StudyFailure {
                replicate: r,
                scenario,
                message: e.to_string(),
            };
            let population = population.as_ref().map_err(|e| StudyFailure {
                replicate: r,
                scenario,
                message: e.to_string(),
            })?;
            let calibration = calibrations
                .iter()
                .find(|c| c.process == process && c.censoring.scenario() == scenario)
                .expect("every process and scenario is calibrated");
            let subjects = censor_replicate(config, &calibration.censoring, population, r, k);
            let censored = in_window_censoring(&subjects, &config.window, config.horizon);
            let data = to_dataset(&subjects, config.covariate_names(), config.horizon).map_err(fail)?;
            let sl_config = SuperLearnerConfig {
                seed: stream(config.seed, TAG_SL, (r * 8 + k) as u64).next_u64(),
                ..config.superlearner
            };
            replicate_rows(config, library, &data, &train_idx, &test_idx, &sl_config)
                .map(|rows| {
                    rows.into_iter()
                        .map(|mut row| {
                            row.replicate = r;
                            row.process = process;
                            row.scenario = scenario;
                            row.censored_in_window = censored;
                            row
                        })
                        .collect()
                })
                .map_err(fail)
        })
        .collect()
}

fn replicate_rows(
    config: &SimConfig,
    library: &[crate::superlearner::LearnerSpec],
    data: &crate::data::Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    sl_config: &SuperLearnerConfig,
) -> Result<Vec<StudyRow>> {
    let train = data.subset(train_idx);
    let test = data.subset(test_idx);
    let sl = SuperLearner::fit(library, &train, &config.window, sl_config)?;
    let eval = sl.evaluate(&test)?;
    let ids = sl.learner_ids();
    let blank = |loss: Metric, model: String, test: f64| StudyRow {
        replicate: 0,
        process: ReplicateProcess::Landmark,
        scenario: Scenario::None,
        loss,
        model,
        selected: None,
        train: None,
        test,
        omega: Vec::new(),
        converged: None,
        censored_in_window: 0.0,
        dropped: sl.dropped.len(),
    };
    let mut rows = Vec::new();
    for &metric in &Metric::ALL {
        let fit = sl.loss_fit(metric);
        let mut om: Option<(String, f64)> = None;
        for row in eval.rows.iter().filter(|x| x.metric == metric) {
            let mut out = blank(metric, row.model.clone(), row.value);
            match row.role {
                Role::Learner => {
                    let k = ids.iter().position(|id| id == &row.model).expect("retained learner");
                    out.train = Some(fit.cv_losses[k]);
                    if om.as_ref().is_none_or(|(_, v)| metric.better(row.value, *v)) {
                        om = Some((row.model.clone(), row.value));
                    }
                }
                Role::Esl => {
                    out.train = Some(fit.weights.achieved_loss);
                    out.omega = ids.iter().cloned().zip(fit.weights.omega.iter().copied()).collect();
                    out.converged = Some(fit.weights.converged);
                }
                Role::Dsl => {
                    out.train = Some(fit.cv_losses[fit.dsl]);
                    out.selected = row.selected.clone();
                }
                Role::Reference => {}
            }
            rows.push(out);
        }
        let (id, value) = om.expect("at least one learner");
        let mut out = blank(metric, "OM".into(), value);
        out.selected = Some(id);
        rows.push(out);
    }
    Ok(rows)
}

/// Header of the study table.
pub const STUDY_COLUMNS: [&str; 12] = [
    "replicate",
    "process",
    "scenario",
    "loss",
    "model",
    "selected",
    "train",
    "test",
    "omega",
    "converged",
    "censored_in_window",
    "dropped",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

/// The study table as comma-separated text, one row per number.
pub fn study_csv(results: &StudyResults) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| DynslError::Serialization(e.to_string());
    w.write_record(STUDY_COLUMNS).map_err(ser)?;
    for r in &results.rows {
        let omega = r
            .omega
            .iter()
            .map(|(id, v)| format!("{id}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.replicate.to_string(),
            r.process.label().to_string(),
            r.scenario.label().to_string(),
            r.loss.label().to_string(),
            r.model.clone(),
            opt(&r.selected),
            opt(&r.train),
            r.test.to_string(),
            omega,
            opt(&r.converged),
            r.censored_in_window.to_string(),
            r.dropped.to_string(),
        ])
        .map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| DynslError::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| DynslError::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superlearner::{LearnerKind, LearnerSpec};

    fn tiny() -> SimConfig {
        let mut c = SimConfig {
            n: 160,
            test_n: 60,
            replications: 2,
            library: vec![
                LearnerSpec::new("landmark_lvcf", LearnerKind::OneStageCox),
                LearnerSpec::new("joint_oracle", LearnerKind::OracleJoint),
            ],
            ..SimConfig::default()
        };
        c.censoring.calibration_n = 3000;
        c.superlearner.folds = 3;
        c.superlearner.auc_starts = 3;
        c
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = stream(7, TAG_CENSOR, 3).next_u64();
        assert_eq!(a, stream(7, TAG_CENSOR, 3).next_u64());
        assert_ne!(a, stream(7, TAG_CENSOR, 4).next_u64());
        assert_ne!(a, stream(7, TAG_SL, 3).next_u64());
        assert_ne!(a, stream(8, TAG_CENSOR, 3).next_u64());
    }

    #[test]
    fn alternate_generator_splits_replicates() {
        assert_eq!(
            ReplicateProcess::of(Generator::Alternate, 0),
            ReplicateProcess::Landmark
        );
        assert_eq!(ReplicateProcess::of(Generator::Alternate, 1), ReplicateProcess::Joint);
        assert_eq!(ReplicateProcess::of(Generator::Joint, 0), ReplicateProcess::Joint);
    }

    #[test]
    fn study_is_deterministic_and_row_counts_add_up() {
        let config = tiny();
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        assert_eq!(study_csv(&a).unwrap(), study_csv(&b).unwrap());
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        // Per loss: 2 learners, eSL, dSL, KM and OM.
        assert_eq!(a.rows.len(), config.replications * 3 * 3 * 6);
        let csv = study_csv(&a).unwrap();
        assert_eq!(csv.lines().count(), a.rows.len() + 1);
        assert_eq!(csv.lines().next().unwrap(), STUDY_COLUMNS.join(","));
        for r in a.rows.iter().filter(|r| r.scenario == Scenario::None) {
            assert_eq!(r.censored_in_window, 0.0);
        }
        for r in a.rows.iter().filter(|r| r.model == "eSL") {
            let total: f64 = r.omega.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
        for r in a.rows.iter().filter(|r| r.model == "OM") {
            let best = a
                .rows
                .iter()
                .filter(|x| x.replicate == r.replicate && x.scenario == r.scenario && x.loss == r.loss)
                .filter(|x| x.model == "landmark_lvcf" || x.model == "joint_oracle")
                .map(|x| x.test)
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| if r.loss.better(v, a) { v } else { a }))
                });
            assert_eq!(Some(r.test), best);
        }
    }

    #[test]
    fn different_seeds_give_different_studies() {
        let a = tiny();
        let b = SimConfig {
            seed: a.seed + 1,
            ..tiny()
        };
        assert_ne!(
            study_csv(&run_study(&a).unwrap()).unwrap(),
            study_csv(&run_study(&b).unwrap()).unwrap()
        );
    }

    /// Calibration matches the two censoring scenarios on fresh replicate
    /// populations, not only on the pilot.
    #[test]
    fn calibrated_scenarios_censor_alike_inside_the_window() {
        let config = SimConfig::desk();
        for process in [ReplicateProcess::Landmark, ReplicateProcess::Joint] {
            let random = calibrate(&config, process, Scenario::Random).unwrap();
            let informative = calibrate(&config, process, Scenario::Informative).unwrap();
            let target = config.censoring.target_in_window;
            assert!((random.achieved - target).abs() < 2e-3, "{random:?}");
            assert!((informative.achieved - target).abs() < 2e-3, "{informative:?}");
            let (mut f2, mut f3) = (0.0, 0.0);
            for r in 0..config.replications {
                let pop = gen_population(
                    &config,
                    process,
                    config.n,
                    &mut stream(config.seed, TAG_POPULATION, r as u64),
                )
                .unwrap();
                f2 += in_window_censoring(
                    &censor_replicate(&config, &random.censoring, &pop, r, 1),
                    &config.window,
                    config.horizon,
                );
                f3 += in_window_censoring(
                    &censor_replicate(&config, &informative.censoring, &pop, r, 2),
                    &config.window,
                    config.horizon,
                );
            }
            let n = config.replications as f64;
            assert!((f2 / n - f3 / n).abs() < 0.02, "{process:?}: {} vs {}", f2 / n, f3 / n);
        }
    }

    #[test]
    fn unreachable_target_is_a_config_error() {
        let mut config = tiny();
        config.censoring.target_in_window = 1e-6;
        let err = calibrate(&config, ReplicateProcess::Landmark, Scenario::Random).unwrap_err();
        assert!(err.to_string().contains("target_in_window"));
    }
}
