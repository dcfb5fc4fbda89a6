use std::fs;
use std::path::{Path, PathBuf};

use dynsl::data::{load_dataset, write_dataset, Dataset, PredictionWindow};
use dynsl::metrics::Metric;
use dynsl::report::{
    cv_table, metric_rows, metric_table, study_metric_table, study_weight_table, weight_rows, weight_table, Table,
};
use dynsl::simulate::{run_study, simulate_dataset, study_csv};
use dynsl::superlearner::{LearnerSpec, SuperLearner};
use dynsl::DynslError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FilePair, RunConfig};
use crate::CliError;

/// Version tag of the ensemble file layout.
const BUNDLE_FORMAT: u32 = 1;
const BUNDLE_FILE: &str = "ensemble.json";

/// Fitted ensembles of every window plus what is needed to use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub format: u32,
    pub covariate_names: Vec<String>,
    pub biomarker_names: Vec<String>,
    pub library: Vec<LearnerSpec>,
    pub ensembles: Vec<SuperLearner>,
}

/// Files written by a command, the text shown on stdout, and non-fatal
/// problems that still make the exit code nonzero.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn write(&mut self, out: &Path, name: &str, content: &str) -> Result<(), CliError> {
        let path = out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&path, content).map_err(|e| io_err(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("cannot write {}: {e}", path.display()))
}

fn load_pair(pair: &FilePair, config: &RunConfig) -> Result<Dataset, CliError> {
    Ok(load_dataset(&pair.baseline, &pair.longitudinal, &config.data.schema)?)
}

fn simulated(config: &RunConfig) -> Result<Option<(Dataset, Dataset)>, CliError> {
    let Some(sim) = &config.data.simulated else {
        return Ok(None);
    };
    if sim.n == 0 || sim.test_n == 0 {
        return Err(CliError::usage(
            "config: `data.simulated.n` and `data.simulated.test_n` must be positive",
        ));
    }
    let all = simulate_dataset(&config.simulation, sim.process, sim.scenario, sim.n + sim.test_n)?;
    let train: Vec<usize> = (0..sim.n).collect();
    let test: Vec<usize> = (sim.n..sim.n + sim.test_n).collect();
    Ok(Some((all.subset(&train), all.subset(&test))))
}

/// The training data named by the config.
pub fn training_data(config: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(pair) = &config.data.train {
        return load_pair(pair, config);
    }
    simulated(config)?
        .map(|(train, _)| train)
        .ok_or_else(|| CliError::usage("config: `data.train` or `data.simulated` is required"))
}

/// The held-out data named by the config.
pub fn test_data(config: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(pair) = &config.data.test {
        return load_pair(pair, config);
    }
    simulated(config)?
        .map(|(_, test)| test)
        .ok_or_else(|| CliError::usage("config: `data.test` or `data.simulated` is required"))
}

pub fn load_bundle(out: &Path) -> Result<Bundle, CliError> {
    let path = out.join(BUNDLE_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}; run `dynsl fit` first", path.display())))?;
    let bundle: Bundle =
        serde_json::from_str(&text).map_err(|e| DynslError::Serialization(format!("{}: {e}", path.display())))?;
    if bundle.format != BUNDLE_FORMAT {
        return Err(CliError::usage(format!(
            "{} has format {}, expected {BUNDLE_FORMAT}; refit",
            path.display(),
            bundle.format
        )));
    }
    Ok(bundle)
}

fn check_columns(bundle: &Bundle, data: &Dataset) -> Result<(), CliError> {
    if bundle.covariate_names != data.covariate_names() || bundle.biomarker_names != data.biomarker_names() {
        return Err(CliError::usage(format!(
            "data columns {:?}/{:?} differ from the fitted ones {:?}/{:?}",
            data.covariate_names(),
            data.biomarker_names(),
            bundle.covariate_names,
            bundle.biomarker_names
        )));
    }
    Ok(())
}

fn window_tag(w: &PredictionWindow) -> String {
    format!("t{}_u{}", w.t, w.u)
}

/// Concatenates long tables that share a header.
fn stack(tables: Vec<Table>) -> Result<String, CliError> {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        let csv = t.to_csv()?;
        out += if i == 0 {
            &csv
        } else {
            csv.split_once('\n').map_or("", |(_, body)| body)
        };
    }
    Ok(out)
}

/// Adds leading `t` and `u` columns.
fn with_window(mut table: Table, w: &PredictionWindow) -> Table {
    table.header.splice(0..0, ["t".to_string(), "u".to_string()]);
    for row in &mut table.rows {
        row.splice(0..0, [w.t.to_string(), w.u.to_string()]);
    }
    table
}

fn fit_text(config: &RunConfig, bundle: &Bundle) -> String {
    let mut text = String::new();
    for sl in &bundle.ensembles {
        text += &weight_table(sl, &config.losses).to_text();
        text += "* marks the discrete Super Learner choice\n\n";
        text += &cv_table(sl, &config.losses).to_text();
        for (id, why) in &sl.dropped {
            text += &format!("dropped {id}: {why}\n");
        }
        text.push('\n');
    }
    text
}

/// Cross-validates the library in every window, fits the weights and
/// refits the learners on all training data.
pub fn fit(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    config.validate_fit()?;
    let train = training_data(config)?;
    let ensembles = config
        .windows
        .par_iter()
        .map(|w| SuperLearner::fit(&config.library, &train, &w.window(), &config.superlearner(w.folds)))
        .collect::<Result<Vec<_>, _>>()?;
    let bundle = Bundle {
        format: BUNDLE_FORMAT,
        covariate_names: train.covariate_names().to_vec(),
        biomarker_names: train.biomarker_names().to_vec(),
        library: config.library.clone(),
        ensembles,
    };
    let mut o = Outcome::default();
    let json = serde_json::to_string_pretty(&bundle).map_err(|e| DynslError::Serialization(e.to_string()))?;
    o.write(out, BUNDLE_FILE, &(json + "\n"))?;
    let text = fit_text(config, &bundle);
    o.write(out, "fit_report.txt", &text)?;
    o.write(
        out,
        "weights.csv",
        &stack(
            bundle
                .ensembles
                .iter()
                .map(|sl| weight_rows(sl, &config.losses))
                .collect(),
        )?,
    )?;
    let cv = bundle
        .ensembles
        .iter()
        .map(|sl| with_window(cv_table(sl, &config.losses), &sl.window))
        .collect();
    o.write(out, "cv_losses.csv", &stack(cv)?)?;
    if let Some((train, test)) = simulated(config)? {
        for (name, data) in [("train", &train), ("test", &test)] {
            let dir = out.join("data");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            let (b, l) = (
                dir.join(format!("{name}_baseline.csv")),
                dir.join(format!("{name}_long.csv")),
            );
            write_dataset(data, &b, &l)?;
            o.files.extend([b, l]);
        }
    }
    o.summary = text;
    Ok(o)
}

/// Survival predictions at `u` of every learner, the eSL and the dSL for
/// each requested loss, one file per window.
pub fn predict(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let bundle = load_bundle(out)?;
    let data = match &config.data.predict {
        Some(pair) => load_pair(pair, config)?,
        None => test_data(config)?,
    };
    check_columns(&bundle, &data)?;
    let mut o = Outcome::default();
    for sl in &bundle.ensembles {
        let p = sl.predict_learners(&data)?;
        let mut header: Vec<String> = vec!["id".into()];
        header.extend(p.learner_ids.iter().cloned());
        for m in &config.losses {
            header.push(format!("eSL_{}", m.label()));
            header.push(format!("dSL_{}", m.label()));
        }
        let mixes: Vec<(Vec<f64>, usize)> = config
            .losses
            .iter()
            .map(|&m| {
                let fit = sl.loss_fit(m);
                (p.mix(&fit.weights.omega, false), fit.dsl)
            })
            .collect();
        let mut table = Table {
            title: String::new(),
            header,
            rows: Vec::new(),
        };
        for (i, &s) in p.subjects.iter().enumerate() {
            let mut row = vec![data.subject(s).id.clone()];
            row.extend(p.end.iter().map(|col| col[i].to_string()));
            for (mix, dsl) in &mixes {
                row.push(mix[i].to_string());
                row.push(p.end[*dsl][i].to_string());
            }
            table.rows.push(row);
        }
        let name = format!("predictions_{}.csv", window_tag(&sl.window));
        o.write(out, &name, &table.to_csv()?)?;
        o.summary += &format!(
            "window {}: {} subjects at risk -> {name}\n",
            sl.window,
            p.subjects.len()
        );
    }
    Ok(o)
}

fn evaluation_text(config: &RunConfig, bundle: &Bundle, test: &Dataset) -> Result<(String, String), CliError> {
    let evals = bundle
        .ensembles
        .iter()
        .map(|sl| sl.evaluate(test))
        .collect::<Result<Vec<_>, _>>()?;
    let mut text = String::new();
    for (sl, ev) in bundle.ensembles.iter().zip(&evals) {
        text += &metric_table(ev).to_text();
        text += "KM predicts the same survival for everyone; tied pairs never count in tv-AUC\n\n";
        text += &cv_table(sl, &config.losses).to_text();
        text.push('\n');
    }
    Ok((text, stack(evals.iter().map(metric_rows).collect())?))
}

/// Held-out BS, IBS and tv-AUC of every learner, the eSL, the dSL and the
/// Kaplan–Meier reference.
pub fn evaluate(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let bundle = load_bundle(out)?;
    let test = test_data(config)?;
    check_columns(&bundle, &test)?;
    let (text, csv) = evaluation_text(config, &bundle, &test)?;
    let mut o = Outcome::default();
    o.write(out, "evaluation.txt", &text)?;
    o.write(out, "metrics.csv", &csv)?;
    o.summary = text;
    Ok(o)
}

/// Re-renders the weight tables of a fitted bundle, with held-out metrics
/// when test data is configured.
pub fn report(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let bundle = load_bundle(out)?;
    let mut text = fit_text(config, &bundle);
    if config.data.test.is_some() || config.data.simulated.is_some() {
        let test = test_data(config)?;
        check_columns(&bundle, &test)?;
        text += &evaluation_text(config, &bundle, &test)?.0;
    }
    let mut o = Outcome::default();
    o.write(out, "report.txt", &text)?;
    o.summary = text;
    Ok(o)
}

/// Runs the simulation study of `[simulation]`.
pub fn simulate(config: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let results = run_study(&config.simulation)?;
    let mut o = Outcome::default();
    o.write(out, "study.csv", &study_csv(&results)?)?;
    let echo = toml::to_string(&config.simulation).map_err(|e| DynslError::Serialization(e.to_string()))?;
    o.write(out, "study_config.toml", &echo)?;
    let metrics = study_metric_table(&results);
    let weights = study_weight_table(&results);
    o.write(out, "study_metrics.csv", &metrics.to_csv()?)?;
    o.write(out, "study_weights.csv", &weights.to_csv()?)?;
    let mut text = String::from("Calibrated censoring\n");
    for c in &results.calibrations {
        text += &format!(
            "  {} {}: {:?}, in-window fraction {:.4}\n",
            c.process.label(),
            c.censoring.scenario().label(),
            c.censoring,
            c.achieved
        );
    }
    text.push('\n');
    text += &metrics.to_text();
    text.push('\n');
    text += &weights.to_text();
    let fallback = results
        .rows
        .iter()
        .filter(|r| r.model == "eSL" && r.loss == Metric::TvAuc)
        .map(|r| r.converged == Some(false))
        .collect::<Vec<_>>();
    if !fallback.is_empty() {
        let k = fallback.iter().filter(|&&f| f).count();
        text += &format!("\ntv-AUC weight fallback in {k} of {} fits\n", fallback.len());
    }
    for f in &results.failures {
        let w = format!("replicate {} {}: {}", f.replicate, f.scenario.label(), f.message);
        text += &format!("failed {w}\n");
        o.warnings.push(w);
    }
    o.write(out, "study_summary.txt", &text)?;
    o.summary = text;
    Ok(o)
}
