//! Text and delimited tables of fitted weights, metric values and study
//! summaries.
//!
//! Every table renders two ways: aligned plain text for reading and CSV for
//! plotting. Numbers in CSV use shortest round-trip formatting, so a value
//! read back equals the value computed.

use std::collections::BTreeMap;

use crate::error::{DynslError, Result};
use crate::metrics::Metric;
use crate::simulate::{Scenario, StudyResults};
use crate::superlearner::{Evaluation, Role, SuperLearner};

/// A titled grid of cells. Row and column order is the render order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Self {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Left-aligned first column, right-aligned numbers, two-space gutters.
    pub fn to_text(&self) -> String {
        let ncol = self.header.len();
        let mut width = vec![0; ncol];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &Vec<String>| {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == 0 {
                        format!("{c:<w$}", w = width[j])
                    } else {
                        format!("{c:>w$}", w = width[j])
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out += &line(&self.header);
        out.push('\n');
        out += &"-".repeat(width.iter().sum::<usize>() + 2 * ncol.saturating_sub(1));
        out.push('\n');
        for row in &self.rows {
            out += &line(row);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| DynslError::Serialization(e.to_string());
        w.write_record(&self.header).map_err(ser)?;
        for row in &self.rows {
            w.write_record(row).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| DynslError::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| DynslError::Serialization(e.to_string()))
    }
}

fn fixed(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".into()
    }
}

fn header<'a>(first: &'a str, losses: &[Metric]) -> Vec<&'a str> {
    std::iter::once(first).chain(losses.iter().map(|m| m.label())).collect()
}

/// Ensemble weights with learners as rows and the given losses as columns.
/// A `*` after a weight marks the learner the dSL picked under that loss.
pub fn weight_table(sl: &SuperLearner, losses: &[Metric]) -> Table {
    let fits: Vec<_> = losses.iter().map(|&m| sl.loss_fit(m)).collect();
    let mut t = Table::new(
        format!("Ensemble weights, window {}", sl.window),
        &header("learner", losses),
    );
    for (k, id) in sl.learner_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        for fit in &fits {
            let mark = if fit.dsl == k { "*" } else { " " };
            row.push(format!("{}{mark}", fixed(fit.weights.omega[k], 2)));
        }
        t.rows.push(row);
    }
    let flag = |b: bool| if b { "yes" } else { "fallback" }.to_string();
    let mut conv = vec!["converged".to_string()];
    conv.extend(fits.iter().map(|f| flag(f.weights.converged)));
    t.rows.push(conv);
    t
}

/// Long-format weights: one line per learner and loss.
pub fn weight_rows(sl: &SuperLearner, losses: &[Metric]) -> Table {
    let mut t = Table::new(
        format!("Ensemble weights, window {}", sl.window),
        &["t", "u", "loss", "learner", "omega", "dsl", "converged"],
    );
    for fit in losses.iter().map(|&m| sl.loss_fit(m)) {
        for (k, id) in fit.weights.learner_ids.iter().enumerate() {
            t.rows.push(vec![
                sl.window.t.to_string(),
                sl.window.u.to_string(),
                fit.weights.loss.label().to_string(),
                id.clone(),
                fit.weights.omega[k].to_string(),
                (fit.dsl == k).to_string(),
                fit.weights.converged.to_string(),
            ]);
        }
    }
    t
}

/// Cross-validated loss of each learner, the eSL and the dSL. For the
/// convex losses the eSL never exceeds the dSL.
pub fn cv_table(sl: &SuperLearner, losses: &[Metric]) -> Table {
    let fits: Vec<_> = losses.iter().map(|&m| sl.loss_fit(m)).collect();
    let mut t = Table::new(
        format!("Cross-validated loss, window {}", sl.window),
        &header("model", losses),
    );
    for (k, id) in sl.learner_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(fits.iter().map(|f| fixed(f.cv_losses[k], 4)));
        t.rows.push(row);
    }
    let mut esl = vec!["eSL".to_string()];
    esl.extend(fits.iter().map(|f| fixed(f.weights.achieved_loss, 4)));
    t.rows.push(esl);
    let mut dsl = vec!["dSL".to_string()];
    dsl.extend(fits.iter().map(|f| fixed(f.cv_losses[f.dsl], 4)));
    t.rows.push(dsl);
    t
}

/// Held-out metric values of every learner, the eSL, the dSL and the
/// Kaplan–Meier reference. dSL rows name the learner they stand for.
pub fn metric_table(eval: &Evaluation) -> Table {
    let mut t = Table::new(
        format!("Held-out metrics, window {}, {} at risk", eval.window, eval.n_at_risk),
        &header("model", &Metric::ALL),
    );
    for (model, role) in models(eval) {
        let label = match role {
            Role::Dsl => {
                let mut picks: Vec<&str> = Metric::ALL
                    .iter()
                    .filter_map(|&m| dsl_row(eval, m).and_then(|r| r.selected.as_deref()))
                    .collect();
                if picks.windows(2).all(|p| p[0] == p[1]) {
                    picks.truncate(1);
                }
                format!("dSL ({})", picks.join("/"))
            }
            _ => model.clone(),
        };
        let mut row = vec![label];
        row.extend(
            Metric::ALL
                .iter()
                .map(|&m| eval.value(&model, m).map_or("NA".into(), |v| fixed(v, 4))),
        );
        t.rows.push(row);
    }
    t
}

/// Long-format metric values for plotting.
pub fn metric_rows(eval: &Evaluation) -> Table {
    let mut t = Table::new(
        format!("Held-out metrics, window {}", eval.window),
        &["t", "u", "model", "role", "metric", "value", "selected"],
    );
    for r in &eval.rows {
        t.rows.push(vec![
            eval.window.t.to_string(),
            eval.window.u.to_string(),
            r.model.clone(),
            r.role.label().to_string(),
            r.metric.label().to_string(),
            r.value.to_string(),
            r.selected.clone().unwrap_or_default(),
        ]);
    }
    t
}

fn dsl_row(eval: &Evaluation, metric: Metric) -> Option<&crate::superlearner::EvaluationRow> {
    eval.rows.iter().find(|r| r.role == Role::Dsl && r.metric == metric)
}

fn models(eval: &Evaluation) -> Vec<(String, Role)> {
    let mut seen: Vec<(String, Role)> = Vec::new();
    for r in &eval.rows {
        if !seen.iter().any(|(m, _)| m == &r.model) {
            seen.push((r.model.clone(), r.role));
        }
    }
    seen
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Mean test value per scenario, loss and model over replicates.
pub fn study_metric_table(results: &StudyResults) -> Table {
    let mut t = Table::new(
        "Mean test metric over replicates (sd)",
        &["scenario", "loss", "model", "mean", "sd", "n"],
    );
    let mut cells: BTreeMap<(Scenario, Metric, String), Vec<f64>> = BTreeMap::new();
    for r in &results.rows {
        cells
            .entry((r.scenario, r.loss, r.model.clone()))
            .or_default()
            .push(r.test);
    }
    for ((s, m, model), v) in cells {
        let (mean, sd) = mean_sd(&v);
        t.rows.push(vec![
            s.label().into(),
            m.label().into(),
            model,
            fixed(mean, 4),
            fixed(sd, 4),
            v.len().to_string(),
        ]);
    }
    t
}

/// Mean ensemble weight per scenario, loss and learner, with its sd.
pub fn study_weight_table(results: &StudyResults) -> Table {
    let mut t = Table::new(
        "Mean ensemble weight over replicates (sd)",
        &["scenario", "loss", "learner", "mean", "sd"],
    );
    let mut cells: BTreeMap<(Scenario, Metric, String), Vec<f64>> = BTreeMap::new();
    for r in results.rows.iter().filter(|r| r.model == "eSL") {
        for (id, w) in &r.omega {
            cells.entry((r.scenario, r.loss, id.clone())).or_default().push(*w);
        }
    }
    for ((s, m, id), v) in cells {
        let (mean, sd) = mean_sd(&v);
        t.rows.push(vec![
            s.label().into(),
            m.label().into(),
            id,
            fixed(mean, 3),
            fixed(sd, 3),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_columns_line_up() {
        let mut t = Table::new("T", &["name", "v"]);
        t.rows.push(vec!["a".into(), "1.00".into()]);
        t.rows.push(vec!["longer".into(), "0.5".into()]);
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "T");
        assert_eq!(lines[1], "name       v");
        assert_eq!(lines[2], "------------");
        assert_eq!(lines[3], "a       1.00");
        assert_eq!(lines[4], "longer   0.5");
    }

    #[test]
    fn csv_quotes_fields_with_commas() {
        let mut t = Table::new("T", &["a", "b"]);
        t.rows.push(vec!["x,y".into(), "1".into()]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n\"x,y\",1\n");
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
    }
}
