use std::path::{Path, PathBuf};

use dynsl::data::{PredictionWindow, Schema};
use dynsl::metrics::{AucOrientation, BrierPairing, Metric};
use dynsl::simulate::{ReplicateProcess, Scenario, SimConfig};
use dynsl::superlearner::{LearnerKind, LearnerSpec, SuperLearnerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A baseline file and a long-format measurement file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePair {
    pub baseline: PathBuf,
    pub longitudinal: PathBuf,
}

/// Training and test data drawn from the `[simulation]` truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedData {
    pub n: usize,
    pub test_n: usize,
    pub process: ReplicateProcess,
    pub scenario: Scenario,
}

impl Default for SimulatedData {
    fn default() -> Self {
        Self {
            n: 1500,
            test_n: 500,
            process: ReplicateProcess::Joint,
            scenario: Scenario::Random,
        }
    }
}

/// Where the data comes from: files, or a simulation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<FilePair>,
    pub test: Option<FilePair>,
    /// Subjects to predict; defaults to the test data.
    pub predict: Option<FilePair>,
    pub schema: Schema,
    pub simulated: Option<SimulatedData>,
}

/// A prediction window with its own fold count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub t: f64,
    pub u: f64,
    pub folds: usize,
}

impl WindowSpec {
    pub fn window(&self) -> PredictionWindow {
        PredictionWindow { t: self.t, u: self.u }
    }
}

/// Everything a run needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of fold assignment and tv-AUC starts in `fit`, and the master
    /// seed of `simulate`.
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub windows: Vec<WindowSpec>,
    /// Losses shown in reports and predictions. All three are always fitted.
    pub losses: Vec<Metric>,
    pub pairing: BrierPairing,
    pub orientation: AucOrientation,
    pub auc_starts: usize,
    pub library: Vec<LearnerSpec>,
    pub simulation: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sl = SuperLearnerConfig::default();
        Self {
            seed: 1,
            threads: None,
            out: PathBuf::from("dynsl-out"),
            data: DataConfig::default(),
            windows: Vec::new(),
            losses: Metric::ALL.to_vec(),
            pairing: sl.pairing,
            orientation: sl.orientation,
            auc_starts: sl.auc_starts,
            library: vec![
                LearnerSpec::new("landmark_lvcf", LearnerKind::OneStageCox),
                LearnerSpec::new("landmark_lmm", LearnerKind::TwoStageCox),
            ],
            simulation: SimConfig::desk(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file. Errors name the offending field on one line.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| CliError::usage(format!("config {}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let de = toml::Deserializer::parse(text).map_err(|e| one_line(e.message(), e.span(), text))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = one_line(inner.message(), inner.span(), text);
            if path == "." || path.is_empty() {
                msg
            } else {
                format!("field `{path}`: {msg}")
            }
        })
    }

    pub fn superlearner(&self, folds: usize) -> SuperLearnerConfig {
        SuperLearnerConfig {
            folds,
            seed: self.seed,
            pairing: self.pairing,
            orientation: self.orientation,
            auc_starts: self.auc_starts,
        }
    }

    /// Checks what `fit`, `predict` and `evaluate` need.
    pub fn validate_fit(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::usage(format!("config: {m}")));
        if self.windows.is_empty() {
            return bad("`windows` must list at least one window".into());
        }
        for (i, w) in self.windows.iter().enumerate() {
            if let Err(e) = PredictionWindow::new(w.t, w.u) {
                return bad(format!("`windows[{i}]`: {e}"));
            }
            if w.folds < 2 {
                return bad(format!("`windows[{i}].folds` must be at least 2"));
            }
        }
        if self.losses.is_empty() {
            return bad("`losses` must name at least one loss".into());
        }
        if self.library.is_empty() {
            return bad("`library` must contain at least one learner".into());
        }
        match (&self.data.train, &self.data.simulated) {
            (Some(_), Some(_)) => bad("give either `data.train` or `data.simulated`, not both".into()),
            (None, None) => bad("`data.train` or `data.simulated` is required".into()),
            _ => Ok(()),
        }
    }
}

fn one_line(message: &str, span: Option<std::ops::Range<usize>>, text: &str) -> String {
    let msg = message.split_whitespace().collect::<Vec<_>>().join(" ");
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!("{msg} (line {line})")
        }
        None => msg,
    }
}
