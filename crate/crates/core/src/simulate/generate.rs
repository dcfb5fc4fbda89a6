use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{CovariateLaw, EventTruth, Process, Scenario, SimConfig};
use super::joint::JointModel;
use crate::data::{Dataset, Measurement, PredictionWindow, SubjectRecord};
use crate::error::{DynslError, Result};
use crate::optim::bisect;

const MODULE: &str = "simulator";

/// Generating state of one subject. `event_time` is infinite when the
/// event would fall after the administrative horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSubject {
    pub id: String,
    pub baseline: Vec<f64>,
    /// True random effects (intercept, slope).
    pub b: [f64; 2],
    /// Planned visits `(time, observed value)`, sorted by time.
    pub visits: Vec<(f64, f64)>,
    pub event_time: f64,
    pub censor_time: Option<f64>,
    pub process: Process,
}

impl SimSubject {
    /// `min(T*, C, horizon)` and `1(T* <= min(C, horizon))`.
    pub fn observed(&self, horizon: f64) -> (f64, bool) {
        let c = self.censor_time.unwrap_or(f64::INFINITY).min(horizon);
        if self.event_time <= c {
            (self.event_time, true)
        } else {
            (c, false)
        }
    }
}

/// Covariates, random effects and the visit schedule with noisy values.
/// Event times are left infinite.
pub fn gen_longitudinal<R: Rng>(config: &SimConfig, n: usize, rng: &mut R) -> Result<Vec<SimSubject>> {
    let root = config.lmm_truth.d_root()?;
    let sigma = config.lmm_truth.sigma2.sqrt();
    let law = config.measurements;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let baseline = config
            .covariates
            .iter()
            .map(|c| match *c {
                CovariateLaw::Bernoulli { p, .. } => f64::from(u8::from(rng.random::<f64>() < p)),
                CovariateLaw::Normal { mean, sd, .. } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            })
            .collect();
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let b = [
            root[(0, 0)] * z[0] + root[(0, 1)] * z[1],
            root[(1, 0)] * z[0] + root[(1, 1)] * z[1],
        ];
        let mut times: Vec<f64> = (0..law.count).map(|_| rng.random::<f64>() * law.span).collect();
        if law.baseline_visit {
            times.push(0.0);
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        let visits = times
            .into_iter()
            .map(|s| {
                let eta = config.lmm_truth.mean(s) + b[0] + b[1] * s;
                (s, eta + sigma * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        out.push(SimSubject {
            id: format!("sim{i:05}"),
            baseline,
            b,
            visits,
            event_time: f64::INFINITY,
            censor_time: None,
            process: Process::Landmark,
        });
    }
    Ok(out)
}

fn linear_predictor(gamma: &[f64], w: &[f64]) -> f64 {
    gamma.iter().zip(w).map(|(g, x)| g * x).sum()
}

/// Piecewise event generation: on each interval between visits the hazard
/// is `h_0(s) exp(gamma'w + alpha y_LVCF)`. A draw that falls inside the
/// interval is accepted; otherwise a new draw starts at the next visit.
/// Before the first visit the population mean at time 0 stands in for the
/// biomarker.
pub fn gen_event_landmark<R: Rng>(s: &mut SimSubject, truth: &EventTruth, mean0: f64, horizon: f64, rng: &mut R) {
    let base = linear_predictor(&truth.gamma, &s.baseline);
    let mut start = 0.0;
    let mut value = mean0;
    let mut next_visit = 0;
    // skip a visit at exactly time 0: it only sets the starting value
    while next_visit < s.visits.len() && s.visits[next_visit].0 <= start {
        value = s.visits[next_visit].1;
        next_visit += 1;
    }
    loop {
        let end = s.visits.get(next_visit).map_or(f64::INFINITY, |v| v.0);
        let e: f64 = rng.sample(Exp1);
        let h = truth.hazard.cumulative(start) + e / (base + truth.alpha * value).exp();
        let t = truth.hazard.inverse_cumulative(h);
        if t < end {
            s.event_time = if t <= horizon { t } else { f64::INFINITY };
            s.process = Process::Landmark;
            return;
        }
        if end > horizon {
            s.event_time = f64::INFINITY;
            return;
        }
        start = end;
        value = s.visits[next_visit].1;
        next_visit += 1;
    }
}

/// Inverse-transform sampling from the joint model: solves `H(T) = E` with
/// `E ~ Exp(1)` by bisection to 1e-8 in time. Events past the horizon are
/// left infinite.
pub fn gen_event_joint<R: Rng>(s: &mut SimSubject, model: &JointModel, horizon: f64, rng: &mut R) -> Result<()> {
    let e: f64 = rng.sample(Exp1);
    s.process = Process::Joint;
    s.event_time = invert_cumulative_hazard(model, &s.baseline, &s.b, e, horizon)
        .map_err(|err| DynslError::numerical(MODULE, format!("subject {}: {err}", s.id)))?;
    Ok(())
}

/// Time at which the subject's cumulative hazard reaches `target`, or
/// infinity if that is after `horizon`.
pub fn invert_cumulative_hazard(model: &JointModel, w: &[f64], b: &[f64], target: f64, horizon: f64) -> Result<f64> {
    if model.cumulative_hazard(w, b, 0.0, horizon)? < target {
        return Ok(f64::INFINITY);
    }
    let mut failure = None;
    let root = bisect(
        |s| match model.cumulative_hazard(w, b, 0.0, s) {
            Ok(h) => h - target,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        0.0,
        horizon,
        1e-8,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    root.ok_or_else(|| DynslError::numerical(MODULE, "cumulative hazard inversion did not bracket"))
}

/// Censoring parameters of one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scenario")]
pub enum Censoring {
    None,
    Random { c_max: f64 },
    Informative { intercept: f64, slope: f64 },
}

impl Censoring {
    pub fn scenario(&self) -> Scenario {
        match self {
            Censoring::None => Scenario::None,
            Censoring::Random { .. } => Scenario::Random,
            Censoring::Informative { .. } => Scenario::Informative,
        }
    }
}

/// Uniform draws behind a subject's censoring, kept fixed while the
/// calibrated parameter varies.
#[derive(Debug, Clone)]
pub(crate) struct CensoringDraws {
    pub uniform: f64,
    pub visits: Vec<f64>,
}

impl CensoringDraws {
    pub fn draw<R: Rng>(s: &SimSubject, rng: &mut R) -> Self {
        Self {
            uniform: rng.random(),
            visits: s.visits.iter().map(|_| rng.random()).collect(),
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn censor_time(
    s: &SimSubject,
    draws: &CensoringDraws,
    censoring: &Censoring,
    covariates: &[f64],
) -> Option<f64> {
    match *censoring {
        Censoring::None => None,
        Censoring::Random { c_max } => Some(c_max * draws.uniform),
        Censoring::Informative { intercept, slope } => {
            let base = intercept + linear_predictor(covariates, &s.baseline);
            s.visits
                .iter()
                .zip(&draws.visits)
                .filter(|((time, _), _)| *time > 0.0 && *time < s.event_time)
                .find(|((_, y), &u)| u < logistic(base + slope * y))
                .map(|((time, _), _)| *time)
        }
    }
}

/// Draws censoring times for every subject.
pub fn apply_censoring<R: Rng>(subjects: &mut [SimSubject], censoring: &Censoring, covariates: &[f64], rng: &mut R) {
    for s in subjects.iter_mut() {
        let draws = CensoringDraws::draw(s, rng);
        s.censor_time = censor_time(s, &draws, censoring, covariates);
    }
}

/// Fraction of the subjects at risk at `t` whose censoring falls in `(t, u]`.
pub fn in_window_censoring(subjects: &[SimSubject], window: &PredictionWindow, horizon: f64) -> f64 {
    let mut at_risk = 0usize;
    let mut censored = 0usize;
    for s in subjects {
        let (time, event) = s.observed(horizon);
        if time > window.t {
            at_risk += 1;
            if !event && time <= window.u {
                censored += 1;
            }
        }
    }
    if at_risk == 0 {
        0.0
    } else {
        censored as f64 / at_risk as f64
    }
}

/// Observed-data view: measurements after the observed time are removed.
pub fn to_dataset(subjects: &[SimSubject], covariate_names: Vec<String>, horizon: f64) -> Result<Dataset> {
    let mut records = Vec::with_capacity(subjects.len());
    let mut measurements = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let (time, event) = s.observed(horizon);
        records.push(SubjectRecord {
            id: s.id.clone(),
            baseline: s.baseline.clone(),
            observed_time: time,
            event,
        });
        measurements.extend(s.visits.iter().filter(|v| v.0 <= time).map(|&(t, y)| Measurement {
            subject: i,
            biomarker: 0,
            time: t,
            value: y,
        }));
    }
    Dataset::new(covariate_names, vec!["y".into()], records, measurements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::adaptive_simpson;
    use crate::simulate::{BaselineHazard, LongitudinalTruth, MeasurementLaw};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet_config() -> SimConfig {
        SimConfig {
            measurements: MeasurementLaw {
                span: 10.0,
                count: 0,
                baseline_visit: false,
            },
            horizon: 1e9,
            ..SimConfig::default()
        }
    }

    fn exponential(rate: f64, gamma: Vec<f64>, alpha: f64) -> EventTruth {
        EventTruth {
            gamma,
            alpha,
            hazard: BaselineHazard::Exponential { rate },
        }
    }

    #[test]
    fn no_variance_means_population_line() {
        let config = SimConfig {
            lmm_truth: LongitudinalTruth {
                beta: [1.0, -0.2],
                d: [[0.0; 2]; 2],
                sigma2: 0.0,
            },
            ..SimConfig::default()
        };
        let subjects = gen_longitudinal(&config, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &subjects {
            assert_eq!(s.b, [0.0, 0.0]);
            for &(t, y) in &s.visits {
                assert_eq!(y, 1.0 - 0.2 * t);
            }
        }
    }

    #[test]
    fn non_psd_covariance_is_config_error() {
        let config = SimConfig {
            lmm_truth: LongitudinalTruth {
                beta: [0.0, 0.0],
                d: [[1.0, 2.0], [2.0, 1.0]],
                sigma2: 0.1,
            },
            ..SimConfig::default()
        };
        let err = gen_longitudinal(&config, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, DynslError::Config { .. }));
    }

    #[test]
    fn random_intercept_variance_matches() {
        let config = SimConfig::default();
        let subjects = gen_longitudinal(&config, 10_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b0: Vec<f64> = subjects.iter().map(|s| s.b[0]).collect();
        let mean = b0.iter().sum::<f64>() / b0.len() as f64;
        let var = b0.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (b0.len() - 1) as f64;
        assert!((var / config.lmm_truth.d[0][0] - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn visit_times_are_uniform() {
        let config = SimConfig {
            measurements: MeasurementLaw {
                span: 10.0,
                count: 5,
                baseline_visit: false,
            },
            ..SimConfig::default()
        };
        let subjects = gen_longitudinal(&config, 10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut times: Vec<f64> = subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(|v| v.0 / 10.0))
            .collect();
        assert_eq!(times.len(), 50_000);
        times.sort_by(f64::total_cmp);
        let n = times.len() as f64;
        let ks = times
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    fn mean_event_time(mut subjects: Vec<SimSubject>, f: impl Fn(&mut SimSubject, &mut ChaCha8Rng)) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in subjects.iter_mut() {
            f(s, &mut rng);
        }
        subjects.iter().map(|s| s.event_time).sum::<f64>() / subjects.len() as f64
    }

    #[test]
    fn landmark_generator_without_covariates_is_exponential() {
        let config = quiet_config();
        let subjects = gen_longitudinal(&config, 20_000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let truth = exponential(0.5, vec![0.0, 0.0], 0.0);
        let mean = mean_event_time(subjects, |s, rng| gen_event_landmark(s, &truth, 0.0, 1e9, rng));
        assert!((mean * 0.5 - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn doubling_the_hazard_halves_event_times() {
        let config = quiet_config();
        let subjects = gen_longitudinal(&config, 200, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for s in &subjects {
            let mut a = s.clone();
            let mut b = s.clone();
            a.baseline = vec![0.0, 0.0];
            b.baseline = vec![1.0, 0.0];
            let truth = exponential(0.1, vec![2f64.ln(), 0.0], 0.0);
            gen_event_landmark(&mut a, &truth, 0.0, 1e9, &mut ChaCha8Rng::seed_from_u64(7));
            gen_event_landmark(&mut b, &truth, 0.0, 1e9, &mut ChaCha8Rng::seed_from_u64(7));
            assert!((b.event_time * 2.0 - a.event_time).abs() < 1e-12 * a.event_time);
        }
    }

    #[test]
    fn observed_data_is_consistent_and_truncated() {
        let config = SimConfig::default();
        let mut subjects = gen_longitudinal(&config, 400, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let truth = config.landmark_events.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in subjects.iter_mut() {
            gen_event_landmark(s, &truth, 0.0, config.horizon, &mut rng);
        }
        apply_censoring(&mut subjects, &Censoring::Random { c_max: 15.0 }, &[0.0, 0.0], &mut rng);
        let data = to_dataset(&subjects, config.covariate_names(), config.horizon).unwrap();
        for (i, s) in subjects.iter().enumerate() {
            let c = s.censor_time.unwrap().min(config.horizon);
            assert_eq!(data.time(i), s.event_time.min(c));
            assert_eq!(data.event(i), s.event_time <= c);
            assert!(data.history(i, 0).iter().all(|m| m.time <= data.time(i)));
        }
    }

    #[test]
    fn joint_generator_without_association_is_exponential() {
        let mut config = quiet_config();
        config.joint_events = exponential(0.5, vec![0.0, 0.0], 0.0);
        let model = config.joint_model().unwrap();
        let subjects = gen_longitudinal(&config, 20_000, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let mean = mean_event_time(subjects, |s, rng| gen_event_joint(s, &model, 1e4, rng).unwrap());
        assert!((mean * 0.5 - 1.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn cumulative_hazard_closed_form_and_inversion() {
        let config = SimConfig::default();
        let model = config.joint_model().unwrap();
        let w = [1.0, -0.4];
        let b = [0.3, 0.02];
        // closed form agrees with quadrature of the hazard
        let closed = model.cumulative_hazard(&w, &b, 0.0, 9.0).unwrap();
        let quad = adaptive_simpson(|s| model.hazard_at(&w, &b, s), 0.0, 9.0, 1e-10).unwrap();
        assert!((closed / quad - 1.0).abs() < 1e-8);
        // H(s) = scale (exp(k s) - 1) / k
        let k = model.alpha * (config.lmm_truth.beta[1] + b[1]);
        let scale = 0.02 * (0.5 * w[0] + 0.3 * w[1] + model.alpha * (config.lmm_truth.beta[0] + b[0])).exp();
        for target in [0.01, 0.3, 1.0, 4.0] {
            let root = invert_cumulative_hazard(&model, &w, &b, target, 100.0).unwrap();
            let exact = (1.0 + k * target / scale).ln() / k;
            assert!((root - exact).abs() < 1e-6, "{root} vs {exact}");
        }
    }

    #[test]
    fn stronger_association_gives_earlier_events() {
        let median = |alpha: f64| {
            let mut config = SimConfig::default();
            config.joint_events.alpha = alpha;
            let model = config.joint_model().unwrap();
            let mut subjects = gen_longitudinal(&config, 5000, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for s in subjects.iter_mut() {
                gen_event_joint(s, &model, config.horizon, &mut rng).unwrap();
            }
            let mut t: Vec<f64> = subjects.iter().map(|s| s.event_time).collect();
            t.sort_by(f64::total_cmp);
            t[t.len() / 2]
        };
        assert!(median(1.2) < median(0.8));
    }

    #[test]
    fn no_censoring_leaves_data_identical() {
        let config = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut subjects = gen_longitudinal(&config, 100, &mut rng).unwrap();
        for s in subjects.iter_mut() {
            gen_event_landmark(s, &config.landmark_events, 0.0, config.horizon, &mut rng);
        }
        let before = to_dataset(&subjects, config.covariate_names(), config.horizon).unwrap();
        apply_censoring(&mut subjects, &Censoring::None, &[0.0, 0.0], &mut rng);
        let after = to_dataset(&subjects, config.covariate_names(), config.horizon).unwrap();
        assert_eq!(before, after);
        assert!((0..after.n()).all(|i| after.event(i)));
    }

    #[test]
    fn positive_slope_censors_high_biomarker_subjects() {
        let config = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut subjects = gen_longitudinal(&config, 4000, &mut rng).unwrap();
        for s in subjects.iter_mut() {
            gen_event_landmark(s, &config.landmark_events, 0.0, config.horizon, &mut rng);
        }
        let censoring = Censoring::Informative {
            intercept: -4.0,
            slope: 1.5,
        };
        apply_censoring(&mut subjects, &censoring, &[0.0, 0.0], &mut rng);
        let data = to_dataset(&subjects, config.covariate_names(), config.horizon).unwrap();
        let (mut cen, mut unc) = (Vec::new(), Vec::new());
        for i in 0..data.n() {
            let Some(last) = data.history(i, 0).last() else {
                continue;
            };
            if data.event(i) {
                unc.push(last.value)
            } else {
                cen.push(last.value)
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(cen.len() > 100);
        assert!(mean(&cen) > mean(&unc));
    }
}
