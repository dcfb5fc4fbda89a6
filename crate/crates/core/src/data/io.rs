use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Measurement, SubjectRecord};
use crate::error::{DynslError, Result};

/// Column-name mapping for the two input files.
///
/// The baseline file has one row per subject; every column not named here is
/// treated as a numeric baseline covariate unless `covariates` lists them
/// explicitly. The longitudinal file is in long format, one row per
/// measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub id: String,
    pub event_time: String,
    pub event: String,
    pub covariates: Option<Vec<String>>,
    pub long_id: String,
    pub biomarker: String,
    pub time: String,
    pub value: String,
    /// Fixes the biomarker order; defaults to order of first appearance.
    pub biomarkers: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            event_time: "event_time".into(),
            event: "event".into(),
            covariates: None,
            long_id: "id".into(),
            biomarker: "biomarker".into(),
            time: "time".into(),
            value: "value".into(),
            biomarkers: None,
        }
    }
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DynslError::io(path.display().to_string(), io),
            other => DynslError::Serialization(format!("{other:?}")),
        })
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DynslError::Schema {
            file: file.to_string(),
            column: name.to_string(),
        })
}

fn parse_f64(field: &str, file: &str, row: usize, what: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| DynslError::Parse {
        file: file.to_string(),
        row,
        message: format!("{what} `{field}` is not a number"),
    })
}

fn parse_event(field: &str, file: &str, row: usize) -> Result<bool> {
    match field {
        "1" | "1.0" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "0.0" | "false" | "FALSE" | "False" => Ok(false),
        _ => Err(DynslError::Parse {
            file: file.to_string(),
            row,
            message: format!("event indicator `{field}` must be 0/1 or true/false"),
        }),
    }
}

/// Reads a dataset from a baseline file and a long-format measurement file.
///
/// Row numbers in errors are file line numbers (the header is line 1).
pub fn load_dataset(
    baseline_path: impl AsRef<Path>,
    longitudinal_path: impl AsRef<Path>,
    schema: &Schema,
) -> Result<Dataset> {
    let baseline_path = baseline_path.as_ref();
    let long_path = longitudinal_path.as_ref();
    let bfile = baseline_path.display().to_string();
    let lfile = long_path.display().to_string();

    let mut reader = open(baseline_path)?;
    let headers = reader
        .headers()
        .map_err(|e| DynslError::Serialization(e.to_string()))?
        .clone();
    let id_col = column(&headers, &schema.id, &bfile)?;
    let time_col = column(&headers, &schema.event_time, &bfile)?;
    let event_col = column(&headers, &schema.event, &bfile)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col && *i != time_col && *i != event_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let cov_cols = covariate_names
        .iter()
        .map(|c| column(&headers, c, &bfile))
        .collect::<Result<Vec<_>>>()?;

    let mut subjects = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| DynslError::Parse {
            file: bfile.clone(),
            row,
            message: e.to_string(),
        })?;
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DynslError::Parse {
                file: bfile.clone(),
                row,
                message: "empty subject id".into(),
            });
        }
        let observed_time = parse_f64(record.get(time_col).unwrap_or(""), &bfile, row, "event time")?;
        if !observed_time.is_finite() || observed_time < 0.0 {
            return Err(DynslError::Parse {
                file: bfile.clone(),
                row,
                message: format!("event time {observed_time} must be finite and nonnegative"),
            });
        }
        let event = parse_event(record.get(event_col).unwrap_or(""), &bfile, row)?;
        let baseline = cov_cols
            .iter()
            .map(|&c| {
                let f = record.get(c).unwrap_or("");
                if f.is_empty() {
                    Ok(f64::NAN)
                } else {
                    parse_f64(f, &bfile, row, "covariate")
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if index_of.insert(id.clone(), subjects.len()).is_some() {
            return Err(DynslError::Referential {
                file: bfile.clone(),
                row,
                message: format!("duplicate subject id {id}"),
            });
        }
        subjects.push(SubjectRecord {
            id,
            baseline,
            observed_time,
            event,
        });
    }

    let mut reader = open(long_path)?;
    let headers = reader
        .headers()
        .map_err(|e| DynslError::Serialization(e.to_string()))?
        .clone();
    let lid = column(&headers, &schema.long_id, &lfile)?;
    let lbm = column(&headers, &schema.biomarker, &lfile)?;
    let ltime = column(&headers, &schema.time, &lfile)?;
    let lval = column(&headers, &schema.value, &lfile)?;
    let mut biomarker_names: Vec<String> = schema.biomarkers.clone().unwrap_or_default();
    let fixed_biomarkers = schema.biomarkers.is_some();
    let mut measurements = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| DynslError::Parse {
            file: lfile.clone(),
            row,
            message: e.to_string(),
        })?;
        let id = record.get(lid).unwrap_or("");
        let subject = *index_of.get(id).ok_or_else(|| DynslError::Referential {
            file: lfile.clone(),
            row,
            message: format!("measurement for unknown subject `{id}`"),
        })?;
        let name = record.get(lbm).unwrap_or("");
        let biomarker = match biomarker_names.iter().position(|b| b == name) {
            Some(b) => b,
            None if fixed_biomarkers => {
                return Err(DynslError::Referential {
                    file: lfile.clone(),
                    row,
                    message: format!("biomarker `{name}` not listed in the schema"),
                })
            }
            None => {
                biomarker_names.push(name.to_string());
                biomarker_names.len() - 1
            }
        };
        let time = parse_f64(record.get(ltime).unwrap_or(""), &lfile, row, "time")?;
        let value_field = record.get(lval).unwrap_or("");
        if value_field.is_empty() {
            // missing measurement
            continue;
        }
        let value = parse_f64(value_field, &lfile, row, "value")?;
        if time > subjects[subject].observed_time {
            return Err(DynslError::Referential {
                file: lfile.clone(),
                row,
                message: format!(
                    "measurement at time {time} is after subject {id}'s observed time {}",
                    subjects[subject].observed_time
                ),
            });
        }
        measurements.push(Measurement {
            subject,
            biomarker,
            time,
            value,
        });
    }
    Dataset::new(covariate_names, biomarker_names, subjects, measurements)
}

/// Writes a dataset in the format read by [`load_dataset`] with the default
/// [`Schema`]. Values are written in shortest round-trip form.
pub fn write_dataset(
    data: &Dataset,
    baseline_path: impl AsRef<Path>,
    longitudinal_path: impl AsRef<Path>,
) -> Result<()> {
    let bpath = baseline_path.as_ref();
    let lpath = longitudinal_path.as_ref();
    let to_err = |path: &Path, e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => DynslError::io(path.display().to_string(), io),
        other => DynslError::Serialization(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(bpath).map_err(|e| to_err(bpath, e))?;
    let mut header = vec!["id".to_string(), "event_time".into(), "event".into()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header).map_err(|e| to_err(bpath, e))?;
    for s in data.subjects() {
        let mut row = vec![
            s.id.clone(),
            s.observed_time.to_string(),
            if s.event { "1".into() } else { "0".into() },
        ];
        row.extend(
            s.baseline
                .iter()
                .map(|x| if x.is_nan() { String::new() } else { x.to_string() }),
        );
        w.write_record(&row).map_err(|e| to_err(bpath, e))?;
    }
    w.flush().map_err(|e| DynslError::io(bpath.display().to_string(), e))?;

    let mut w = csv::Writer::from_path(lpath).map_err(|e| to_err(lpath, e))?;
    w.write_record(["id", "biomarker", "time", "value"])
        .map_err(|e| to_err(lpath, e))?;
    for m in data.measurements() {
        w.write_record([
            data.subject(m.subject).id.as_str(),
            data.biomarker_names()[m.biomarker].as_str(),
            &m.time.to_string(),
            &m.value.to_string(),
        ])
        .map_err(|e| to_err(lpath, e))?;
    }
    w.flush().map_err(|e| DynslError::io(lpath.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_toy_files() {
        let dir = tempfile::tempdir().unwrap();
        let b = write(dir.path(), "b.csv", "id,event_time,event,age\na,5,1,50\nb,8,0,\n");
        let l = write(
            dir.path(),
            "l.csv",
            "id,biomarker,time,value\nb,tb,2,1.5\na,tb,1,0.5\na,tb,0,0.25\nb,tb,3,\n",
        );
        let d = load_dataset(&b, &l, &Schema::default()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.n_biomarkers(), 1);
        assert_eq!(d.covariate_names(), &["age".to_string()]);
        assert!(d.subject(1).baseline[0].is_nan());
        assert_eq!(d.history(0, 0).len(), 2);
        assert_eq!(d.history(0, 0)[0].time, 0.0);
        assert_eq!(d.history(1, 0).len(), 1);
    }

    #[test]
    fn measurement_after_event_is_referential_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = write(dir.path(), "b.csv", "id,event_time,event\na,5,1\n");
        let l = write(dir.path(), "l.csv", "id,biomarker,time,value\na,tb,1,1\na,tb,7,2\n");
        let err = load_dataset(&b, &l, &Schema::default()).unwrap_err();
        match err {
            DynslError::Referential { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let b = write(dir.path(), "b.csv", "id,time,event\na,5,1\n");
        let l = write(dir.path(), "l.csv", "id,biomarker,time,value\n");
        let err = load_dataset(&b, &l, &Schema::default()).unwrap_err();
        match err {
            DynslError::Schema { column, .. } => assert_eq!(column, "event_time"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_value_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let b = write(dir.path(), "b.csv", "id,event_time,event\na,5,1\n");
        let l = write(dir.path(), "l.csv", "id,biomarker,time,value\na,tb,1,1\na,tb,2,x\n");
        let err = load_dataset(&b, &l, &Schema::default()).unwrap_err();
        assert!(matches!(err, DynslError::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_subject_is_referential_error() {
        let dir = tempfile::tempdir().unwrap();
        let b = write(dir.path(), "b.csv", "id,event_time,event\na,5,1\n");
        let l = write(dir.path(), "l.csv", "id,biomarker,time,value\nz,tb,1,1\n");
        let err = load_dataset(&b, &l, &Schema::default()).unwrap_err();
        assert!(matches!(err, DynslError::Referential { row: 2, .. }), "{err}");
    }
}
