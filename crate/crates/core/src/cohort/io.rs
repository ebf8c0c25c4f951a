//! Schema (JSON) and records (JSON Lines) files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{Cohort, PatientRecord, Provenance};
use super::schema::FeatureSchema;
use crate::error::{Error, Result};

/// On-disk form of a record. Unmeasured series cells are written as `null`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    discrete: Vec<usize>,
    continuous: Vec<f64>,
    timeseries: Vec<Vec<Option<f64>>>,
    measured: Vec<Vec<u8>>,
    label: Option<usize>,
}

impl RecordLine {
    fn from_record(r: &PatientRecord) -> Self {
        let timeseries = r
            .timeseries
            .iter()
            .zip(&r.measured)
            .map(|(vals, meas)| {
                vals.iter()
                    .zip(meas)
                    .map(|(&v, &m)| m.then_some(v))
                    .collect()
            })
            .collect();
        Self {
            id: r.id.clone(),
            discrete: r.discrete.clone(),
            continuous: r.continuous.clone(),
            timeseries,
            measured: r
                .measured
                .iter()
                .map(|row| row.iter().map(|&m| u8::from(m)).collect())
                .collect(),
            label: r.label,
        }
    }

    fn into_record(self, line: usize, schema: &FeatureSchema) -> Result<PatientRecord> {
        let parse = |message: String| Error::Parse { line, message };
        if self.timeseries.len() != schema.num_series() || self.measured.len() != schema.num_series()
        {
            return Err(parse(format!(
                "record '{}': expected {} series, found {} values / {} masks",
                self.id,
                schema.num_series(),
                self.timeseries.len(),
                self.measured.len()
            )));
        }
        let tau = schema.series_length;
        let mut timeseries = Vec::with_capacity(self.timeseries.len());
        let mut measured = Vec::with_capacity(self.measured.len());
        for (s, (vals, meas)) in self.timeseries.into_iter().zip(self.measured).enumerate() {
            if vals.len() != tau || meas.len() != tau {
                return Err(parse(format!(
                    "record '{}': series {s} has length {} (mask {}) but series_length is {tau}",
                    self.id,
                    vals.len(),
                    meas.len()
                )));
            }
            let mut row = Vec::with_capacity(tau);
            let mut mrow = Vec::with_capacity(tau);
            for (h, (v, m)) in vals.into_iter().zip(meas).enumerate() {
                let m = match m {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(parse(format!(
                            "record '{}': measured[{s}][{h}] = {other}, expected 0 or 1",
                            self.id
                        )))
                    }
                };
                let v = match (v, m) {
                    (Some(v), true) => v,
                    (None, true) => {
                        return Err(parse(format!(
                            "record '{}': measured cell [{s}][{h}] has no value",
                            self.id
                        )))
                    }
                    (_, false) => f64::NAN,
                };
                row.push(v);
                mrow.push(m);
            }
            timeseries.push(row);
            measured.push(mrow);
        }
        Ok(PatientRecord {
            id: self.id,
            discrete: self.discrete,
            continuous: self.continuous,
            timeseries,
            measured,
            label: self.label,
        })
    }
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path)?;
    let schema: FeatureSchema = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    schema.validate()?;
    Ok(schema)
}

pub fn load_cohort(schema_path: &Path, records_path: &Path) -> Result<Cohort> {
    let schema = read_schema(schema_path)?;
    let reader = BufReader::new(fs::File::open(records_path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(parsed.into_record(line_no, &schema)?);
    }
    Cohort::new(
        schema,
        records,
        Provenance::File {
            schema_path: schema_path.to_path_buf(),
            records_path: records_path.to_path_buf(),
        },
    )
}

pub fn write_schema(schema: &FeatureSchema, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(schema)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_records(records: &[PatientRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &RecordLine::from_record(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, schema_path: &Path, records_path: &Path) -> Result<()> {
    write_schema(&cohort.schema, schema_path)?;
    write_records(&cohort.records, records_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::schema::{ContinuousFeature, DiscreteFeature, SeriesKind, TimeseriesFeature};

    fn schema() -> FeatureSchema {
        FeatureSchema {
            discrete_features: vec![DiscreteFeature {
                name: "apoe4".into(),
                vocab_size: 3,
                is_medical: true,
                margin: 0,
            }],
            continuous_features: vec![ContinuousFeature {
                name: "fdg".into(),
                is_medical: true,
            }],
            timeseries_features: vec![TimeseriesFeature {
                name: "hr".into(),
                kind: SeriesKind::ContinuousMeasurement,
            }],
            series_length: 3,
            num_classes: 2,
            task_name: "t".into(),
        }
    }

    const FIXTURE: &str = r#"{"id":"a","discrete":[0],"continuous":[0.5],"timeseries":[[1.0,null,3.0]],"measured":[[1,0,1]],"label":0}
{"id":"b","discrete":[2],"continuous":[0.1],"timeseries":[[2.0,2.0,2.0]],"measured":[[1,1,1]],"label":1}
{"id":"c","discrete":[1],"continuous":[0.9],"timeseries":[[null,null,5.0]],"measured":[[0,0,1]],"label":null}
"#;

    fn write_fixture(dir: &Path, records: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let sp = dir.join("schema.json");
        let rp = dir.join("records.jsonl");
        write_schema(&schema(), &sp).unwrap();
        fs::write(&rp, records).unwrap();
        (sp, rp)
    }

    #[test]
    fn loads_three_record_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, rp) = write_fixture(dir.path(), FIXTURE);
        let c = load_cohort(&sp, &rp).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.records[0].timeseries[0][1].is_nan());
        assert!(!c.records[0].measured[0][1]);
        assert_eq!(c.records[2].label, None);

        let rp2 = dir.path().join("again.jsonl");
        write_records(&c.records, &rp2).unwrap();
        assert_eq!(fs::read_to_string(&rp2).unwrap(), FIXTURE);
    }

    #[test]
    fn discrete_at_vocab_size_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = FIXTURE.replacen("\"discrete\":[2]", "\"discrete\":[3]", 1);
        let (sp, rp) = write_fixture(dir.path(), &bad);
        match load_cohort(&sp, &rp) {
            Err(Error::Validation { record, field, .. }) => {
                assert_eq!(record, "b");
                assert_eq!(field, "apoe4");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn series_length_mismatch_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = FIXTURE.replacen("[[2.0,2.0,2.0]],\"measured\":[[1,1,1]]", "[[2.0,2.0]],\"measured\":[[1,1]]", 1);
        let (sp, rp) = write_fixture(dir.path(), &bad);
        assert!(matches!(load_cohort(&sp, &rp), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let bad = format!("{FIXTURE}{{\"id\": oops}}\n");
        let (sp, rp) = write_fixture(dir.path(), &bad);
        assert!(matches!(load_cohort(&sp, &rp), Err(Error::Parse { line: 4, .. })));
    }
}
