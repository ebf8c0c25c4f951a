use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};

/// One patient: static discrete indices, static continuous values, and an `S×τ`
/// time series with its measured mask. Unmeasured cells hold `NaN` until
/// interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub discrete: Vec<usize>,
    pub continuous: Vec<f64>,
    pub timeseries: Vec<Vec<f64>>,
    pub measured: Vec<Vec<bool>>,
    pub label: Option<usize>,
}

impl PatientRecord {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let invalid = |field: &str, message: String| Error::Validation {
            record: self.id.clone(),
            field: field.to_string(),
            message,
        };
        if self.discrete.len() != schema.discrete_features.len() {
            return Err(invalid(
                "discrete",
                format!(
                    "expected {} values, found {}",
                    schema.discrete_features.len(),
                    self.discrete.len()
                ),
            ));
        }
        for (v, f) in self.discrete.iter().zip(&schema.discrete_features) {
            if *v >= f.vocab_size {
                return Err(invalid(
                    &f.name,
                    format!("value {v} outside [0, {})", f.vocab_size),
                ));
            }
        }
        if self.continuous.len() != schema.continuous_features.len() {
            return Err(invalid(
                "continuous",
                format!(
                    "expected {} values, found {}",
                    schema.continuous_features.len(),
                    self.continuous.len()
                ),
            ));
        }
        for (v, f) in self.continuous.iter().zip(&schema.continuous_features) {
            if !v.is_finite() {
                return Err(invalid(&f.name, "non-finite value".into()));
            }
        }
        let s = schema.num_series();
        if self.timeseries.len() != s || self.measured.len() != s {
            return Err(invalid(
                "timeseries",
                format!("expected {s} series and masks"),
            ));
        }
        for (i, f) in schema.timeseries_features.iter().enumerate() {
            if self.timeseries[i].len() != schema.series_length
                || self.measured[i].len() != schema.series_length
            {
                return Err(invalid(
                    &f.name,
                    format!("series length differs from {}", schema.series_length),
                ));
            }
            for (v, m) in self.timeseries[i].iter().zip(&self.measured[i]) {
                if *m && !v.is_finite() {
                    return Err(invalid(&f.name, "measured cell is not finite".into()));
                }
            }
        }
        if let Some(label) = self.label {
            if label >= schema.num_classes {
                return Err(invalid(
                    "label",
                    format!("class {label} outside [0, {})", schema.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// True when every time-series cell holds a finite value.
    pub fn is_interpolated(&self) -> bool {
        self.timeseries.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File {
        schema_path: PathBuf,
        records_path: PathBuf,
    },
    Generator {
        seed: u64,
        n: usize,
        preset: String,
    },
    Derived,
}

/// A validated collection of records sharing one schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub records: Vec<PatientRecord>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn new(
        schema: FeatureSchema,
        records: Vec<PatientRecord>,
        provenance: Provenance,
    ) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for r in &records {
            r.validate(&schema)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation {
                    record: r.id.clone(),
                    field: "id".into(),
                    message: "duplicate id".into(),
                });
            }
        }
        Ok(Self {
            schema,
            records,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn index_of(&self) -> std::collections::HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Replaces labels; features are untouched.
    pub fn with_labels(&self, labels: &[Option<usize>]) -> Result<Self> {
        let mut out = self.clone();
        for (r, l) in out.records.iter_mut().zip(labels) {
            r.label = *l;
        }
        Cohort::new(out.schema, out.records, out.provenance)
    }
}
