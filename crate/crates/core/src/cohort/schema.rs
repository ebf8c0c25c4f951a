use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFeature {
    pub name: String,
    pub vocab_size: usize,
    pub is_medical: bool,
    /// Ordinal tolerance used by margin accuracy.
    pub margin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeature {
    pub name: String,
    pub is_medical: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    ContinuousMeasurement,
    BinaryTreatment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesFeature {
    pub name: String,
    pub kind: SeriesKind,
}

/// Declares the feature blocks every record of a cohort carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub discrete_features: Vec<DiscreteFeature>,
    pub continuous_features: Vec<ContinuousFeature>,
    pub timeseries_features: Vec<TimeseriesFeature>,
    /// Hours per series.
    pub series_length: usize,
    pub num_classes: usize,
    pub task_name: String,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let all_names = self
            .discrete_features
            .iter()
            .map(|f| &f.name)
            .chain(self.continuous_features.iter().map(|f| &f.name))
            .chain(self.timeseries_features.iter().map(|f| &f.name));
        for name in all_names {
            if !names.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name '{name}'")));
            }
        }
        for f in &self.discrete_features {
            if f.vocab_size < 2 {
                return Err(Error::Schema(format!(
                    "feature '{}' has vocab_size {} < 2",
                    f.name, f.vocab_size
                )));
            }
            if f.margin >= f.vocab_size {
                return Err(Error::Schema(format!(
                    "feature '{}' margin {} must be below vocab_size {}",
                    f.name, f.margin, f.vocab_size
                )));
            }
        }
        if self.series_length < 1 {
            return Err(Error::Schema("series_length must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Schema("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn num_series(&self) -> usize {
        self.timeseries_features.len()
    }

    pub fn has_timeseries(&self) -> bool {
        !self.timeseries_features.is_empty()
    }

    pub fn discrete_index(&self, name: &str) -> Option<usize> {
        self.discrete_features.iter().position(|f| f.name == name)
    }

    pub fn continuous_index(&self, name: &str) -> Option<usize> {
        self.continuous_features.iter().position(|f| f.name == name)
    }

    pub fn measurement_indices(&self) -> Vec<usize> {
        self.series_indices(SeriesKind::ContinuousMeasurement)
    }

    pub fn treatment_indices(&self) -> Vec<usize> {
        self.series_indices(SeriesKind::BinaryTreatment)
    }

    fn series_indices(&self, kind: SeriesKind) -> Vec<usize> {
        self.timeseries_features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
            timeseries_features: vec![],
            series_length: 1,
            num_classes: 3,
            task_name: "dx".into(),
        }
    }

    #[test]
    fn valid_schema_passes() {
        schema().validate().unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = schema();
        s.continuous_features[0].name = "apoe4".into();
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn margin_must_be_below_vocab() {
        let mut s = schema();
        s.discrete_features[0].margin = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn kinds_serialize_snake_case() {
        let json = serde_json::to_string(&SeriesKind::BinaryTreatment).unwrap();
        assert_eq!(json, "\"binary_treatment\"");
    }
}
