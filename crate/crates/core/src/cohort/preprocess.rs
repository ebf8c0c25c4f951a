use std::collections::HashSet;

use super::record::{Cohort, PatientRecord};
use super::schema::{FeatureSchema, SeriesKind};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessWarnings {
    pub messages: Vec<String>,
}

impl PreprocessWarnings {
    fn push(&mut self, msg: String) {
        self.messages.push(msg);
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Fills unmeasured cells of one record. Interior gaps are interpolated linearly between
/// the nearest measured neighbours, edge gaps take the nearest measured value, and
/// binary treatments are set to 0 where unmeasured. A measurement feature with no
/// measured cell is filled with `fallback_means[s]`.
pub fn interpolate_timeseries(
    record: &PatientRecord,
    schema: &FeatureSchema,
    fallback_means: &[f64],
    warnings: &mut PreprocessWarnings,
) -> PatientRecord {
    let mut out = record.clone();
    for (s, feature) in schema.timeseries_features.iter().enumerate() {
        let series = &mut out.timeseries[s];
        let measured = &record.measured[s];
        if feature.kind == SeriesKind::BinaryTreatment {
            for (v, &m) in series.iter_mut().zip(measured) {
                if !m {
                    *v = 0.0;
                }
            }
            continue;
        }
        let points: Vec<usize> = (0..series.len()).filter(|&h| measured[h]).collect();
        if points.is_empty() {
            let fill = fallback_means.get(s).copied().unwrap_or(0.0);
            warnings.push(format!(
                "record '{}': feature '{}' has no measured values, filled with cohort mean {fill}",
                record.id, feature.name
            ));
            series.iter_mut().for_each(|v| *v = fill);
            continue;
        }
        let first = points[0];
        let last = *points.last().unwrap();
        for h in 0..first {
            series[h] = series[first];
        }
        for h in last + 1..series.len() {
            series[h] = series[last];
        }
        for pair in points.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (vlo, vhi) = (series[lo], series[hi]);
            for h in lo + 1..hi {
                let t = (h - lo) as f64 / (hi - lo) as f64;
                series[h] = vlo + t * (vhi - vlo);
            }
        }
    }
    out
}

/// Mean of measured values per time-series feature across the cohort.
pub fn measured_feature_means(cohort: &Cohort) -> Vec<f64> {
    (0..cohort.schema.num_series())
        .map(|s| {
            let (sum, n) = cohort
                .records
                .iter()
                .flat_map(|r| r.timeseries[s].iter().zip(&r.measured[s]))
                .filter(|(_, &m)| m)
                .fold((0.0, 0usize), |(acc, n), (v, _)| (acc + v, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// Interpolates every record of the cohort in place.
pub fn interpolate_cohort(cohort: &mut Cohort) -> PreprocessWarnings {
    let means = measured_feature_means(cohort);
    let mut warnings = PreprocessWarnings::default();
    let schema = cohort.schema.clone();
    for r in cohort.records.iter_mut() {
        *r = interpolate_timeseries(r, &schema, &means, &mut warnings);
    }
    warnings
}

/// Per-feature min/max of static continuous features, fitted on training records.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// Number of records read while fitting.
    pub fitted_on: usize,
    pub warnings: PreprocessWarnings,
}

impl NormStats {
    pub fn fit<'a>(
        schema: &FeatureSchema,
        records: impl IntoIterator<Item = &'a PatientRecord>,
    ) -> Self {
        let c = schema.continuous_features.len();
        let mut mins = vec![f64::INFINITY; c];
        let mut maxs = vec![f64::NEG_INFINITY; c];
        let mut fitted_on = 0;
        for r in records {
            fitted_on += 1;
            for (k, &v) in r.continuous.iter().enumerate() {
                mins[k] = mins[k].min(v);
                maxs[k] = maxs[k].max(v);
            }
        }
        let mut warnings = PreprocessWarnings::default();
        for (k, f) in schema.continuous_features.iter().enumerate() {
            if !(maxs[k] > mins[k]) {
                warnings.push(format!(
                    "continuous feature '{}' is constant on the training records; set to 0.0",
                    f.name
                ));
            }
        }
        Self {
            mins,
            maxs,
            fitted_on,
            warnings,
        }
    }

    pub fn is_degenerate(&self, feature: usize) -> bool {
        !(self.maxs[feature] > self.mins[feature])
    }

    pub fn transform(&self, feature: usize, x: f64) -> f64 {
        if self.is_degenerate(feature) {
            return 0.0;
        }
        ((x - self.mins[feature]) / (self.maxs[feature] - self.mins[feature])).clamp(0.0, 1.0)
    }

    /// Maps a normalized value back to original units.
    pub fn inverse(&self, feature: usize, x: f64) -> f64 {
        if self.is_degenerate(feature) {
            return self.mins[feature];
        }
        self.mins[feature] + x * (self.maxs[feature] - self.mins[feature])
    }

    /// Original-unit range of a feature (0 when degenerate).
    pub fn span(&self, feature: usize) -> f64 {
        if self.is_degenerate(feature) {
            0.0
        } else {
            self.maxs[feature] - self.mins[feature]
        }
    }
}

/// Min-max normalizes static continuous features with statistics read from the
/// records in `train_ids` only; all records are transformed and clamped to `[0, 1]`.
pub fn normalize_continuous(cohort: &mut Cohort, train_ids: &[String]) -> Result<NormStats> {
    let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let stats = NormStats::fit(
        &cohort.schema,
        cohort.records.iter().filter(|r| train.contains(r.id.as_str())),
    );
    for r in cohort.records.iter_mut() {
        for (k, v) in r.continuous.iter_mut().enumerate() {
            *v = stats.transform(k, *v);
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::record::Provenance;
    use crate::cohort::schema::{ContinuousFeature, TimeseriesFeature};

    fn ts_schema(kind: SeriesKind, tau: usize) -> FeatureSchema {
        FeatureSchema {
            discrete_features: vec![],
            continuous_features: vec![ContinuousFeature {
                name: "x".into(),
                is_medical: true,
            }],
            timeseries_features: vec![TimeseriesFeature {
                name: "f".into(),
                kind,
            }],
            series_length: tau,
            num_classes: 2,
            task_name: "t".into(),
        }
    }

    fn record(values: &[Option<f64>]) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            discrete: vec![],
            continuous: vec![0.0],
            timeseries: vec![values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()],
            measured: vec![values.iter().map(Option::is_some).collect()],
            label: None,
        }
    }

    fn run(rec: &PatientRecord, schema: &FeatureSchema) -> (PatientRecord, PreprocessWarnings) {
        let mut w = PreprocessWarnings::default();
        let out = interpolate_timeseries(rec, schema, &[9.0], &mut w);
        (out, w)
    }

    #[test]
    fn interior_gap_is_linear() {
        let schema = ts_schema(SeriesKind::ContinuousMeasurement, 5);
        let rec = record(&[Some(0.0), None, None, None, Some(4.0)]);
        let (out, _) = run(&rec, &schema);
        assert_eq!(out.timeseries[0], vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out.measured, rec.measured);
    }

    #[test]
    fn fully_measured_is_identity() {
        let schema = ts_schema(SeriesKind::ContinuousMeasurement, 3);
        let rec = record(&[Some(1.5), Some(-2.0), Some(0.25)]);
        let (out, w) = run(&rec, &schema);
        assert_eq!(out, rec);
        assert!(w.is_empty());
    }

    #[test]
    fn single_measurement_extends_to_all_cells() {
        let schema = ts_schema(SeriesKind::ContinuousMeasurement, 24);
        let mut vals = vec![None; 24];
        vals[5] = Some(7.0);
        let (out, _) = run(&record(&vals), &schema);
        assert!(out.timeseries[0].iter().all(|&v| v == 7.0));
    }

    #[test]
    fn empty_measurement_uses_fallback_with_warning() {
        let schema = ts_schema(SeriesKind::ContinuousMeasurement, 3);
        let (out, w) = run(&record(&[None, None, None]), &schema);
        assert_eq!(out.timeseries[0], vec![9.0; 3]);
        assert_eq!(w.messages.len(), 1);
    }

    #[test]
    fn treatments_are_zero_filled() {
        let schema = ts_schema(SeriesKind::BinaryTreatment, 4);
        let (out, _) = run(&record(&[Some(1.0), None, None, Some(1.0)]), &schema);
        assert_eq!(out.timeseries[0], vec![1.0, 0.0, 0.0, 1.0]);
    }

    fn static_cohort(values: &[f64]) -> Cohort {
        let schema = ts_schema(SeriesKind::ContinuousMeasurement, 1);
        let records = values
            .iter()
            .enumerate()
            .map(|(i, &v)| PatientRecord {
                id: format!("p{i}"),
                discrete: vec![],
                continuous: vec![v],
                timeseries: vec![vec![0.0]],
                measured: vec![vec![true]],
                label: None,
            })
            .collect();
        Cohort::new(schema, records, Provenance::Derived).unwrap()
    }

    #[test]
    fn min_max_uses_train_only_and_clamps() {
        let mut c = static_cohort(&[2.0, 4.0, 6.0, 8.0, -1.0]);
        let train: Vec<String> = ["p0", "p1", "p2"].iter().map(|s| s.to_string()).collect();
        let stats = normalize_continuous(&mut c, &train).unwrap();
        let got: Vec<f64> = c.records.iter().map(|r| r.continuous[0]).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0, 1.0, 0.0]);
        assert_eq!(stats.fitted_on, 3);
        assert_eq!(stats.inverse(0, 0.5), 4.0);
    }

    #[test]
    fn constant_feature_maps_to_zero_with_warning() {
        let mut c = static_cohort(&[3.0, 3.0, 3.0]);
        let ids = c.ids();
        let stats = normalize_continuous(&mut c, &ids).unwrap();
        assert!(c.records.iter().all(|r| r.continuous[0] == 0.0));
        assert_eq!(stats.warnings.messages.len(), 1);
    }

    #[test]
    fn held_out_values_do_not_affect_statistics() {
        let train: Vec<String> = ["p0", "p1"].iter().map(|s| s.to_string()).collect();
        let mut a = static_cohort(&[1.0, 5.0, 100.0]);
        let mut b = static_cohort(&[1.0, 5.0, -100.0]);
        let sa = normalize_continuous(&mut a, &train).unwrap();
        let sb = normalize_continuous(&mut b, &train).unwrap();
        assert_eq!(sa, sb);
    }
}
