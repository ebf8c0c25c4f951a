//! Pairwise patient similarities. Every component is oriented so that larger means
//! more alike and identical records score 1.

use crate::autodiff::kernels::sigmoid;
use crate::cohort::{FeatureSchema, NormStats, PatientRecord};
use crate::error::{Error, Result};

/// Ages within this many years count as a demographic match.
pub const AGE_TOLERANCE: f64 = 2.0;

/// Dense symmetric `n×n` similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!(
                "similarity matrix needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    /// Fills the upper triangle with `f(i, j)` and mirrors it; the diagonal gets `f(i, i)`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Mean of the three demographic indicators: same apoe4, same gender, ages close.
pub fn sim_demographic(apoe: (usize, usize), gender: (usize, usize), age: (f64, f64)) -> f64 {
    let hits = u8::from(apoe.0 == apoe.1)
        + u8::from(gender.0 == gender.1)
        + u8::from((age.0 - age.1).abs() <= AGE_TOLERANCE + 1e-9);
    f64::from(hits) / 3.0
}

/// `1 - ||a - b|| / sqrt(F)` with each feature scaled by its observed range.
pub fn sim_cognitive(a: &[f64], b: &[f64], ranges: &[(f64, f64)]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .zip(ranges)
        .map(|((x, y), (lo, hi))| {
            let span = hi - lo;
            let d = if span > 0.0 { (x - y) / span } else { 0.0 };
            d.clamp(-1.0, 1.0).powi(2)
        })
        .sum();
    (1.0 - sq.sqrt() / (a.len() as f64).sqrt()).clamp(0.0, 1.0)
}

/// `2 (1 - sig(||a - b||))` over min-max normalized imaging values.
pub fn sim_imaging(a: &[f64], b: &[f64]) -> f64 {
    let d = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    2.0 * (1.0 - sigmoid(d))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AgeField {
    Discrete(usize),
    /// Continuous age, mapped back to years through the fitted normalization.
    Continuous(usize),
}

/// Feature lookup and cohort ranges for the static similarity.
///
/// apoe4 and gender must be discrete features; age may be discrete (value = years)
/// or continuous. Cognitive features are the medical discrete features other than
/// apoe4; imaging features are the medical continuous features.
#[derive(Clone, Debug)]
pub struct StaticSimilarity {
    apoe4: usize,
    gender: usize,
    age: AgeField,
    cognitive: Vec<usize>,
    cognitive_ranges: Vec<(f64, f64)>,
    imaging: Vec<usize>,
    norm: Option<NormStats>,
}

impl StaticSimilarity {
    pub fn fit(
        schema: &FeatureSchema,
        records: &[&PatientRecord],
        norm: Option<&NormStats>,
    ) -> Result<Self> {
        let need = |name: &str| {
            schema.discrete_index(name).ok_or_else(|| {
                Error::Schema(format!("static similarity needs a discrete '{name}' feature"))
            })
        };
        let apoe4 = need("apoe4")?;
        let gender = need("gender")?;
        let age = match (schema.discrete_index("age"), schema.continuous_index("age")) {
            (Some(i), _) => AgeField::Discrete(i),
            (None, Some(i)) => AgeField::Continuous(i),
            (None, None) => {
                return Err(Error::Schema(
                    "static similarity needs an 'age' feature".into(),
                ))
            }
        };
        let cognitive: Vec<usize> = schema
            .discrete_features
            .iter()
            .enumerate()
            .filter(|(i, f)| f.is_medical && *i != apoe4)
            .map(|(i, _)| i)
            .collect();
        let cognitive_ranges = cognitive
            .iter()
            .map(|&k| {
                records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    let v = r.discrete[k] as f64;
                    (lo.min(v), hi.max(v))
                })
            })
            .collect();
        let imaging = schema
            .continuous_features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_medical && f.name != "age")
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            apoe4,
            gender,
            age,
            cognitive,
            cognitive_ranges,
            imaging,
            norm: norm.cloned(),
        })
    }

    fn age_of(&self, r: &PatientRecord) -> f64 {
        match self.age {
            AgeField::Discrete(i) => r.discrete[i] as f64,
            AgeField::Continuous(i) => match &self.norm {
                Some(n) => n.inverse(i, r.continuous[i]),
                None => r.continuous[i],
            },
        }
    }

    pub fn demographic(&self, a: &PatientRecord, b: &PatientRecord) -> f64 {
        sim_demographic(
            (a.discrete[self.apoe4], b.discrete[self.apoe4]),
            (a.discrete[self.gender], b.discrete[self.gender]),
            (self.age_of(a), self.age_of(b)),
        )
    }

    pub fn cognitive(&self, a: &PatientRecord, b: &PatientRecord) -> f64 {
        let pick = |r: &PatientRecord| -> Vec<f64> {
            self.cognitive.iter().map(|&k| r.discrete[k] as f64).collect()
        };
        sim_cognitive(&pick(a), &pick(b), &self.cognitive_ranges)
    }

    pub fn imaging(&self, a: &PatientRecord, b: &PatientRecord) -> f64 {
        let pick = |r: &PatientRecord| -> Vec<f64> {
            self.imaging.iter().map(|&k| r.continuous[k]).collect()
        };
        sim_imaging(&pick(a), &pick(b))
    }

    /// Mean of the demographic, cognitive and imaging similarities.
    pub fn overall(&self, a: &PatientRecord, b: &PatientRecord) -> f64 {
        (self.demographic(a, b) + self.cognitive(a, b) + self.imaging(a, b)) / 3.0
    }

    pub fn matrix(&self, records: &[&PatientRecord]) -> SimilarityMatrix {
        SimilarityMatrix::from_fn(records.len(), |i, j| self.overall(records[i], records[j]))
    }
}

/// (mean, population std, min, max) of one series.
pub type Descriptor = [f64; 4];

fn describe(values: &[f64]) -> Descriptor {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, std, min, max]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordDescriptors {
    /// One descriptor per measurement feature, in schema order.
    pub features: Vec<Descriptor>,
    /// Measurement features with no measured value; their descriptor was taken from
    /// the (interpolated) series as stored.
    pub flagged: Vec<usize>,
}

/// Descriptors of the measured values of each measurement feature. Treatments are
/// skipped.
pub fn timeseries_descriptors(record: &PatientRecord, schema: &FeatureSchema) -> RecordDescriptors {
    let mut features = Vec::new();
    let mut flagged = Vec::new();
    for s in schema.measurement_indices() {
        let measured: Vec<f64> = record.timeseries[s]
            .iter()
            .zip(&record.measured[s])
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if measured.is_empty() {
            flagged.push(s);
            let finite: Vec<f64> = record.timeseries[s]
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            features.push(if finite.is_empty() {
                [0.0; 4]
            } else {
                describe(&finite)
            });
        } else {
            features.push(describe(&measured));
        }
    }
    RecordDescriptors { features, flagged }
}

/// Descriptor z-scoring statistics fitted over a set of records.
#[derive(Clone, Debug)]
pub struct TimeseriesSimilarity {
    means: Vec<Descriptor>,
    stds: Vec<Descriptor>,
}

impl TimeseriesSimilarity {
    pub fn fit(descriptors: &[RecordDescriptors]) -> Self {
        let f = descriptors.first().map_or(0, |d| d.features.len());
        let n = descriptors.len().max(1) as f64;
        let mut means = vec![[0.0; 4]; f];
        let mut stds = vec![[0.0; 4]; f];
        for k in 0..f {
            for c in 0..4 {
                let m = descriptors.iter().map(|d| d.features[k][c]).sum::<f64>() / n;
                let var = descriptors
                    .iter()
                    .map(|d| (d.features[k][c] - m).powi(2))
                    .sum::<f64>()
                    / n;
                means[k][c] = m;
                stds[k][c] = var.sqrt();
            }
        }
        Self { means, stds }
    }

    pub fn standardize(&self, d: &RecordDescriptors) -> Vec<Descriptor> {
        d.features
            .iter()
            .enumerate()
            .map(|(k, desc)| {
                let mut z = [0.0; 4];
                for c in 0..4 {
                    let sd = self.stds[k][c];
                    z[c] = if sd > 0.0 {
                        (desc[c] - self.means[k][c]) / sd
                    } else {
                        0.0
                    };
                }
                z
            })
            .collect()
    }

    /// Mean over features of the Euclidean distance between standardized descriptors.
    pub fn distance(a: &[Descriptor], b: &[Descriptor]) -> f64 {
        if a.is_empty() {
            return 0.0;
        }
        let total: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / a.len() as f64
    }

    pub fn similarity_from_distance(d: f64) -> f64 {
        1.0 / (1.0 + d)
    }

    pub fn matrix(&self, descriptors: &[RecordDescriptors]) -> SimilarityMatrix {
        let z: Vec<Vec<Descriptor>> = descriptors.iter().map(|d| self.standardize(d)).collect();
        SimilarityMatrix::from_fn(z.len(), |i, j| {
            Self::similarity_from_distance(Self::distance(&z[i], &z[j]))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{static_schema, synthesize_cohort, SynthKnobs};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn demographic_examples() {
        assert_eq!(sim_demographic((1, 1), (0, 0), (70.0, 70.0)), 1.0);
        assert!(close(sim_demographic((1, 1), (0, 0), (70.0, 73.0)), 2.0 / 3.0, 1e-12));
        assert_eq!(sim_demographic((0, 2), (0, 1), (40.0, 80.0)), 0.0);
        assert_eq!(sim_demographic((0, 2), (0, 1), (70.0, 72.0)), 1.0 / 3.0);
    }

    #[test]
    fn cognitive_examples() {
        let r = [(0.0, 1.0), (0.0, 1.0)];
        assert_eq!(sim_cognitive(&[0.2, 0.7], &[0.2, 0.7], &r), 1.0);
        assert_eq!(sim_cognitive(&[0.0, 1.0], &[1.0, 0.0], &r), 0.0);
        let hand = 1.0 - 0.5 / 2f64.sqrt();
        assert!(close(sim_cognitive(&[0.0, 0.0], &[0.3, 0.4], &r), hand, 1e-12));
        assert!(close(hand, 0.6464, 1e-4));
    }

    #[test]
    fn imaging_examples() {
        assert_eq!(sim_imaging(&[0.3, 0.1], &[0.3, 0.1]), 1.0);
        assert!(close(sim_imaging(&[3f64.ln()], &[0.0]), 0.5, 1e-12));
        assert!(sim_imaging(&[40.0], &[0.0]) < 1e-15);
        assert!(sim_imaging(&[0.5], &[0.0]) > sim_imaging(&[0.6], &[0.0]));
    }

    #[test]
    fn overall_mean_example() {
        let mean = (1.0 / 3.0 + (1.0 - 0.5 / 2f64.sqrt()) + 0.5) / 3.0;
        assert!(close(mean, 0.4933, 1e-4));
    }

    #[test]
    fn missing_demographic_field_is_schema_error() {
        let mut schema = static_schema();
        schema.discrete_features.retain(|f| f.name != "gender");
        assert!(matches!(
            StaticSimilarity::fit(&schema, &[], None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn static_matrix_is_symmetric_with_unit_diagonal() {
        let c = synthesize_cohort(3, 40, &SynthKnobs::static_style()).unwrap();
        let recs: Vec<&PatientRecord> = c.records.iter().collect();
        let sim = StaticSimilarity::fit(&c.schema, &recs, None).unwrap();
        let m = sim.matrix(&recs);
        for i in 0..m.n() {
            assert!(close(m.get(i, i), 1.0, 1e-12));
            for j in 0..m.n() {
                assert_eq!(m.get(i, j), m.get(j, i));
                assert!((0.0..=1.0).contains(&m.get(i, j)));
                assert_eq!(sim.overall(&c.records[i], &c.records[j]), sim.overall(&c.records[j], &c.records[i]));
            }
        }
    }

    fn series_record(values: &[Option<f64>]) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            discrete: vec![],
            continuous: vec![],
            timeseries: vec![values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()],
            measured: vec![values.iter().map(Option::is_some).collect()],
            label: None,
        }
    }

    fn one_series_schema(tau: usize) -> FeatureSchema {
        let mut s = crate::cohort::timeseries_schema(&SynthKnobs {
            num_measurements: 1,
            num_treatments: 0,
            series_length: tau,
            ..SynthKnobs::timeseries_style()
        });
        s.series_length = tau;
        s
    }

    #[test]
    fn descriptor_examples() {
        let schema = one_series_schema(4);
        let d = timeseries_descriptors(
            &series_record(&[Some(1.0), Some(2.0), Some(3.0), Some(4.0)]),
            &schema,
        );
        let [m, s, lo, hi] = d.features[0];
        assert_eq!((m, lo, hi), (2.5, 1.0, 4.0));
        assert!(close(s, 1.25f64.sqrt(), 1e-12));
        assert!(close(s, 1.1180, 1e-4));

        let d = timeseries_descriptors(&series_record(&[Some(3.0); 4]), &schema);
        assert_eq!(d.features[0], [3.0, 0.0, 3.0, 3.0]);

        let d = timeseries_descriptors(&series_record(&[None, Some(5.0), None, None]), &schema);
        assert_eq!(d.features[0], [5.0, 0.0, 5.0, 5.0]);
        assert!(d.flagged.is_empty());

        let mut rec = series_record(&[None, None, None, None]);
        rec.timeseries[0] = vec![1.0, 1.0, 1.0, 1.0];
        let d = timeseries_descriptors(&rec, &schema);
        assert_eq!(d.flagged, vec![0]);
        assert_eq!(d.features[0], [1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn descriptors_ignore_unmeasured_cells() {
        let schema = one_series_schema(4);
        let mut rec = series_record(&[Some(1.0), None, Some(3.0), None]);
        rec.timeseries[0] = vec![1.0, 2.0, 3.0, 3.0];
        let d = timeseries_descriptors(&rec, &schema);
        assert_eq!(d.features[0], [2.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn timeseries_similarity_map() {
        assert_eq!(TimeseriesSimilarity::similarity_from_distance(0.0), 1.0);
        assert_eq!(TimeseriesSimilarity::similarity_from_distance(1.0), 0.5);
    }

    #[test]
    fn three_patient_ranking_matches_hand_distances() {
        let schema = one_series_schema(3);
        let recs = [
            series_record(&[Some(0.0), Some(0.0), Some(0.0)]),
            series_record(&[Some(0.0), Some(1.0), Some(2.0)]),
            series_record(&[Some(10.0), Some(10.0), Some(10.0)]),
        ];
        let descs: Vec<RecordDescriptors> =
            recs.iter().map(|r| timeseries_descriptors(r, &schema)).collect();
        // raw descriptors: (0,0,0,0), (1, sqrt(2/3), 0, 2), (10,0,10,10)
        let sq = (2.0f64 / 3.0).sqrt();
        let raw = [[0.0, 0.0, 0.0, 0.0], [1.0, sq, 0.0, 2.0], [10.0, 0.0, 10.0, 10.0]];
        let mut z = raw;
        for c in 0..4 {
            let m = raw.iter().map(|r| r[c]).sum::<f64>() / 3.0;
            let sd = (raw.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / 3.0).sqrt();
            for r in z.iter_mut() {
                r[c] = (r[c] - m) / sd;
            }
        }
        let dist = |a: usize, b: usize| {
            (0..4).map(|c| (z[a][c] - z[b][c]).powi(2)).sum::<f64>().sqrt()
        };
        let ts = TimeseriesSimilarity::fit(&descs);
        let m = ts.matrix(&descs);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!(close(m.get(a, b), 1.0 / (1.0 + dist(a, b)), 1e-12));
        }
        let mut by_sim = [(0, 1), (0, 2), (1, 2)];
        let mut by_dist = by_sim;
        by_sim.sort_by(|p, q| m.get(q.0, q.1).total_cmp(&m.get(p.0, p.1)));
        by_dist.sort_by(|p, q| dist(p.0, p.1).total_cmp(&dist(q.0, q.1)));
        assert_eq!(by_sim, by_dist);
    }
}
