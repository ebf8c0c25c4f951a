//! Deterministic synthetic cohorts shaped like the two target datasets: a static
//! cohort (discrete cognitive scores, continuous imaging, demographics, 3 classes)
//! and an hourly ICU-style cohort (measurements plus binary treatments, binary label).
//!
//! Every patient draws a latent cluster `z`; features are cluster-conditional and the
//! label is `z` with uniform flip noise.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::{Cohort, PatientRecord, Provenance};
use super::schema::{
    ContinuousFeature, DiscreteFeature, FeatureSchema, SeriesKind, TimeseriesFeature,
};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};

pub const MIN_COHORT_SIZE: usize = 20;

/// Probability mass placed on the cluster's mode for discrete features.
const MODE_MASS: f64 = 0.7;
/// Standard deviation of continuous features relative to the spread of cluster means.
const CONTINUOUS_SIGMA: f64 = 0.15;
const AR_PHI: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Static,
    Timeseries,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Static => "static",
            Preset::Timeseries => "timeseries",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Preset::Static),
            "timeseries" => Ok(Preset::Timeseries),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthKnobs {
    pub preset: Preset,
    pub num_measurements: usize,
    pub num_treatments: usize,
    pub series_length: usize,
    /// Bernoulli rate of a measurement cell being observed.
    pub measured_rate: f64,
    pub label_noise: f64,
}

impl SynthKnobs {
    pub fn static_style() -> Self {
        Self {
            preset: Preset::Static,
            num_measurements: 0,
            num_treatments: 0,
            series_length: 1,
            measured_rate: 0.7,
            label_noise: 0.1,
        }
    }

    pub fn timeseries_style() -> Self {
        Self {
            preset: Preset::Timeseries,
            num_measurements: 8,
            num_treatments: 2,
            series_length: 24,
            measured_rate: 0.7,
            label_noise: 0.1,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Static => Self::static_style(),
            Preset::Timeseries => Self::timeseries_style(),
        }
    }
}

const COGNITIVE: [(&str, usize); 6] = [
    ("cdrsb", 19),
    ("adas11", 71),
    ("adas13", 86),
    ("mmse", 31),
    ("faq", 31),
    ("ravlt_immediate", 76),
];
const IMAGING: [&str; 6] = [
    "hippocampus",
    "whole_brain",
    "entorhinal",
    "mid_temp",
    "fdg",
    "av45",
];
const MEASUREMENTS: [&str; 8] = [
    "heart_rate",
    "sys_bp",
    "resp_rate",
    "spo2",
    "temperature",
    "glucose",
    "lactate",
    "creatinine",
];
const TREATMENTS: [&str; 2] = ["ventilation", "vasopressor"];

/// Default ordinal tolerance for a cognitive-style score.
pub fn default_margin(vocab_size: usize) -> usize {
    ((0.05 * vocab_size as f64).round() as usize).max(1)
}

pub fn static_schema() -> FeatureSchema {
    let mut discrete = vec![
        DiscreteFeature {
            name: "apoe4".into(),
            vocab_size: 3,
            is_medical: true,
            margin: 0,
        },
        DiscreteFeature {
            name: "gender".into(),
            vocab_size: 2,
            is_medical: false,
            margin: 0,
        },
        DiscreteFeature {
            name: "age".into(),
            vocab_size: 101,
            is_medical: false,
            margin: 0,
        },
    ];
    discrete.extend(COGNITIVE.iter().map(|&(name, vocab)| DiscreteFeature {
        name: name.into(),
        vocab_size: vocab,
        is_medical: true,
        margin: default_margin(vocab),
    }));
    FeatureSchema {
        discrete_features: discrete,
        continuous_features: IMAGING
            .iter()
            .map(|&name| ContinuousFeature {
                name: name.into(),
                is_medical: true,
            })
            .collect(),
        timeseries_features: vec![],
        series_length: 1,
        num_classes: 3,
        task_name: "diagnosis".into(),
    }
}

pub fn timeseries_schema(knobs: &SynthKnobs) -> FeatureSchema {
    let named = |names: &[&str], prefix: &str, i: usize| {
        names
            .get(i)
            .map_or_else(|| format!("{prefix}_{i}"), |s| s.to_string())
    };
    let mut features: Vec<TimeseriesFeature> = (0..knobs.num_measurements)
        .map(|i| TimeseriesFeature {
            name: named(&MEASUREMENTS, "measurement", i),
            kind: SeriesKind::ContinuousMeasurement,
        })
        .collect();
    features.extend((0..knobs.num_treatments).map(|i| TimeseriesFeature {
        name: named(&TREATMENTS, "treatment", i),
        kind: SeriesKind::BinaryTreatment,
    }));
    FeatureSchema {
        discrete_features: vec![],
        continuous_features: vec![],
        timeseries_features: features,
        series_length: knobs.series_length,
        num_classes: 2,
        task_name: "length_of_stay".into(),
    }
}

fn cluster_perm(rng: &mut Rng, classes: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..classes).collect();
    p.shuffle(rng);
    p
}

/// Position of cluster `c` in `[0, 1]`, after a per-feature relabeling.
fn cluster_position(perm: &[usize], c: usize) -> f64 {
    let l = perm.len();
    if l < 2 {
        0.0
    } else {
        perm[c] as f64 / (l - 1) as f64
    }
}

fn sample_categorical_mode(rng: &mut Rng, vocab: usize, mode: usize) -> usize {
    if rng.random::<f64>() < MODE_MASS {
        mode
    } else {
        let other = rng.random_range(0..vocab - 1);
        if other >= mode {
            other + 1
        } else {
            other
        }
    }
}

fn noisy_label(rng: &mut Rng, z: usize, classes: usize, noise: f64) -> usize {
    if rng.random::<f64>() < noise {
        let other = rng.random_range(0..classes - 1);
        if other >= z {
            other + 1
        } else {
            other
        }
    } else {
        z
    }
}

/// Generates a cohort as a pure function of `(seed, n, knobs)`.
pub fn synthesize_cohort(seed: u64, n: usize, knobs: &SynthKnobs) -> Result<Cohort> {
    if n < MIN_COHORT_SIZE {
        return Err(Error::Config(format!(
            "synthetic cohorts need at least {MIN_COHORT_SIZE} patients, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&knobs.measured_rate) || !(0.0..=1.0).contains(&knobs.label_noise) {
        return Err(Error::Config("rates must lie in [0, 1]".into()));
    }
    let mut rng = rng_for(seed, &[stream::SYNTH]);
    let (schema, records) = match knobs.preset {
        Preset::Static => synth_static(&mut rng, n, knobs),
        Preset::Timeseries => {
            if knobs.series_length < 1 || knobs.num_measurements + knobs.num_treatments == 0 {
                return Err(Error::Config(
                    "timeseries preset needs series_length >= 1 and at least one series".into(),
                ));
            }
            synth_timeseries(&mut rng, n, knobs)
        }
    };
    Cohort::new(
        schema,
        records,
        Provenance::Generator {
            seed,
            n,
            preset: knobs.preset.name().into(),
        },
    )
}

fn synth_static(rng: &mut Rng, n: usize, knobs: &SynthKnobs) -> (FeatureSchema, Vec<PatientRecord>) {
    let schema = static_schema();
    let classes = schema.num_classes;
    let discrete_perms: Vec<Vec<usize>> = schema
        .discrete_features
        .iter()
        .map(|_| cluster_perm(rng, classes))
        .collect();
    let continuous_perms: Vec<Vec<usize>> = schema
        .continuous_features
        .iter()
        .map(|_| cluster_perm(rng, classes))
        .collect();
    let noise = Normal::new(0.0, CONTINUOUS_SIGMA).expect("valid sigma");
    let age_noise = Normal::new(0.0, 6.0).expect("valid sigma");

    let records = (0..n)
        .map(|i| {
            let z = rng.random_range(0..classes);
            let discrete = schema
                .discrete_features
                .iter()
                .zip(&discrete_perms)
                .map(|(f, perm)| match f.name.as_str() {
                    "gender" => rng.random_range(0..2),
                    "age" => {
                        let age = 70.0 + 4.0 * (z as f64 - 1.0) + age_noise.sample(rng);
                        age.round().clamp(50.0, 100.0) as usize
                    }
                    _ => {
                        let pos = (perm[z] as f64 + 0.5) / classes as f64;
                        let mode = (pos * (f.vocab_size - 1) as f64).round() as usize;
                        sample_categorical_mode(rng, f.vocab_size, mode)
                    }
                })
                .collect();
            let continuous = continuous_perms
                .iter()
                .map(|perm| cluster_position(perm, z) + noise.sample(rng))
                .collect();
            let label = noisy_label(rng, z, classes, knobs.label_noise);
            PatientRecord {
                id: format!("p{i:05}"),
                discrete,
                continuous,
                timeseries: vec![],
                measured: vec![],
                label: Some(label),
            }
        })
        .collect();
    (schema, records)
}

fn synth_timeseries(
    rng: &mut Rng,
    n: usize,
    knobs: &SynthKnobs,
) -> (FeatureSchema, Vec<PatientRecord>) {
    let schema = timeseries_schema(knobs);
    let classes = schema.num_classes;
    let tau = knobs.series_length;
    let baselines: Vec<Vec<usize>> = (0..knobs.num_measurements)
        .map(|_| cluster_perm(rng, classes))
        .collect();
    let slopes: Vec<Vec<usize>> = (0..knobs.num_measurements)
        .map(|_| cluster_perm(rng, classes))
        .collect();
    let innovation = Normal::new(0.0, 0.3).expect("valid sigma");
    let stationary = Normal::new(0.0, 0.3 / (1.0 - AR_PHI * AR_PHI).sqrt()).expect("valid sigma");

    let records = (0..n)
        .map(|i| {
            let z = rng.random_range(0..classes);
            let mut timeseries = Vec::with_capacity(schema.num_series());
            let mut measured = Vec::with_capacity(schema.num_series());
            for f in 0..knobs.num_measurements {
                let base = -0.6 + 1.2 * cluster_position(&baselines[f], z);
                let slope = -0.8 + 1.6 * cluster_position(&slopes[f], z);
                let mut noise = stationary.sample(rng);
                let mut row = Vec::with_capacity(tau);
                let mut mrow = Vec::with_capacity(tau);
                for h in 0..tau {
                    if h > 0 {
                        noise = AR_PHI * noise + innovation.sample(rng);
                    }
                    let t = if tau > 1 { h as f64 / (tau - 1) as f64 - 0.5 } else { 0.0 };
                    let value = base + slope * t + noise;
                    let observed = rng.random::<f64>() < knobs.measured_rate;
                    row.push(if observed { value } else { f64::NAN });
                    mrow.push(observed);
                }
                timeseries.push(row);
                measured.push(mrow);
            }
            for _ in 0..knobs.num_treatments {
                let p_on = 0.15 + 0.4 * z as f64 / (classes - 1).max(1) as f64;
                let mut state = rng.random::<f64>() < p_on;
                let mut row = Vec::with_capacity(tau);
                for h in 0..tau {
                    if h > 0 && rng.random::<f64>() >= 0.8 {
                        state = rng.random::<f64>() < p_on;
                    }
                    row.push(if state { 1.0 } else { 0.0 });
                }
                timeseries.push(row);
                measured.push(vec![true; tau]);
            }
            let label = noisy_label(rng, z, classes, knobs.label_noise);
            PatientRecord {
                id: format!("p{i:05}"),
                discrete: vec![],
                continuous: vec![],
                timeseries,
                measured,
                label: Some(label),
            }
        })
        .collect();
    (schema, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cohort() {
        let a = synthesize_cohort(7, 100, &SynthKnobs::static_style()).unwrap();
        let b = synthesize_cohort(7, 100, &SynthKnobs::static_style()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_cohort(8, 100, &SynthKnobs::static_style()).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn too_small_is_config_error() {
        assert!(matches!(
            synthesize_cohort(1, 5, &SynthKnobs::static_style()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn measured_fraction_near_rate() {
        let c = synthesize_cohort(3, 500, &SynthKnobs::timeseries_style()).unwrap();
        let meas = c.schema.measurement_indices();
        let (mut hit, mut total) = (0usize, 0usize);
        for r in &c.records {
            for &s in &meas {
                hit += r.measured[s].iter().filter(|&&m| m).count();
                total += r.measured[s].len();
            }
        }
        let frac = hit as f64 / total as f64;
        assert!((frac - 0.7).abs() <= 0.03, "measured fraction {frac}");
    }

    #[test]
    fn static_schema_margins_follow_default_rule() {
        let s = static_schema();
        let mmse = &s.discrete_features[s.discrete_index("mmse").unwrap()];
        assert_eq!(mmse.margin, 2);
        let cdrsb = &s.discrete_features[s.discrete_index("cdrsb").unwrap()];
        assert_eq!(cdrsb.margin, 1);
    }

    /// Lloyd's k-means with k-means++-free deterministic init, used as a clustering
    /// oracle on the generated features.
    fn kmeans(points: &[Vec<f64>], k: usize, iters: usize) -> Vec<usize> {
        let mut centers: Vec<Vec<f64>> = (0..k).map(|i| points[i * points.len() / k].clone()).collect();
        let mut assign = vec![0; points.len()];
        for _ in 0..iters {
            for (i, p) in points.iter().enumerate() {
                assign[i] = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = p.iter().zip(&centers[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = p.iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..center.len() {
                    center[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        assign
    }

    #[test]
    fn clusters_recoverable_without_labels() {
        let c = synthesize_cohort(11, 300, &SynthKnobs::static_style()).unwrap();
        let points: Vec<Vec<f64>> = c.records.iter().map(|r| r.continuous.clone()).collect();
        let assign = kmeans(&points, 3, 30);
        // purity: each k-means cluster votes for its majority label
        let mut correct = 0;
        for k in 0..3 {
            let mut counts = [0usize; 3];
            for (a, r) in assign.iter().zip(&c.records) {
                if *a == k {
                    counts[r.label.unwrap()] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        let purity = correct as f64 / c.len() as f64;
        assert!(purity > 0.5, "purity {purity} not above chance (1/3)");
    }
}
