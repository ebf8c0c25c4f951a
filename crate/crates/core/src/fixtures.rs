//! Small schemas, cohorts and graphs for tests and gradient checks.

use crate::cohort::{
    interpolate_cohort, ContinuousFeature, Cohort, DiscreteFeature, FeatureSchema, Preset,
    SeriesKind, TimeseriesFeature,
};
use crate::autodiff::{finite_difference_check_many, GradCheckReport, Tape, Tensor, Var, DEFAULT_EPS, DEFAULT_TOL};
use crate::cohort::PatientRecord;
use crate::error::Result;
use crate::masking::{apply_mask_tokens, imputation_loss, MaskSpec, MaskStrategy};
use crate::model::{build_params, Bound, Head, Model};
use crate::graph::{knn_graph, PopulationGraph, SimilarityMatrix};
use crate::model::{FeatureLayout, GraphStructure, ModelConfig, NodeBatch, Variant};
use crate::rng::rng_for;
use rand::Rng as _;

/// A static-style schema small enough for exhaustive finite differences.
pub fn tiny_static_schema() -> FeatureSchema {
    FeatureSchema {
        discrete_features: vec![
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
            DiscreteFeature {
                name: "mmse".into(),
                vocab_size: 5,
                is_medical: true,
                margin: 1,
            },
        ],
        continuous_features: vec![
            ContinuousFeature {
                name: "fdg".into(),
                is_medical: true,
            },
            ContinuousFeature {
                name: "av45".into(),
                is_medical: true,
            },
        ],
        timeseries_features: vec![],
        series_length: 1,
        num_classes: 3,
        task_name: "diagnosis".into(),
    }
}

/// A time-series schema with two measurements and one treatment over 4 hours.
pub fn tiny_timeseries_schema() -> FeatureSchema {
    let ts = |name: &str, kind| TimeseriesFeature {
        name: name.into(),
        kind,
    };
    FeatureSchema {
        discrete_features: vec![],
        continuous_features: vec![],
        timeseries_features: vec![
            ts("heart_rate", SeriesKind::ContinuousMeasurement),
            ts("glucose", SeriesKind::ContinuousMeasurement),
            ts("ventilation", SeriesKind::BinaryTreatment),
        ],
        series_length: 4,
        num_classes: 2,
        task_name: "length_of_stay".into(),
    }
}

pub fn tiny_schema(preset: Preset) -> FeatureSchema {
    match preset {
        Preset::Static => tiny_static_schema(),
        Preset::Timeseries => tiny_timeseries_schema(),
    }
}

/// Model dims giving `F ≤ 16` on the tiny schemas.
pub fn tiny_config(preset: Preset, variant: Variant) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        heads: 2,
        discrete_dim: 4,
        continuous_dim: 4,
        ts_hidden: 4,
        ts_dim: 6,
        ts_layers: 2,
        ffn_multiplier: 2,
        ..ModelConfig::for_preset(preset)
    }
    .with_variant(variant)
}

/// Random records over `schema`, fully measured series with a few gaps filled.
pub fn random_cohort(schema: &FeatureSchema, n: usize, seed: u64) -> Result<Cohort> {
    use crate::cohort::{PatientRecord, Provenance};
    let mut rng = rng_for(seed, &[99]);
    let tau = schema.series_length;
    let records = (0..n)
        .map(|i| {
            let discrete = schema
                .discrete_features
                .iter()
                .map(|f| rng.random_range(0..f.vocab_size))
                .collect();
            let continuous = schema
                .continuous_features
                .iter()
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let mut timeseries = Vec::new();
            let mut measured = Vec::new();
            for f in &schema.timeseries_features {
                let m: Vec<bool> = (0..tau).map(|_| rng.random_bool(0.75)).collect();
                let v: Vec<f64> = (0..tau)
                    .zip(&m)
                    .map(|(_, &mm)| {
                        if !mm {
                            f64::NAN
                        } else if f.kind == SeriesKind::BinaryTreatment {
                            f64::from(u8::from(rng.random_bool(0.5)))
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                timeseries.push(v);
                measured.push(m);
            }
            PatientRecord {
                id: format!("r{i}"),
                discrete,
                continuous,
                timeseries,
                measured,
                label: Some(i % schema.num_classes),
            }
        })
        .collect();
    let mut c = Cohort::new(schema.clone(), records, Provenance::Derived)?;
    interpolate_cohort(&mut c);
    Ok(c)
}

/// k-NN graph over a random symmetric similarity matrix.
pub fn random_graph(n: usize, k: usize, seed: u64) -> Result<PopulationGraph> {
    let mut rng = rng_for(seed, &[98]);
    let mut sim = SimilarityMatrix::from_values(n, vec![0.0; n * n])?;
    for i in 0..n {
        sim.set(i, i, 1.0);
        for j in i + 1..n {
            let v: f64 = rng.random_range(0.0..1.0);
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
    knn_graph(&sim, k, &ids)
}

/// Unmasked batch of a random tiny cohort on a random graph.
pub fn tiny_batch(preset: Preset, config: &ModelConfig, n: usize, seed: u64) -> Result<(FeatureLayout, NodeBatch, Cohort)> {
    let schema = tiny_schema(preset);
    let cohort = random_cohort(&schema, n, seed)?;
    let layout = FeatureLayout::new(&schema, config.include_non_medical);
    let graph = random_graph(n, 2.min(n - 1), seed)?;
    let recs: Vec<_> = cohort.records.iter().collect();
    let batch = NodeBatch::from_records(&layout, &recs, GraphStructure::from_graph(&graph))?;
    Ok((layout, batch, cohort))
}

fn uniform(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Sum of `y` weighted elementwise by a fixed tensor, so every output coordinate
/// carries a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let c = tape.constant(w.clone());
    let p = tape.multiply(y, c)?;
    Ok(tape.sum(p))
}

type Primitive = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

/// Finite-difference reports for every differentiable tape primitive on random inputs.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = rng_for(seed, &[97]);
    let w23 = uniform(&[2, 3], &mut rng);
    let w24 = uniform(&[2, 4], &mut rng);
    let w234 = uniform(&[2, 3, 4], &mut rng);
    let w432 = uniform(&[4, 3, 2], &mut rng);
    let w33 = uniform(&[3, 3], &mut rng);
    let w25 = uniform(&[2, 5], &mut rng);
    let w42 = uniform(&[4, 2], &mut rng);
    let target = uniform(&[2, 3], &mut rng);
    let bits = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
    let weight = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0])?;

    let cases: Vec<Primitive> = vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new({
            let w = w24.clone();
            move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, &w)
            }
        })),
        ("matmul_batched", vec![vec![2, 3, 3], vec![2, 3, 4]], Box::new({
            let w = w234.clone();
            move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, &w)
            }
        })),
        ("add_broadcast", vec![vec![2, 3], vec![3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y, &w)
            }
        })),
        ("multiply", vec![vec![2, 3], vec![2, 3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.multiply(v[0], v[1])?;
                probe(t, y, &w)
            }
        })),
        ("scale", vec![vec![2, 3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.scale(v[0], -1.7);
                probe(t, y, &w)
            }
        })),
        ("linear", vec![vec![2, 3], vec![3, 4], vec![4]], Box::new({
            let w = w24.clone();
            move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                probe(t, y, &w)
            }
        })),
        ("concat_last_axis", vec![vec![2, 3], vec![2, 2]], Box::new({
            let w = w25.clone();
            move |t, v| {
                let y = t.concat_last_axis(&[v[0], v[1]])?;
                probe(t, y, &w)
            }
        })),
        ("slice_last_axis", vec![vec![2, 5]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.slice_last_axis(v[0], 1, 3)?;
                probe(t, y, &w)
            }
        })),
        ("mean_over_axis", vec![vec![2, 3, 4]], Box::new({
            let w = w24.clone();
            move |t, v| {
                let y = t.mean_over_axis(v[0], 1)?;
                probe(t, y, &w)
            }
        })),
        ("sum", vec![vec![2, 3]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("sigmoid", vec![vec![2, 3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.sigmoid(v[0]);
                probe(t, y, &w)
            }
        })),
        ("gelu", vec![vec![2, 3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.gelu(v[0]);
                probe(t, y, &w)
            }
        })),
        ("layer_norm_last_axis", vec![vec![2, 3], vec![3], vec![3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.layer_norm_last_axis(v[0], v[1], v[2])?;
                probe(t, y, &w)
            }
        })),
        ("embedding_lookup", vec![vec![4, 3]], Box::new({
            let w = w33.clone();
            move |t, v| {
                let y = t.embedding_lookup(v[0], &[2, 0, 2])?;
                probe(t, y, &w)
            }
        })),
        ("reshape", vec![vec![2, 3, 4]], Box::new({
            let w = uniform(&[6, 4], &mut rng_for(seed, &[96]));
            move |t, v| {
                let y = t.reshape(v[0], &[6, 4])?;
                probe(t, y, &w)
            }
        })),
        ("permute", vec![vec![2, 3, 4]], Box::new({
            let w = w432.clone();
            move |t, v| {
                let y = t.permute(v[0], &[2, 1, 0])?;
                probe(t, y, &w)
            }
        })),
        ("transpose_last_two", vec![vec![2, 4]], Box::new({
            let w = w42.clone();
            move |t, v| {
                let y = t.transpose_last_two(v[0])?;
                probe(t, y, &w)
            }
        })),
        ("softmax_rows_with_bias", vec![vec![2, 3], vec![2, 3]], Box::new({
            let w = w23.clone();
            move |t, v| {
                let y = t.softmax_rows_with_bias(v[0], Some(v[1]))?;
                probe(t, y, &w)
            }
        })),
        ("mse", vec![vec![2, 3]], Box::new({
            let (target, weight) = (target.clone(), weight.clone());
            move |t, v| t.mse(v[0], &target, &weight)
        })),
        ("cross_entropy", vec![vec![2, 3]], Box::new(|t, v| t.cross_entropy(v[0], &[2, 0], &[1.0, 1.0]))),
        ("binary_cross_entropy", vec![vec![2, 3]], Box::new({
            let (bits, weight) = (bits.clone(), weight.clone());
            move |t, v| t.binary_cross_entropy(v[0], &bits, &weight)
        })),
    ];

    cases
        .into_iter()
        .map(|(name, shapes, f)| {
            let points: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
            let report = finite_difference_check_many(|t, v| f(t, v), &points, DEFAULT_EPS, DEFAULT_TOL)?;
            Ok((name, report))
        })
        .collect()
}

/// Finite-difference reports for the pre-training and task losses of the tiny models:
/// a 6-node graph, both presets, every variant.
pub fn model_gradchecks() -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for preset in [Preset::Static, Preset::Timeseries] {
        for variant in [Variant::Full, Variant::Linear, Variant::NoTsTransformer] {
            let cfg = tiny_config(preset, variant);
            let (layout, batch, cohort) = tiny_batch(preset, &cfg, 6, 14)?;
            let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
            let spec = MaskSpec {
                ratio: 0.5,
                block_len: 2,
                ..MaskSpec::new(match preset {
                    Preset::Static => MaskStrategy::StaticRandom,
                    Preset::Timeseries => MaskStrategy::BlockMasking,
                })
            };
            let mb = apply_mask_tokens(&cohort.schema, &layout, &recs, &batch, &spec, 0, 3)?;
            let params = build_params(&cfg, &layout, &[Head::Imputation, Head::Task], 2)?;
            let model = Model::new(cfg, layout)?;
            let names = params.names();
            let points: Vec<Tensor> = names.iter().map(|n| params.get(n).expect("named").clone()).collect();
            let pretrain = finite_difference_check_many(
                |tape, vars| {
                    let bound = Bound::from_vars(&names, vars);
                    let enc = model.encode(tape, &bound, &mb.inputs)?;
                    let preds = model.decode(tape, &bound, enc.reps, Head::Imputation)?;
                    Ok(imputation_loss(tape, preds, &mb, &model.layout, &[true; 6])?.total)
                },
                &points,
                DEFAULT_EPS,
                DEFAULT_TOL,
            )?;
            out.push((format!("pretrain/{}/{variant:?}", preset.name()), pretrain));
            let task = finite_difference_check_many(
                |tape, vars| {
                    let bound = Bound::from_vars(&names, vars);
                    let enc = model.encode(tape, &bound, &batch)?;
                    let logits = model.decode(tape, &bound, enc.reps, Head::Task)?;
                    tape.cross_entropy(logits, &[0, 1, 1, 0, 1, 0], &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0])
                },
                &points,
                DEFAULT_EPS,
                DEFAULT_TOL,
            )?;
            out.push((format!("task/{}/{variant:?}", preset.name()), task));
        }
    }
    Ok(out)
}
