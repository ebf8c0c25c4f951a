use popgraph::cohort::{static_schema, timeseries_schema, PatientRecord, Preset, SynthKnobs};
use popgraph::fixtures::{tiny_batch, tiny_config};
use popgraph::masking::{
    apply_mask_tokens, mask_block_bm, mask_features_fm, mask_static_random, masked_count, MaskSpec,
    MaskStrategy,
};
use popgraph::model::{FeatureLayout, Variant};
use popgraph::rng::rng_for;
use proptest::prelude::*;

const DRAWS: usize = 10_000;

/// Pooled masked fraction and per-position hit rates over `DRAWS` draws.
fn empirical(m: usize, mut draw: impl FnMut(u64) -> Vec<usize>) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; m];
    for d in 0..DRAWS {
        for i in draw(d as u64) {
            hits[i] += 1;
        }
    }
    let total: usize = hits.iter().sum();
    let rates = hits.iter().map(|&h| h as f64 / DRAWS as f64).collect();
    (total as f64 / (m * DRAWS) as f64, rates)
}

#[test]
fn static_masked_fraction_over_10000_draws() {
    let schema = static_schema();
    let layout = FeatureLayout::new(&schema, false);
    let m = layout.discrete.len() + layout.continuous.len();
    let expected = masked_count(m, 0.3) as f64 / m as f64;
    let (frac, rates) = empirical(m, |d| mask_static_random(m, 0.3, &mut rng_for(1, &[d])).unwrap());
    assert!((frac - 0.3).abs() <= 0.01, "M = {m}: pooled fraction {frac}");
    assert!((frac - expected).abs() < 1e-12);
    // every feature is equally likely to be hidden
    for r in rates {
        assert!((r - expected).abs() <= 0.02, "rate {r} vs {expected}");
    }
}

#[test]
fn fm_masked_fraction_over_10000_draws() {
    let schema = timeseries_schema(&SynthKnobs::timeseries_style());
    let s = schema.num_series();
    assert_eq!(masked_count(s, 0.3), (0.3 * s as f64).round() as usize);
    let (frac, rates) = empirical(s, |d| mask_features_fm(s, 0.3, &mut rng_for(2, &[d])));
    assert!((frac - 0.3).abs() <= 0.01, "S = {s}: pooled fraction {frac}");
    let expected = masked_count(s, 0.3) as f64 / s as f64;
    for r in rates {
        assert!((r - expected).abs() <= 0.02, "rate {r} vs {expected}");
    }
}

#[test]
fn bm_start_is_uniform_over_valid_range() {
    let (tau, len) = (24, 6);
    let mut counts = vec![0usize; tau];
    for d in 0..DRAWS as u64 {
        counts[mask_block_bm(tau, len, &mut rng_for(3, &[d]))] += 1;
    }
    let starts = tau - len + 1;
    assert!(counts[starts..].iter().all(|&c| c == 0));
    for &c in &counts[..starts] {
        let p = c as f64 / DRAWS as f64;
        assert!((p - 1.0 / starts as f64).abs() <= 0.015, "{p}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unmasked_inputs_are_bit_preserved(seed in any::<u64>(), epoch in 0u64..50, fm in any::<bool>()) {
        for preset in [Preset::Static, Preset::Timeseries] {
            let cfg = tiny_config(preset, Variant::Full);
            let (layout, batch, cohort) = tiny_batch(preset, &cfg, 8, seed % 1000).unwrap();
            let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
            let strategy = match (preset, fm) {
                (Preset::Static, _) => MaskStrategy::StaticRandom,
                (_, true) => MaskStrategy::FeatureMasking,
                (_, false) => MaskStrategy::BlockMasking,
            };
            let spec = MaskSpec { block_len: 2, ..MaskSpec::new(strategy) };
            let mb = apply_mask_tokens(&cohort.schema, &layout, &recs, &batch, &spec, epoch, seed).unwrap();
            for (k, col) in mb.inputs.discrete.iter().enumerate() {
                for (i, &v) in col.iter().enumerate() {
                    if !mb.discrete_mask[k][i] {
                        prop_assert_eq!(v, batch.discrete[k][i]);
                    }
                }
            }
            if let (Some(a), Some(b)) = (&mb.inputs.continuous, &batch.continuous) {
                for (idx, &m) in mb.continuous_mask.iter().enumerate() {
                    if !m {
                        prop_assert_eq!(a.data()[idx].to_bits(), b.data()[idx].to_bits());
                    }
                }
            }
            if let (Some(a), Some(b)) = (&mb.inputs.timeseries, &batch.timeseries) {
                let s = layout.num_series;
                let tau = layout.series_length;
                for i in 0..8 {
                    for h in 0..tau {
                        for f in 0..s {
                            let at = (i * tau + h) * 2 * s + f;
                            if !mb.grid_mask[(i * tau + h) * s + f] {
                                prop_assert_eq!(a.data()[at].to_bits(), b.data()[at].to_bits());
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bm_block_is_contiguous_and_shared(seed in any::<u64>(), epoch in 0u64..50) {
        let cfg = tiny_config(Preset::Timeseries, Variant::Full);
        let (layout, batch, cohort) = tiny_batch(Preset::Timeseries, &cfg, 6, 7).unwrap();
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let spec = MaskSpec { block_len: 2, ..MaskSpec::new(MaskStrategy::BlockMasking) };
        let mb = apply_mask_tokens(&cohort.schema, &layout, &recs, &batch, &spec, epoch, seed).unwrap();
        let (s, tau) = (layout.num_series, layout.series_length);
        for i in 0..6 {
            let hours: Vec<usize> = (0..tau).filter(|&h| mb.grid_mask[(i * tau + h) * s]).collect();
            prop_assert_eq!(hours.len(), 2);
            prop_assert_eq!(hours[1], hours[0] + 1);
            prop_assert!(hours[0] <= tau - 2);
            for h in 0..tau {
                for f in 0..s {
                    prop_assert_eq!(mb.grid_mask[(i * tau + h) * s + f], hours.contains(&h));
                }
            }
        }
    }
}
