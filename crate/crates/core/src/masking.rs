//! Masking strategies for imputation pre-training and the composite imputation loss.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cohort::{FeatureSchema, PatientRecord};
use crate::error::{Error, Result};
use crate::model::{FeatureLayout, NodeBatch};
use crate::rng::{hash_str, rng_for, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// A fraction of the medical static features per patient.
    StaticRandom,
    /// A fraction of the series per patient, all hours.
    FeatureMasking,
    /// One block of hours per patient, all series.
    BlockMasking,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" | "static_random" => Ok(MaskStrategy::StaticRandom),
            "fm" | "feature_masking" => Ok(MaskStrategy::FeatureMasking),
            "bm" | "block_masking" => Ok(MaskStrategy::BlockMasking),
            other => Err(Error::Config(format!("unknown mask strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub block_len: usize,
    /// Block masking draws one start per series instead of one per patient.
    pub per_feature_blocks: bool,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy) -> Self {
        Self {
            strategy,
            ratio: 0.3,
            block_len: 6,
            per_feature_blocks: false,
        }
    }

    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1]", self.ratio)));
        }
        match self.strategy {
            MaskStrategy::StaticRandom => {
                let medical = schema.discrete_features.iter().filter(|f| f.is_medical).count()
                    + schema.continuous_features.iter().filter(|f| f.is_medical).count();
                if medical == 0 {
                    return Err(Error::Config(
                        "static masking needs at least one medical static feature".into(),
                    ));
                }
            }
            MaskStrategy::FeatureMasking | MaskStrategy::BlockMasking => {
                if !schema.has_timeseries() {
                    return Err(Error::Config(
                        "time-series masking on a schema without series".into(),
                    ));
                }
                if self.strategy == MaskStrategy::BlockMasking
                    && (self.block_len == 0 || self.block_len > schema.series_length)
                {
                    return Err(Error::Config(format!(
                        "block_len {} must lie in [1, {}]",
                        self.block_len, schema.series_length
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `round(ratio·m)`, at least 1.
pub fn masked_count(m: usize, ratio: f64) -> usize {
    ((ratio * m as f64).round() as usize).clamp(1, m.max(1))
}

/// Indices (into the `m` medical features) chosen for static masking, ascending.
pub fn mask_static_random(m: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Config("no medical features to mask".into()));
    }
    let mut picked = sample(rng, m, masked_count(m, ratio)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Series chosen for feature masking, ascending.
pub fn mask_features_fm(s: usize, ratio: f64, rng: &mut Rng) -> Vec<usize> {
    if s == 0 {
        return vec![];
    }
    let mut picked = sample(rng, s, masked_count(s, ratio)).into_vec();
    picked.sort_unstable();
    picked
}

/// Start hour of a block of `block_len` hours within `tau`.
pub fn mask_block_bm(tau: usize, block_len: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..=tau - block_len)
}

/// Masked inputs plus imputation targets. Per-position masks are node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: NodeBatch,
    /// `[slot][node]` original class indices.
    pub discrete_targets: Vec<Vec<usize>>,
    pub discrete_mask: Vec<Vec<bool>>,
    /// `[N, C]` original values.
    pub continuous_targets: Option<Tensor>,
    pub continuous_mask: Vec<bool>,
    /// `[N, τ·S]` original (interpolated) values, cell `(h, s)` at `h·S + s`.
    pub grid_targets: Option<Tensor>,
    pub grid_mask: Vec<bool>,
    /// Masked cells that count in the loss: measured measurements and all treatments.
    pub grid_eligible: Vec<bool>,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.discrete_mask.iter().flatten().filter(|&&m| m).count()
            + self.continuous_mask.iter().filter(|&&m| m).count()
            + self.grid_mask.iter().filter(|&&m| m).count()
    }

    pub fn eligible_count(&self) -> usize {
        self.discrete_mask.iter().flatten().filter(|&&m| m).count()
            + self.continuous_mask.iter().filter(|&&m| m).count()
            + self.grid_eligible.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StaticPos {
    Discrete(usize),
    Continuous(usize),
}

fn medical_positions(schema: &FeatureSchema, layout: &FeatureLayout) -> Vec<StaticPos> {
    let mut out: Vec<StaticPos> = layout
        .discrete
        .iter()
        .enumerate()
        .filter(|(_, s)| schema.discrete_features[s.feature].is_medical)
        .map(|(k, _)| StaticPos::Discrete(k))
        .collect();
    out.extend(
        layout
            .continuous
            .iter()
            .enumerate()
            .filter(|(_, &c)| schema.continuous_features[c].is_medical)
            .map(|(j, _)| StaticPos::Continuous(j)),
    );
    out
}

/// Masks every node of `base` with the rng of `(seed, stream, epoch, patient id)`.
/// `records` supply ids and measured flags and must be in batch order.
pub fn apply_mask_tokens(
    schema: &FeatureSchema,
    layout: &FeatureLayout,
    records: &[&PatientRecord],
    base: &NodeBatch,
    spec: &MaskSpec,
    epoch: u64,
    seed: u64,
) -> Result<MaskedBatch> {
    mask_with_stream(schema, layout, records, base, spec, seed, &[stream::MASK, epoch])
}

/// A mask that does not change between epochs, for validation losses.
pub fn fixed_mask(
    schema: &FeatureSchema,
    layout: &FeatureLayout,
    records: &[&PatientRecord],
    base: &NodeBatch,
    spec: &MaskSpec,
    seed: u64,
) -> Result<MaskedBatch> {
    mask_with_stream(schema, layout, records, base, spec, seed, &[stream::VAL_MASK])
}

fn mask_with_stream(
    schema: &FeatureSchema,
    layout: &FeatureLayout,
    records: &[&PatientRecord],
    base: &NodeBatch,
    spec: &MaskSpec,
    seed: u64,
    tags: &[u64],
) -> Result<MaskedBatch> {
    spec.validate(schema)?;
    let n = base.n;
    if records.len() != n {
        return Err(Error::Shape(format!("{} records for {n} nodes", records.len())));
    }
    let c = layout.continuous.len();
    let (s, tau) = (layout.num_series, layout.series_length);
    let mut inputs = base.clone();
    let mut discrete_mask = vec![vec![false; n]; layout.discrete.len()];
    let mut continuous_mask = vec![false; n * c];
    let mut grid_mask = vec![false; if s > 0 { n * tau * s } else { 0 }];
    let medical = medical_positions(schema, layout);

    for (i, rec) in records.iter().enumerate() {
        let mut stream_tags = tags.to_vec();
        stream_tags.push(hash_str(&rec.id));
        let mut rng = rng_for(seed, &stream_tags);
        match spec.strategy {
            MaskStrategy::StaticRandom => {
                for p in mask_static_random(medical.len(), spec.ratio, &mut rng)? {
                    match medical[p] {
                        StaticPos::Discrete(k) => discrete_mask[k][i] = true,
                        StaticPos::Continuous(j) => continuous_mask[i * c + j] = true,
                    }
                }
            }
            MaskStrategy::FeatureMasking => {
                for f in mask_features_fm(s, spec.ratio, &mut rng) {
                    for h in 0..tau {
                        grid_mask[(i * tau + h) * s + f] = true;
                    }
                }
            }
            MaskStrategy::BlockMasking => {
                if spec.per_feature_blocks {
                    for f in 0..s {
                        let start = mask_block_bm(tau, spec.block_len, &mut rng);
                        for h in start..start + spec.block_len {
                            grid_mask[(i * tau + h) * s + f] = true;
                        }
                    }
                } else {
                    let start = mask_block_bm(tau, spec.block_len, &mut rng);
                    for h in start..start + spec.block_len {
                        for f in 0..s {
                            grid_mask[(i * tau + h) * s + f] = true;
                        }
                    }
                }
            }
        }
    }

    for (k, slot) in layout.discrete.iter().enumerate() {
        for i in 0..n {
            if discrete_mask[k][i] {
                inputs.discrete[k][i] = slot.vocab;
            }
        }
    }
    if let Some(t) = inputs.continuous.as_mut() {
        for (v, &m) in t.data_mut().iter_mut().zip(&continuous_mask) {
            if m {
                *v = 0.0;
            }
        }
    }
    let mut grid_targets = None;
    let mut grid_eligible = vec![false; grid_mask.len()];
    if let Some(t) = inputs.timeseries.as_mut() {
        let mut targets = vec![0.0; n * tau * s];
        let data = t.data_mut();
        for i in 0..n {
            for h in 0..tau {
                let row = (i * tau + h) * 2 * s;
                for f in 0..s {
                    let cell = (i * tau + h) * s + f;
                    targets[cell] = data[row + f];
                    if grid_mask[cell] {
                        data[row + f] = 0.0;
                        data[row + s + f] = 1.0;
                        grid_eligible[cell] = layout.treatment[f] || records[i].measured[f][h];
                    }
                }
            }
        }
        grid_targets = Some(Tensor::new(vec![n, tau * s], targets)?);
    }

    Ok(MaskedBatch {
        inputs,
        discrete_targets: base.discrete.clone(),
        discrete_mask,
        continuous_targets: base.continuous.clone(),
        continuous_mask,
        grid_targets,
        grid_mask,
        grid_eligible,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GroupLosses {
    pub discrete: Option<f64>,
    pub continuous: Option<f64>,
    pub binary: Option<f64>,
}

impl GroupLosses {
    pub fn total(&self) -> f64 {
        self.discrete.unwrap_or(0.0) + self.continuous.unwrap_or(0.0) + self.binary.unwrap_or(0.0)
    }
}

pub struct ImputationLoss {
    pub total: Var,
    pub groups: GroupLosses,
}

/// Sum of the per-group means: cross entropy over masked discrete positions, squared
/// error over eligible continuous positions (static and measured series cells) and
/// binary cross entropy over masked treatment cells. Only nodes with
/// `node_weight[i]` count. Groups without support are left out.
pub fn imputation_loss(
    tape: &mut Tape,
    preds: Var,
    mb: &MaskedBatch,
    layout: &FeatureLayout,
    node_weight: &[bool],
) -> Result<ImputationLoss> {
    let n = mb.inputs.n;
    let width = layout.imputation_width();
    if tape.value(preds).shape() != [n, width] {
        return Err(Error::Shape(format!(
            "imputation predictions {:?}, expected [{n}, {width}]",
            tape.value(preds).shape()
        )));
    }
    if node_weight.len() != n {
        return Err(Error::Shape(format!("{} node weights for {n} nodes", node_weight.len())));
    }
    let mut groups = GroupLosses::default();
    let mut terms: Vec<Var> = Vec::new();

    // discrete: per-slot mean CE, pooled by position count
    let offsets = layout.discrete_offsets();
    let counts: Vec<usize> = mb
        .discrete_mask
        .iter()
        .map(|m| (0..n).filter(|&i| m[i] && node_weight[i]).count())
        .collect();
    let total_disc: usize = counts.iter().sum();
    if total_disc > 0 {
        let mut pooled: Option<Var> = None;
        let mut value = 0.0;
        for (k, slot) in layout.discrete.iter().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let logits = tape.slice_last_axis(preds, offsets[k], slot.vocab)?;
            let w: Vec<f64> = (0..n)
                .map(|i| f64::from(u8::from(mb.discrete_mask[k][i] && node_weight[i])))
                .collect();
            let ce = tape.cross_entropy(logits, &mb.discrete_targets[k], &w)?;
            let share = counts[k] as f64 / total_disc as f64;
            value += share * tape.value(ce).item();
            let part = tape.scale(ce, share);
            pooled = Some(match pooled {
                None => part,
                Some(p) => tape.add(p, part)?,
            });
        }
        groups.discrete = Some(value);
        terms.extend(pooled);
    }

    // continuous and binary groups read full-width target/weight rows
    let mut target = vec![0.0; n * width];
    let mut w_mse = vec![0.0; n * width];
    let mut w_bce = vec![0.0; n * width];
    let c = layout.continuous.len();
    let c0 = layout.continuous_offset();
    if let Some(t) = &mb.continuous_targets {
        for i in 0..n {
            for j in 0..c {
                if mb.continuous_mask[i * c + j] && node_weight[i] {
                    target[i * width + c0 + j] = t.data()[i * c + j];
                    w_mse[i * width + c0 + j] = 1.0;
                }
            }
        }
    }
    if let Some(t) = &mb.grid_targets {
        let g0 = layout.grid_offset();
        let (s, cells) = (layout.num_series, layout.grid_len());
        for i in 0..n {
            if !node_weight[i] {
                continue;
            }
            for cell in 0..cells {
                if !mb.grid_eligible[i * cells + cell] {
                    continue;
                }
                let at = i * width + g0 + cell;
                target[at] = t.data()[i * cells + cell];
                if layout.treatment[cell % s] {
                    w_bce[at] = 1.0;
                } else {
                    w_mse[at] = 1.0;
                }
            }
        }
    }
    let target = Tensor::new(vec![n, width], target)?;
    if w_mse.iter().any(|&w| w != 0.0) {
        let mse = tape.mse(preds, &target, &Tensor::new(vec![n, width], w_mse)?)?;
        groups.continuous = Some(tape.value(mse).item());
        terms.push(mse);
    }
    if w_bce.iter().any(|&w| w != 0.0) {
        let bce = tape.binary_cross_entropy(preds, &target, &Tensor::new(vec![n, width], w_bce)?)?;
        groups.binary = Some(tape.value(bce).item());
        terms.push(bce);
    }

    let mut it = terms.into_iter();
    let Some(mut total) = it.next() else {
        return Err(Error::EmptyLossSupport);
    };
    for t in it {
        total = tape.add(total, t)?;
    }
    Ok(ImputationLoss { total, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Preset;
    use crate::fixtures::{tiny_batch, tiny_config};
    use crate::model::{build_params, Bound, Head, Model, Variant};

    fn rng(seed: u64) -> Rng {
        rng_for(seed, &[0])
    }

    #[test]
    fn static_count_examples() {
        assert_eq!(mask_static_random(10, 0.3, &mut rng(1)).unwrap().len(), 3);
        assert_eq!(mask_static_random(10, 0.01, &mut rng(1)).unwrap().len(), 1);
        assert!(matches!(mask_static_random(0, 0.3, &mut rng(1)), Err(Error::Config(_))));
    }

    #[test]
    fn fm_count_example() {
        assert_eq!(mask_features_fm(76, 0.3, &mut rng(2)).len(), 23);
        assert_eq!(masked_count(76, 0.3), 23);
    }

    #[test]
    fn bm_start_range() {
        let mut r = rng(3);
        for _ in 0..2000 {
            assert!(mask_block_bm(24, 6, &mut r) <= 18);
        }
        assert_eq!(mask_block_bm(24, 24, &mut r), 0);
    }

    fn static_setup(n: usize) -> (FeatureSchema, FeatureLayout, NodeBatch, crate::cohort::Cohort) {
        let cfg = tiny_config(Preset::Static, Variant::Full);
        let (layout, batch, cohort) = tiny_batch(Preset::Static, &cfg, n, 4).unwrap();
        (cohort.schema.clone(), layout, batch, cohort)
    }

    fn ts_setup(n: usize) -> (FeatureSchema, FeatureLayout, NodeBatch, crate::cohort::Cohort) {
        let cfg = tiny_config(Preset::Timeseries, Variant::Full);
        let (layout, batch, cohort) = tiny_batch(Preset::Timeseries, &cfg, n, 5).unwrap();
        (cohort.schema.clone(), layout, batch, cohort)
    }

    #[test]
    fn static_masking_tokens_and_preservation() {
        let (schema, layout, batch, cohort) = static_setup(20);
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let spec = MaskSpec::new(MaskStrategy::StaticRandom);
        let mb = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 1).unwrap();
        // 4 medical features at 30% -> 1 per patient
        assert_eq!(mb.masked_count(), 20);
        for (k, slot) in layout.discrete.iter().enumerate() {
            for i in 0..20 {
                let v = mb.inputs.discrete[k][i];
                if mb.discrete_mask[k][i] {
                    assert_eq!(v, slot.vocab);
                } else {
                    assert_eq!(v, batch.discrete[k][i]);
                }
            }
        }
        let (a, b) = (mb.inputs.continuous.unwrap(), batch.continuous.unwrap());
        for (idx, &m) in mb.continuous_mask.iter().enumerate() {
            if m {
                assert_eq!(a.data()[idx], 0.0);
            } else {
                assert_eq!(a.data()[idx].to_bits(), b.data()[idx].to_bits());
            }
        }
    }

    #[test]
    fn demographics_never_masked() {
        let (mut schema, _, _, cohort) = static_setup(10);
        let layout = FeatureLayout::new(&schema, true);
        let g = crate::fixtures::random_graph(10, 2, 1).unwrap();
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let batch = NodeBatch::from_records(&layout, &recs, crate::model::GraphStructure::from_graph(&g)).unwrap();
        let spec = MaskSpec::new(MaskStrategy::StaticRandom);
        let demo: Vec<usize> = layout
            .discrete
            .iter()
            .enumerate()
            .filter(|(_, s)| !schema.discrete_features[s.feature].is_medical)
            .map(|(k, _)| k)
            .collect();
        assert_eq!(demo.len(), 2);
        for epoch in 0..100 {
            let mb = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, epoch, 3).unwrap();
            for &k in &demo {
                assert!(mb.discrete_mask[k].iter().all(|&m| !m));
                assert_eq!(mb.inputs.discrete[k], batch.discrete[k]);
            }
        }
        schema.discrete_features.iter_mut().for_each(|f| f.is_medical = false);
        schema.continuous_features.iter_mut().for_each(|f| f.is_medical = false);
        assert!(matches!(
            apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fm_masks_whole_series() {
        let (schema, layout, batch, cohort) = ts_setup(12);
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let spec = MaskSpec::new(MaskStrategy::FeatureMasking);
        let mb = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        let (s, tau) = (3, 4);
        let x = mb.inputs.timeseries.as_ref().unwrap();
        let orig = batch.timeseries.as_ref().unwrap();
        for i in 0..12 {
            let masked: Vec<usize> = (0..s).filter(|&f| mb.grid_mask[i * tau * s + f]).collect();
            assert_eq!(masked.len(), masked_count(3, 0.3));
            for f in 0..s {
                for h in 0..tau {
                    let row = (i * tau + h) * 2 * s;
                    let m = mb.grid_mask[(i * tau + h) * s + f];
                    assert_eq!(m, masked.contains(&f));
                    assert_eq!(x.data()[row + s + f], f64::from(u8::from(m)));
                    if m {
                        assert_eq!(x.data()[row + f], 0.0);
                    } else {
                        assert_eq!(x.data()[row + f].to_bits(), orig.data()[row + f].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn bm_masks_one_shared_block() {
        let (schema, layout, batch, cohort) = ts_setup(12);
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let mut spec = MaskSpec::new(MaskStrategy::BlockMasking);
        spec.block_len = 2;
        let mb = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        let (s, tau) = (3, 4);
        for i in 0..12 {
            let hours: Vec<usize> = (0..tau).filter(|&h| mb.grid_mask[(i * tau + h) * s]).collect();
            assert_eq!(hours.len(), 2);
            assert_eq!(hours[1], hours[0] + 1);
            for h in 0..tau {
                for f in 0..s {
                    assert_eq!(mb.grid_mask[(i * tau + h) * s + f], hours.contains(&h));
                }
            }
        }
        // block_len = τ masks everything
        spec.block_len = 4;
        let all = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        assert!(all.grid_mask.iter().all(|&m| m));
        spec.block_len = 5;
        assert!(apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).is_err());
    }

    #[test]
    fn eligibility_follows_measured_flags() {
        let (schema, layout, batch, cohort) = ts_setup(12);
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let mut spec = MaskSpec::new(MaskStrategy::BlockMasking);
        spec.block_len = 4;
        let mb = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        let (s, tau) = (3, 4);
        for i in 0..12 {
            for h in 0..tau {
                for f in 0..s {
                    let e = mb.grid_eligible[(i * tau + h) * s + f];
                    let expect = f == 2 || recs[i].measured[f][h];
                    assert_eq!(e, expect);
                }
            }
        }
        assert!(mb.eligible_count() <= mb.masked_count());
        assert!(mb.eligible_count() < mb.masked_count());
    }

    #[test]
    fn masks_redrawn_per_epoch_and_reproducible() {
        let (schema, layout, batch, cohort) = ts_setup(12);
        let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let spec = MaskSpec::new(MaskStrategy::FeatureMasking);
        let a = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        let b = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 0, 2).unwrap();
        let c = apply_mask_tokens(&schema, &layout, &recs, &batch, &spec, 1, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.grid_mask, c.grid_mask);
        let v1 = fixed_mask(&schema, &layout, &recs, &batch, &spec, 2).unwrap();
        let v2 = fixed_mask(&schema, &layout, &recs, &batch, &spec, 2).unwrap();
        assert_eq!(v1, v2);
    }

    fn loss_of(model: &Model, params: &ModelParams, mb: &MaskedBatch) -> (f64, GroupLosses) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let enc = model.encode(&mut tape, &bound, &mb.inputs).unwrap();
        let preds = model.decode(&mut tape, &bound, enc.reps, Head::Imputation).unwrap();
        let l = imputation_loss(&mut tape, preds, mb, &model.layout, &vec![true; mb.inputs.n]).unwrap();
        (tape.value(l.total).item(), l.groups)
    }

    use crate::model::ModelParams;

    #[test]
    fn loss_ignores_non_eligible_targets() {
        for preset in [Preset::Static, Preset::Timeseries] {
            let cfg = tiny_config(preset, Variant::Full);
            let (layout, batch, cohort) = tiny_batch(preset, &cfg, 8, 6).unwrap();
            let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
            let spec = MaskSpec::new(match preset {
                Preset::Static => MaskStrategy::StaticRandom,
                Preset::Timeseries => MaskStrategy::FeatureMasking,
            });
            let mb = apply_mask_tokens(&cohort.schema, &layout, &recs, &batch, &spec, 0, 9).unwrap();
            let params = build_params(&cfg, &layout, &[Head::Imputation], 1).unwrap();
            let model = Model::new(cfg, layout).unwrap();
            let (base, _) = loss_of(&model, &params, &mb);
            let mut poked = mb.clone();
            if let Some(t) = poked.continuous_targets.as_mut() {
                for (v, &m) in t.data_mut().iter_mut().zip(&mb.continuous_mask) {
                    if !m {
                        *v += 123.0;
                    }
                }
            }
            for (k, col) in poked.discrete_targets.iter_mut().enumerate() {
                for (i, v) in col.iter_mut().enumerate() {
                    if !mb.discrete_mask[k][i] {
                        *v = 0;
                    }
                }
            }
            if let Some(t) = poked.grid_targets.as_mut() {
                for (v, &e) in t.data_mut().iter_mut().zip(&mb.grid_eligible) {
                    if !e {
                        *v -= 55.0;
                    }
                }
            }
            assert_eq!(loss_of(&model, &params, &poked).0.to_bits(), base.to_bits());
        }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let layout = FeatureLayout {
            discrete: vec![crate::model::DiscreteSlot { feature: 0, vocab: 4 }],
            continuous: vec![],
            num_series: 0,
            series_length: 1,
            treatment: vec![],
            num_classes: 2,
        };
        let g = crate::model::GraphStructure {
            n: 1,
            spd: vec![0],
            bins: vec![0],
            in_degree: vec![0],
            out_degree: vec![0],
        };
        let inputs = NodeBatch {
            n: 1,
            discrete: vec![vec![4]],
            continuous: None,
            timeseries: None,
            structure: g,
        };
        let mb = MaskedBatch {
            inputs,
            discrete_targets: vec![vec![2]],
            discrete_mask: vec![vec![true]],
            continuous_targets: None,
            continuous_mask: vec![],
            grid_targets: None,
            grid_mask: vec![],
            grid_eligible: vec![],
        };
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::full(&[1, 4], 0.7));
        let l = imputation_loss(&mut tape, preds, &mb, &layout, &[true]).unwrap();
        assert!((tape.value(l.total).item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.groups.continuous, None);
        let mut tape = Tape::new();
        let preds = tape.constant(Tensor::full(&[1, 4], 0.7));
        assert!(matches!(
            imputation_loss(&mut tape, preds, &mb, &layout, &[false]),
            Err(Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn perfect_continuous_predictions_have_zero_mse() {
        let layout = FeatureLayout {
            discrete: vec![],
            continuous: vec![0, 1],
            num_series: 0,
            series_length: 1,
            treatment: vec![],
            num_classes: 2,
        };
        let g = crate::model::GraphStructure {
            n: 2,
            spd: vec![0, 1, 1, 0],
            bins: vec![0, 1, 1, 0],
            in_degree: vec![1, 1],
            out_degree: vec![1, 1],
        };
        let targets = Tensor::new(vec![2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let mb = MaskedBatch {
            inputs: NodeBatch {
                n: 2,
                discrete: vec![],
                continuous: Some(Tensor::zeros(&[2, 2])),
                timeseries: None,
                structure: g,
            },
            discrete_targets: vec![],
            discrete_mask: vec![],
            continuous_targets: Some(targets.clone()),
            continuous_mask: vec![true, false, true, true],
            grid_targets: None,
            grid_mask: vec![],
            grid_eligible: vec![],
        };
        let mut tape = Tape::new();
        let preds = tape.constant(targets);
        let l = imputation_loss(&mut tape, preds, &mb, &layout, &[true, true]).unwrap();
        assert_eq!(l.groups.continuous, Some(0.0));
    }

    #[test]
    fn pretraining_loss_gradients_match_finite_differences() {
        use crate::autodiff::{finite_difference_check_many, DEFAULT_EPS, DEFAULT_TOL};
        for preset in [Preset::Static, Preset::Timeseries] {
            for variant in [Variant::Full, Variant::Linear, Variant::NoTsTransformer] {
                let cfg = tiny_config(preset, variant);
                let (layout, batch, cohort) = tiny_batch(preset, &cfg, 6, 14).unwrap();
                let recs: Vec<&PatientRecord> = cohort.records.iter().collect();
                let spec = MaskSpec {
                    ratio: 0.5,
                    block_len: 2,
                    ..MaskSpec::new(match preset {
                        Preset::Static => MaskStrategy::StaticRandom,
                        Preset::Timeseries => MaskStrategy::BlockMasking,
                    })
                };
                let mb = apply_mask_tokens(&cohort.schema, &layout, &recs, &batch, &spec, 0, 3).unwrap();
                let params = build_params(&cfg, &layout, &[Head::Imputation], 2).unwrap();
                let model = Model::new(cfg, layout).unwrap();
                let names = params.names();
                let points: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
                let report = finite_difference_check_many(
                    |tape, vars| {
                        let bound = Bound::from_vars(&names, vars);
                        let enc = model.encode(tape, &bound, &mb.inputs)?;
                        let preds = model.decode(tape, &bound, enc.reps, Head::Imputation)?;
                        Ok(imputation_loss(tape, preds, &mb, &model.layout, &[true; 6])?.total)
                    },
                    &points,
                    DEFAULT_EPS,
                    DEFAULT_TOL,
                )
                .unwrap();
                assert!(report.passed(), "{preset:?} {variant:?}: {}", report.max_rel_error);
            }
        }
    }
}
