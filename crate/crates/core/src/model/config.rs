use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{FeatureSchema, Preset, SeriesKind};
use crate::error::{Error, Result};
use crate::graph::{D_MAX, EDGE_BINS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Graphormer stack replaced by one position-wise linear layer.
    Linear,
    /// Time-series transformer layers skipped.
    NoTsTransformer,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "linear" => Ok(Variant::Linear),
            "no-ts-transformer" => Ok(Variant::NoTsTransformer),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads: usize,
    /// D'
    pub discrete_dim: usize,
    /// C'
    pub continuous_dim: usize,
    /// E
    pub ts_hidden: usize,
    /// S'
    pub ts_dim: usize,
    pub ts_layers: usize,
    pub ffn_multiplier: usize,
    pub use_graphormer: bool,
    pub use_ts_transformer: bool,
    /// Feed non-medical (demographic) features to the encoder as well.
    pub include_non_medical: bool,
    /// Degrees above this share the last embedding row.
    pub max_degree: usize,
    pub d_max: usize,
    pub edge_bins: usize,
}

impl ModelConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            num_layers: match preset {
                Preset::Static => 4,
                Preset::Timeseries => 8,
            },
            heads: 4,
            discrete_dim: 32,
            continuous_dim: 32,
            ts_hidden: 64,
            ts_dim: 32,
            ts_layers: 2,
            ffn_multiplier: 4,
            use_graphormer: true,
            use_ts_transformer: true,
            include_non_medical: false,
            max_degree: 32,
            d_max: D_MAX,
            edge_bins: EDGE_BINS,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {}
            Variant::Linear => self.use_graphormer = false,
            Variant::NoTsTransformer => self.use_ts_transformer = false,
        }
        self
    }

    pub fn variant(&self) -> Variant {
        if !self.use_graphormer {
            Variant::Linear
        } else if !self.use_ts_transformer {
            Variant::NoTsTransformer
        } else {
            Variant::Full
        }
    }

    /// Hidden width `F` for the blocks present in `layout`.
    pub fn hidden(&self, layout: &FeatureLayout) -> usize {
        let mut f = 0;
        if !layout.discrete.is_empty() {
            f += self.discrete_dim;
        }
        if !layout.continuous.is_empty() {
            f += self.continuous_dim;
        }
        if layout.num_series > 0 {
            f += self.ts_dim;
        }
        f
    }

    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        let f = self.hidden(layout);
        if f == 0 {
            return Err(Error::Config("no feature block present, hidden width is 0".into()));
        }
        if self.heads == 0 || f % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide hidden width {f}",
                self.heads
            )));
        }
        if self.use_graphormer && self.num_layers == 0 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if layout.num_series > 0 && self.use_ts_transformer {
            if self.ts_layers == 0 {
                return Err(Error::Config("ts_layers must be >= 1".into()));
            }
            if self.ts_hidden % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{} heads do not divide ts_hidden {}",
                    self.heads, self.ts_hidden
                )));
            }
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("ffn_multiplier must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSlot {
    /// Index into the schema's discrete features.
    pub feature: usize,
    pub vocab: usize,
}

/// The schema features the model reads, in encoder order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub discrete: Vec<DiscreteSlot>,
    /// Indices into the schema's continuous features.
    pub continuous: Vec<usize>,
    pub num_series: usize,
    pub series_length: usize,
    pub treatment: Vec<bool>,
    pub num_classes: usize,
}

impl FeatureLayout {
    pub fn new(schema: &FeatureSchema, include_non_medical: bool) -> Self {
        let keep = |medical: bool| medical || include_non_medical;
        Self {
            discrete: schema
                .discrete_features
                .iter()
                .enumerate()
                .filter(|(_, f)| keep(f.is_medical))
                .map(|(feature, f)| DiscreteSlot {
                    feature,
                    vocab: f.vocab_size,
                })
                .collect(),
            continuous: schema
                .continuous_features
                .iter()
                .enumerate()
                .filter(|(_, f)| keep(f.is_medical))
                .map(|(i, _)| i)
                .collect(),
            num_series: schema.num_series(),
            series_length: schema.series_length,
            treatment: schema
                .timeseries_features
                .iter()
                .map(|f| f.kind == SeriesKind::BinaryTreatment)
                .collect(),
            num_classes: schema.num_classes,
        }
    }

    pub fn grid_len(&self) -> usize {
        self.num_series * self.series_length
    }

    /// Width of the imputation head: a logit vector per discrete feature, one value
    /// per continuous feature, and the `τ×S` grid.
    pub fn imputation_width(&self) -> usize {
        self.discrete.iter().map(|d| d.vocab).sum::<usize>()
            + self.continuous.len()
            + self.grid_len()
    }

    /// Start of each discrete slot's logits within the imputation row.
    pub fn discrete_offsets(&self) -> Vec<usize> {
        self.discrete
            .iter()
            .scan(0, |acc, d| {
                let at = *acc;
                *acc += d.vocab;
                Some(at)
            })
            .collect()
    }

    pub fn continuous_offset(&self) -> usize {
        self.discrete.iter().map(|d| d.vocab).sum()
    }

    /// Grid cell `(h, s)` lives at `grid_offset + h·S + s`.
    pub fn grid_offset(&self) -> usize {
        self.continuous_offset() + self.continuous.len()
    }
}

/// Hash of everything that fixes encoder tensor shapes and meaning.
pub fn fingerprint(config: &ModelConfig, layout: &FeatureLayout) -> u64 {
    #[derive(Serialize)]
    struct EncoderKey<'a> {
        config: &'a ModelConfig,
        discrete: &'a [DiscreteSlot],
        continuous: &'a [usize],
        num_series: usize,
        series_length: usize,
        treatment: &'a [bool],
    }
    let key = EncoderKey {
        config,
        discrete: &layout.discrete,
        continuous: &layout.continuous,
        num_series: layout.num_series,
        series_length: layout.series_length,
        treatment: &layout.treatment,
    };
    let bytes = serde_json::to_vec(&key).expect("plain data serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{static_schema, timeseries_schema, SynthKnobs};

    #[test]
    fn static_layout_keeps_medical_features() {
        let layout = FeatureLayout::new(&static_schema(), false);
        assert_eq!(layout.discrete.len(), 7);
        assert_eq!(layout.continuous.len(), 6);
        let cfg = ModelConfig::for_preset(Preset::Static);
        assert_eq!(cfg.hidden(&layout), 64);
        cfg.validate(&layout).unwrap();
        let with_demo = FeatureLayout::new(&static_schema(), true);
        assert_eq!(with_demo.discrete.len(), 9);
    }

    #[test]
    fn imputation_width_arithmetic() {
        let layout = FeatureLayout {
            discrete: vec![
                DiscreteSlot { feature: 0, vocab: 4 },
                DiscreteSlot { feature: 1, vocab: 4 },
            ],
            continuous: vec![0, 1, 2],
            num_series: 0,
            series_length: 1,
            treatment: vec![],
            num_classes: 2,
        };
        assert_eq!(layout.imputation_width(), 11);
        assert_eq!(layout.discrete_offsets(), vec![0, 4]);
        assert_eq!(layout.grid_offset(), 11);
    }

    #[test]
    fn fingerprint_tracks_shapes() {
        let layout = FeatureLayout::new(&timeseries_schema(&SynthKnobs::timeseries_style()), false);
        let a = ModelConfig::for_preset(Preset::Timeseries);
        let mut b = a.clone();
        assert_eq!(fingerprint(&a, &layout), fingerprint(&b, &layout));
        b.ts_dim = 16;
        assert_ne!(fingerprint(&a, &layout), fingerprint(&b, &layout));
        let mut other = layout.clone();
        other.num_classes = 5;
        assert_eq!(fingerprint(&a, &layout), fingerprint(&a, &other));
    }

    #[test]
    fn heads_must_divide_hidden() {
        let layout = FeatureLayout::new(&static_schema(), false);
        let mut cfg = ModelConfig::for_preset(Preset::Static);
        cfg.heads = 3;
        assert!(matches!(cfg.validate(&layout), Err(Error::Config(_))));
    }

    #[test]
    fn empty_layout_rejected() {
        let layout = FeatureLayout {
            discrete: vec![],
            continuous: vec![],
            num_series: 0,
            series_length: 1,
            treatment: vec![],
            num_classes: 2,
        };
        let cfg = ModelConfig::for_preset(Preset::Static);
        assert!(matches!(cfg.validate(&layout), Err(Error::Config(_))));
    }
}
