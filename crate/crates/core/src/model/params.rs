use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::{FeatureLayout, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Task,
    Imputation,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Task => "decoder.task.",
            Head::Imputation => "decoder.impute.",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Head::Task => 1,
            Head::Imputation => 2,
        }
    }
}

/// Named parameter tensors. Every name starts with `encoder.` or `decoder.`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if !name.starts_with(ENCODER_PREFIX) && !name.starts_with(DECODER_PREFIX) {
            return Err(Error::Config(format!(
                "parameter '{name}' is neither encoder nor decoder"
            )));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn encoder(&self) -> ModelParams {
        self.filtered(ENCODER_PREFIX)
    }

    pub fn decoder(&self) -> ModelParams {
        self.filtered(DECODER_PREFIX)
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.tensors.keys().any(|k| k.starts_with(head.prefix()))
    }

    fn filtered(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelParams) {
        self.tensors.extend(other.tensors);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut p = ModelParams::new();
        for (k, v) in tensors {
            p.insert(k, v)?;
        }
        Ok(p)
    }
}

struct Init<'a> {
    rng: &'a mut Rng,
    out: &'a mut ModelParams,
}

impl Init<'_> {
    fn put(&mut self, name: String, t: Tensor) {
        self.out.insert(name, t).expect("prefixed name");
    }

    /// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        self.put(
            format!("{name}.w"),
            Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
        );
        self.put(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn embedding(&mut self, name: &str, rows: usize, cols: usize) {
        let normal = Normal::new(0.0, 0.02).expect("valid sd");
        let data = (0..rows * cols).map(|_| normal.sample(self.rng)).collect();
        self.put(
            name.to_string(),
            Tensor::new(vec![rows, cols], data).expect("shape"),
        );
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.put(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        self.put(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    fn transformer_layer(&mut self, name: &str, dim: usize, ffn: usize) {
        self.layer_norm(&format!("{name}.ln1"), dim);
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{proj}"), dim, dim);
        }
        self.layer_norm(&format!("{name}.ln2"), dim);
        self.linear(&format!("{name}.ff1"), dim, ffn * dim);
        self.linear(&format!("{name}.ff2"), ffn * dim, dim);
    }
}

/// Encoder tensors drawn from the `INIT` stream of `seed`.
pub fn init_encoder(config: &ModelConfig, layout: &FeatureLayout, seed: u64) -> Result<ModelParams> {
    config.validate(layout)?;
    let mut rng = rng_for(seed, &[stream::INIT]);
    let mut out = ModelParams::new();
    let mut init = Init {
        rng: &mut rng,
        out: &mut out,
    };
    let f = config.hidden(layout);
    for (k, slot) in layout.discrete.iter().enumerate() {
        init.embedding(&format!("encoder.disc.{k}"), slot.vocab + 1, config.discrete_dim);
    }
    if !layout.continuous.is_empty() {
        init.linear("encoder.cont", layout.continuous.len(), config.continuous_dim);
    }
    if layout.num_series > 0 {
        let e = config.ts_hidden;
        init.linear("encoder.ts.in", 2 * layout.num_series, e);
        if config.use_ts_transformer {
            init.embedding("encoder.ts.pos", layout.series_length, e);
            for l in 0..config.ts_layers {
                init.transformer_layer(&format!("encoder.ts.layer{l}"), e, config.ffn_multiplier);
            }
        }
        init.linear("encoder.ts.out", e, config.ts_dim);
    }
    if config.use_graphormer {
        init.embedding("encoder.deg_in", config.max_degree + 1, f);
        init.embedding("encoder.deg_out", config.max_degree + 1, f);
        init.embedding("encoder.spatial_bias", config.d_max + 2, config.heads);
        init.embedding("encoder.edge_bias", config.edge_bins + 1, config.heads);
        for l in 0..config.num_layers {
            init.transformer_layer(&format!("encoder.layer{l}"), f, config.ffn_multiplier);
        }
    } else {
        init.linear("encoder.linear", f, f);
    }
    init.layer_norm("encoder.final_ln", f);
    Ok(out)
}

/// One decoder head drawn from its own stream of `seed`.
pub fn init_head(config: &ModelConfig, layout: &FeatureLayout, head: Head, seed: u64) -> ModelParams {
    let mut rng = rng_for(seed, &[stream::HEAD_INIT, head.tag()]);
    let mut out = ModelParams::new();
    let mut init = Init {
        rng: &mut rng,
        out: &mut out,
    };
    let f = config.hidden(layout);
    let width = match head {
        Head::Task => layout.num_classes,
        Head::Imputation => layout.imputation_width(),
    };
    init.linear(head.prefix().trim_end_matches('.'), f, width);
    out
}

/// Encoder plus the requested heads, all from `seed`.
pub fn build_params(
    config: &ModelConfig,
    layout: &FeatureLayout,
    heads: &[Head],
    seed: u64,
) -> Result<ModelParams> {
    let mut p = init_encoder(config, layout, seed)?;
    for &h in heads {
        p.extend(init_head(config, layout, h, seed));
    }
    Ok(p)
}
