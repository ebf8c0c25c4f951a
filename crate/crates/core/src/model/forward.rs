use std::collections::BTreeMap;

use super::batch::{GraphStructure, NodeBatch};
use super::config::{FeatureLayout, ModelConfig};
use super::params::{Head, ModelParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters placed on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Encoder output plus the attention matrices of every graph layer, `[heads, N, N]`.
pub struct Encoded {
    pub reps: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: FeatureLayout,
}

impl Model {
    pub fn new(config: ModelConfig, layout: FeatureLayout) -> Result<Self> {
        config.validate(&layout)?;
        Ok(Self { config, layout })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden(&self.layout)
    }

    fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        tape.linear(x, w, b)
    }

    fn layer_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let g = p.get(&format!("{name}.g"))?;
        let b = p.get(&format!("{name}.b"))?;
        tape.layer_norm_last_axis(x, g, b)
    }

    /// Multi-head self-attention over `x: [B, T, D]`, with an optional additive bias of
    /// shape `[B·heads, T, T]`. Returns the output and the attention probabilities.
    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        name: &str,
        x: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            tape.reshape(v, &[b * h, t, dh])
        };
        let q = Self::linear(tape, p, &format!("{name}.q"), x)?;
        let k = Self::linear(tape, p, &format!("{name}.k"), x)?;
        let v = Self::linear(tape, p, &format!("{name}.v"), x)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
        let kt = tape.transpose_last_two(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax_rows_with_bias(scores, bias)?;
        let out = tape.matmul(probs, v)?;
        let out = tape.reshape(out, &[b, h, t, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, d])?;
        let out = Self::linear(tape, p, &format!("{name}.o"), out)?;
        Ok((out, probs))
    }

    /// Pre-norm block: `x + MHA(LN(x))`, then `x + FFN(LN(x))` with a GELU FFN.
    fn transformer_layer(
        &self,
        tape: &mut Tape,
        p: &Bound,
        name: &str,
        x: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let a = Self::layer_norm(tape, p, &format!("{name}.ln1"), x)?;
        let (a, probs) = self.attention(tape, p, name, a, bias)?;
        let x = tape.add(x, a)?;
        let f = Self::layer_norm(tape, p, &format!("{name}.ln2"), x)?;
        let f = Self::linear(tape, p, &format!("{name}.ff1"), f)?;
        let f = tape.gelu(f);
        let f = Self::linear(tape, p, &format!("{name}.ff2"), f)?;
        Ok((tape.add(x, f)?, probs))
    }

    /// Sum of per-feature embedding rows, `[N, D']`.
    pub fn embed_discrete(&self, tape: &mut Tape, p: &Bound, indices: &[Vec<usize>]) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (k, col) in indices.iter().enumerate() {
            let table = p.get(&format!("encoder.disc.{k}"))?;
            let rows = tape.embedding_lookup(table, col)?;
            acc = Some(match acc {
                None => rows,
                Some(a) => tape.add(a, rows)?,
            });
        }
        Ok(acc)
    }

    /// Affine map of the continuous block, `[N, C']`.
    pub fn embed_continuous(&self, tape: &mut Tape, p: &Bound, values: &Tensor) -> Result<Var> {
        let x = tape.constant(values.clone());
        Self::linear(tape, p, "encoder.cont", x)
    }

    /// `[N, τ, 2S]` → linear → (positional embedding + transformer layers) → mean over
    /// hours → projection, `[N, S']`.
    pub fn embed_timeseries(&self, tape: &mut Tape, p: &Bound, series: &Tensor) -> Result<Var> {
        let x = tape.constant(series.clone());
        let mut h = Self::linear(tape, p, "encoder.ts.in", x)?;
        if self.config.use_ts_transformer {
            let pos = p.get("encoder.ts.pos")?;
            h = tape.add(h, pos)?;
            for l in 0..self.config.ts_layers {
                h = self
                    .transformer_layer(tape, p, &format!("encoder.ts.layer{l}"), h, None)?
                    .0;
            }
        }
        let pooled = tape.mean_over_axis(h, 1)?;
        Self::linear(tape, p, "encoder.ts.out", pooled)
    }

    /// Per-head bias `spatial[spd(i,j)] + edge[bin(i,j)]`, shaped `[heads, N, N]`.
    fn structural_bias(&self, tape: &mut Tape, p: &Bound, s: &GraphStructure) -> Result<Var> {
        let n = s.n;
        let heads = self.config.heads;
        let lookup = |tape: &mut Tape, table: &str, idx: &[usize]| -> Result<Var> {
            let t = p.get(table)?;
            let rows = tape.embedding_lookup(t, idx)?;
            let rows = tape.transpose_last_two(rows)?;
            tape.reshape(rows, &[heads, n, n])
        };
        let spatial = lookup(tape, "encoder.spatial_bias", &s.spd)?;
        let edge = lookup(tape, "encoder.edge_bias", &s.bins)?;
        tape.add(spatial, edge)
    }

    fn degree_embedding(&self, tape: &mut Tape, p: &Bound, s: &GraphStructure) -> Result<Var> {
        let cap = |d: &[usize]| -> Vec<usize> {
            d.iter().map(|&x| x.min(self.config.max_degree)).collect()
        };
        let t_in = p.get("encoder.deg_in")?;
        let t_out = p.get("encoder.deg_out")?;
        let a = tape.embedding_lookup(t_in, &cap(&s.in_degree))?;
        let b = tape.embedding_lookup(t_out, &cap(&s.out_degree))?;
        tape.add(a, b)
    }

    /// Node embedding `[N, F]`: discrete, continuous and time-series blocks in that order.
    pub fn node_embedding(&self, tape: &mut Tape, p: &Bound, batch: &NodeBatch) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(d) = self.embed_discrete(tape, p, &batch.discrete)? {
            parts.push(d);
        }
        if let Some(c) = &batch.continuous {
            parts.push(self.embed_continuous(tape, p, c)?);
        }
        if let Some(ts) = &batch.timeseries {
            parts.push(self.embed_timeseries(tape, p, ts)?);
        }
        assemble_node_embedding(tape, &parts)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &NodeBatch) -> Result<Encoded> {
        let n = batch.n;
        let f = self.hidden();
        let mut h = self.node_embedding(tape, p, batch)?;
        let mut attention = Vec::new();
        if self.config.use_graphormer {
            batch.structure.check()?;
            if batch.structure.n != n {
                return Err(Error::Shape(format!(
                    "graph structure has {} nodes, batch has {n}",
                    batch.structure.n
                )));
            }
            let deg = self.degree_embedding(tape, p, &batch.structure)?;
            h = tape.add(h, deg)?;
            let bias = self.structural_bias(tape, p, &batch.structure)?;
            h = tape.reshape(h, &[1, n, f])?;
            for l in 0..self.config.num_layers {
                let (next, probs) =
                    self.transformer_layer(tape, p, &format!("encoder.layer{l}"), h, Some(bias))?;
                h = next;
                attention.push(probs);
            }
            h = tape.reshape(h, &[n, f])?;
        } else {
            h = Self::linear(tape, p, "encoder.linear", h)?;
        }
        let reps = Self::layer_norm(tape, p, "encoder.final_ln", h)?;
        Ok(Encoded { reps, attention })
    }

    pub fn decode(&self, tape: &mut Tape, p: &Bound, reps: Var, head: Head) -> Result<Var> {
        Self::linear(tape, p, head.prefix().trim_end_matches('.'), reps)
    }
}

/// Concatenates the present embedding blocks along the feature axis.
pub fn assemble_node_embedding(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Err(Error::Config("no feature block to embed".into())),
        [single] => Ok(*single),
        _ => tape.concat_last_axis(parts),
    }
}
