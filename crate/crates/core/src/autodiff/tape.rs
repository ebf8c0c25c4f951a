use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        batched_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    Slice {
        a: usize,
        start: usize,
        len: usize,
        width: usize,
    },
    Mean {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
        dim: usize,
    },
    Reshape {
        a: usize,
    },
    Gather {
        a: usize,
        // output flat index -> input flat index
        map: Vec<usize>,
    },
    Softmax {
        logits: usize,
        bias: Option<usize>,
    },
    /// Scalar loss whose local gradient w.r.t. `input` was computed during the forward pass.
    Loss {
        input: usize,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications in topological order for reverse-mode differentiation.
///
/// Every primitive validates shapes, computes its output eagerly, and (when any input
/// requires a gradient) keeps what its backward rule needs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the tape's variables.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, present for every leaf that requires it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    /// Matrix product. `a: [.., m, k]` with `b: [k, n]` shares `b` across all leading
    /// rows; `a: [B, m, k]` with `b: [B, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() < 2 || bv.rank() < 2 {
            return shape_err("matmul needs operands of rank >= 2");
        }
        let k = av.last_dim();
        let m = av.shape()[av.rank() - 2];
        let (batch, n, batched_b, out_shape) = if bv.rank() == 2 {
            if bv.shape()[0] != k {
                return shape_err(format!(
                    "matmul inner dimensions differ: {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                ));
            }
            let n = bv.shape()[1];
            let mut out_shape = av.shape().to_vec();
            *out_shape.last_mut().unwrap() = n;
            (av.numel() / (m * k).max(1), n, false, out_shape)
        } else if av.rank() == 3 && bv.rank() == 3 {
            let batch = av.shape()[0];
            if bv.shape()[0] != batch || bv.shape()[1] != k {
                return shape_err(format!(
                    "batched matmul shapes {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                ));
            }
            let n = bv.shape()[2];
            (batch, n, true, vec![batch, m, n])
        } else {
            return shape_err(format!(
                "unsupported matmul ranks {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        let mut out = vec![0.0; batch * m * n];
        if batched_b {
            for bi in 0..batch {
                gemm_nn(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &bv.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        } else {
            gemm_nn(av.data(), bv.data(), &mut out, batch * m, k, n);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            value,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                batched_b,
            },
        ))
    }

    /// Elementwise sum. `b` may also have a shape equal to a trailing suffix of
    /// `a`'s shape, in which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let suffix_ok = bv.rank() <= av.rank() && av.shape().ends_with(bv.shape());
        if !suffix_ok {
            return shape_err(format!(
                "add: {:?} is not a suffix of {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let bn = bv.numel();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % bn])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same_shape(av, bv, "multiply")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(value, rg, Op::Scale { a: a.0, factor })
    }

    /// Affine map `x·W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if xv.rank() < 1 || wv.rank() != 2 || bv.rank() != 1 {
            return shape_err("linear expects x:[..,in], w:[in,out], b:[out]");
        }
        let (inp, out) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != inp || bv.shape()[0] != out {
            return shape_err(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            ));
        }
        let rows = xv.numel() / inp.max(1);
        let mut data = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        gemm_nn(xv.data(), wv.data(), &mut data, rows, inp, out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            value,
            rg,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
                rows,
                inp,
                out,
            },
        ))
    }

    /// Concatenation along the last axis; all leading shapes must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let lead = {
            let s = self.nodes[first.0].value.shape();
            if s.is_empty() {
                return shape_err("concat of scalars");
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return shape_err(format!("concat: leading shape mismatch {s:?} vs {lead:?}"));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                parts: ids.into_iter().zip(widths).collect(),
                rows,
            },
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last_axis(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let width = av.last_dim();
        if av.rank() == 0 || start + len > width {
            return shape_err(format!(
                "slice [{start}, {}) out of last axis {width}",
                start + len
            ));
        }
        let rows = av.numel() / width.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            rg,
            Op::Slice {
                a: a.0,
                start,
                len,
                width,
            },
        ))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.rank() {
            return shape_err(format!("axis {axis} out of rank {}", av.rank()));
        }
        let shape = av.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 {
            return shape_err("mean over an empty axis");
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            rg,
            Op::Mean {
                a: a.0,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(total), rg, Op::Sum { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(value, rg, Op::Sigmoid { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0]);
        self.push(value, rg, Op::Gelu { a: a.0 })
    }

    /// Normalizes each last-axis row to zero mean and unit variance (eps 1e-5), then
    /// applies the learned scale `gamma` and shift `beta`.
    pub fn layer_norm_last_axis(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let width = xv.last_dim();
        if xv.rank() == 0 || gv.shape() != [width] || bv.shape() != [width] {
            return shape_err(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = xv.numel() / width.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..width {
                let h = (row[c] - mean) * inv;
                xhat[r * width + c] = h;
                data[r * width + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows of `table: [vocab, dim]` selected by `indices`, giving `[indices.len(), dim]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return shape_err("embedding table must be rank 2");
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::Index(format!(
                    "embedding index {ix} outside [0, {vocab})"
                )));
            }
            data.extend_from_slice(&tv.data()[ix * dim..(ix + 1) * dim]);
        }
        let value = Tensor::new(vec![indices.len(), dim], data)?;
        let rg = self.rg(&[table.0]);
        let indices = if rg { indices.to_vec() } else { Vec::new() };
        Ok(self.push(
            value,
            rg,
            Op::Embedding {
                table: table.0,
                indices,
                dim,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, rg, Op::Reshape { a: a.0 }))
    }

    /// Reorders axes so output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true))
        {
            return shape_err(format!("invalid permutation {axes:?} for rank {rank}"));
        }
        let in_shape = av.shape();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let numel = av.numel();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..numel {
            map.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let data = map.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a.0]);
        let map = if rg { map } else { Vec::new() };
        Ok(self.push(value, rg, Op::Gather { a: a.0, map }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let rank = self.nodes[a.0].value.rank();
        if rank < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Row-wise softmax over the last axis of `logits + bias`, stabilized by row-max
    /// subtraction.
    pub fn softmax_rows_with_bias(&mut self, logits: Var, bias: Option<Var>) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() == 0 {
            return shape_err("softmax of a scalar");
        }
        let width = lv.last_dim();
        let mut z = lv.data().to_vec();
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            check_same_shape(lv, bv, "softmax bias")?;
            for (zi, bi) in z.iter_mut().zip(bv.data()) {
                *zi += bi;
            }
        }
        let mut out = vec![0.0; z.len()];
        for (row, orow) in z.chunks(width).zip(out.chunks_mut(width)) {
            kernels::softmax_row(row, orow);
        }
        let value = Tensor::new(lv.shape().to_vec(), out)?;
        let mut ids = vec![logits.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            rg,
            Op::Softmax {
                logits: logits.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    fn loss_support(weights: &[f64]) -> Result<f64> {
        let count = weights.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        Ok(count as f64)
    }

    /// Mean squared error over positions whose weight is 1.
    pub fn mse(&mut self, pred: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let pv = &self.nodes[pred.0].value;
        check_same_shape(pv, target, "mse target")?;
        check_same_shape(pv, weight, "mse weight")?;
        let count = Self::loss_support(weight.data())?;
        let mut total = 0.0;
        let mut local = vec![0.0; pv.numel()];
        for i in 0..pv.numel() {
            let w = weight.data()[i];
            if w != 0.0 {
                let d = pv.data()[i] - target.data()[i];
                total += w * d * d;
                local[i] = 2.0 * w * d / count;
            }
        }
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            Tensor::scalar(total / count),
            rg,
            Op::Loss {
                input: pred.0,
                local_grad: local,
            },
        ))
    }

    /// Softmax cross entropy of `logits: [n, C]` against class indices, averaged over
    /// rows whose weight is 1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || weights.len() != targets.len() {
            return shape_err(format!(
                "cross_entropy: logits {:?}, {} targets, {} weights",
                lv.shape(),
                targets.len(),
                weights.len()
            ));
        }
        let classes = lv.shape()[1];
        let count = Self::loss_support(weights)?;
        let mut total = 0.0;
        let mut local = vec![0.0; lv.numel()];
        let mut probs = vec![0.0; classes];
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            if t >= classes {
                return Err(Error::Index(format!("class {t} outside [0, {classes})")));
            }
            let row = &lv.data()[r * classes..(r + 1) * classes];
            total += w * (kernels::log_sum_exp(row) - row[t]);
            kernels::softmax_row(row, &mut probs);
            for c in 0..classes {
                let onehot = if c == t { 1.0 } else { 0.0 };
                local[r * classes + c] = w * (probs[c] - onehot) / count;
            }
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total / count),
            rg,
            Op::Loss {
                input: logits.0,
                local_grad: local,
            },
        ))
    }

    /// Binary cross entropy on logits against `{0, 1}` targets, averaged over positions
    /// whose weight is 1.
    pub fn binary_cross_entropy(&mut self, logits: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        check_same_shape(lv, target, "bce target")?;
        check_same_shape(lv, weight, "bce weight")?;
        let count = Self::loss_support(weight.data())?;
        let mut total = 0.0;
        let mut local = vec![0.0; lv.numel()];
        for i in 0..lv.numel() {
            let w = weight.data()[i];
            if w != 0.0 {
                let (z, t) = (lv.data()[i], target.data()[i]);
                total += w * (kernels::softplus(z) - t * z);
                local[i] = w * (kernels::sigmoid(z) - t) / count;
            }
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total / count),
            rg,
            Op::Loss {
                input: logits.0,
                local_grad: local,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape. Every leaf that
    /// requires a gradient receives one (zero when it has no path to the loss).
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if nodes[loss.0].value.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaf_grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let needs = |v: usize| nodes[v].requires_grad;
            let numel = |v: usize| nodes[v].value.numel();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    batched_b,
                } => {
                    let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], numel(a));
                        if batched_b {
                            for bi in 0..batch {
                                gemm_nt(
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &bv[bi * k * n..(bi + 1) * k * n],
                                    &mut ga[bi * m * k..(bi + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        } else {
                            gemm_nt(&g, bv, ga, batch * m, n, k);
                        }
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], numel(b));
                        if batched_b {
                            for bi in 0..batch {
                                gemm_tn(
                                    &av[bi * m * k..(bi + 1) * m * k],
                                    &g[bi * m * n..(bi + 1) * m * n],
                                    &mut gb[bi * k * n..(bi + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        } else {
                            gemm_tn(av, &g, gb, batch * m, k, n);
                        }
                    }
                }
                &Op::Add { a, b } => {
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], numel(a));
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if needs(b) {
                        let bn = numel(b);
                        let gb = accumulate(&mut grads[b], bn);
                        for (i, y) in g.iter().enumerate() {
                            gb[i % bn] += y;
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if needs(a) {
                        let bv = nodes[b].value.data();
                        let ga = accumulate(&mut grads[a], numel(a));
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if needs(b) {
                        let av = nodes[a].value.data();
                        let gb = accumulate(&mut grads[b], numel(b));
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                &Op::Scale { a, factor } => {
                    let ga = accumulate(&mut grads[a], numel(a));
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += factor * y);
                }
                &Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    inp,
                    out,
                } => {
                    if needs(x) {
                        let wv = nodes[w].value.data();
                        let gx = accumulate(&mut grads[x], numel(x));
                        gemm_nt(&g, wv, gx, rows, out, inp);
                    }
                    if needs(w) {
                        let xv = nodes[x].value.data();
                        let gw = accumulate(&mut grads[w], numel(w));
                        gemm_tn(xv, &g, gw, rows, inp, out);
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], out);
                        for row in g.chunks(out) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Concat { parts, rows } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, w) in parts {
                        if needs(p) {
                            let gp = accumulate(&mut grads[p], numel(p));
                            for r in 0..*rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                gp[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        }
                        offset += w;
                    }
                }
                &Op::Slice {
                    a,
                    start,
                    len,
                    width,
                } => {
                    let ga = accumulate(&mut grads[a], numel(a));
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        ga[r * width + start..r * width + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                &Op::Mean {
                    a,
                    outer,
                    len,
                    inner,
                } => {
                    let inv = 1.0 / len as f64;
                    let ga = accumulate(&mut grads[a], numel(a));
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y * inv);
                        }
                    }
                }
                &Op::Sum { a } => {
                    let ga = accumulate(&mut grads[a], numel(a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                &Op::Sigmoid { a } => {
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[a], numel(a));
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                &Op::Gelu { a } => {
                    let xv = nodes[a].value.data();
                    let ga = accumulate(&mut grads[a], numel(a));
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let width = nodes[gamma].value.numel();
                    let gv = nodes[gamma].value.data();
                    if needs(gamma) {
                        let gg = accumulate(&mut grads[gamma], width);
                        for (row_g, row_h) in g.chunks(width).zip(xhat.chunks(width)) {
                            for c in 0..width {
                                gg[c] += row_g[c] * row_h[c];
                            }
                        }
                    }
                    if needs(beta) {
                        let gb = accumulate(&mut grads[beta], width);
                        for row_g in g.chunks(width) {
                            gb.iter_mut().zip(row_g).for_each(|(x, y)| *x += y);
                        }
                    }
                    if needs(x) {
                        let gx = accumulate(&mut grads[x], numel(x));
                        let wf = width as f64;
                        let mut dxhat = vec![0.0; width];
                        for (r, &inv) in inv_std.iter().enumerate() {
                            let row_g = &g[r * width..(r + 1) * width];
                            let row_h = &xhat[r * width..(r + 1) * width];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for c in 0..width {
                                dxhat[c] = row_g[c] * gv[c];
                                sum_d += dxhat[c];
                                sum_dh += dxhat[c] * row_h[c];
                            }
                            for c in 0..width {
                                gx[r * width + c] +=
                                    inv / wf * (wf * dxhat[c] - sum_d - row_h[c] * sum_dh);
                            }
                        }
                    }
                }
                Op::Embedding {
                    table,
                    indices,
                    dim,
                } => {
                    let dim = *dim;
                    let gt = accumulate(&mut grads[*table], numel(*table));
                    for (r, &ix) in indices.iter().enumerate() {
                        gt[ix * dim..(ix + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                &Op::Reshape { a } => {
                    let ga = accumulate(&mut grads[a], numel(a));
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::Gather { a, map } => {
                    let ga = accumulate(&mut grads[*a], numel(*a));
                    for (o, &i) in map.iter().enumerate() {
                        ga[i] += g[o];
                    }
                }
                &Op::Softmax { logits, bias } => {
                    let y = node.value.data();
                    let width = node.value.last_dim();
                    let mut dz = vec![0.0; g.len()];
                    for ((dz_row, y_row), g_row) in dz
                        .chunks_mut(width)
                        .zip(y.chunks(width))
                        .zip(g.chunks(width))
                    {
                        let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                        for c in 0..width {
                            dz_row[c] = y_row[c] * (g_row[c] - dot);
                        }
                    }
                    if needs(logits) {
                        let gl = accumulate(&mut grads[logits], dz.len());
                        gl.iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                    if let Some(b) = bias.filter(|&b| needs(b)) {
                        let gb = accumulate(&mut grads[b], dz.len());
                        gb.iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Loss { input, local_grad } => {
                    let gi = accumulate(&mut grads[*input], local_grad.len());
                    gi.iter_mut()
                        .zip(local_grad)
                        .for_each(|(x, y)| *x += g[0] * y);
                }
            }
        }

        // Leaves recorded after the loss cannot be reached from it.
        for (id, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}
