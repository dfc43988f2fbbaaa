//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every value is a node on a [`Tape`]; operations append nodes and record
//! enough structure to run [`Tape::backward`], which fills the `grad` slot of
//! every `requires_grad` ancestor of the loss. Tensors are immutable once
//! created; gradient accumulation is the only mutation, and it accumulates
//! across `backward` calls until [`Tape::zero_grad`].
//!
//! The op set is exactly what the segmentation pipeline needs: matrix
//! products, transformer pointwise ops, softmax/cross-entropy, cosine
//! similarity, slicing/concatenation for attention heads, and the two image
//! ops (bilinear upsampling and a padded 3x3 convolution).

pub mod gradcheck;
pub mod params;

use crate::error::{CpSegError, Result};

const GELU_COEF: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One tensor value plus its position in the computation record.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    SoftmaxLast { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    RowSums { x: TensorId },
    CrossEntropyProbs { p: TensorId, labels: Vec<usize>, floor: f64 },
    L2NormalizeRows { x: TensorId },
    CosineSim { a: TensorId, b: TensorId },
    GatherRows { x: TensorId, indices: Vec<usize> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    RepeatRows { x: TensorId },
    MulColVec { x: TensorId, col: TensorId },
    BilinearUp { x: TensorId, factor: usize },
    Conv3x3 { x: TensorId, w: TensorId, bias: TensorId },
}

/// Floor applied inside `-ln(p)` so perfect predictions stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// C[m,n] = A[m,k] * B[k,n]; B is repacked column-major so the inner loop is
/// a contiguous dot product.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose_raw(b, k, n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(row, &bt[j * k..(j + 1) * k]);
        }
    }
    c
}

fn gelu_scalar(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Source-pixel interpolation stencil for one output coordinate under the
/// half-pixel-centers convention.
fn bilinear_stencil(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.clamp(0.0, (src_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    let t = src - lo as f64;
    (lo, hi, t)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CpSegError::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(CpSegError::Shape(format!("{op} requires a 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn dims3(&self, id: TensorId, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 3 {
            return Err(CpSegError::Shape(format!("{op} requires a 3-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CpSegError::Dimension {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(CpSegError::Dimension {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let data = transpose_raw(&self.nodes[x.0].data, r, c);
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(CpSegError::Shape(format!(
                "reshape from {:?} to {:?} changes element count",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, shape, rg, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    /// `x[n,d] + bias[d]`, broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "add_bias")?;
        if self.nodes[bias.0].shape != [d] {
            return Err(CpSegError::Dimension {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.nodes[bias.0].data[j];
            }
        }
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(data, vec![n, d], rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::AddConst { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(data, shape, rg, Op::Gelu { x })
    }

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| {
            CpSegError::Shape("softmax requires at least one axis".into())
        })?;
        if self.nodes[x.0].data.iter().any(|v| !v.is_finite()) {
            return Err(CpSegError::Numeric("softmax input contains a non-finite value".into()));
        }
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, shape, rg, Op::SoftmaxLast { x }))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| {
            CpSegError::Shape("layer_norm requires at least one axis".into())
        })?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(CpSegError::Dimension {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        let gamma_data = &self.nodes[gamma.0].data;
        let beta_data = &self.nodes[beta.0].data;
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gamma_data[j] + beta_data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(data, shape, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![s / n], vec![1], rg, Op::MeanAll { x })
    }

    /// Row-wise sum: `[n,d] -> [n,1]`.
    pub fn row_sums(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "row_sums")?;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(d)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![n, 1], rg, Op::RowSums { x }))
    }

    /// Mean over rows of `-ln(p[i, labels[i]])` with the log argument floored
    /// at [`LOG_FLOOR`]. `p` holds probabilities, not logits.
    pub fn cross_entropy_probs(&mut self, p: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = self.dims2(p, "cross_entropy")?;
        if labels.len() != n {
            return Err(CpSegError::Contract(format!(
                "cross_entropy got {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(CpSegError::Label {
                    label: y,
                    index: i,
                    num_classes: k,
                });
            }
        }
        debug_assert!(
            self.nodes[p.0].data.chunks(k).all(|row| {
                let s: f64 = row.iter().sum();
                (s - 1.0).abs() < 1e-6
            }),
            "cross_entropy expects probability rows"
        );
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let v = self.nodes[p.0].data[i * k + y].max(LOG_FLOOR);
            total -= v.ln();
        }
        let rg = self.needs_grad(&[p]);
        Ok(self.push(
            vec![total / n as f64],
            vec![1],
            rg,
            Op::CrossEntropyProbs {
                p,
                labels: labels.to_vec(),
                floor: LOG_FLOOR,
            },
        ))
    }

    /// Scale each row of `[n,d]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "l2_normalize_rows")?;
        let mut data = self.nodes[x.0].data.clone();
        for (i, row) in data.chunks_mut(d).enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(CpSegError::DegenerateVector(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![n, d], rg, Op::L2NormalizeRows { x }))
    }

    /// Cosine similarity of two vectors, `u.v / (|u||v|)`.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let na = self.nodes[a.0].numel();
        let nb = self.nodes[b.0].numel();
        if na != nb {
            return Err(CpSegError::Dimension {
                op: "cosine_similarity",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let norm_a = dot(ad, ad).sqrt();
        let norm_b = dot(bd, bd).sqrt();
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(CpSegError::DegenerateVector(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let c = dot(ad, bd) / (norm_a * norm_b);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![c], vec![1], rg, Op::CosineSim { a, b }))
    }

    /// Select rows of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        for &i in indices {
            if i >= n {
                return Err(CpSegError::Shape(format!(
                    "gather_rows index {i} out of range for {n} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.nodes[x.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            data,
            vec![indices.len(), d],
            rg,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "slice_rows")?;
        if start + len > n {
            return Err(CpSegError::Shape(format!(
                "slice_rows {start}..{} out of range for {n} rows",
                start + len
            )));
        }
        let data = self.nodes[x.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![len, d], rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(CpSegError::Shape(format!(
                "slice_cols {start}..{} out of range for {d} columns",
                start + len
            )));
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![n, len], rg, Op::SliceCols { x, start }))
    }

    /// Stack 2-d parts vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CpSegError::Contract("concat_rows of zero parts".into()));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, dc) = self.dims2(p, "concat_rows")?;
            if dc != d {
                return Err(CpSegError::Dimension {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            data,
            vec![rows, d],
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    /// Stack 2-d parts horizontally; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CpSegError::Contract("concat_cols of zero parts".into()));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(CpSegError::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            width += c;
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for &p in parts {
                let c = self.nodes[p.0].shape[1];
                data.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            data,
            vec![n, width],
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Broadcast a `[1,d]` row to `[n,d]`.
    pub fn repeat_rows(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        let (r, d) = self.dims2(x, "repeat_rows")?;
        if r != 1 {
            return Err(CpSegError::Shape(format!(
                "repeat_rows expects a single row, got {r}"
            )));
        }
        let row = self.nodes[x.0].data.clone();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![n, d], rg, Op::RepeatRows { x }))
    }

    /// Scale each row of `x[n,d]` by the matching entry of `col[n,1]`.
    pub fn mul_colvec(&mut self, x: TensorId, col: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "mul_colvec")?;
        if self.nodes[col.0].shape != [n, 1] {
            return Err(CpSegError::Dimension {
                op: "mul_colvec",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[col.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            let c = self.nodes[col.0].data[i];
            for v in &mut data[i * d..(i + 1) * d] {
                *v *= c;
            }
        }
        let rg = self.needs_grad(&[x, col]);
        Ok(self.push(data, vec![n, d], rg, Op::MulColVec { x, col }))
    }

    /// Bilinear upsampling of `[h,w,c]` by an integer factor, half-pixel
    /// centers with edge clamping.
    pub fn bilinear_upsample(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let (h, w, c) = self.dims3(x, "bilinear_upsample")?;
        if factor == 0 {
            return Err(CpSegError::Shape("bilinear_upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_stencil(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_stencil(ox, factor, w);
                for ch in 0..c {
                    let v00 = src[(y0 * w + x0) * c + ch];
                    let v01 = src[(y0 * w + x1) * c + ch];
                    let v10 = src[(y1 * w + x0) * c + ch];
                    let v11 = src[(y1 * w + x1) * c + ch];
                    let top = v00 * (1.0 - tx) + v01 * tx;
                    let bot = v10 * (1.0 - tx) + v11 * tx;
                    data[(oy * ow + ox) * c + ch] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(data, vec![oh, ow, c], rg, Op::BilinearUp { x, factor }))
    }

    /// 3x3 convolution with zero padding 1: `[h,w,cin] -> [h,w,cout]` with
    /// weights `[3,3,cin,cout]` and bias `[cout]`.
    pub fn conv3x3(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let (h, wd, cin) = self.dims3(x, "conv3x3")?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin {
            return Err(CpSegError::Dimension {
                op: "conv3x3",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: ws,
            });
        }
        let cout = ws[3];
        if self.nodes[bias.0].shape != [cout] {
            return Err(CpSegError::Dimension {
                op: "conv3x3",
                lhs: vec![cout],
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let wt = &self.nodes[w.0].data;
        let bs = &self.nodes[bias.0].data;
        let mut data = vec![0.0; h * wd * cout];
        for y in 0..h {
            for x_ in 0..wd {
                let out = &mut data[(y * wd + x_) * cout..(y * wd + x_ + 1) * cout];
                out.copy_from_slice(bs);
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = x_ as isize + dx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let pix = &src[((sy as usize) * wd + sx as usize) * cin..][..cin];
                        let wbase = (dy * 3 + dx) * cin * cout;
                        for (ci, &v) in pix.iter().enumerate() {
                            let wrow = &wt[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (co, o) in out.iter_mut().enumerate() {
                                *o += v * wrow[co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[x, w, bias]);
        Ok(self.push(data, vec![h, wd, cout], rg, Op::Conv3x3 { x, w, bias }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Clear accumulated gradients for every node.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].numel();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` ancestor; accumulates if grads are already present.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(CpSegError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Stash grads from earlier backward calls so the sweep below starts
        // from a clean slate and never re-propagates them; merged back at the
        // end to keep the accumulate-until-zero_grad contract.
        let mut stashed: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            stashed.push(node.grad.take());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.node(a).shape[0], self.node(a).shape[1]);
                    let n = self.node(b).shape[1];
                    let bt = transpose_raw(&self.node(b).data, k, n);
                    let da = matmul_raw(&grad, &bt, m, n, k);
                    let at = transpose_raw(&self.node(a).data, m, k);
                    let db = matmul_raw(&at, &grad, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let dx = transpose_raw(&grad, r, c);
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => self.accumulate(x, &grad),
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = grad.iter().zip(&self.node(b).data).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = grad.iter().zip(&self.node(a).data).map(|(g, v)| g * v).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddBias { x, bias } => {
                    let d = self.node(bias).numel();
                    let mut db = vec![0.0; d];
                    for row in grad.chunks(d) {
                        for (j, g) in row.iter().enumerate() {
                            db[j] += g;
                        }
                    }
                    self.accumulate(x, &grad);
                    self.accumulate(bias, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddConst { x } => self.accumulate(x, &grad),
                Op::Relu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.node(x).data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.node(x).data)
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxLast { x } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let out = &self.nodes[i].data;
                    let mut dx = vec![0.0; out.len()];
                    for (r, (orow, grow)) in out.chunks(d).zip(grad.chunks(d)).enumerate() {
                        let inner = dot(grow, orow);
                        for j in 0..d {
                            dx[r * d + j] = orow[j] * (grow[j] - inner);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let xd = self.node(x).data.clone();
                    let gd = self.node(gamma).data.clone();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (r, (xrow, grow)) in xd.chunks(d).zip(grad.chunks(d)).enumerate() {
                        let mean = xrow.iter().sum::<f64>() / d as f64;
                        let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = grow.iter().zip(&gd).map(|(g, gm)| g * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dot(&dxhat, &xhat);
                        let df = d as f64;
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dx[r * d + j] =
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::SumAll { x } => {
                    let dx = vec![grad[0]; self.node(x).numel()];
                    self.accumulate(x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = self.node(x).numel();
                    let dx = vec![grad[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::RowSums { x } => {
                    let (n, d) = (self.node(x).shape[0], self.node(x).shape[1]);
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..d {
                            dx[r * d + j] = grad[r];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::CrossEntropyProbs { p, labels, floor } => {
                    let (n, k) = (self.node(p).shape[0], self.node(p).shape[1]);
                    let mut dp = vec![0.0; n * k];
                    for (idx, &y) in labels.iter().enumerate() {
                        let v = self.node(p).data[idx * k + y];
                        if v > floor {
                            dp[idx * k + y] = -grad[0] / (n as f64 * v);
                        }
                    }
                    self.accumulate(p, &dp);
                }
                Op::L2NormalizeRows { x } => {
                    let (n, d) = (self.node(x).shape[0], self.node(x).shape[1]);
                    let out = self.nodes[i].data.clone();
                    let xd = self.node(x).data.clone();
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let xrow = &xd[r * d..(r + 1) * d];
                        let yrow = &out[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let norm = dot(xrow, xrow).sqrt();
                        let proj = dot(grow, yrow);
                        for j in 0..d {
                            dx[r * d + j] = (grow[j] - yrow[j] * proj) / norm;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::CosineSim { a, b } => {
                    let ad = self.node(a).data.clone();
                    let bd = self.node(b).data.clone();
                    let na = dot(&ad, &ad).sqrt();
                    let nb = dot(&bd, &bd).sqrt();
                    let c = dot(&ad, &bd) / (na * nb);
                    let g = grad[0];
                    let da: Vec<f64> = ad
                        .iter()
                        .zip(&bd)
                        .map(|(&av, &bv)| g * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    let db: Vec<f64> = ad
                        .iter()
                        .zip(&bd)
                        .map(|(&av, &bv)| g * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::GatherRows { x, indices } => {
                    let d = self.node(x).shape[1];
                    let mut dx = vec![0.0; self.node(x).numel()];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..d {
                            dx[src * d + j] += grad[r * d + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SliceRows { x, start } => {
                    let d = self.node(x).shape[1];
                    let mut dx = vec![0.0; self.node(x).numel()];
                    dx[start * d..start * d + grad.len()].copy_from_slice(&grad);
                    self.accumulate(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (n, d) = (self.node(x).shape[0], self.node(x).shape[1]);
                    let len = self.nodes[i].shape[1];
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..len {
                            dx[r * d + start + j] = grad[r * len + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.node(p).numel();
                        let dp = grad[offset..offset + len].to_vec();
                        self.accumulate(p, &dp);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = self.nodes[i].shape[0];
                    let width = self.nodes[i].shape[1];
                    let mut col_offset = 0;
                    for p in parts {
                        let c = self.node(p).shape[1];
                        let mut dp = vec![0.0; n * c];
                        for r in 0..n {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&grad[r * width + col_offset..r * width + col_offset + c]);
                        }
                        self.accumulate(p, &dp);
                        col_offset += c;
                    }
                }
                Op::RepeatRows { x } => {
                    let d = self.node(x).shape[1];
                    let mut dx = vec![0.0; d];
                    for row in grad.chunks(d) {
                        for (j, g) in row.iter().enumerate() {
                            dx[j] += g;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::MulColVec { x, col } => {
                    let (n, d) = (self.node(x).shape[0], self.node(x).shape[1]);
                    let mut dx = vec![0.0; n * d];
                    let mut dcol = vec![0.0; n];
                    for r in 0..n {
                        let c = self.node(col).data[r];
                        for j in 0..d {
                            dx[r * d + j] = grad[r * d + j] * c;
                            dcol[r] += grad[r * d + j] * self.node(x).data[r * d + j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(col, &dcol);
                }
                Op::BilinearUp { x, factor } => {
                    let (h, w, c) = (
                        self.node(x).shape[0],
                        self.node(x).shape[1],
                        self.node(x).shape[2],
                    );
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![0.0; h * w * c];
                    for oy in 0..oh {
                        let (y0, y1, ty) = bilinear_stencil(oy, factor, h);
                        for ox in 0..ow {
                            let (x0, x1, tx) = bilinear_stencil(ox, factor, w);
                            for ch in 0..c {
                                let g = grad[(oy * ow + ox) * c + ch];
                                dx[(y0 * w + x0) * c + ch] += g * (1.0 - tx) * (1.0 - ty);
                                dx[(y0 * w + x1) * c + ch] += g * tx * (1.0 - ty);
                                dx[(y1 * w + x0) * c + ch] += g * (1.0 - tx) * ty;
                                dx[(y1 * w + x1) * c + ch] += g * tx * ty;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Conv3x3 { x, w, bias } => {
                    let (h, wd, cin) = (
                        self.node(x).shape[0],
                        self.node(x).shape[1],
                        self.node(x).shape[2],
                    );
                    let cout = self.node(w).shape[3];
                    let src = self.node(x).data.clone();
                    let wt = self.node(w).data.clone();
                    let mut dx = vec![0.0; h * wd * cin];
                    let mut dw = vec![0.0; 9 * cin * cout];
                    let mut db = vec![0.0; cout];
                    for y in 0..h {
                        for x_ in 0..wd {
                            let grow = &grad[(y * wd + x_) * cout..(y * wd + x_ + 1) * cout];
                            for (co, g) in grow.iter().enumerate() {
                                db[co] += g;
                            }
                            for dy in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx_ in 0..3usize {
                                    let sx = x_ as isize + dx_ as isize - 1;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let spix = ((sy as usize) * wd + sx as usize) * cin;
                                    let wbase = (dy * 3 + dx_) * cin * cout;
                                    for ci in 0..cin {
                                        let v = src[spix + ci];
                                        let wrow = &wt[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let mut acc = 0.0;
                                        for (co, g) in grow.iter().enumerate() {
                                            dw[wbase + ci * cout + co] += v * g;
                                            acc += wrow[co] * g;
                                        }
                                        dx[spix + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(bias, &db);
                }
            }
        }
        for (node, prev) in self.nodes.iter_mut().zip(stashed) {
            if let Some(prev) = prev {
                match &mut node.grad {
                    Some(g) => {
                        for (gv, pv) in g.iter_mut().zip(&prev) {
                            *gv += pv;
                        }
                    }
                    None => node.grad = Some(prev),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
