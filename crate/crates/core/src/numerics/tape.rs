//! Reverse-mode autodiff over a flat operation tape.
//!
//! A [`Tape`] owns every intermediate value; handles are plain indices.
//! Recording is strictly sequential (single owner); the kernels inside an
//! op may fan out across rows. Gradients come back keyed by parameter id,
//! and only parameters that were actually recorded appear in the map.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::mask::Mask;
use crate::numerics::params::Parameter;
use crate::numerics::tensor::{
    gelu, gelu_grad, layer_norm_row, matmul_into, matmul_ta_into, matmul_tb_into, softmax_row,
    Tensor, LAYER_NORM_EPS,
};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients of a scalar loss, keyed by parameter id.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul { a: usize, b: usize },
    /// `a (m×k) · b^T` with `b` stored as `n×k`.
    MatMulTB { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Row-broadcast bias add; `bias` is a length-n vector.
    AddBias { x: usize, bias: usize },
    Scale { x: usize, c: f64 },
    Mul { a: usize, b: usize },
    Gelu { x: usize },
    SoftmaxRows { x: usize },
    MaskedSoftmaxRows { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    /// Pairwise rotation; `phases` holds rows × (cols/2) angles.
    Rotate { x: usize, phases: Arc<Vec<f64>> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    /// Row regrouping: output row r is the concatenation of input rows
    /// `indices[r*group .. (r+1)*group]`.
    RegroupRows { x: usize, indices: Arc<Vec<usize>>, group: usize },
    /// Row gather (embedding lookup).
    GatherRows { x: usize, indices: Arc<Vec<usize>> },
    Sum { x: usize },
    /// Mean cross-entropy of `logits[rows[i]]` against `targets[i]`.
    MeanCrossEntropy { logits: usize, rows: Arc<Vec<usize>>, targets: Arc<Vec<usize>> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape node is well-formed")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        let cols = *shape.last().expect("nonempty shape");
        let rows = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        (rows, cols)
    }

    // ─── Leaves ───────────────────────────────────────────────────────────────

    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.push(Op::Param(p.id.clone()), p.value.shape().to_vec(), p.value.data().to_vec())
    }

    // ─── Linear algebra ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, vec![m, n], out))
    }

    /// `a · b^T` where `b` is stored row-major as `n×k`.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols(a);
        let (n, kb) = self.rows_cols(b);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_tb_into(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        Ok(self.push(Op::MatMulTB { a: a.0, b: b.0 }, vec![m, n], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, data))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[bias.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] += self.nodes[bias.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::AddBias { x: x.0, bias: bias.0 }, shape, data))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x: x.0, c }, shape, data)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, shape, data))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Gelu { x: x.0 }, shape, data)
    }

    // ─── Row-wise nonlinearities ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if cols == 0 {
            return Err(Error::invalid("softmax_rows", "empty last extent"));
        }
        let mut data = vec![0.0; rows * cols];
        let src = &self.nodes[x.0].data;
        par::for_each_row(&mut data, cols, |r, out| {
            softmax_row(out, &src[r * cols..(r + 1) * cols]);
        });
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::SoftmaxRows { x: x.0 }, shape, data))
    }

    /// Softmax over permitted keys only; masked entries are exactly zero.
    /// Scans keys in ascending order so a block mask reproduces the plain
    /// softmax of the unmasked block bit-for-bit.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        for q in 0..rows {
            if mask.permitted_count(q, cols) == 0 {
                return Err(Error::EmptyAttentionRow { row: q });
            }
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; rows * cols];
        let mask_ref = &mask;
        par::for_each_row(&mut data, cols, |q, out| {
            let row = &src[q * cols..(q + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if mask_ref.permits(q, k) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if mask_ref.permits(q, k) {
                    let e = (v - max).exp();
                    out[k] = e;
                    sum += e;
                }
            }
            for (k, slot) in out.iter_mut().enumerate() {
                if mask_ref.permits(q, k) {
                    *slot /= sum;
                }
            }
        });
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::MaskedSoftmaxRows { x: x.0 }, shape, data))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[gain.0].data.len() != cols || self.nodes[bias.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; rows * cols];
        par::for_each_row(&mut data, cols, |r, out| {
            layer_norm_row(out, &src[r * cols..(r + 1) * cols], g, b);
        });
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }, shape, data))
    }

    /// Rotate channel pairs `(2p, 2p+1)` of each row by `phases[row][p]`.
    pub fn rotate(&mut self, x: NodeId, phases: Arc<Vec<f64>>) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if cols % 2 != 0 {
            return Err(Error::invalid("rotate", format!("odd channel count {cols}")));
        }
        let pairs = cols / 2;
        if phases.len() != rows * pairs {
            return Err(Error::invalid(
                "rotate",
                format!("need {} phases for {rows}×{cols}, got {}", rows * pairs, phases.len()),
            ));
        }
        let src = &self.nodes[x.0].data;
        let ph = &phases;
        let mut data = vec![0.0; rows * cols];
        par::for_each_row(&mut data, cols, |r, out| {
            let row = &src[r * cols..(r + 1) * cols];
            for p in 0..pairs {
                let theta = ph[r * pairs + p];
                let (sin, cos) = theta.sin_cos();
                let x0 = row[2 * p];
                let x1 = row[2 * p + 1];
                out[2 * p] = x0 * cos - x1 * sin;
                out[2 * p + 1] = x0 * sin + x1 * cos;
            }
        });
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Rotate { x: x.0, phases }, shape, data))
    }

    // ─── Reshaping ────────────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let cols = self.rows_cols(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() },
            vec![rows, cols],
            data,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > rows || len == 0 {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{} out of {rows} rows", start + len),
            ));
        }
        let data = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Op::SliceRows { x: x.0, start, len }, vec![len, cols], data))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if start + len > cols || len == 0 {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{} out of {cols} cols", start + len),
            ));
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Op::SliceCols { x: x.0, start, len }, vec![rows, len], data))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts"));
        }
        let rows = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        for &p in parts {
            if self.rows_cols(p).0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
            vec![rows, cols],
            data,
        ))
    }

    /// Output row `r` is the horizontal concatenation of input rows
    /// `indices[r*group .. (r+1)*group]`.
    pub fn regroup_rows(&mut self, x: NodeId, indices: Arc<Vec<usize>>, group: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if group == 0 || !indices.len().is_multiple_of(group) {
            return Err(Error::invalid("regroup_rows", "index count not a multiple of group"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("regroup_rows", format!("row index {bad} out of {rows}")));
        }
        let out_rows = indices.len() / group;
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(out_rows * group * cols);
        for r in 0..out_rows {
            for j in 0..group {
                let i = indices[r * group + j];
                data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push(
            Op::RegroupRows { x: x.0, indices, group },
            vec![out_rows, group * cols],
            data,
        ))
    }

    /// Embedding-style row gather.
    pub fn gather_rows(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("row index {bad} out of {rows}")));
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let n = indices.len();
        Ok(self.push(Op::GatherRows { x: x.0, indices }, vec![n, cols], data))
    }

    // ─── Reductions ───────────────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        self.push(Op::Sum { x: x.0 }, vec![1], vec![acc])
    }

    /// Mean of `logsumexp(logits[rows[i]]) - logits[rows[i]][targets[i]]`.
    pub fn mean_cross_entropy(
        &mut self,
        logits: NodeId,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        let (m, vocab) = self.rows_cols(logits);
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::invalid("mean_cross_entropy", "rows/targets mismatch or empty"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::invalid("mean_cross_entropy", format!("row {bad} out of {m}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid("mean_cross_entropy", format!("target {bad} out of {vocab}")));
        }
        let src = &self.nodes[logits.0].data;
        let mut acc = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            let row = &src[r * vocab..(r + 1) * vocab];
            let mut max = f64::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for &v in row {
                sum += (v - max).exp();
            }
            acc += max + sum.ln() - row[t];
        }
        let loss = acc / rows.len() as f64;
        Ok(self.push(Op::MeanCrossEntropy { logits: logits.0, rows, targets }, vec![1], vec![loss]))
    }

    // ─── Backward ─────────────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter recorded on the tape. Parameters the loss never touched
    /// are absent from the map.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let shape = self.nodes[i].shape.clone();
                    match out.get_mut(id.as_str()) {
                        Some(existing) => {
                            for (slot, add) in existing.data_mut().iter_mut().zip(&g) {
                                *slot += add;
                            }
                        }
                        None => {
                            out.insert(id.clone(), Tensor::new(shape, g.clone()).unwrap());
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.dims2(*a);
                    let n = self.dims2(*b).1;
                    // da = g · b^T ; db = a^T · g
                    let mut da = vec![0.0; m * k];
                    matmul_tb_into(&mut da, &g, &self.nodes[*b].data, m, n, k);
                    self.accumulate(&mut grads, *a, da);
                    let mut db = vec![0.0; k * n];
                    matmul_ta_into(&mut db, &self.nodes[*a].data, &g, k, m, n);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MatMulTB { a, b } => {
                    let (m, k) = self.dims2(*a);
                    let n = self.dims2(*b).0;
                    // out = a · b^T ; da = g · b ; db = g^T · a
                    let mut da = vec![0.0; m * k];
                    matmul_into(&mut da, &g, &self.nodes[*b].data, m, n, k);
                    self.accumulate(&mut grads, *a, da);
                    let mut db = vec![0.0; n * k];
                    matmul_ta_into(&mut db, &g, &self.nodes[*a].data, n, m, k);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::AddBias { x, bias } => {
                    let cols = self.nodes[*bias].data.len();
                    let rows = g.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                    self.accumulate(&mut grads, *bias, db);
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> =
                        g.iter().zip(&self.nodes[*b].data).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&self.nodes[*a].data).map(|(gv, av)| gv * av).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*x].data)
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows { x } => {
                    let dx = softmax_backward(&self.nodes[i].data, &g, self.dims2(i).1);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmaxRows { x } => {
                    // masked entries have y == 0, so the shared formula
                    // leaves their slots at exactly zero
                    let dx = softmax_backward(&self.nodes[i].data, &g, self.dims2(i).1);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (rows, cols) = self.dims2(i);
                    let src = &self.nodes[*x].data;
                    let gn = &self.nodes[*gain].data;
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &src[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let n = cols as f64;
                        let mut mean = 0.0;
                        for &v in row {
                            mean += v;
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for &v in row {
                            let d = v - mean;
                            var += d * d;
                        }
                        var /= n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        // h = g ⊙ gain; dx = inv (h - mean(h) - x̂ mean(h x̂))
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv;
                            let h = grow[j] * gn[j];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                        }
                        mean_h /= n;
                        mean_hx /= n;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv;
                            dx[r * cols + j] = inv * (grow[j] * gn[j] - mean_h - xhat * mean_hx);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gain, dgain);
                    self.accumulate(&mut grads, *bias, dbias);
                }
                Op::Rotate { x, phases } => {
                    let (rows, cols) = self.dims2(i);
                    let pairs = cols / 2;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for p in 0..pairs {
                            let (sin, cos) = phases[r * pairs + p].sin_cos();
                            let g0 = g[r * cols + 2 * p];
                            let g1 = g[r * cols + 2 * p + 1];
                            dx[r * cols + 2 * p] = g0 * cos + g1 * sin;
                            dx[r * cols + 2 * p + 1] = -g0 * sin + g1 * cos;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows { parts } => {
                    let cols = self.dims2(i).1;
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.dims2(p).0;
                        let part = g[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(&mut grads, p, part);
                        offset += rows;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let cols = self.dims2(i).1;
                    let total = self.nodes[*x].data.len();
                    let mut dx = vec![0.0; total];
                    dx[start * cols..(start + len) * cols].copy_from_slice(&g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, src_cols) = self.dims2(*x);
                    let mut dx = vec![0.0; rows * src_cols];
                    for r in 0..rows {
                        dx[r * src_cols + start..r * src_cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let (rows, cols) = self.dims2(i);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.dims2(p).1;
                        let mut part = vec![0.0; rows * w];
                        for r in 0..rows {
                            part[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                        }
                        self.accumulate(&mut grads, p, part);
                        offset += w;
                    }
                }
                Op::RegroupRows { x, indices, group } => {
                    let (rows, cols) = self.dims2(*x);
                    let out_rows = indices.len() / group;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..out_rows {
                        for j in 0..*group {
                            let src_row = indices[r * group + j];
                            let seg = &g[(r * group + j) * cols..(r * group + j + 1) * cols];
                            for (slot, add) in
                                dx[src_row * cols..(src_row + 1) * cols].iter_mut().zip(seg)
                            {
                                *slot += add;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let (rows, cols) = self.dims2(*x);
                    let mut dx = vec![0.0; rows * cols];
                    for (pos, &src_row) in indices.iter().enumerate() {
                        let seg = &g[pos * cols..(pos + 1) * cols];
                        for (slot, add) in dx[src_row * cols..(src_row + 1) * cols].iter_mut().zip(seg)
                        {
                            *slot += add;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let dx = vec![g[0]; self.nodes[*x].data.len()];
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::MeanCrossEntropy { logits, rows, targets } => {
                    let (_, vocab) = self.dims2(*logits);
                    let src = &self.nodes[*logits].data;
                    let coeff = g[0] / rows.len() as f64;
                    let mut dl = vec![0.0; src.len()];
                    let mut probs = vec![0.0; vocab];
                    for (&r, &t) in rows.iter().zip(targets.iter()) {
                        softmax_row(&mut probs, &src[r * vocab..(r + 1) * vocab]);
                        for j in 0..vocab {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dl[r * vocab + j] += coeff * (probs[j] - ind);
                        }
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(out)
    }

    fn dims2(&self, idx: usize) -> (usize, usize) {
        let shape = &self.nodes[idx].shape;
        let cols = *shape.last().expect("nonempty shape");
        let rows = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        (rows, cols)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, add: Vec<f64>) {
        match &mut grads[idx] {
            Some(existing) => {
                for (slot, v) in existing.iter_mut().zip(&add) {
                    *slot += v;
                }
            }
            slot @ None => *slot = Some(add),
        }
    }
}

/// Shared softmax Jacobian-vector product: `dx = y ⊙ (g - <g, y>)` per row.
fn softmax_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let rows = y.len() / cols;
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let ys = &y[r * cols..(r + 1) * cols];
        let gs = &g[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        for j in 0..cols {
            dot += gs[j] * ys[j];
        }
        for j in 0..cols {
            dx[r * cols + j] = ys[j] * (gs[j] - dot);
        }
    }
    dx
}

/// Scaled dot-product attention over permitted keys only. Disallowed keys
/// receive exactly zero weight; a query with no permitted keys is an error.
pub fn masked_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Mask,
) -> Result<NodeId> {
    let d = *tape.shape(q).last().expect("nonempty shape");
    if *tape.shape(k).last().unwrap() != d {
        return Err(Error::ShapeMismatch {
            op: "masked_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = tape.masked_softmax_rows(scaled, mask)?;
    tape.matmul(probs, v)
}

/// Unmasked attention — the plain-softmax route kept separate so the
/// all-permitted mask equivalence stays a two-path check.
pub fn attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d = *tape.shape(q).last().expect("nonempty shape");
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = tape.softmax_rows(scaled)?;
    tape.matmul(probs, v)
}
