//! Dense row-major f64 tensors with numpy-style broadcasting.
//!
//! Everything in this crate computes on these: poses, kernels, activations,
//! parameters. Shapes are checked eagerly and violations come back as
//! [`NumericsError`] naming both operands.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape dimensions must be positive, got {shape:?}")]
    ZeroDim { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("expected a scalar tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("batchnorm train mode needs at least 2 rows per feature, got {rows}")]
    BatchTooSmall { rows: usize },
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("optimizer state holds {state} slots but the model has {params} parameters")]
    StateMismatch { state: usize, params: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense tensor: row-major `data` with an explicit `shape`.
/// A rank-0 tensor (empty shape) is a scalar holding one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = NumericsError;
    fn try_from(raw: RawTensor) -> Result<Tensor> {
        Tensor::new(&raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> RawTensor {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        strides[ax] = acc;
        acc *= shape[ax];
    }
    strides
}

/// Numpy broadcast rule: align from the trailing axis, dims must match or be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape` (zero on broadcast axes).
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == out_shape[pad + i] { strides[i] } else { 0 };
    }
    out
}

/// Row-major odometer over `shape`, tracking offsets into several operands.
struct Odometer<'a> {
    shape: &'a [usize],
    idx: Vec<usize>,
}

impl<'a> Odometer<'a> {
    fn new(shape: &'a [usize]) -> Self {
        Odometer {
            shape,
            idx: vec![0; shape.len()],
        }
    }

    /// Advance by one element, updating each offset by its stride set.
    fn step(&mut self, offsets: &mut [usize], strides: &[&[usize]]) {
        for ax in (0..self.shape.len()).rev() {
            self.idx[ax] += 1;
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o += s[ax];
            }
            if self.idx[ax] < self.shape[ax] {
                return;
            }
            self.idx[ax] = 0;
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o -= s[ax] * self.shape[ax];
            }
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(NumericsError::ZeroDim { shape: shape.to_vec() });
        }
        let expected = numel(shape);
        if data.len() != expected {
            return Err(NumericsError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar { shape: self.shape.clone() })
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_for(&self.shape);
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_for(&self.shape);
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    pub fn rsqrt(&self) -> Tensor {
        self.map(|v| 1.0 / v.sqrt())
    }

    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.map(|v| v.max(floor))
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            NumericsError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            }
        })?;
        let sa = aligned_strides(&self.shape, &shape);
        let sb = aligned_strides(&other.shape, &shape);
        let len = numel(&shape);
        let mut data = Vec::with_capacity(len);
        let mut odo = Odometer::new(&shape);
        let mut offs = [0usize, 0usize];
        for _ in 0..len {
            data.push(f(self.data[offs[0]], other.data[offs[1]]));
            odo.step(&mut offs, &[&sa, &sb]);
        }
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Materialize this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(&self.shape, shape).filter(|s| s == shape).ok_or_else(
            || NumericsError::ShapeMismatch {
                op: "broadcast_to",
                left: self.shape.clone(),
                right: shape.to_vec(),
            },
        )?;
        let strides = aligned_strides(&self.shape, &target);
        let len = numel(&target);
        let mut data = Vec::with_capacity(len);
        let mut odo = Odometer::new(&target);
        let mut offs = [0usize];
        for _ in 0..len {
            data.push(self.data[offs[0]]);
            odo.step(&mut offs, &[&strides]);
        }
        Ok(Tensor { shape: target, data })
    }

    /// Adjoint of broadcasting: sum this tensor down to `target` shape.
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let check = broadcast_shape(&self.shape, target);
        if check.as_deref() != Some(&self.shape[..]) {
            return Err(NumericsError::ShapeMismatch {
                op: "reduce_to_shape",
                left: self.shape.clone(),
                right: target.to_vec(),
            });
        }
        let st = aligned_strides(target, &self.shape);
        let mut out = Tensor::zeros(target);
        let mut odo = Odometer::new(&self.shape);
        let mut offs = [0usize];
        for &v in &self.data {
            out.data[offs[0]] += v;
            odo.step(&mut offs, &[&st]);
        }
        Ok(out)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (k2, n) = (other.shape[rb - 2], other.shape[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch = broadcast_shape(&self.shape[..ra - 2], &other.shape[..rb - 2]).ok_or_else(mismatch)?;
        let full_a: Vec<usize> = batch.iter().copied().chain([m, k]).collect();
        let full_b: Vec<usize> = batch.iter().copied().chain([k, n]).collect();
        let sa = aligned_strides(&self.shape, &full_a);
        let sb = aligned_strides(&other.shape, &full_b);
        let batches = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; batches * m * n];

        let mut odo = Odometer::new(&batch);
        let mut offs = [0usize, 0usize];
        let sa_batch = &sa[..batch.len()];
        let sb_batch = &sb[..batch.len()];
        for bi in 0..batches {
            let a_blk = &self.data[offs[0]..offs[0] + m * k];
            let b_blk = &other.data[offs[1]..offs[1] + k * n];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let a_row = &a_blk[i * k..(i + 1) * k];
                let o_row = &mut o_blk[i * n..(i + 1) * n];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &b_blk[kk * n..(kk + 1) * n];
                    for (o, &bv) in o_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
            odo.step(&mut offs, &[sa_batch, sb_batch]);
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// MAC count the matmul above performs (used for cost accounting).
    pub fn matmul_macs(&self, other: &Tensor) -> Result<u64> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[ra - 2], self.shape[ra - 1]);
        let n = other.shape[rb - 1];
        let batch = broadcast_shape(&self.shape[..ra - 2], &other.shape[..rb - 2]).ok_or_else(|| {
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            }
        })?;
        Ok((numel(&batch) * m * k * n) as u64)
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(NumericsError::AxisOutOfRange { axis: 1, rank });
        }
        let (m, n) = (self.shape[rank - 2], self.shape[rank - 1]);
        let mut shape = self.shape.clone();
        shape[rank - 2] = n;
        shape[rank - 1] = m;
        let batches = numel(&self.shape[..rank - 2]);
        let mut data = vec![0.0; self.data.len()];
        for b in 0..batches {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn check_axes(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in &sorted {
            if ax >= rank {
                return Err(NumericsError::AxisOutOfRange { axis: ax, rank });
            }
        }
        Ok(sorted)
    }

    /// Sum over `axes`; reduced axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = self.check_axes(axes)?;
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(ax, _)| !axes.contains(ax))
            .map(|(_, &d)| d)
            .collect();
        let keep_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(ax, &d)| if axes.contains(&ax) { 1 } else { d })
            .collect();
        let st = aligned_strides(&keep_shape, &self.shape);
        let mut out = Tensor::zeros(&keep_shape);
        let mut odo = Odometer::new(&self.shape);
        let mut offs = [0usize];
        for &v in &self.data {
            out.data[offs[0]] += v;
            odo.step(&mut offs, &[&st]);
        }
        out.reshape(&out_shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = self.check_axes(axes)?;
        let count: usize = axes.iter().map(|&ax| self.shape[ax]).product();
        Ok(self.sum_axes(&axes)?.scale(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenate along the last axis; all other axes must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(NumericsError::NotScalar { shape: vec![] })?;
        let rank = first.rank();
        if rank == 0 {
            return Err(NumericsError::AxisOutOfRange { axis: 0, rank: 0 });
        }
        let lead = &first.shape[..rank - 1];
        let mut last = 0usize;
        for p in parts {
            if p.rank() != rank || &p.shape[..rank - 1] != lead {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            last += p.shape[rank - 1];
        }
        let rows = numel(lead);
        let mut shape = lead.to_vec();
        shape.push(last);
        let mut data = Vec::with_capacity(rows * last);
        for r in 0..rows {
            for p in parts {
                let w = p.shape[rank - 1];
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Split along the last axis into chunks of the given widths.
    pub fn split_last(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.rank();
        if rank == 0 {
            return Err(NumericsError::AxisOutOfRange { axis: 0, rank: 0 });
        }
        let last = self.shape[rank - 1];
        if widths.iter().sum::<usize>() != last {
            return Err(NumericsError::ShapeMismatch {
                op: "split",
                left: self.shape.clone(),
                right: widths.to_vec(),
            });
        }
        let rows = numel(&self.shape[..rank - 1]);
        let mut outs: Vec<Tensor> = widths
            .iter()
            .map(|&w| {
                let mut shape = self.shape[..rank - 1].to_vec();
                shape.push(w);
                Tensor::zeros(&shape)
            })
            .collect();
        for r in 0..rows {
            let mut off = r * last;
            for (p, &w) in outs.iter_mut().zip(widths) {
                p.data[r * w..(r + 1) * w].copy_from_slice(&self.data[off..off + w]);
                off += w;
            }
        }
        Ok(outs)
    }

    /// Slice out index `i` of the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() == 0 || i >= self.shape[0] {
            return Err(NumericsError::AxisOutOfRange {
                axis: 0,
                rank: self.rank(),
            });
        }
        let inner = numel(&self.shape[1..]);
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(NumericsError::NotScalar { shape: vec![] })?;
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}
