//! Dense row-major tensors and flat parameter vectors.
//!
//! [`Tensor`] is plain data: a shape and a `Vec<f64>`. Gradient tracking
//! lives on the [`Tape`](crate::tape::Tape), which wraps tensors in
//! [`Var`](crate::tape::Var) handles.
//!
//! [`ParamVector`] is the flat view used by the optimizer and curvature
//! code: gradients, SAM perturbations, adapter snapshots and probe
//! directions are all `ParamVector`s over a shared [`ParamLayout`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch { op: "tensor", detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()) });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch { op: "matrix", detail: "ragged rows".into() });
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self { shape: vec![rows.len(), cols], data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Value of a single-element tensor (any rank).
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", detail: format!("{:?} -> {:?}", self.shape, shape) });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

/// One named block inside a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Stable ordering of named parameter blocks. Offsets partition
/// `[0, total_len)` with no gaps or overlaps by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Result<Self> {
        let mut slots: Vec<ParamSlot> = Vec::new();
        let mut offset = 0;
        for (name, shape) in blocks {
            let name = name.into();
            if slots.iter().any(|s| s.name == name) {
                return Err(TensorError::DuplicateParam(name));
            }
            let slot = ParamSlot { name, shape, offset };
            offset += slot.len();
            slots.push(slot);
        }
        Ok(Self { slots, total: offset })
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat real vector aligned to a [`ParamLayout`].
///
/// Arithmetic between two vectors is only defined when their layouts are
/// identical; mismatches are reported as [`TensorError::LayoutMismatch`].
#[derive(Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

/// Gradients are `ParamVector`s; the alias keeps call sites readable.
pub type GradientVector = ParamVector;

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(TensorError::ShapeMismatch { op: "param_vector", detail: format!("layout needs {} values, got {}", layout.total_len(), values.len()) });
        }
        Ok(Self { layout, values })
    }

    /// Assembles a vector from named tensors in the given order.
    pub fn from_tensors<'a>(blocks: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        let blocks: Vec<_> = blocks.into_iter().collect();
        let layout = ParamLayout::new(blocks.iter().map(|(n, t)| (*n, t.shape().to_vec())))?;
        let values = blocks.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        Ok(Self { layout: Arc::new(layout), values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.slot(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let slot = self.layout.slot(name)?;
        Some(Tensor { shape: slot.shape.clone(), data: self.values[slot.range()].to_vec() })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(TensorError::LayoutMismatch)
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        Self { layout: self.layout.clone(), values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self + c * other`
    pub fn add_scaled(&self, other: &ParamVector, c: f64) -> Result<ParamVector> {
        self.check(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        Ok(Self { layout: self.layout.clone(), values })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.add_scaled(other, 1.0)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.add_scaled(other, -1.0)
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        self.check(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector").field("len", &self.values.len()).field("norm", &self.norm()).finish()
    }
}
