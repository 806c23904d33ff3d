//! Dense row-major `f32` tensors and ordered named parameter collections.
//!
//! Matrix products accumulate in `f64` and round once on store, so results do
//! not depend on summation drift across different batch sizes.

use std::collections::HashMap;
use std::fmt;

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(format!("dimensions must be positive, got {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(shape_err(format!("shape {shape:?} needs {count} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; count] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let count = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; count] }
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row count of a matrix; vectors are treated as a single column.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// `self · rhs` for matrices `m×k` and `k×n`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut acc = vec![0.0f64; n];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                let rrow = &rhs.data[p * n..(p + 1) * n];
                for (slot, &b) in acc.iter_mut().zip(rrow) {
                    *slot += a * b as f64;
                }
            }
            out.extend(acc.iter().map(|&v| v as f32));
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `selfᵀ · rhs` for `k×m` and `k×n`.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.transpose().matmul(rhs)
    }

    /// `self · rhsᵀ` for `m×k` and `n×k`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(shape_err(format!("matmul_t {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &rhs.data[j * k..(j + 1) * k];
                let s: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                out.push(s as f32);
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Adds a length-`rows` bias to every column.
    pub fn add_column(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if bias.len() != r {
            return Err(shape_err(format!("bias of {} for {r} rows", bias.len())));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            let b = bias.data[i];
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += b);
        }
        Ok(Tensor { shape: vec![r, c], data: out })
    }

    /// Sums each row (across columns), giving a length-`rows` vector.
    pub fn row_sums(&self) -> Tensor {
        let c = self.cols();
        let data = self.data.chunks(c).map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
        Tensor { shape: vec![self.rows()], data }
    }

    /// Column range `[start, end)` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(r, end - start, |i, j| self.data[i * c + start + j])
    }

    /// Selects matrix columns by index.
    pub fn select_columns(&self, idx: &[usize]) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(r, idx.len(), |i, j| self.data[i * c + idx[j]])
    }
}

/// Mean absolute elementwise difference, accumulated in `f64`.
pub fn l1_mean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let total: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(total / a.len() as f64)
}

/// Insertion-ordered map from parameter name to tensor.
#[derive(Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.entries.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Inserts or overwrites in place (keeps the original position).
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Entries whose name satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter().filter(|(n, _)| keep(n)) {
            out.set(n, t.clone());
        }
        out
    }

    /// Backbone entries (`block{l}.*`).
    pub fn backbone(&self) -> ParamSet {
        self.filter(is_backbone_name)
    }

    /// Copies every entry of `other` into `self`, overwriting same-named ones.
    pub fn extend_from(&mut self, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.set(n, t.clone());
        }
    }

    /// Identical name sets with identical shapes (order ignored).
    pub fn shape_compatible(&self, other: &ParamSet) -> bool {
        self.len() == other.len() && self.iter().all(|(n, t)| other.get(n).is_some_and(|o| o.shape() == t.shape()))
    }

    pub fn require_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.shape_compatible(other) {
            Ok(())
        } else {
            Err(shape_err("parameter sets are not shape-compatible"))
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

pub fn is_backbone_name(name: &str) -> bool {
    name.starts_with("block")
}

pub fn block_weight(layer: usize) -> String {
    format!("block{layer}.weight")
}

pub fn block_bias(layer: usize) -> String {
    format!("block{layer}.bias")
}

pub fn head_weight(task: &str) -> String {
    format!("head.{task}.weight")
}

pub fn head_bias(task: &str) -> String {
    format!("head.{task}.bias")
}
