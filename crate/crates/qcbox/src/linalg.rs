// SPDX-License-Identifier: Apache-2.0
//! Dense complex arrays whose indices carry labeled tensor factors.
//!
//! Every vector and matrix knows which Hilbert spaces it lives on, so the
//! Choi isomorphism and the link product can contract by label instead of by
//! position. Storage is row-major with the first factor most significant.

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Shorthand for a real complex number.
pub fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// One labeled tensor factor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Factor {
    pub label: String,
    pub dim: usize,
}

/// Ordered list of labeled factors. Labels are distinct.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct SpaceSpec {
    factors: Vec<Factor>,
}

impl SpaceSpec {
    /// # Errors
    /// `LabelCollision` on a repeated label, `DimMismatch` on a zero dimension.
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &factors {
            if f.dim == 0 {
                return Err(QcError::DimMismatch(format!("factor `{}` has dimension 0", f.label)));
            }
            if !seen.insert(f.label.as_str()) {
                return Err(QcError::LabelCollision(f.label.clone()));
            }
        }
        Ok(Self { factors })
    }

    /// # Errors
    /// As [`SpaceSpec::new`].
    pub fn from_pairs(pairs: &[(&str, usize)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(l, d)| Factor { label: (*l).to_string(), dim: *d })
                .collect(),
        )
    }

    /// The one-dimensional space with no factors.
    pub fn trivial() -> Self {
        Self::default()
    }

    /// Single factor space; panics on a zero dimension.
    pub fn single(label: &str, dim: usize) -> Self {
        Self::from_pairs(&[(label, dim)]).expect("nonzero dimension")
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim).product()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.label.as_str()).collect()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.label == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    /// # Errors
    /// `LabelNotFound`.
    pub fn dim_of(&self, label: &str) -> Result<usize> {
        self.position(label)
            .map(|p| self.factors[p].dim)
            .ok_or_else(|| QcError::LabelNotFound(label.to_string()))
    }

    /// Concatenation `self ⊗ other`.
    ///
    /// # Errors
    /// `LabelCollision` when a label occurs on both sides.
    pub fn concat(&self, other: &SpaceSpec) -> Result<SpaceSpec> {
        let mut f = self.factors.clone();
        f.extend(other.factors.iter().cloned());
        SpaceSpec::new(f)
    }

    /// Same factors with `label` removed (no-op if absent).
    pub fn without(&self, labels: &[&str]) -> SpaceSpec {
        SpaceSpec {
            factors: self
                .factors
                .iter()
                .filter(|f| !labels.contains(&f.label.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Factors reordered to `order`, which must be a permutation of the labels.
    ///
    /// # Errors
    /// `LabelNotFound` or `DimMismatch` when `order` is not a permutation.
    pub fn reordered(&self, order: &[&str]) -> Result<SpaceSpec> {
        if order.len() != self.factors.len() {
            return Err(QcError::DimMismatch(format!(
                "reorder expects {} labels, got {}",
                self.factors.len(),
                order.len()
            )));
        }
        let mut f = Vec::with_capacity(order.len());
        for l in order {
            let p = self.position(l).ok_or_else(|| QcError::LabelNotFound((*l).to_string()))?;
            f.push(self.factors[p].clone());
        }
        SpaceSpec::new(f)
    }

    /// Rename labels through `map`; unmapped labels are kept.
    ///
    /// # Errors
    /// `LabelCollision` if renaming produces duplicates.
    pub fn relabeled(&self, map: &HashMap<String, String>) -> Result<SpaceSpec> {
        SpaceSpec::new(
            self.factors
                .iter()
                .map(|f| Factor {
                    label: map.get(&f.label).cloned().unwrap_or_else(|| f.label.clone()),
                    dim: f.dim,
                })
                .collect(),
        )
    }

    /// Same labels and dimensions in the same order.
    pub fn same_as(&self, other: &SpaceSpec) -> bool {
        self.factors == other.factors
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.factors.len()];
        for i in (0..self.factors.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.factors[i + 1].dim;
        }
        s
    }

    /// Multi-index of a flat index.
    pub fn unflatten(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (i, f) in self.factors.iter().enumerate().rev() {
            out[i] = idx % f.dim;
            idx /= f.dim;
        }
        out
    }

    /// Flat index of a multi-index.
    pub fn flatten(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.factors)
            .fold(0, |acc, (m, f)| acc * f.dim + m)
    }
}

/// For each flat index of `target` (a permutation of `source`), the flat
/// index in `source` that carries the same multi-index.
fn permutation_map(source: &SpaceSpec, target: &SpaceSpec) -> Vec<usize> {
    let src_strides = source.strides();
    let target_strides: Vec<usize> = target
        .factors
        .iter()
        .map(|f| src_strides[source.position(&f.label).expect("checked permutation")])
        .collect();
    let dims = target.dims();
    let n = target.dim();
    let mut out = Vec::with_capacity(n);
    let mut multi = vec![0usize; dims.len()];
    for _ in 0..n {
        out.push(multi.iter().zip(&target_strides).map(|(m, s)| m * s).sum());
        for k in (0..dims.len()).rev() {
            multi[k] += 1;
            if multi[k] < dims[k] {
                break;
            }
            multi[k] = 0;
        }
    }
    out
}

fn check_finite(data: &[C64]) -> Result<()> {
    if data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(QcError::DimMismatch("non-finite entry".into()))
    }
}

/// Dense complex vector on a labeled space.
#[derive(Clone, Debug, PartialEq)]
pub struct CVector {
    space: SpaceSpec,
    data: Vec<C64>,
}

impl CVector {
    /// # Errors
    /// `DimMismatch` when the entry count is wrong or an entry is not finite.
    pub fn new(space: SpaceSpec, data: Vec<C64>) -> Result<Self> {
        if data.len() != space.dim() {
            return Err(QcError::DimMismatch(format!(
                "vector has {} entries, space has dimension {}",
                data.len(),
                space.dim()
            )));
        }
        check_finite(&data)?;
        Ok(Self { space, data })
    }

    pub fn zeros(space: SpaceSpec) -> Self {
        let n = space.dim();
        Self { space, data: vec![ZERO; n] }
    }

    /// Computational basis vector `|idx⟩`.
    pub fn basis(space: SpaceSpec, idx: usize) -> Self {
        let mut v = Self::zeros(space);
        v.data[idx] = ONE;
        v
    }

    /// The scalar `c` on the trivial space.
    pub fn scalar(c: C64) -> Self {
        Self { space: SpaceSpec::trivial(), data: vec![c] }
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `⟨self|other⟩`, conjugate-linear in `self`. Spaces must agree.
    ///
    /// # Errors
    /// `DimMismatch` when the spaces differ.
    pub fn inner(&self, other: &CVector) -> Result<C64> {
        if !self.space.same_as(&other.space) {
            return Err(QcError::DimMismatch("inner product of vectors on different spaces".into()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum())
    }

    pub fn scale(&self, c: C64) -> CVector {
        CVector { space: self.space.clone(), data: self.data.iter().map(|z| z * c).collect() }
    }

    /// # Errors
    /// `DimMismatch` when the spaces differ.
    pub fn add(&self, other: &CVector) -> Result<CVector> {
        if !self.space.same_as(&other.space) {
            return Err(QcError::DimMismatch("sum of vectors on different spaces".into()));
        }
        Ok(CVector {
            space: self.space.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Largest entrywise modulus of `self − other`.
    ///
    /// # Errors
    /// `DimMismatch` when the spaces differ.
    pub fn max_abs_diff(&self, other: &CVector) -> Result<f64> {
        if !self.space.same_as(&other.space) {
            return Err(QcError::DimMismatch("comparing vectors on different spaces".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// `self ⊗ other`.
    ///
    /// # Errors
    /// `LabelCollision`.
    pub fn tensor(&self, other: &CVector) -> Result<CVector> {
        let space = self.space.concat(&other.space)?;
        let mut data = Vec::with_capacity(space.dim());
        for a in &self.data {
            for b in &other.data {
                data.push(a * b);
            }
        }
        Ok(CVector { space, data })
    }

    /// Permute factors into `order`.
    ///
    /// # Errors
    /// `LabelNotFound` / `DimMismatch` if `order` is not a permutation.
    pub fn reorder(&self, order: &[&str]) -> Result<CVector> {
        let target = self.space.reordered(order)?;
        let map = permutation_map(&self.space, &target);
        Ok(CVector { data: map.iter().map(|&i| self.data[i]).collect(), space: target })
    }

    /// # Errors
    /// `LabelCollision`.
    pub fn relabel(&self, map: &HashMap<String, String>) -> Result<CVector> {
        Ok(CVector { space: self.space.relabeled(map)?, data: self.data.clone() })
    }

    /// `|self⟩⟨other|`.
    pub fn outer(&self, other: &CVector) -> CMatrix {
        let mut data = Vec::with_capacity(self.len() * other.len());
        for a in &self.data {
            for b in &other.data {
                data.push(a * b.conj());
            }
        }
        CMatrix { rows: self.space.clone(), cols: other.space.clone(), data }
    }
}

/// Dense complex matrix whose rows and columns carry labeled spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: SpaceSpec,
    cols: SpaceSpec,
    data: Vec<C64>,
}

impl CMatrix {
    /// # Errors
    /// `DimMismatch` when the entry count is wrong or an entry is not finite.
    pub fn new(rows: SpaceSpec, cols: SpaceSpec, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows.dim() * cols.dim() {
            return Err(QcError::DimMismatch(format!(
                "matrix has {} entries, expected {}x{}",
                data.len(),
                rows.dim(),
                cols.dim()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: SpaceSpec, cols: SpaceSpec) -> Self {
        let n = rows.dim() * cols.dim();
        Self { rows, cols, data: vec![ZERO; n] }
    }

    pub fn identity(space: SpaceSpec) -> Self {
        let d = space.dim();
        let mut m = Self::zeros(space.clone(), space);
        for i in 0..d {
            m.data[i * d + i] = ONE;
        }
        m
    }

    /// Build from row-major complex entries given as a nested slice.
    ///
    /// # Errors
    /// `DimMismatch` on ragged input.
    pub fn from_rows(rows: SpaceSpec, cols: SpaceSpec, entries: &[Vec<C64>]) -> Result<Self> {
        let data: Vec<C64> = entries.iter().flat_map(|r| r.iter().copied()).collect();
        if entries.iter().any(|r| r.len() != cols.dim()) {
            return Err(QcError::DimMismatch("ragged rows".into()));
        }
        Self::new(rows, cols, data)
    }

    pub fn from_fn(rows: SpaceSpec, cols: SpaceSpec, f: impl Fn(usize, usize) -> C64) -> Self {
        let (r, c) = (rows.dim(), cols.dim());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> &SpaceSpec {
        &self.rows
    }

    pub fn cols(&self) -> &SpaceSpec {
        &self.cols
    }

    pub fn nrows(&self) -> usize {
        self.rows.dim()
    }

    pub fn ncols(&self) -> usize {
        self.cols.dim()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.ncols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        let c = self.ncols();
        self.data[i * c + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: C64) {
        let c = self.ncols();
        self.data[i * c + j] += v;
    }

    /// Column `j` as a vector on the row space.
    pub fn column(&self, j: usize) -> CVector {
        CVector {
            space: self.rows.clone(),
            data: (0..self.nrows()).map(|i| self.get(i, j)).collect(),
        }
    }

    /// Apply to a vector on the column space.
    ///
    /// # Errors
    /// `DimMismatch` when `v` does not live on the column space.
    pub fn apply(&self, v: &CVector) -> Result<CVector> {
        if !self.cols.same_as(v.space()) {
            return Err(QcError::DimMismatch("operator applied to a vector on the wrong space".into()));
        }
        let c = self.ncols();
        let data = (0..self.nrows())
            .map(|i| self.data[i * c..(i + 1) * c].iter().zip(v.data()).map(|(a, b)| a * b).sum())
            .collect();
        Ok(CVector { space: self.rows.clone(), data })
    }

    pub fn adjoint(&self) -> CMatrix {
        let c = self.ncols();
        CMatrix::from_fn(self.cols.clone(), self.rows.clone(), |i, j| self.data[j * c + i].conj())
    }

    pub fn transpose(&self) -> CMatrix {
        let c = self.ncols();
        CMatrix::from_fn(self.cols.clone(), self.rows.clone(), |i, j| self.data[j * c + i])
    }

    pub fn conj(&self) -> CMatrix {
        CMatrix { rows: self.rows.clone(), cols: self.cols.clone(), data: self.data.iter().map(|z| z.conj()).collect() }
    }

    /// Matrix product `self · other`. Only dimensions have to agree; the
    /// result keeps `self`'s rows and `other`'s columns.
    ///
    /// # Errors
    /// `DimMismatch`.
    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.ncols() != other.nrows() {
            return Err(QcError::DimMismatch(format!(
                "product of {}x{} and {}x{}",
                self.nrows(),
                self.ncols(),
                other.nrows(),
                other.ncols()
            )));
        }
        let (n, k, m) = (self.nrows(), self.ncols(), other.ncols());
        let mut data = vec![ZERO; n * m];
        for i in 0..n {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == ZERO {
                    continue;
                }
                let row = &other.data[l * m..(l + 1) * m];
                let out = &mut data[i * m..(i + 1) * m];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(CMatrix { rows: self.rows.clone(), cols: other.cols.clone(), data })
    }

    pub fn scale(&self, c: C64) -> CMatrix {
        CMatrix { rows: self.rows.clone(), cols: self.cols.clone(), data: self.data.iter().map(|z| z * c).collect() }
    }

    /// # Errors
    /// `DimMismatch` when shapes differ.
    pub fn add(&self, other: &CMatrix) -> Result<CMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    /// # Errors
    /// `DimMismatch` when shapes differ.
    pub fn sub(&self, other: &CMatrix) -> Result<CMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &CMatrix, f: impl Fn(C64, C64) -> C64) -> Result<CMatrix> {
        if !self.rows.same_as(&other.rows) || !self.cols.same_as(&other.cols) {
            return Err(QcError::DimMismatch("elementwise operation on different spaces".into()));
        }
        Ok(CMatrix {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Largest entrywise modulus of `self − other`.
    ///
    /// # Errors
    /// `DimMismatch` when shapes differ.
    pub fn max_abs_diff(&self, other: &CMatrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Trace; requires a square matrix.
    pub fn trace(&self) -> C64 {
        let n = self.nrows().min(self.ncols());
        (0..n).map(|i| self.get(i, i)).sum()
    }

    /// Permute row factors to `row_order` and column factors to `col_order`.
    ///
    /// # Errors
    /// `LabelNotFound` / `DimMismatch` if an order is not a permutation.
    pub fn reorder(&self, row_order: &[&str], col_order: &[&str]) -> Result<CMatrix> {
        let rt = self.rows.reordered(row_order)?;
        let ct = self.cols.reordered(col_order)?;
        let rmap = permutation_map(&self.rows, &rt);
        let cmap = permutation_map(&self.cols, &ct);
        let c = self.ncols();
        let mut data = Vec::with_capacity(rmap.len() * cmap.len());
        for &i in &rmap {
            for &j in &cmap {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(CMatrix { rows: rt, cols: ct, data })
    }

    /// Rename labels on both rows and columns.
    ///
    /// # Errors
    /// `LabelCollision`.
    pub fn relabel(&self, map: &HashMap<String, String>) -> Result<CMatrix> {
        Ok(CMatrix { rows: self.rows.relabeled(map)?, cols: self.cols.relabeled(map)?, data: self.data.clone() })
    }

    /// Reinterpret the row and column spaces; dimensions must match.
    ///
    /// # Errors
    /// `DimMismatch`.
    pub fn with_spaces(&self, rows: SpaceSpec, cols: SpaceSpec) -> Result<CMatrix> {
        CMatrix::new(rows, cols, self.data.clone())
    }

    /// Copy into an nalgebra matrix.
    pub fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.nrows(), self.ncols(), &self.data)
    }

    /// Copy from an nalgebra matrix.
    ///
    /// # Errors
    /// `DimMismatch` when shapes do not fit the spaces.
    pub fn from_nalgebra(rows: SpaceSpec, cols: SpaceSpec, m: &DMatrix<C64>) -> Result<CMatrix> {
        if m.nrows() != rows.dim() || m.ncols() != cols.dim() {
            return Err(QcError::DimMismatch("nalgebra matrix shape".into()));
        }
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Ok(CMatrix { rows, cols, data })
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        let m = self.to_nalgebra();
        let h = (&m + m.adjoint()).scale(0.5);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        self.hermitian_eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Deviation from Hermiticity, `max |M − M†|`.
    pub fn hermiticity_deviation(&self) -> f64 {
        let n = self.nrows();
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                d = d.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        d
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixDto {
    rows: usize,
    cols: usize,
    #[serde(default)]
    factors: Vec<Factor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col_factors: Option<Vec<Factor>>,
    entries: Vec<C64>,
}

fn space_or_default(factors: Vec<Factor>, dim: usize, fallback: &str) -> Result<SpaceSpec> {
    if factors.is_empty() && dim != 1 {
        return SpaceSpec::new(vec![Factor { label: fallback.to_string(), dim }]);
    }
    let s = SpaceSpec::new(factors)?;
    if s.dim() != dim {
        return Err(QcError::DimMismatch(format!("factors multiply to {}, declared {dim}", s.dim())));
    }
    Ok(s)
}

impl Serialize for CMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixDto {
            rows: self.nrows(),
            cols: self.ncols(),
            factors: self.rows.factors.clone(),
            col_factors: (!self.rows.same_as(&self.cols)).then(|| self.cols.factors.clone()),
            entries: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = MatrixDto::deserialize(d)?;
        let build = || -> Result<CMatrix> {
            let rows = space_or_default(dto.factors.clone(), dto.rows, "row")?;
            let cols = match dto.col_factors.clone() {
                Some(f) => space_or_default(f, dto.cols, "col")?,
                None if rows.dim() == dto.cols => rows.clone(),
                None => space_or_default(Vec::new(), dto.cols, "col")?,
            };
            CMatrix::new(rows, cols, dto.entries.clone())
        };
        build().map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorDto {
    dim: usize,
    #[serde(default)]
    factors: Vec<Factor>,
    entries: Vec<C64>,
}

impl Serialize for CVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VectorDto { dim: self.len(), factors: self.space.factors.clone(), entries: self.data.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = VectorDto::deserialize(d)?;
        space_or_default(dto.factors, dto.dim, "v")
            .and_then(|s| CVector::new(s, dto.entries))
            .map_err(serde::de::Error::custom)
    }
}

/// Kronecker product with concatenated spaces.
///
/// # Errors
/// `LabelCollision` if a label occurs in both operands.
pub fn tensor(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    for l in a.rows.labels().into_iter().chain(a.cols.labels()) {
        if b.rows.contains(l) || b.cols.contains(l) {
            return Err(QcError::LabelCollision(l.to_string()));
        }
    }
    let rows = a.rows.concat(&b.rows)?;
    let cols = a.cols.concat(&b.cols)?;
    let (br, bc) = (b.nrows(), b.ncols());
    let c = a.ncols() * bc;
    let mut data = vec![ZERO; rows.dim() * c];
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let x = a.get(i, j);
            if x == ZERO {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    data[(i * br + k) * c + j * bc + l] = x * b.data[k * bc + l];
                }
            }
        }
    }
    Ok(CMatrix { rows, cols, data })
}

/// `Σ_i |i⟩^X ⊗ V|i⟩` on `X ⊗ Y` for `V: X → Y`.
///
/// # Errors
/// `LabelCollision` when input and output share a label.
pub fn choi_vector(v: &CMatrix) -> Result<CVector> {
    let space = v.cols.concat(&v.rows)?;
    let (r, c) = (v.nrows(), v.ncols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..c {
        for y in 0..r {
            data.push(v.get(y, i));
        }
    }
    Ok(CVector { space, data })
}

/// `Σ_k |V_k⟩⟩⟨⟨V_k|`.
///
/// # Errors
/// `EmptyKrausSet`, `DimMismatch` when the operators disagree on spaces,
/// `LabelCollision` as in [`choi_vector`].
pub fn choi_matrix(kraus: &[CMatrix]) -> Result<CMatrix> {
    let first = kraus.first().ok_or(QcError::EmptyKrausSet)?;
    let mut acc: Option<CMatrix> = None;
    for k in kraus {
        if !k.rows.same_as(&first.rows) || !k.cols.same_as(&first.cols) {
            return Err(QcError::DimMismatch("Kraus operators act on different spaces".into()));
        }
        let v = choi_vector(k)?;
        let p = v.outer(&v);
        acc = Some(match acc {
            None => p,
            Some(a) => a.add(&p)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Shared labels of two spaces, in the order they appear in `a`.
fn shared_labels<'a>(a: &'a SpaceSpec, b: &SpaceSpec) -> Result<Vec<&'a str>> {
    let mut out = Vec::new();
    for f in a.factors() {
        if let Some(p) = b.position(&f.label) {
            if b.factors[p].dim != f.dim {
                return Err(QcError::DimMismatch(format!(
                    "shared label `{}` has dimensions {} and {}",
                    f.label, f.dim, b.factors[p].dim
                )));
            }
            out.push(f.label.as_str());
        }
    }
    Ok(out)
}

/// Link product of vectors: contract the shared labels without conjugation.
/// The result lists `a`'s remaining factors followed by `b`'s.
///
/// # Errors
/// `DimMismatch` when a shared label has different dimensions.
pub fn link_vectors(a: &CVector, b: &CVector) -> Result<CVector> {
    let shared = shared_labels(&a.space, &b.space)?;
    let a_rest: Vec<&str> = a.space.labels().into_iter().filter(|l| !shared.contains(l)).collect();
    let b_rest: Vec<&str> = b.space.labels().into_iter().filter(|l| !shared.contains(l)).collect();
    let a_order: Vec<&str> = a_rest.iter().chain(&shared).copied().collect();
    let b_order: Vec<&str> = shared.iter().chain(&b_rest).copied().collect();
    let ar = a.reorder(&a_order)?;
    let br = b.reorder(&b_order)?;
    let dy: usize = shared.iter().map(|l| a.space.dim_of(l).expect("shared")).product();
    let dx = ar.len() / dy;
    let dz = br.len() / dy;
    let space = ar.space.without(&shared).concat(&br.space.without(&shared))?;
    let mut data = vec![ZERO; dx * dz];
    for x in 0..dx {
        for y in 0..dy {
            let av = ar.data[x * dy + y];
            if av == ZERO {
                continue;
            }
            let brow = &br.data[y * dz..(y + 1) * dz];
            let out = &mut data[x * dz..(x + 1) * dz];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(CVector { space, data })
}

fn require_square_labels(m: &CMatrix) -> Result<()> {
    if m.rows.same_as(&m.cols) {
        Ok(())
    } else {
        Err(QcError::DimMismatch("Choi matrix must have identical row and column spaces".into()))
    }
}

/// Link product of matrices, `Tr_Y[(A^{T_Y} ⊗ 1)(1 ⊗ B)]`, for operators whose
/// row and column spaces coincide.
///
/// # Errors
/// `DimMismatch` when a shared label has different dimensions or an operand
/// is not square in labels.
pub fn link_matrices(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    require_square_labels(a)?;
    require_square_labels(b)?;
    let shared = shared_labels(&a.rows, &b.rows)?;
    let a_rest: Vec<&str> = a.rows.labels().into_iter().filter(|l| !shared.contains(l)).collect();
    let b_rest: Vec<&str> = b.rows.labels().into_iter().filter(|l| !shared.contains(l)).collect();
    let a_order: Vec<&str> = a_rest.iter().chain(&shared).copied().collect();
    let b_order: Vec<&str> = shared.iter().chain(&b_rest).copied().collect();
    let ar = a.reorder(&a_order, &a_order)?;
    let br = b.reorder(&b_order, &b_order)?;
    let dy: usize = shared.iter().map(|l| a.rows.dim_of(l).expect("shared")).product();
    let dx = ar.nrows() / dy;
    let dz = br.nrows() / dy;
    let space = ar.rows.without(&shared).concat(&br.rows.without(&shared))?;
    let n = dx * dz;
    let (ac, bc) = (ar.ncols(), br.ncols());
    let mut data = vec![ZERO; n * n];
    // (A*B)[(x,z),(x',z')] = Σ_{y,y'} A[(x,y'),(x',y)] B[(y',z),(y,z')]
    for x in 0..dx {
        for xp in 0..dx {
            for y in 0..dy {
                for yp in 0..dy {
                    let av = ar.data[(x * dy + yp) * ac + xp * dy + y];
                    if av == ZERO {
                        continue;
                    }
                    for z in 0..dz {
                        let row = (x * dz + z) * n;
                        let brow = (yp * dz + z) * bc + y * dz;
                        for zp in 0..dz {
                            data[row + xp * dz + zp] += av * br.data[brow + zp];
                        }
                    }
                }
            }
        }
    }
    Ok(CMatrix { rows: space.clone(), cols: space, data })
}

fn check_at_most_twice<'a>(spaces: impl Iterator<Item = &'a SpaceSpec>) -> Result<()> {
    let mut count: HashMap<&str, usize> = HashMap::new();
    for s in spaces {
        for l in s.labels() {
            let c = count.entry(l).or_insert(0);
            *c += 1;
            if *c > 2 {
                return Err(QcError::LinkAssociativityViolation(l.to_string()));
            }
        }
    }
    Ok(())
}

/// Left fold of [`link_vectors`] after checking that every label appears in
/// at most two operands, which makes the product associative.
///
/// # Errors
/// `LinkAssociativityViolation`, or any error of [`link_vectors`].
pub fn link_chain_vectors(items: &[CVector]) -> Result<CVector> {
    check_at_most_twice(items.iter().map(|v| &v.space))?;
    let mut acc = CVector::scalar(ONE);
    for v in items {
        acc = link_vectors(&acc, v)?;
    }
    Ok(acc)
}

/// Left fold of [`link_matrices`] under the same at-most-twice rule.
///
/// # Errors
/// `LinkAssociativityViolation`, or any error of [`link_matrices`].
pub fn link_chain_matrices(items: &[CMatrix]) -> Result<CMatrix> {
    check_at_most_twice(items.iter().map(|m| &m.rows))?;
    let mut acc = CMatrix::identity(SpaceSpec::trivial());
    for m in items {
        acc = link_matrices(&acc, m)?;
    }
    Ok(acc)
}

/// Trace out the listed factors; they must appear on rows and columns with
/// equal dimensions.
///
/// # Errors
/// `LabelNotFound`.
pub fn partial_trace(m: &CMatrix, labels: &[&str]) -> Result<CMatrix> {
    if labels.is_empty() {
        return Ok(m.clone());
    }
    for l in labels {
        let dr = m.rows.dim_of(l)?;
        let dc = m.cols.dim_of(l)?;
        if dr != dc {
            return Err(QcError::DimMismatch(format!("traced label `{l}` has unequal dimensions")));
        }
    }
    let r_keep: Vec<&str> = m.rows.labels().into_iter().filter(|l| !labels.contains(l)).collect();
    let c_keep: Vec<&str> = m.cols.labels().into_iter().filter(|l| !labels.contains(l)).collect();
    let r_order: Vec<&str> = r_keep.iter().chain(labels).copied().collect();
    let c_order: Vec<&str> = c_keep.iter().chain(labels).copied().collect();
    let p = m.reorder(&r_order, &c_order)?;
    let dt: usize = labels.iter().map(|l| m.rows.dim_of(l).expect("checked")).product();
    let rows = m.rows.without(labels);
    let cols = m.cols.without(labels);
    let (nr, nc) = (rows.dim(), cols.dim());
    let pc = p.ncols();
    let mut data = vec![ZERO; nr * nc];
    for i in 0..nr {
        for j in 0..nc {
            let mut s = ZERO;
            for t in 0..dt {
                s += p.data[(i * dt + t) * pc + j * dt + t];
            }
            data[i * nc + j] = s;
        }
    }
    Ok(CMatrix { rows, cols, data })
}

/// Outcome of an isometry test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsometryReport {
    pub ok: bool,
    pub max_deviation: f64,
}

/// `‖V†V − 1‖_max ≤ tol`.
pub fn is_isometry(v: &CMatrix, tol: f64) -> IsometryReport {
    let (r, c) = (v.nrows(), v.ncols());
    let mut dev: f64 = 0.0;
    for i in 0..c {
        for j in i..c {
            let mut s = ZERO;
            for k in 0..r {
                s += v.data[k * c + i].conj() * v.data[k * c + j];
            }
            if i == j {
                s -= ONE;
            }
            dev = dev.max(s.norm());
        }
    }
    IsometryReport { ok: dev <= tol, max_deviation: dev }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(pairs: &[(&str, usize)]) -> SpaceSpec {
        SpaceSpec::from_pairs(pairs).unwrap()
    }

    fn pauli_x(inp: &str, out: &str) -> CMatrix {
        CMatrix::from_fn(sp(&[(out, 2)]), sp(&[(inp, 2)]), |i, j| if i != j { ONE } else { ZERO })
    }

    #[test]
    fn identity_tensor_identity() {
        let a = CMatrix::identity(sp(&[("a", 2)]));
        let b = CMatrix::identity(sp(&[("b", 2)]));
        let t = tensor(&a, &b).unwrap();
        assert_eq!(t, CMatrix::identity(sp(&[("a", 2), ("b", 2)])));
    }

    #[test]
    fn tensor_block_placement() {
        let x = CMatrix::from_fn(sp(&[("a", 2)]), sp(&[("a", 2)]), |i, j| if i != j { ONE } else { ZERO });
        let p0 = CMatrix::from_fn(sp(&[("b", 2)]), sp(&[("b", 2)]), |i, j| if i == 0 && j == 0 { ONE } else { ZERO });
        let t = tensor(&x, &p0).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let (i, k) = (r / 2, r % 2);
                let (j, l) = (c / 2, c % 2);
                let want = if i != j && k == 0 && l == 0 { ONE } else { ZERO };
                assert_eq!(t.get(r, c), want);
            }
        }
    }

    #[test]
    fn scalar_tensor_scales() {
        let s = CMatrix::new(SpaceSpec::trivial(), SpaceSpec::trivial(), vec![C64::new(0.5, 2.0)]).unwrap();
        let a = pauli_x("i", "o");
        let t = tensor(&s, &a).unwrap();
        assert_eq!(t, a.scale(C64::new(0.5, 2.0)));
    }

    #[test]
    fn tensor_rejects_shared_label() {
        let a = CMatrix::identity(sp(&[("a", 2)]));
        assert_eq!(tensor(&a, &a), Err(QcError::LabelCollision("a".into())));
    }

    #[test]
    fn choi_vector_examples() {
        let id = CMatrix::identity(sp(&[("y", 2)])).with_spaces(sp(&[("y", 2)]), sp(&[("x", 2)])).unwrap();
        let v = choi_vector(&id).unwrap();
        assert_eq!(v.data(), &[ONE, ZERO, ZERO, ONE]);
        let v = choi_vector(&pauli_x("x", "y")).unwrap();
        assert_eq!(v.data(), &[ZERO, ONE, ONE, ZERO]);
        let psi = CMatrix::new(sp(&[("y", 2)]), SpaceSpec::trivial(), vec![re(0.6), C64::new(0.0, 0.8)]).unwrap();
        assert_eq!(choi_vector(&psi).unwrap().data(), psi.data());
    }

    #[test]
    fn choi_matrix_dephasing() {
        let p = |k: usize| CMatrix::from_fn(sp(&[("y", 2)]), sp(&[("x", 2)]), move |i, j| if i == k && j == k { ONE } else { ZERO });
        let j = choi_matrix(&[p(0), p(1)]).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c && (r == 0 || r == 3) { ONE } else { ZERO };
                assert_eq!(j.get(r, c), want);
            }
        }
        assert_eq!(choi_matrix(&[]), Err(QcError::EmptyKrausSet));
    }

    #[test]
    fn link_vectors_limits() {
        let a = CVector::new(sp(&[("a", 2)]), vec![ONE, re(2.0)]).unwrap();
        let b = CVector::new(sp(&[("b", 2)]), vec![re(3.0), C64::new(0.0, 1.0)]).unwrap();
        assert_eq!(link_vectors(&a, &b).unwrap(), a.tensor(&b).unwrap());
        let c = CVector::new(sp(&[("a", 2)]), vec![C64::new(0.0, 1.0), re(-1.0)]).unwrap();
        let l = link_vectors(&a, &c).unwrap();
        assert_eq!(l.data(), &[a.scale(ONE).conj_vec().inner(&c).unwrap()]);
    }

    impl CVector {
        fn conj_vec(&self) -> CVector {
            CVector { space: self.space.clone(), data: self.data.iter().map(|z| z.conj()).collect() }
        }
    }

    #[test]
    fn link_matrices_limits() {
        let a = CMatrix::from_fn(sp(&[("a", 2)]), sp(&[("a", 2)]), |i, j| C64::new(i as f64, j as f64 + 1.0));
        let b = CMatrix::from_fn(sp(&[("b", 2)]), sp(&[("b", 2)]), |i, j| C64::new(2.0 * i as f64 - j as f64, 0.5));
        assert_eq!(link_matrices(&a, &b).unwrap(), tensor(&a, &b).unwrap());
        let b2 = b.with_spaces(sp(&[("a", 2)]), sp(&[("a", 2)])).unwrap();
        let l = link_matrices(&a, &b2).unwrap();
        let want = a.transpose().with_spaces(sp(&[("a", 2)]), sp(&[("a", 2)])).unwrap().matmul(&b2).unwrap().trace();
        assert!((l.get(0, 0) - want).norm() < 1e-14);
    }

    #[test]
    fn partial_trace_bell() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bell = CVector::new(sp(&[("a", 2), ("b", 2)]), vec![re(s), ZERO, ZERO, re(s)]).unwrap();
        let rho = bell.outer(&bell);
        let r = partial_trace(&rho, &["b"]).unwrap();
        let oracle = |i: usize, j: usize| (0..2).map(|k| rho.get(2 * i + k, 2 * j + k)).sum::<C64>();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(r.get(i, j), oracle(i, j));
            }
        }
        let full = partial_trace(&rho, &["a", "b"]).unwrap();
        assert!((full.get(0, 0) - ONE).norm() < 1e-15);
        assert_eq!(partial_trace(&rho, &[]).unwrap(), rho);
        assert_eq!(partial_trace(&rho, &["c"]), Err(QcError::LabelNotFound("c".into())));
    }

    #[test]
    fn isometry_examples() {
        let id = CMatrix::identity(sp(&[("a", 2)]));
        assert!(is_isometry(&id, 1e-12).ok);
        let r = is_isometry(&id.scale(re(2.0)), 1e-12);
        assert!(!r.ok);
        assert!((r.max_deviation - 3.0).abs() < 1e-15);
    }

    #[test]
    fn chain_rejects_triple_label() {
        let v = CVector::basis(sp(&[("a", 2)]), 0);
        assert_eq!(
            link_chain_vectors(&[v.clone(), v.clone(), v]),
            Err(QcError::LinkAssociativityViolation("a".into()))
        );
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = CMatrix::from_fn(sp(&[("o", 2)]), sp(&[("i", 3)]), |i, j| C64::new(0.1 * i as f64, 1.0 / (j as f64 + 3.0)));
        let text = serde_json::to_string(&m).unwrap();
        let back: CMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = text.replace("\"cols\":3", "\"cols\":4");
        assert!(serde_json::from_str::<CMatrix>(&bad).is_err());
    }

    #[test]
    fn reorder_round_trip() {
        let s = sp(&[("a", 2), ("b", 3), ("c", 2)]);
        let v = CVector::new(s, (0..12).map(|i| re(i as f64)).collect()).unwrap();
        let p = v.reorder(&["c", "a", "b"]).unwrap();
        assert_eq!(p.data()[6 + 3 + 2], re(11.0));
        assert_eq!(p.data()[3], re(6.0));
        let back = p.reorder(&["a", "b", "c"]).unwrap();
        assert_eq!(back, v);
    }
}
