// SPDX-License-Identifier: Apache-2.0
//! Circuits with quantum control of causal order.
//!
//! A circuit is a table of internal operators `V^{→k'}_{K,k}`: given that the
//! parties in `K` already acted and party `k` just acted, route the output of
//! `k` (and the ancilla) to the input of `k'`. Parties are indexed from 0 in
//! code; Hilbert-space labels are 1-based (`AI1`, `AO1`, ...).

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::linalg::{
    choi_vector, link_chain_vectors, link_matrices, link_vectors, partial_trace, CMatrix, CVector, SpaceSpec, C64,
    ONE, ZERO,
};

/// Label of party `k`'s input space.
pub fn ai(k: usize) -> String {
    format!("AI{}", k + 1)
}

/// Label of party `k`'s output space.
pub fn ao(k: usize) -> String {
    format!("AO{}", k + 1)
}

/// Label of the ancilla carried into slot `n` (`n = N+1` is the final one).
pub fn alpha_label(n: usize, n_parties: usize) -> String {
    if n > n_parties {
        "alphaF".to_string()
    } else {
        format!("alpha{n}")
    }
}

pub const PAST: &str = "P";
pub const FUTURE: &str = "F";

/// Input and output dimension of one party.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyDims {
    pub d_in: usize,
    pub d_out: usize,
}

/// Control basis element: parties that acted before plus the current one.
/// `current = None` stands for the start (empty mask) or the future (full mask).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ControlState {
    pub acted: u32,
    pub current: Option<usize>,
}

/// Key of an internal operator: control before the step and next party
/// (`to = None` routes to the global future).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpKey {
    pub acted: u32,
    pub from: Option<usize>,
    pub to: Option<usize>,
}

impl OpKey {
    pub fn new(acted: u32, from: Option<usize>, to: Option<usize>) -> Self {
        Self { acted, from, to }
    }

    /// Slot whose isometry contains this operator (1-based).
    pub fn slot(&self) -> usize {
        match self.from {
            None => 1,
            Some(_) => self.acted.count_ones() as usize + 2,
        }
    }

    fn control_in(&self) -> ControlState {
        ControlState { acted: self.acted, current: self.from }
    }

    fn control_out(&self, n_parties: usize) -> ControlState {
        let acted = self.from.map_or(self.acted, |k| self.acted | (1 << k));
        match self.to {
            Some(k) => ControlState { acted, current: Some(k) },
            None => ControlState { acted: full_mask(n_parties), current: None },
        }
    }
}

fn full_mask(n: usize) -> u32 {
    (1u32 << n) - 1
}

/// One party's (generic) local operation: a single Kraus operator `d_in → d_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalOperation {
    pub party: usize,
    pub kraus: CMatrix,
}

impl LocalOperation {
    pub fn new(party: usize, kraus: CMatrix) -> Self {
        Self { party, kraus }
    }

    /// The Kraus operator with spaces labeled `AI{k}` → `AO{k}`.
    ///
    /// # Errors
    /// `DimMismatch` when the operator does not match the declared dims.
    pub fn labeled(&self, dims: PartyDims) -> Result<CMatrix> {
        let k = self.party;
        self.kraus
            .with_spaces(SpaceSpec::single(&ao(k), dims.d_out), SpaceSpec::single(&ai(k), dims.d_in))
            .map_err(|_| QcError::DimMismatch(format!("local operation of party {} has the wrong shape", k + 1)))
    }
}

/// The circuit: dimensions and the internal operator table.
#[derive(Clone, Debug, PartialEq)]
pub struct QcQc {
    n_parties: usize,
    dims: Vec<PartyDims>,
    past_dim: usize,
    future_dim: usize,
    ancilla_dims: Vec<usize>,
    ops: BTreeMap<OpKey, CMatrix>,
}

impl QcQc {
    /// Empty operator table. `ancilla_dims` lists `α_1..α_N` followed by `α_F`.
    ///
    /// # Errors
    /// `DimMismatch` on inconsistent lengths or zero dimensions.
    pub fn new(dims: Vec<PartyDims>, past_dim: usize, future_dim: usize, ancilla_dims: Vec<usize>) -> Result<Self> {
        let n = dims.len();
        if n == 0 || n > 16 {
            return Err(QcError::DimMismatch(format!("{n} parties is outside 1..=16")));
        }
        if ancilla_dims.len() != n + 1 {
            return Err(QcError::DimMismatch(format!(
                "expected {} ancilla dimensions, got {}",
                n + 1,
                ancilla_dims.len()
            )));
        }
        let zero = dims.iter().any(|d| d.d_in == 0 || d.d_out == 0)
            || past_dim == 0
            || future_dim == 0
            || ancilla_dims.contains(&0);
        if zero {
            return Err(QcError::DimMismatch("zero dimension".into()));
        }
        Ok(Self { n_parties: n, dims, past_dim, future_dim, ancilla_dims, ops: BTreeMap::new() })
    }

    pub fn n_parties(&self) -> usize {
        self.n_parties
    }

    pub fn dims(&self) -> &[PartyDims] {
        &self.dims
    }

    pub fn past_dim(&self) -> usize {
        self.past_dim
    }

    pub fn future_dim(&self) -> usize {
        self.future_dim
    }

    pub fn ancilla_dims(&self) -> &[usize] {
        &self.ancilla_dims
    }

    /// Dimension of the ancilla entering slot `n + 1`; `α_0` is trivial.
    pub fn alpha(&self, n: usize) -> usize {
        if n == 0 {
            1
        } else {
            self.ancilla_dims[n - 1]
        }
    }

    pub fn alpha_f(&self) -> usize {
        self.ancilla_dims[self.n_parties]
    }

    /// Padded generic message dimension `max_k max(d_in, d_out)`.
    pub fn generic_dim(&self) -> usize {
        self.dims.iter().map(|d| d.d_in.max(d.d_out)).max().unwrap_or(1)
    }

    pub fn ops(&self) -> &BTreeMap<OpKey, CMatrix> {
        &self.ops
    }

    pub fn op(&self, key: &OpKey) -> Option<&CMatrix> {
        self.ops.get(key)
    }

    fn in_dim(&self, key: &OpKey) -> usize {
        match key.from {
            None => self.past_dim,
            Some(k) => self.dims[k].d_out * self.alpha(key.acted.count_ones() as usize + 1),
        }
    }

    fn out_dim(&self, key: &OpKey) -> usize {
        let slot = key.slot();
        match key.to {
            None => self.future_dim * self.alpha_f(),
            Some(k) => self.dims[k].d_in * self.alpha(slot),
        }
    }

    fn check_key(&self, key: &OpKey) -> Result<()> {
        let n = self.n_parties;
        let bad = |m: &str| Err(QcError::IncompleteQcQc(format!("operator key {key:?}: {m}")));
        if key.acted & !full_mask(n) != 0 {
            return bad("acted set names unknown parties");
        }
        match key.from {
            None if key.acted != 0 => return bad("start control must have an empty acted set"),
            Some(k) if k >= n || key.acted & (1 << k) != 0 => return bad("current party invalid"),
            _ => {}
        }
        let after = key.from.map_or(key.acted, |k| key.acted | (1 << k));
        match key.to {
            Some(k) if k >= n || after & (1 << k) != 0 => bad("next party already acted"),
            None if after != full_mask(n) => bad("only the last step may route to the future"),
            _ => Ok(()),
        }
    }

    /// Store `V^{→to}_{acted,from}` as a `(target ⊗ ancilla) × (target ⊗ ancilla)`
    /// matrix, target index most significant.
    ///
    /// # Errors
    /// `IncompleteQcQc` for an ill-formed key, `DimMismatch` for a wrong shape.
    pub fn insert_op(&mut self, key: OpKey, m: CMatrix) -> Result<()> {
        self.check_key(&key)?;
        if m.nrows() != self.out_dim(&key) || m.ncols() != self.in_dim(&key) {
            return Err(QcError::DimMismatch(format!(
                "operator {key:?} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                self.out_dim(&key),
                self.in_dim(&key)
            )));
        }
        let plain = m.with_spaces(SpaceSpec::single("out", m.nrows()), SpaceSpec::single("in", m.ncols()))?;
        self.ops.insert(key, plain);
        Ok(())
    }

    /// Operator with its input and output spaces labeled for link products.
    ///
    /// # Errors
    /// `IncompleteQcQc` if the operator is absent.
    pub fn labeled_op(&self, key: &OpKey) -> Result<CMatrix> {
        let m = self.op(key).ok_or_else(|| QcError::IncompleteQcQc(format!("missing operator {key:?}")))?;
        let n = self.n_parties;
        let slot = key.slot();
        let cols = match key.from {
            None => SpaceSpec::single(PAST, self.past_dim),
            Some(k) => SpaceSpec::from_pairs(&[
                (&ao(k), self.dims[k].d_out),
                (&alpha_label(slot - 1, n), self.alpha(slot - 1)),
            ])?,
        };
        let rows = match key.to {
            None => SpaceSpec::from_pairs(&[(FUTURE, self.future_dim), ("alphaF", self.alpha_f())])?,
            Some(k) => SpaceSpec::from_pairs(&[(&ai(k), self.dims[k].d_in), (&alpha_label(slot, n), self.alpha(slot))])?,
        };
        m.with_spaces(rows, cols)
    }

    /// Control basis of stage `s` (`0..=N+1`), lexicographic in (mask, current).
    pub fn controls(&self, s: usize) -> Vec<ControlState> {
        let n = self.n_parties;
        if s == 0 {
            return vec![ControlState { acted: 0, current: None }];
        }
        if s == n + 1 {
            return vec![ControlState { acted: full_mask(n), current: None }];
        }
        let mut out = Vec::new();
        for mask in 0..=full_mask(n) {
            if mask.count_ones() as usize != s - 1 {
                continue;
            }
            for k in 0..n {
                if mask & (1 << k) == 0 {
                    out.push(ControlState { acted: mask, current: Some(k) });
                }
            }
        }
        out
    }

    /// Controls of stage `s` that carry amplitude for some input: those
    /// reached from the start through stored nonzero operators.
    pub fn reachable_controls(&self, s: usize) -> Vec<ControlState> {
        let mut reach: BTreeSet<ControlState> = BTreeSet::from([ControlState { acted: 0, current: None }]);
        for _ in 0..s {
            let mut next = BTreeSet::new();
            for (key, m) in &self.ops {
                if reach.contains(&key.control_in()) && m.max_abs() > 0.0 {
                    next.insert(key.control_out(self.n_parties));
                }
            }
            reach = next;
        }
        reach.into_iter().collect()
    }

    /// Next parties (or the future) available from control `c`.
    pub fn successors(&self, c: ControlState) -> Vec<Option<usize>> {
        let n = self.n_parties;
        let after = c.current.map_or(c.acted, |k| c.acted | (1 << k));
        if after == full_mask(n) && c.current.is_some() {
            return vec![None];
        }
        (0..n).filter(|k| after & (1 << k) == 0).map(Some).collect()
    }

    fn slot_in_target(&self, slot: usize) -> usize {
        if slot == 1 {
            self.past_dim
        } else {
            self.generic_dim()
        }
    }

    fn slot_out_target(&self, slot: usize) -> usize {
        if slot == self.n_parties + 1 {
            self.future_dim
        } else {
            self.generic_dim()
        }
    }

    /// Controlled sum `Σ V^{→k'}_{K,k} ⊗ |K∪k, k'⟩⟨K, k|` for slot `n`
    /// (`1..=N+1`) on the padded generic spaces. Columns are ordered
    /// `(target, α_{n−1}, control)`, rows `(target, α_n, control)`.
    ///
    /// # Errors
    /// `IncompleteQcQc` when an operator needed on a reachable control is
    /// missing and the result fails to be an isometry there.
    pub fn assemble_slot_isometry(&self, n: usize) -> Result<CMatrix> {
        let (v, missing) = self.assemble_raw(n)?;
        if missing {
            let dev = self.slot_deviation(n, &v);
            if dev > 1e-10 {
                return Err(QcError::IncompleteQcQc(format!(
                    "slot {n} lacks operators on reachable controls (deviation {dev:e})"
                )));
            }
        }
        Ok(v)
    }

    fn assemble_raw(&self, n: usize) -> Result<(CMatrix, bool)> {
        let nn = self.n_parties;
        if n == 0 || n > nn + 1 {
            return Err(QcError::DimMismatch(format!("slot {n} outside 1..={}", nn + 1)));
        }
        let c_in = self.controls(n - 1);
        let c_out = self.controls(n);
        let (a_in, a_out) = (self.alpha(n - 1), if n == nn + 1 { self.alpha_f() } else { self.alpha(n) });
        let (t_in, t_out) = (self.slot_in_target(n), self.slot_out_target(n));
        let cols = SpaceSpec::from_pairs(&[("in", t_in), ("alpha_in", a_in), ("ctl_in", c_in.len())])?;
        let rows = SpaceSpec::from_pairs(&[("out", t_out), ("alpha_out", a_out), ("ctl_out", c_out.len())])?;
        let mut v = CMatrix::zeros(rows, cols);
        let reachable = self.reachable_controls(n - 1);
        let mut missing = false;
        for (ci, c) in c_in.iter().enumerate() {
            for to in self.successors(*c) {
                let key = OpKey::new(c.acted, c.current, to);
                let Some(m) = self.op(&key) else {
                    if reachable.contains(c) {
                        missing = true;
                    }
                    continue;
                };
                let co = key.control_out(nn);
                let oi = c_out.iter().position(|x| *x == co).expect("control in basis");
                let (din, dout) = (
                    c.current.map_or(self.past_dim, |k| self.dims[k].d_out),
                    to.map_or(self.future_dim, |k| self.dims[k].d_in),
                );
                for i in 0..dout {
                    for a in 0..a_out {
                        for j in 0..din {
                            for b in 0..a_in {
                                let x = m.get(i * a_out + a, j * a_in + b);
                                if x != ZERO {
                                    let r = (i * a_out + a) * c_out.len() + oi;
                                    let col = (j * a_in + b) * c_in.len() + ci;
                                    v.set(r, col, x);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((v, missing))
    }

    /// Columns of slot `n`'s assembled isometry that belong to its effective
    /// domain: reachable controls and unpadded targets.
    pub fn effective_columns(&self, n: usize) -> Vec<usize> {
        let c_in = self.controls(n - 1);
        let reach = self.reachable_controls(n - 1);
        let a_in = self.alpha(n - 1);
        let t_in = self.slot_in_target(n);
        let mut cols = Vec::new();
        for t in 0..t_in {
            for b in 0..a_in {
                for (ci, c) in c_in.iter().enumerate() {
                    let din = c.current.map_or(self.past_dim, |k| self.dims[k].d_out);
                    if t < din && reach.contains(c) {
                        cols.push((t * a_in + b) * c_in.len() + ci);
                    }
                }
            }
        }
        cols
    }

    fn slot_deviation(&self, n: usize, v: &CMatrix) -> f64 {
        let cols = self.effective_columns(n);
        let mut dev: f64 = 0.0;
        for (x, &i) in cols.iter().enumerate() {
            for &j in &cols[x..] {
                let mut s = ZERO;
                for r in 0..v.nrows() {
                    s += v.get(r, i).conj() * v.get(r, j);
                }
                if i == j {
                    s -= ONE;
                }
                dev = dev.max(s.norm());
            }
        }
        dev
    }

    /// Isometry deviations per slot and the cross-term condition
    /// `Σ_{k'} V^{→k'}_{K,k}† V^{→k'}_{L,l} = δ 1` over reachable controls.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        let mut slots = Vec::new();
        let mut error = None;
        for n in 1..=self.n_parties + 1 {
            match self.assemble_raw(n) {
                Ok((v, _)) => {
                    let d = self.slot_deviation(n, &v);
                    slots.push(SlotCheck { slot: n, max_deviation: d, ok: d <= tol });
                }
                Err(e) => error = Some(e.to_string()),
            }
        }
        let (cross, diag) = self.kraus_condition();
        let ok = error.is_none() && slots.iter().all(|s| s.ok) && diag <= tol && cross <= tol;
        ValidationReport { slots, kraus_cross_max: cross, kraus_diag_max: diag, ok, error }
    }

    /// Largest cross term and largest diagonal deviation of the operator-level
    /// isometry condition.
    pub fn kraus_condition(&self) -> (f64, f64) {
        let nn = self.n_parties;
        let (mut cross, mut diag) = (0.0f64, 0.0f64);
        for s in 0..=nn {
            let reach = self.reachable_controls(s);
            for (x, c) in reach.iter().enumerate() {
                for d in &reach[x..] {
                    let after_c = c.current.map_or(c.acted, |k| c.acted | (1 << k));
                    let after_d = d.current.map_or(d.acted, |k| d.acted | (1 << k));
                    if after_c != after_d {
                        continue;
                    }
                    let mut acc: Option<CMatrix> = None;
                    for to in self.successors(*c) {
                        let (kc, kd) = (OpKey::new(c.acted, c.current, to), OpKey::new(d.acted, d.current, to));
                        if let (Some(a), Some(b)) = (self.op(&kc), self.op(&kd)) {
                            let p = a.adjoint().matmul(b).expect("same output space");
                            acc = Some(match acc {
                                None => p,
                                Some(q) => q.add(&p).expect("same shape"),
                            });
                        }
                    }
                    let Some(g) = acc else { continue };
                    if c == d {
                        let dev = g
                            .sub(&CMatrix::identity(g.rows().clone()).with_spaces(g.rows().clone(), g.cols().clone()).expect("square"))
                            .expect("shape")
                            .max_abs();
                        diag = diag.max(dev);
                    } else {
                        cross = cross.max(g.max_abs());
                    }
                }
            }
        }
        (cross, diag)
    }
}

/// Per-slot isometry check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotCheck {
    pub slot: usize,
    pub max_deviation: f64,
    pub ok: bool,
}

/// Outcome of [`QcQc::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub slots: Vec<SlotCheck>,
    pub kraus_cross_max: f64,
    pub kraus_diag_max: f64,
    pub ok: bool,
    pub error: Option<String>,
}

/// Process vector `|w⟩` on `P ⊗ (AI_k ⊗ AO_k)_k ⊗ F ⊗ α_F`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessVector {
    pub vec: CVector,
    pub n_parties: usize,
    pub dims: Vec<PartyDims>,
}

/// Canonical label order of a process vector.
pub fn canonical_labels(n_parties: usize) -> Vec<String> {
    let mut l = vec![PAST.to_string()];
    for k in 0..n_parties {
        l.push(ai(k));
        l.push(ao(k));
    }
    l.push(FUTURE.to_string());
    l.push("alphaF".to_string());
    l
}

/// Sum over all orders of the chained link products of the operators' Choi
/// vectors. An order that hits a missing operator contributes nothing.
///
/// # Errors
/// Link errors from inconsistent operator shapes.
pub fn process_vector(q: &QcQc) -> Result<ProcessVector> {
    process_vector_with_orders(q, (0..q.n_parties).permutations(q.n_parties).collect())
}

/// As [`process_vector`] but summing the orders in the given sequence.
///
/// # Errors
/// As [`process_vector`].
pub fn process_vector_with_orders(q: &QcQc, orders: Vec<Vec<usize>>) -> Result<ProcessVector> {
    let labels = canonical_labels(q.n_parties);
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut space = Vec::new();
    space.push((PAST, q.past_dim));
    for k in 0..q.n_parties {
        space.push((label_refs[1 + 2 * k], q.dims[k].d_in));
        space.push((label_refs[2 + 2 * k], q.dims[k].d_out));
    }
    space.push((FUTURE, q.future_dim));
    space.push(("alphaF", q.alpha_f()));
    let mut acc = CVector::zeros(SpaceSpec::from_pairs(&space)?);
    for order in orders {
        if let Some(term) = order_term(q, &order)? {
            acc = acc.add(&term.reorder(&label_refs)?)?;
        }
    }
    Ok(ProcessVector { vec: acc, n_parties: q.n_parties, dims: q.dims.clone() })
}

/// Operator keys visited by one order.
pub fn order_keys(n_parties: usize, order: &[usize]) -> Vec<OpKey> {
    let mut keys = Vec::with_capacity(n_parties + 1);
    let mut acted = 0u32;
    let mut from = None;
    for &k in order {
        keys.push(OpKey::new(acted, from, Some(k)));
        if let Some(f) = from {
            acted |= 1 << f;
        }
        from = Some(k);
    }
    keys.push(OpKey::new(acted, from, None));
    keys
}

/// Chained link product for one order, `None` if an operator is absent.
///
/// # Errors
/// Link errors.
pub fn order_term(q: &QcQc, order: &[usize]) -> Result<Option<CVector>> {
    let mut items = Vec::with_capacity(order.len() + 1);
    for key in order_keys(q.n_parties, order) {
        if q.op(&key).is_none() {
            return Ok(None);
        }
        items.push(choi_vector(&q.labeled_op(&key)?)?);
    }
    link_chain_vectors(&items).map(Some)
}

/// Outcome of the generalized Born rule.
#[derive(Clone, Debug, PartialEq)]
pub struct BornOutcome {
    pub probability: f64,
    /// Unnormalized output state on `F` (or `F ⊗ α_F` when kept).
    pub future: Option<CMatrix>,
}

fn check_locals(w: &ProcessVector, locals: &[LocalOperation]) -> Result<Vec<CMatrix>> {
    if locals.len() != w.n_parties {
        return Err(QcError::DimMismatch(format!("{} local operations for {} parties", locals.len(), w.n_parties)));
    }
    let mut seen = vec![false; w.n_parties];
    let mut out = Vec::new();
    for l in locals {
        if l.party >= w.n_parties || seen[l.party] {
            return Err(QcError::DimMismatch(format!("local operation for party {} is invalid or repeated", l.party + 1)));
        }
        seen[l.party] = true;
        out.push(l.labeled(w.dims[l.party])?);
    }
    Ok(out)
}

fn past_vector(w: &ProcessVector, past: &CVector) -> Result<CVector> {
    let dp = w.vec.space().dim_of(PAST)?;
    if past.len() != dp {
        return Err(QcError::DimMismatch(format!("past state has dimension {}, expected {dp}", past.len())));
    }
    CVector::new(SpaceSpec::single(PAST, dp), past.data().to_vec())
}

/// Output vector on `F ⊗ α_F`: `(|ψ⟩ ⊗ ⊗_k |A_k⟩⟩) * |w⟩`.
///
/// # Errors
/// `DimMismatch` for missing or misshaped locals.
pub fn future_vector(w: &ProcessVector, locals: &[LocalOperation], past: &CVector) -> Result<CVector> {
    let ks = check_locals(w, locals)?;
    let mut acc = w.vec.clone();
    for k in &ks {
        acc = link_vectors(&choi_vector(k)?, &acc)?;
    }
    acc = link_vectors(&past_vector(w, past)?, &acc)?;
    acc.reorder(&[FUTURE, "alphaF"])
}

/// Generalized Born rule with pure local branches and a pure past state.
/// `α_F` is traced unless `keep_future` asks for the joint output.
///
/// # Errors
/// `DimMismatch` for missing or misshaped locals or past state.
pub fn born(w: &ProcessVector, locals: &[LocalOperation], past: &CVector, keep_future: bool) -> Result<BornOutcome> {
    let phi = future_vector(w, locals, past)?;
    let probability = phi.norm_sqr();
    let future = if keep_future { Some(phi.outer(&phi)) } else { None };
    Ok(BornOutcome { probability, future })
}

/// Future state on `F` with `α_F` traced out.
///
/// # Errors
/// As [`born`].
pub fn born_future_traced(w: &ProcessVector, locals: &[LocalOperation], past: &CVector) -> Result<CMatrix> {
    let phi = future_vector(w, locals, past)?;
    partial_trace(&phi.outer(&phi), &["alphaF"])
}

/// The same Born rule evaluated through Choi matrices and matrix link
/// products, `Tr_F[(ρ ⊗ M_1 ⊗ … ⊗ M_N) * W]` with `W = Tr_{α_F} |w⟩⟨w|`.
///
/// # Errors
/// As [`born`].
pub fn born_via_matrices(w: &ProcessVector, locals: &[LocalOperation], past: &CVector) -> Result<f64> {
    let ks = check_locals(w, locals)?;
    let wm = partial_trace(&w.vec.outer(&w.vec), &["alphaF"])?;
    let mut acc = wm;
    for k in &ks {
        let c = choi_vector(k)?;
        acc = link_matrices(&c.outer(&c), &acc)?;
    }
    let p = past_vector(w, past)?;
    acc = link_matrices(&p.outer(&p), &acc)?;
    Ok(acc.trace().re)
}

fn basis_ket(d: usize, i: usize) -> Vec<C64> {
    let mut v = vec![ZERO; d];
    v[i] = ONE;
    v
}

fn plain(rows: usize, cols: usize, f: impl Fn(usize, usize) -> C64) -> CMatrix {
    CMatrix::from_fn(SpaceSpec::single("out", rows), SpaceSpec::single("in", cols), f)
}

/// Three-party circuit whose order depends on the parties' outputs, with
/// internal state `|0⟩`.
pub fn grenoble() -> QcQc {
    grenoble_with(&[ONE, ZERO])
}

/// Three-party dynamical-order circuit with a chosen internal qubit state.
/// The first party is picked uniformly; the bit it sends selects which of the
/// two others acts next; the last party's output and the remaining bit end
/// up in `α_F`, together with the identity of the last party.
///
/// # Panics
/// If `psi` is not a two-component vector.
pub fn grenoble_with(psi: &[C64]) -> QcQc {
    assert_eq!(psi.len(), 2, "internal state is a qubit");
    let d = PartyDims { d_in: 2, d_out: 2 };
    let mut q = QcQc::new(vec![d; 3], 1, 1, vec![1, 1, 2, 12]).expect("valid dims");
    let s = 1.0 / 3f64.sqrt();
    for k1 in 0..3 {
        let v = plain(2, 1, |i, _| psi[i] * s);
        q.insert_op(OpKey::new(0, None, Some(k1)), v).expect("shape");
        for shift in 1..3 {
            let k2 = (k1 + shift) % 3;
            let bit = shift - 1;
            let v = plain(2, 2, |i, j| if i == bit && j == bit { ONE } else { ZERO });
            q.insert_op(OpKey::new(0, Some(k1), Some(k2)), v).expect("shape");
            let k3 = 3 - k1 - k2;
            // rows: (target i, ancilla a) = 2i + a; columns: target j
            let v = plain(4, 2, |r, j| {
                let (i, a) = (r / 2, r % 2);
                let want_a = if shift == 1 { j } else { 1 - j };
                if i == j && a == want_a {
                    ONE
                } else {
                    ZERO
                }
            });
            q.insert_op(OpKey::new(1 << k1, Some(k2), Some(k3)), v).expect("shape");
            // α_F = α_F^(1) ⊗ α_F^(2), index (2i + a)·3 + k3
            let v = plain(12, 4, |r, c| if r == c * 3 + k3 { ONE } else { ZERO });
            q.insert_op(OpKey::new((1 << k1) | (1 << k2), Some(k3), None), v).expect("shape");
        }
    }
    q
}

/// Two-party switch: the past holds a control qubit and a target qubit; the
/// control decides whether the target visits party 1 then 2 or 2 then 1. The
/// control rides along in the ancilla and is released into the future as
/// `F = control ⊗ target`. A one-qubit `α_F` flags control values that
/// disagree with the realized order; it stays `|0⟩` on reachable inputs.
pub fn quantum_switch() -> QcQc {
    let d = PartyDims { d_in: 2, d_out: 2 };
    let mut q = QcQc::new(vec![d; 2], 4, 4, vec![2, 2, 2]).expect("valid dims");
    for k1 in 0..2 {
        // P = (c, t) -> AI_k1 (t) ⊗ α1 (c), only for c = k1
        let v = plain(4, 4, |r, col| {
            let (t, a) = (r / 2, r % 2);
            let (c, tt) = (col / 2, col % 2);
            if c == k1 && a == c && t == tt {
                ONE
            } else {
                ZERO
            }
        });
        q.insert_op(OpKey::new(0, None, Some(k1)), v).expect("shape");
        let k2 = 1 - k1;
        q.insert_op(OpKey::new(0, Some(k1), Some(k2)), plain(4, 4, |r, c| if r == c { ONE } else { ZERO }))
            .expect("shape");
        // (t, a) -> F = (a, t), α_F = a xor k1
        let v = plain(8, 4, |r, col| {
            let (f, flag) = (r / 2, r % 2);
            let (t, a) = (col / 2, col % 2);
            if f == a * 2 + t && flag == a ^ k1 {
                ONE
            } else {
                ZERO
            }
        });
        q.insert_op(OpKey::new(1 << k1, Some(k2), None), v).expect("shape");
    }
    q
}

/// Fixed-order circuit `P → 1 → 2 → … → N → F` with the given channels:
/// `channels[0]: P → AI1`, `channels[k]: AO_k → AI_{k+1}`,
/// `channels[N]: AO_N → F`. All ancillas are trivial.
///
/// # Errors
/// `DimMismatch` when consecutive channel shapes disagree.
pub fn fixed_order_chain(channels: &[CMatrix]) -> Result<QcQc> {
    if channels.len() < 2 {
        return Err(QcError::DimMismatch("need at least two channels".into()));
    }
    let n = channels.len() - 1;
    let dims: Vec<PartyDims> =
        (0..n).map(|k| PartyDims { d_in: channels[k].nrows(), d_out: channels[k + 1].ncols() }).collect();
    let mut q = QcQc::new(dims, channels[0].ncols(), channels[n].nrows(), vec![1; n + 1])?;
    let mut acted = 0u32;
    let mut from = None;
    for (k, ch) in channels.iter().enumerate() {
        let to = if k < n { Some(k) } else { None };
        q.insert_op(OpKey::new(acted, from, to), ch.clone())?;
        if let Some(f) = from {
            acted |= 1 << f;
        }
        from = to;
    }
    Ok(q)
}

/// Ket `|i⟩` of dimension `d` on the past space.
pub fn past_basis(d: usize, i: usize) -> CVector {
    CVector::new(SpaceSpec::single(PAST, d), basis_ket(d, i)).expect("shape")
}

#[derive(Serialize, Deserialize)]
struct OpDto {
    acted: Vec<usize>,
    from: Option<usize>,
    to: Option<usize>,
    matrix: CMatrix,
}

#[derive(Serialize, Deserialize)]
struct QcQcDto {
    n_parties: usize,
    dims: Vec<PartyDims>,
    past_dim: usize,
    future_dim: usize,
    ancilla_dims: Vec<usize>,
    ops: Vec<OpDto>,
}

impl Serialize for QcQc {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        QcQcDto {
            n_parties: self.n_parties,
            dims: self.dims.clone(),
            past_dim: self.past_dim,
            future_dim: self.future_dim,
            ancilla_dims: self.ancilla_dims.clone(),
            ops: self
                .ops
                .iter()
                .map(|(k, m)| OpDto {
                    acted: (0..self.n_parties).filter(|i| k.acted & (1 << i) != 0).collect(),
                    from: k.from,
                    to: k.to,
                    matrix: m.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QcQc {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = QcQcDto::deserialize(d)?;
        let build = || -> Result<QcQc> {
            if dto.dims.len() != dto.n_parties {
                return Err(QcError::DimMismatch("n_parties disagrees with dims".into()));
            }
            let mut q = QcQc::new(dto.dims.clone(), dto.past_dim, dto.future_dim, dto.ancilla_dims.clone())?;
            for op in &dto.ops {
                if op.acted.iter().any(|&i| i >= 32) {
                    return Err(QcError::IncompleteQcQc("party index out of range".into()));
                }
                let mask = op.acted.iter().fold(0u32, |m, &i| m | (1 << i));
                q.insert_op(OpKey::new(mask, op.from, op.to), op.matrix.clone())?;
            }
            Ok(q)
        };
        build().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_isometry, re};

    fn pauli(name: char) -> CMatrix {
        let m: [[C64; 2]; 2] = match name {
            'X' => [[ZERO, ONE], [ONE, ZERO]],
            'Z' => [[ONE, ZERO], [ZERO, re(-1.0)]],
            _ => [[ONE, ZERO], [ZERO, ONE]],
        };
        plain(2, 2, |i, j| m[i][j])
    }

    #[test]
    fn grenoble_slots_are_isometries() {
        let q = grenoble();
        let r = q.validate(1e-10);
        assert!(r.ok, "{r:?}");
        assert!(r.kraus_cross_max <= 1e-12);
        for n in 1..=4 {
            let v = q.assemble_slot_isometry(n).unwrap();
            assert!(is_isometry(&v, 1e-10).ok, "slot {n}");
        }
    }

    #[test]
    fn scaled_operator_fails_with_deviation_three() {
        let mut q = grenoble();
        let key = OpKey::new(0, Some(0), Some(1));
        let m = q.op(&key).unwrap().scale(re(2.0));
        q.insert_op(key, m).unwrap();
        let r = q.validate(1e-10);
        assert!(!r.ok);
        assert!((r.slots[1].max_deviation - 3.0).abs() < 1e-12);
        assert!(r.slots.iter().enumerate().all(|(i, s)| i == 1 || s.ok));
    }

    #[test]
    fn switch_validates() {
        let r = quantum_switch().validate(1e-10);
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn single_party_process_vector_matches_hand_link() {
        // V1 = |0⟩ into AI1, V2 = identity AO1 -> F
        let prep = plain(2, 1, |i, _| if i == 0 { ONE } else { ZERO });
        let q = fixed_order_chain(&[prep, pauli('I')]).unwrap();
        let w = process_vector(&q).unwrap();
        // |w⟩ = |0⟩^{AI} ⊗ (|00⟩ + |11⟩)^{AO F}; canonical order P, AI1, AO1, F, alphaF
        let mut want = [ZERO; 8];
        want[0] = ONE; // AI=0, AO=0, F=0
        want[3] = ONE; // AI=0, AO=1, F=1
        assert_eq!(w.vec.data(), &want[..]);
    }

    #[test]
    fn switch_oracle_branches() {
        let w = process_vector(&quantum_switch()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // control |+⟩, target |0⟩ -> P index c*2 + t
        let past = CVector::new(SpaceSpec::single(PAST, 4), vec![re(s), ZERO, re(s), ZERO]).unwrap();
        let locals = [LocalOperation::new(0, pauli('X')), LocalOperation::new(1, pauli('Z'))];
        let rho = born_future_traced(&w, &locals, &past).unwrap();
        // direct product oracle: c=0 gives Z·X|0⟩, c=1 gives X·Z|0⟩
        let zx0 = pauli('Z').matmul(&pauli('X')).unwrap().column(0);
        let xz0 = pauli('X').matmul(&pauli('Z')).unwrap().column(0);
        let mut want = vec![ZERO; 4];
        for t in 0..2 {
            want[t] = zx0.data()[t] * s;
            want[2 + t] = xz0.data()[t] * s;
        }
        let psi = CVector::new(SpaceSpec::single(FUTURE, 4), want).unwrap();
        let fid = psi.outer(&psi).matmul(&rho).unwrap().trace().re;
        assert!((fid - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grenoble_identity_locals_are_deterministic() {
        let q = grenoble();
        let w = process_vector(&q).unwrap();
        let locals: Vec<_> = (0..3).map(|k| LocalOperation::new(k, pauli('I'))).collect();
        let past = past_basis(1, 0);
        let out = born(&w, &locals, &past, true).unwrap();
        assert!((out.probability - 1.0).abs() < 1e-12);
        let rho = out.future.unwrap();
        // weight of each last-party value k3 in α_F^(2)
        for k3 in 0..3 {
            let p: f64 = (0..4).map(|a| rho.get(a * 3 + k3, a * 3 + k3).re).sum();
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let pm = born_via_matrices(&w, &locals, &past).unwrap();
        assert!((pm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reordering_orders_is_exact() {
        let q = grenoble();
        let mut orders: Vec<Vec<usize>> = (0..3).permutations(3).collect();
        let a = process_vector_with_orders(&q, orders.clone()).unwrap();
        orders.reverse();
        let b = process_vector_with_orders(&q, orders).unwrap();
        // each coefficient receives a contribution from a single order
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let q = grenoble();
        let text = serde_json::to_string(&q).unwrap();
        let back: QcQc = serde_json::from_str(&text).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn missing_reachable_operator_is_incomplete() {
        let mut q = quantum_switch();
        q.ops.remove(&OpKey::new(0, Some(0), Some(1)));
        assert!(matches!(q.assemble_slot_isometry(2), Err(QcError::IncompleteQcQc(_))));
    }
}
