// SPDX-License-Identifier: Apache-2.0
//! Truncated bosonic Fock spaces of timestamped messages.
//!
//! A basis key is an occupation map over modes `(wire, time, index)` and
//! stands for the *unnormalized* symmetric product of the occupied one-message
//! basis vectors, so `⟨m|m⟩ = ∏ count!`. Dense vectors produced by
//! [`FockState::as_dense`] use unit-normalized basis vectors instead.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::linalg::{CMatrix, CVector, SpaceSpec, C64, ONE, ZERO};

/// Strictly increasing, nonempty list of clock ticks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct TimestampSet(Vec<i64>);

impl TimestampSet {
    /// # Errors
    /// `DimMismatch` if the list is empty or not strictly increasing.
    pub fn new(times: Vec<i64>) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QcError::DimMismatch(format!("timestamps {times:?} are not strictly increasing")));
        }
        Ok(Self(times))
    }

    pub fn single(t: i64) -> Self {
        Self(vec![t])
    }

    pub fn times(&self) -> &[i64] {
        &self.0
    }

    pub fn contains(&self, t: i64) -> bool {
        self.0.binary_search(&t).is_ok()
    }

    pub fn is_subset_of(&self, other: &TimestampSet) -> bool {
        self.0.iter().all(|t| other.contains(*t))
    }
}

impl TryFrom<Vec<i64>> for TimestampSet {
    type Error = QcError;
    fn try_from(v: Vec<i64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimestampSet> for Vec<i64> {
    fn from(t: TimestampSet) -> Self {
        t.0
    }
}

/// A wire: message space dimension and the times it may carry messages.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WireSpec {
    pub label: String,
    pub message_dim: usize,
    pub times: TimestampSet,
}

impl WireSpec {
    /// # Errors
    /// `DimMismatch` for a zero message dimension or bad timestamps.
    pub fn new(label: &str, message_dim: usize, times: Vec<i64>) -> Result<Self> {
        if message_dim == 0 {
            return Err(QcError::DimMismatch(format!("wire `{label}` has message dimension 0")));
        }
        Ok(Self { label: label.to_string(), message_dim, times: TimestampSet::new(times)? })
    }

    fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        self.times.times().iter().flat_map(move |&t| {
            (0..self.message_dim).map(move |i| Mode { wire: self.label.clone(), time: t, idx: i })
        })
    }
}

/// One bosonic mode: a basis vector of a wire's message space at a time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mode {
    pub wire: String,
    pub time: i64,
    pub idx: usize,
}

impl Mode {
    pub fn new(wire: &str, time: i64, idx: usize) -> Self {
        Self { wire: wire.to_string(), time, idx }
    }
}

/// Occupation numbers; modes with count zero are absent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct OccupationState {
    counts: BTreeMap<Mode, usize>,
}

impl OccupationState {
    pub fn vacuum() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (Mode, usize)>) -> Self {
        Self { counts: counts.into_iter().filter(|(_, c)| *c > 0).collect() }
    }

    pub fn counts(&self) -> &BTreeMap<Mode, usize> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// `⟨m|m⟩ = ∏ count!` in the unnormalized convention.
    pub fn weight(&self) -> f64 {
        self.counts.values().map(|&c| factorial(c)).product()
    }

    fn add(&mut self, mode: Mode) {
        *self.counts.entry(mode).or_insert(0) += 1;
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Element of a truncated Fock space over declared wires.
#[derive(Clone, Debug, PartialEq)]
pub struct FockState {
    wires: Vec<WireSpec>,
    truncation: usize,
    amps: BTreeMap<OccupationState, C64>,
}

fn sorted_wires(mut wires: Vec<WireSpec>) -> Result<Vec<WireSpec>> {
    wires.sort_by(|a, b| a.label.cmp(&b.label));
    for w in wires.windows(2) {
        if w[0].label == w[1].label {
            return Err(QcError::LabelCollision(w[0].label.clone()));
        }
    }
    Ok(wires)
}

impl FockState {
    /// State from explicit amplitudes; zero amplitudes are dropped.
    ///
    /// # Errors
    /// `TruncationOverflow`, `LabelNotFound` for undeclared modes,
    /// `LabelCollision` for repeated wire labels.
    pub fn from_terms(
        wires: Vec<WireSpec>,
        truncation: usize,
        terms: impl IntoIterator<Item = (OccupationState, C64)>,
    ) -> Result<Self> {
        let wires = sorted_wires(wires)?;
        let mut amps = BTreeMap::new();
        for (k, a) in terms {
            check_key(&wires, truncation, &k)?;
            *amps.entry(k).or_insert(ZERO) += a;
        }
        amps.retain(|_, a| *a != ZERO);
        Ok(Self { wires, truncation, amps })
    }

    pub fn wires(&self) -> &[WireSpec] {
        &self.wires
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn terms(&self) -> &BTreeMap<OccupationState, C64> {
        &self.amps
    }

    pub fn amplitude(&self, key: &OccupationState) -> C64 {
        self.amps.get(key).copied().unwrap_or(ZERO)
    }

    /// Linear combination `a·self + b·other`.
    ///
    /// # Errors
    /// `DimMismatch` when the declarations differ.
    pub fn combine(&self, a: C64, other: &FockState, b: C64) -> Result<FockState> {
        same_declarations(self, other)?;
        let mut amps = BTreeMap::new();
        for (k, v) in &self.amps {
            *amps.entry(k.clone()).or_insert(ZERO) += a * v;
        }
        for (k, v) in &other.amps {
            *amps.entry(k.clone()).or_insert(ZERO) += b * v;
        }
        amps.retain(|_, v| *v != ZERO);
        Ok(FockState { wires: self.wires.clone(), truncation: self.truncation, amps })
    }

    pub fn scale(&self, c: C64) -> FockState {
        let mut s = self.clone();
        for v in s.amps.values_mut() {
            *v *= c;
        }
        s.amps.retain(|_, v| *v != ZERO);
        s
    }

    /// Coefficients in the unit-normalized occupation basis of `basis`, so
    /// the dense inner product equals [`fock_inner`].
    ///
    /// # Errors
    /// `LabelNotFound` when a key is outside the basis.
    pub fn as_dense(&self, basis: &FockBasis) -> Result<CVector> {
        let mut v = vec![ZERO; basis.len()];
        for (k, a) in &self.amps {
            let i = basis
                .index_of_occupation(k)
                .ok_or_else(|| QcError::LabelNotFound(format!("occupation {k:?} not in basis")))?;
            v[i] = a * k.weight().sqrt();
        }
        CVector::new(basis.space("fock"), v)
    }

    /// Inverse of [`FockState::as_dense`].
    ///
    /// # Errors
    /// `DimMismatch` when the vector length differs from the basis size.
    pub fn from_dense(wires: Vec<WireSpec>, basis: &FockBasis, v: &CVector) -> Result<FockState> {
        if v.len() != basis.len() {
            return Err(QcError::DimMismatch("dense vector does not match the basis".into()));
        }
        let terms = v.data().iter().enumerate().filter(|(_, a)| **a != ZERO).map(|(i, a)| {
            let k = basis.occupation(i);
            let w = k.weight().sqrt();
            (k, a / w)
        });
        FockState::from_terms(wires, basis.truncation(), terms)
    }
}

fn check_key(wires: &[WireSpec], truncation: usize, k: &OccupationState) -> Result<()> {
    if k.total() > truncation {
        return Err(QcError::TruncationOverflow { messages: k.total(), truncation });
    }
    for m in k.counts.keys() {
        let ok = wires
            .iter()
            .any(|w| w.label == m.wire && w.times.contains(m.time) && m.idx < w.message_dim);
        if !ok {
            return Err(QcError::LabelNotFound(format!("mode {}@{}[{}] is not declared", m.wire, m.time, m.idx)));
        }
    }
    Ok(())
}

fn same_declarations(a: &FockState, b: &FockState) -> Result<()> {
    if a.wires != b.wires || a.truncation != b.truncation {
        return Err(QcError::DimMismatch("Fock states over different wire declarations".into()));
    }
    Ok(())
}

/// The all-vacuum state.
///
/// # Errors
/// `LabelCollision` for repeated wire labels.
pub fn vacuum(wires: Vec<WireSpec>, truncation: usize) -> Result<FockState> {
    FockState::from_terms(wires, truncation, [(OccupationState::vacuum(), ONE)])
}

/// One message to be symmetrized: wire, timestamp, amplitudes on the wire's
/// message basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub wire: String,
    pub time: i64,
    pub amplitudes: Vec<C64>,
}

impl Message {
    pub fn new(wire: &str, time: i64, amplitudes: Vec<C64>) -> Self {
        Self { wire: wire.to_string(), time, amplitudes }
    }

    /// Basis message `|idx⟩` of a `dim`-dimensional wire.
    pub fn basis(wire: &str, time: i64, dim: usize, idx: usize) -> Self {
        let mut a = vec![ZERO; dim];
        a[idx] = ONE;
        Self::new(wire, time, a)
    }
}

fn cmp_messages(a: &Message, b: &Message) -> std::cmp::Ordering {
    (a.wire.as_str(), a.time).cmp(&(b.wire.as_str(), b.time)).then_with(|| {
        for (x, y) in a.amplitudes.iter().zip(&b.amplitudes) {
            let o = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
            if o.is_ne() {
                return o;
            }
        }
        a.amplitudes.len().cmp(&b.amplitudes.len())
    })
}

/// Symmetric product `⊙_k |ψ_k, t_k⟩` in the `1/√n!` convention. Messages on
/// distinct slots multiply as independent tensor factors.
///
/// # Errors
/// `TruncationOverflow` when there are more messages than the truncation,
/// `LabelNotFound` / `DimMismatch` for undeclared wires or wrong lengths.
pub fn symmetric_product(wires: Vec<WireSpec>, truncation: usize, messages: &[Message]) -> Result<FockState> {
    if messages.len() > truncation {
        return Err(QcError::TruncationOverflow { messages: messages.len(), truncation });
    }
    for m in messages {
        let w = wires
            .iter()
            .find(|w| w.label == m.wire)
            .ok_or_else(|| QcError::LabelNotFound(m.wire.clone()))?;
        if !w.times.contains(m.time) {
            return Err(QcError::LabelNotFound(format!("time {} on wire `{}`", m.time, m.wire)));
        }
        if m.amplitudes.len() != w.message_dim {
            return Err(QcError::DimMismatch(format!("message on `{}` has wrong length", m.wire)));
        }
    }
    // a canonical order makes the result bit-identical under permutations
    let mut sorted: Vec<&Message> = messages.iter().collect();
    sorted.sort_by(|a, b| cmp_messages(a, b));
    let mut acc: BTreeMap<OccupationState, C64> = BTreeMap::new();
    acc.insert(OccupationState::vacuum(), ONE);
    for m in sorted {
        let mut next = BTreeMap::new();
        for (k, a) in &acc {
            for (i, c) in m.amplitudes.iter().enumerate() {
                if *c == ZERO {
                    continue;
                }
                let mut k2 = k.clone();
                k2.add(Mode::new(&m.wire, m.time, i));
                *next.entry(k2).or_insert(ZERO) += a * c;
            }
        }
        acc = next;
    }
    FockState::from_terms(wires, truncation, acc)
}

/// Inner product: `Σ conj(a_m) b_m ∏ count!` over shared keys.
///
/// # Errors
/// `DimMismatch` when the declarations differ.
pub fn fock_inner(a: &FockState, b: &FockState) -> Result<C64> {
    same_declarations(a, b)?;
    Ok(a.amps
        .iter()
        .filter_map(|(k, x)| b.amps.get(k).map(|y| x.conj() * y * k.weight()))
        .sum())
}

/// Extend every wire's timestamps to `into`; amplitudes are untouched because
/// the new slots hold vacuum.
///
/// # Errors
/// `EmbeddingMismatch` if some wire has a time outside `into`.
pub fn embed_vacuum(s: &FockState, into: &TimestampSet) -> Result<FockState> {
    let mut wires = s.wires.clone();
    for w in &mut wires {
        if !w.times.is_subset_of(into) {
            return Err(QcError::EmbeddingMismatch(format!(
                "wire `{}` times {:?} not contained in {:?}",
                w.label,
                w.times.times(),
                into.times()
            )));
        }
        w.times = into.clone();
    }
    Ok(FockState { wires, truncation: s.truncation, amps: s.amps.clone() })
}

/// Direct-sum merge of two wires sharing a timestamp set.
#[derive(Clone, Debug, PartialEq)]
pub struct WireMerge {
    pub first: WireSpec,
    pub second: WireSpec,
    pub merged: WireSpec,
}

/// Merge `a` and `b` into one wire labeled `label` whose message space is
/// `H_a ⊕ H_b`; `b`'s basis indices are shifted by `dim a`.
///
/// # Errors
/// `WireMergeMismatch` when the timestamp sets differ.
pub fn merge_wires(a: &WireSpec, b: &WireSpec, label: &str) -> Result<WireMerge> {
    if a.times != b.times {
        return Err(QcError::WireMergeMismatch(a.label.clone(), b.label.clone()));
    }
    Ok(WireMerge {
        first: a.clone(),
        second: b.clone(),
        merged: WireSpec { label: label.to_string(), message_dim: a.message_dim + b.message_dim, times: a.times.clone() },
    })
}

impl WireMerge {
    fn map_state(
        &self,
        s: &FockState,
        remove: &[&str],
        add: Vec<WireSpec>,
        f: impl Fn(&Mode) -> Mode,
    ) -> Result<FockState> {
        for r in remove {
            if !s.wires.iter().any(|w| w.label == *r) {
                return Err(QcError::LabelNotFound((*r).to_string()));
            }
        }
        let mut wires: Vec<WireSpec> = s.wires.iter().filter(|w| !remove.contains(&w.label.as_str())).cloned().collect();
        wires.extend(add);
        let terms = s.amps.iter().map(|(k, a)| {
            (OccupationState::from_counts(k.counts.iter().map(|(m, c)| (f(m), *c))), *a)
        });
        FockState::from_terms(wires, s.truncation, terms)
    }

    /// Re-index a state on the two wires onto the merged wire.
    ///
    /// # Errors
    /// `LabelNotFound` if either source wire is missing.
    pub fn merge(&self, s: &FockState) -> Result<FockState> {
        let d = self.first.message_dim;
        self.map_state(s, &[&self.first.label, &self.second.label], vec![self.merged.clone()], |m| {
            if m.wire == self.first.label {
                Mode::new(&self.merged.label, m.time, m.idx)
            } else if m.wire == self.second.label {
                Mode::new(&self.merged.label, m.time, d + m.idx)
            } else {
                m.clone()
            }
        })
    }

    /// Inverse of [`WireMerge::merge`].
    ///
    /// # Errors
    /// `LabelNotFound` if the merged wire is missing.
    pub fn split(&self, s: &FockState) -> Result<FockState> {
        let d = self.first.message_dim;
        self.map_state(s, &[&self.merged.label], vec![self.first.clone(), self.second.clone()], |m| {
            if m.wire != self.merged.label {
                m.clone()
            } else if m.idx < d {
                Mode::new(&self.first.label, m.time, m.idx)
            } else {
                Mode::new(&self.second.label, m.time, m.idx - d)
            }
        })
    }
}

/// Enumeration of all occupation states of a mode list with at most
/// `truncation` messages: by message count, then lexicographically in the
/// sorted mode list. The vacuum has index 0.
#[derive(Clone, Debug)]
pub struct FockBasis {
    modes: Vec<Mode>,
    truncation: usize,
    configs: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl FockBasis {
    /// Basis over the given modes (sorted and deduplicated internally).
    pub fn from_modes(mut modes: Vec<Mode>, truncation: usize) -> Self {
        modes.sort();
        modes.dedup();
        let n = modes.len() as u32;
        let mut configs: Vec<Vec<u32>> = vec![Vec::new()];
        let mut layer: Vec<Vec<u32>> = vec![Vec::new()];
        for _ in 0..truncation {
            let mut next = Vec::new();
            for c in &layer {
                let start = c.last().copied().unwrap_or(0);
                for m in start..n {
                    let mut c2 = c.clone();
                    c2.push(m);
                    next.push(c2);
                }
            }
            configs.extend(next.iter().cloned());
            layer = next;
        }
        let index = configs.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { modes, truncation, configs, index }
    }

    /// Basis over every mode of the given wires.
    pub fn from_wires(wires: &[WireSpec], truncation: usize) -> Self {
        Self::from_modes(wires.iter().flat_map(WireSpec::modes).collect(), truncation)
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// One-factor labeled space of the basis dimension.
    pub fn space(&self, label: &str) -> SpaceSpec {
        SpaceSpec::single(label, self.len())
    }

    /// Occupied mode indices (with repetition, nondecreasing) of config `i`.
    pub fn config(&self, i: usize) -> &[u32] {
        &self.configs[i]
    }

    pub fn index_of(&self, config: &[u32]) -> Option<usize> {
        self.index.get(config).copied()
    }

    pub fn mode_index(&self, m: &Mode) -> Option<usize> {
        self.modes.binary_search(m).ok()
    }

    pub fn occupation(&self, i: usize) -> OccupationState {
        let mut o = OccupationState::vacuum();
        for &m in &self.configs[i] {
            o.add(self.modes[m as usize].clone());
        }
        o
    }

    pub fn index_of_occupation(&self, o: &OccupationState) -> Option<usize> {
        let mut c = Vec::with_capacity(o.total());
        for (m, n) in &o.counts {
            let i = self.mode_index(m)? as u32;
            c.extend(std::iter::repeat_n(i, *n));
        }
        self.index_of(&c)
    }

    /// `√∏count!` of config `i`.
    pub fn norm_factor(&self, i: usize) -> f64 {
        config_weight(&self.configs[i]).sqrt()
    }
}

/// `∏ count!` of a sorted multiset.
pub fn config_weight(c: &[u32]) -> f64 {
    let mut w = 1.0;
    let mut run = 0usize;
    for (k, m) in c.iter().enumerate() {
        if k > 0 && c[k - 1] == *m {
            run += 1;
        } else {
            run = 1;
        }
        w *= run as f64;
    }
    w
}

/// Second quantization of a one-message map: `Γ(V)` sends
/// `⊙ e_{i_k}` to `⊙ V e_{i_k}`. `v` has rows indexed by `out`'s modes and
/// columns by `inp`'s modes. Returned as a dense matrix between the
/// unit-normalized bases; configs whose image exceeds the output truncation
/// raise `TruncationOverflow` only if they carry amplitude.
///
/// # Errors
/// `DimMismatch` when `v` does not fit the mode counts.
pub fn fock_functor(v: &CMatrix, inp: &FockBasis, out: &FockBasis) -> Result<CMatrix> {
    if v.nrows() != out.modes.len() || v.ncols() != inp.modes.len() {
        return Err(QcError::DimMismatch(format!(
            "one-message map is {}x{}, modes are {}x{}",
            v.nrows(),
            v.ncols(),
            out.modes.len(),
            inp.modes.len()
        )));
    }
    let mut m = CMatrix::zeros(out.space("out"), inp.space("in"));
    for j in 0..inp.len() {
        for (c, amp) in functor_column(v, inp.config(j)) {
            let i = out.index_of(&c).ok_or(QcError::TruncationOverflow {
                messages: c.len(),
                truncation: out.truncation,
            })?;
            m.set(i, j, amp * config_weight(&c).sqrt() / inp.norm_factor(j));
        }
    }
    Ok(m)
}

/// Image of the unnormalized key `⊙ e_{i_k}` under `Γ(v)` as unnormalized
/// output keys.
pub fn functor_column(v: &CMatrix, config: &[u32]) -> HashMap<Vec<u32>, C64> {
    let mut acc: HashMap<Vec<u32>, C64> = HashMap::new();
    acc.insert(Vec::new(), ONE);
    for &i in config {
        let mut next: HashMap<Vec<u32>, C64> = HashMap::new();
        for (k, a) in &acc {
            for r in 0..v.nrows() {
                let x = v.get(r, i as usize);
                if x == ZERO {
                    continue;
                }
                let mut k2 = k.clone();
                let pos = k2.partition_point(|&y| y <= r as u32);
                k2.insert(pos, r as u32);
                *next.entry(k2).or_insert(ZERO) += a * x;
            }
        }
        acc = next;
    }
    acc.retain(|_, a| *a != ZERO);
    acc
}

#[derive(Serialize, Deserialize)]
struct TermDto {
    counts: Vec<(String, i64, usize, usize)>,
    amp: C64,
}

#[derive(Serialize, Deserialize)]
struct FockStateDto {
    truncation: usize,
    wires: Vec<WireSpec>,
    terms: Vec<TermDto>,
}

impl Serialize for FockState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FockStateDto {
            truncation: self.truncation,
            wires: self.wires.clone(),
            terms: self
                .amps
                .iter()
                .map(|(k, a)| TermDto {
                    counts: k.counts.iter().map(|(m, c)| (m.wire.clone(), m.time, m.idx, *c)).collect(),
                    amp: *a,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FockState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = FockStateDto::deserialize(d)?;
        let terms = dto.terms.into_iter().map(|t| {
            (
                OccupationState::from_counts(t.counts.into_iter().map(|(w, time, idx, c)| (Mode { wire: w, time, idx }, c))),
                t.amp,
            )
        });
        FockState::from_terms(dto.wires, dto.truncation, terms).map_err(serde::de::Error::custom)
    }
}
