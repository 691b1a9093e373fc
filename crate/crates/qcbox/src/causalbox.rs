// SPDX-License-Identifier: Apache-2.0
//! Causal boxes on truncated, timestamped Fock spaces.
//!
//! A box talks to the outside world through *ports*: a port groups the wires
//! that are read (or written) at one timestamp, and its state space is the
//! Fock space over those wires' modes with at most `truncation` messages.
//! Boxes come in two representations. A dense Choi matrix over port factors
//! suits small boxes and loop composition; a sequence of sparse slice
//! isometries with internal memory scales to the extension constructions.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QcError, Result};
use crate::fock::{config_weight, functor_column, FockBasis, Mode};
use crate::linalg::{
    choi_vector, link_chain_vectors, partial_trace, tensor, CMatrix, SpaceSpec, C64, ONE, ZERO,
};
use crate::sampling;

/// A wire as seen by one port. Messages are `target ⊗ extra`, index
/// `t * extra_dim + e`; parties act on the target factor only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortWire {
    pub label: String,
    pub target_dim: usize,
    #[serde(default = "one")]
    pub extra_dim: usize,
}

fn one() -> usize {
    1
}

impl PortWire {
    pub fn new(label: &str, target_dim: usize, extra_dim: usize) -> Self {
        Self { label: label.to_string(), target_dim, extra_dim }
    }

    pub fn plain(label: &str, dim: usize) -> Self {
        Self::new(label, dim, 1)
    }

    pub fn dim(&self) -> usize {
        self.target_dim * self.extra_dim
    }
}

/// Wires read or written at one timestamp, with a message cap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub time: i64,
    pub wires: Vec<PortWire>,
    pub truncation: usize,
}

impl Port {
    /// # Errors
    /// `DimMismatch` for duplicate wires or zero dimensions.
    pub fn new(time: i64, wires: Vec<PortWire>, truncation: usize) -> Result<Self> {
        let names: BTreeSet<&str> = wires.iter().map(|w| w.label.as_str()).collect();
        if names.len() != wires.len() {
            return Err(QcError::DimMismatch(format!("duplicate wire at time {time}")));
        }
        if wires.iter().any(|w| w.dim() == 0) {
            return Err(QcError::DimMismatch(format!("zero-dimensional wire at time {time}")));
        }
        Ok(Self { time, wires, truncation })
    }

    pub fn single(wire: &str, dim: usize, time: i64, truncation: usize) -> Self {
        Self { time, wires: vec![PortWire::plain(wire, dim)], truncation }
    }

    /// Factor label used in Choi matrices, e.g. `in:AO1+AO2@3`.
    pub fn label(&self, dir: &str) -> String {
        let w: Vec<&str> = self.wires.iter().map(|w| w.label.as_str()).collect();
        format!("{dir}:{}@{}", w.join("+"), self.time)
    }

    pub fn wire(&self, label: &str) -> Option<&PortWire> {
        self.wires.iter().find(|w| w.label == label)
    }

    pub fn mode(&self, wire: &str, idx: usize) -> Mode {
        Mode::new(wire, self.time, idx)
    }

    pub fn basis(&self) -> FockBasis {
        let modes = self.wires.iter().flat_map(|w| (0..w.dim()).map(|i| self.mode(&w.label, i))).collect();
        FockBasis::from_modes(modes, self.truncation)
    }
}

/// Column-major sparse matrix.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SparseOp {
    nrows: usize,
    cols: Vec<Vec<(usize, C64)>>,
}

impl SparseOp {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, cols: vec![Vec::new(); ncols] }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Add `v` at `(row, col)`.
    pub fn add(&mut self, row: usize, col: usize, v: C64) {
        assert!(row < self.nrows, "row {row} out of range");
        if v == ZERO {
            return;
        }
        let c = &mut self.cols[col];
        match c.iter_mut().find(|(r, _)| *r == row) {
            Some((_, x)) => *x += v,
            None => c.push((row, v)),
        }
    }

    pub fn column(&self, j: usize) -> &[(usize, C64)] {
        &self.cols[j]
    }

    pub fn nnz(&self) -> usize {
        self.cols.iter().map(Vec::len).sum()
    }

    pub fn from_dense(m: &CMatrix) -> Self {
        let mut s = Self::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                s.add(i, j, m.get(i, j));
            }
        }
        s
    }

    pub fn to_dense(&self, rows: SpaceSpec, cols: SpaceSpec) -> Result<CMatrix> {
        if rows.dim() != self.nrows || cols.dim() != self.ncols() {
            return Err(QcError::DimMismatch("sparse operator does not fit the spaces".into()));
        }
        let mut m = CMatrix::zeros(rows, cols);
        for (j, c) in self.cols.iter().enumerate() {
            for &(i, v) in c {
                m.add_at(i, j, v);
            }
        }
        Ok(m)
    }

    /// `max |V†V − 1|` over the given columns (all columns when `None`).
    pub fn isometry_deviation(&self, domain: Option<&[usize]>) -> f64 {
        let all: Vec<usize>;
        let cols = match domain {
            Some(d) => d,
            None => {
                all = (0..self.ncols()).collect();
                &all
            }
        };
        let mut by_row: HashMap<usize, Vec<(usize, C64)>> = HashMap::new();
        for (pos, &j) in cols.iter().enumerate() {
            for &(i, v) in &self.cols[j] {
                by_row.entry(i).or_default().push((pos, v));
            }
        }
        let mut gram: HashMap<(usize, usize), C64> = HashMap::new();
        for entries in by_row.values() {
            for &(a, va) in entries {
                for &(b, vb) in entries {
                    if a <= b {
                        *gram.entry((a, b)).or_insert(ZERO) += va.conj() * vb;
                    }
                }
            }
        }
        let mut dev: f64 = 0.0;
        for a in 0..cols.len() {
            let g = gram.get(&(a, a)).copied().unwrap_or(ZERO);
            dev = dev.max((g - ONE).norm());
        }
        for (&(a, b), g) in &gram {
            if a != b {
                dev = dev.max(g.norm());
            }
        }
        dev
    }
}

impl Serialize for SparseOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<(usize, usize, C64)> =
            self.cols.iter().enumerate().flat_map(|(j, c)| c.iter().map(move |&(i, v)| (i, j, v))).collect();
        SparseDto { nrows: self.nrows, ncols: self.ncols(), entries }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparseOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dto = SparseDto::deserialize(d)?;
        let mut s = SparseOp::zeros(dto.nrows, dto.ncols);
        for (i, j, v) in dto.entries {
            if i >= dto.nrows || j >= dto.ncols {
                return Err(serde::de::Error::custom(format!("entry ({i}, {j}) outside {}x{}", dto.nrows, dto.ncols)));
            }
            s.add(i, j, v);
        }
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
struct SparseDto {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, C64)>,
}

/// One step of a sequence representation: reads its input port and the
/// memory, writes its output port and the new memory. Rows of `op` are
/// `out_config * mem_out + m`, columns `in_config * mem_in + m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub input: Port,
    pub output: Port,
    pub mem_in: usize,
    pub mem_out: usize,
    pub op: SparseOp,
}

impl Slice {
    /// # Errors
    /// `DimMismatch` when `op` does not fit the ports and memories.
    pub fn new(input: Port, output: Port, mem_in: usize, mem_out: usize, op: SparseOp) -> Result<Self> {
        let s = Self { input, output, mem_in, mem_out, op };
        s.check_shape()?;
        Ok(s)
    }

    fn check_shape(&self) -> Result<()> {
        let (ni, no) = (self.input.basis().len(), self.output.basis().len());
        if self.op.ncols() != ni * self.mem_in || self.op.nrows() != no * self.mem_out {
            return Err(QcError::DimMismatch(format!(
                "slice at time {} is {}x{}, ports need {}x{}",
                self.input.time,
                self.op.nrows(),
                self.op.ncols(),
                no * self.mem_out,
                ni * self.mem_in
            )));
        }
        Ok(())
    }
}

/// How the final output of an extension box maps to a circuit's `F ⊗ α_F`:
/// one message on `future_wire` with target `f` and extra `e`, plus final
/// memory `m < alpha_mem`, is identified with `|f⟩ ⊗ |e * alpha_mem + m⟩`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readout {
    pub future_wire: String,
    pub alpha_mem: usize,
}

/// Time-ordered sequence of slice isometries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRep {
    pub slices: Vec<Slice>,
    #[serde(default)]
    pub readout: Option<Readout>,
}

/// Largest number of input configurations enumerated by dense or
/// Stinespring-level routines.
pub const MAX_CONFIGS: usize = 4_000_000;

impl SequenceRep {
    /// Check timing and memory chaining, and that every slice is an isometry
    /// within `tol`.
    ///
    /// # Errors
    /// `InvalidSlice` naming the first offending slice.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.slices.is_empty() {
            return Err(QcError::InvalidSlice { index: 0, reason: "no slices".into() });
        }
        for (i, s) in self.slices.iter().enumerate() {
            let bad = |reason: String| Err(QcError::InvalidSlice { index: i, reason });
            s.check_shape().or_else(|e| bad(e.to_string()))?;
            if s.output.time <= s.input.time {
                return bad(format!("output time {} does not exceed input time {}", s.output.time, s.input.time));
            }
            if i == 0 && s.mem_in != 1 {
                return bad("first slice must start with trivial memory".into());
            }
            if i > 0 {
                let p = &self.slices[i - 1];
                if s.input.time <= p.input.time || s.output.time <= p.output.time {
                    return bad("timestamps must increase along the sequence".into());
                }
                if s.mem_in != p.mem_out {
                    return bad(format!("memory {} does not match previous output {}", s.mem_in, p.mem_out));
                }
            }
            let dev = s.op.isometry_deviation(None);
            if dev > tol {
                return bad(format!("not an isometry, deviation {dev:e}"));
            }
        }
        Ok(())
    }

    pub fn final_memory(&self) -> usize {
        self.slices.last().map_or(1, |s| s.mem_out)
    }

    pub fn last_time(&self) -> i64 {
        self.slices.last().map_or(0, |s| s.output.time)
    }

    pub fn input_ports(&self) -> Vec<&Port> {
        self.slices.iter().map(|s| &s.input).collect()
    }

    pub fn output_ports(&self) -> Vec<&Port> {
        self.slices.iter().map(|s| &s.output).collect()
    }

    /// Apply slice `s` to `(in_config, memory)` and collect `(out_config, memory, amp)`.
    pub fn apply_slice(&self, s: usize, config: usize, mem: usize) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        let sl = &self.slices[s];
        sl.op.column(config * sl.mem_in + mem).iter().map(move |&(r, v)| (r / sl.mem_out, r % sl.mem_out, v))
    }

    /// Stinespring columns of the whole box: for every tuple of input
    /// configurations (one per slice) the output tuple and final memory.
    ///
    /// # Errors
    /// `DimMismatch` when the number of input tuples exceeds [`MAX_CONFIGS`].
    pub fn stinespring(&self) -> Result<Vec<StinespringColumn>> {
        let sizes: Vec<usize> = self.slices.iter().map(|s| s.input.basis().len()).collect();
        let total = sizes.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).unwrap_or(usize::MAX);
        if total > MAX_CONFIGS {
            return Err(QcError::DimMismatch(format!("{total} input configurations exceed the limit")));
        }
        let mut out = Vec::with_capacity(total);
        let start = vec![(Vec::new(), 0usize, ONE)];
        self.expand(0, &sizes, Vec::new(), start, &mut out);
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn expand(
        &self,
        s: usize,
        sizes: &[usize],
        inputs: Vec<usize>,
        state: Vec<(Vec<usize>, usize, C64)>,
        out: &mut Vec<StinespringColumn>,
    ) {
        if s == self.slices.len() {
            let mut acc: HashMap<(Vec<usize>, usize), C64> = HashMap::new();
            for (o, m, a) in state {
                *acc.entry((o, m)).or_insert(ZERO) += a;
            }
            let mut entries: Vec<_> = acc.into_iter().filter(|(_, a)| *a != ZERO).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            out.push(StinespringColumn { inputs, entries });
            return;
        }
        for c in 0..sizes[s] {
            let mut next = Vec::new();
            for (o, m, a) in &state {
                for (oc, m2, v) in self.apply_slice(s, c, *m) {
                    let mut o2 = o.clone();
                    o2.push(oc);
                    next.push((o2, m2, a * v));
                }
            }
            let mut inp = inputs.clone();
            inp.push(c);
            self.expand(s + 1, sizes, inp, next, out);
        }
    }

    /// Dense Choi matrix via chained link products of the slices' Choi
    /// vectors. The final memory, when nontrivial, stays as an output factor
    /// `mem` at the last time.
    ///
    /// # Errors
    /// `DimMismatch` when the box is too large to densify.
    pub fn to_choi(&self) -> Result<ChoiBox> {
        let ins: Vec<Port> = self.slices.iter().map(|s| s.input.clone()).collect();
        let outs: Vec<Port> = self.slices.iter().map(|s| s.output.clone()).collect();
        let mem = self.final_memory();
        let len: usize = ins.iter().chain(&outs).map(|p| p.basis().len()).product::<usize>() * mem;
        if len > 1 << 12 {
            return Err(QcError::DimMismatch(format!("Choi vector of length {len} is too large to densify")));
        }
        let mut items = Vec::new();
        for (i, s) in self.slices.iter().enumerate() {
            let mem_label = |k: usize, d: usize| -> Option<(String, usize)> {
                if d == 1 {
                    None
                } else if k == self.slices.len() {
                    Some(("mem".to_string(), d))
                } else {
                    Some((format!("mem{k}"), d))
                }
            };
            let mut cols = vec![(s.input.label("in"), s.input.basis().len())];
            cols.extend(mem_label(i, s.mem_in));
            let mut rows = vec![(s.output.label("out"), s.output.basis().len())];
            rows.extend(mem_label(i + 1, s.mem_out));
            let pairs = |v: &[(String, usize)]| SpaceSpec::from_pairs(&v.iter().map(|(l, d)| (l.as_str(), *d)).collect::<Vec<_>>());
            let m = s.op.to_dense(pairs(&rows)?, pairs(&cols)?)?;
            items.push(choi_vector(&m)?);
        }
        let v = link_chain_vectors(&items)?;
        let mut order: Vec<String> = ins.iter().map(|p| p.label("in")).collect();
        order.extend(outs.iter().map(|p| p.label("out")));
        if mem > 1 {
            order.push("mem".into());
        }
        let refs: Vec<&str> = order.iter().map(String::as_str).collect();
        let v = v.reorder(&refs)?;
        ChoiBox::new(ins, outs, mem, v.outer(&v))
    }
}

/// Output of the whole sequence on one tuple of basis inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StinespringColumn {
    pub inputs: Vec<usize>,
    /// `((output config per slice, final memory), amplitude)`.
    pub entries: Vec<((Vec<usize>, usize), C64)>,
}

/// Dense Choi representation. Factors: input ports, output ports, then the
/// final memory `mem` when `memory_dim > 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiBox {
    pub inputs: Vec<Port>,
    pub outputs: Vec<Port>,
    #[serde(default = "one")]
    pub memory_dim: usize,
    pub choi: CMatrix,
}

impl ChoiBox {
    /// Attach port factor labels to a Choi matrix.
    ///
    /// # Errors
    /// `DimMismatch` when the matrix does not fit the ports; `LabelCollision`
    /// for repeated port labels.
    pub fn new(inputs: Vec<Port>, outputs: Vec<Port>, memory_dim: usize, choi: CMatrix) -> Result<Self> {
        let space = Self::space_for(&inputs, &outputs, memory_dim)?;
        let choi = choi.with_spaces(space.clone(), space)?;
        Ok(Self { inputs, outputs, memory_dim, choi })
    }

    fn space_for(inputs: &[Port], outputs: &[Port], memory_dim: usize) -> Result<SpaceSpec> {
        let mut pairs: Vec<(String, usize)> = inputs.iter().map(|p| (p.label("in"), p.basis().len())).collect();
        pairs.extend(outputs.iter().map(|p| (p.label("out"), p.basis().len())));
        if memory_dim > 1 {
            pairs.push(("mem".into(), memory_dim));
        }
        let refs: Vec<(&str, usize)> = pairs.iter().map(|(l, d)| (l.as_str(), *d)).collect();
        SpaceSpec::from_pairs(&refs)
    }

    /// Choi matrix of a map given by Kraus operators acting from the input
    /// ports (in order) to the output ports (in order).
    ///
    /// # Errors
    /// As [`ChoiBox::new`] and `EmptyKrausSet`.
    pub fn from_kraus(inputs: Vec<Port>, outputs: Vec<Port>, kraus: &[CMatrix]) -> Result<Self> {
        let ins = Self::space_for(&inputs, &[], 1)?;
        let outs = Self::space_for(&[], &outputs, 1)?;
        let mut ks = Vec::new();
        for k in kraus {
            ks.push(k.with_spaces(outs.clone(), ins.clone())?);
        }
        let j = crate::linalg::choi_matrix(&ks)?;
        Self::new(inputs, outputs, 1, j)
    }

    pub fn in_labels(&self) -> Vec<String> {
        self.inputs.iter().map(|p| p.label("in")).collect()
    }

    pub fn out_labels(&self) -> Vec<String> {
        self.outputs.iter().map(|p| p.label("out")).collect()
    }

    /// `max |Tr_out J − 1|`.
    pub fn trace_deviation(&self) -> f64 {
        let mut traced: Vec<String> = self.out_labels();
        if self.memory_dim > 1 {
            traced.push("mem".into());
        }
        let refs: Vec<&str> = traced.iter().map(String::as_str).collect();
        let r = partial_trace(&self.choi, &refs).expect("own labels");
        r.sub(&CMatrix::identity(r.rows().clone())).expect("square").max_abs()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.choi.min_eigenvalue()
    }
}

/// A causal box in either representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CausalBox {
    Choi(ChoiBox),
    Sequence(SequenceRep),
}

impl CausalBox {
    pub fn input_ports(&self) -> Vec<&Port> {
        match self {
            CausalBox::Choi(c) => c.inputs.iter().collect(),
            CausalBox::Sequence(s) => s.input_ports(),
        }
    }

    pub fn output_ports(&self) -> Vec<&Port> {
        match self {
            CausalBox::Choi(c) => c.outputs.iter().collect(),
            CausalBox::Sequence(s) => s.output_ports(),
        }
    }

    /// Distinct input wire labels.
    pub fn wires_in(&self) -> Vec<String> {
        wire_names(&self.input_ports())
    }

    /// Distinct output wire labels.
    pub fn wires_out(&self) -> Vec<String> {
        wire_names(&self.output_ports())
    }

    /// Largest port truncation.
    pub fn truncation(&self) -> usize {
        self.input_ports().iter().chain(self.output_ports().iter()).map(|p| p.truncation).max().unwrap_or(0)
    }

    /// Dense form; sequences are densified through link products.
    ///
    /// # Errors
    /// As [`SequenceRep::to_choi`].
    pub fn to_choi(&self) -> Result<ChoiBox> {
        match self {
            CausalBox::Choi(c) => Ok(c.clone()),
            CausalBox::Sequence(s) => s.to_choi(),
        }
    }
}

fn wire_names(ports: &[&Port]) -> Vec<String> {
    let set: BTreeSet<&str> = ports.iter().flat_map(|p| p.wires.iter().map(|w| w.label.as_str())).collect();
    set.into_iter().map(String::from).collect()
}

/// Build a causal box from slices after checking them at tolerance `1e-10`.
///
/// # Errors
/// `InvalidSlice` for timing, memory or isometry failures.
pub fn from_sequence(s: SequenceRep) -> Result<CausalBox> {
    s.validate(1e-10)?;
    Ok(CausalBox::Sequence(s))
}

/// Deviation of the causality condition at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityAtTime {
    pub t: i64,
    pub max_deviation: f64,
    pub ok: bool,
}

/// Per-time causality report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub times: Vec<CausalityAtTime>,
    pub ok: bool,
    /// `true` when every basis element of the input operator space was used;
    /// `false` when random probe vectors stood in for an oversized basis.
    pub exhaustive: bool,
}

/// Check `Tr_{>t} ∘ C = Tr_{>t} ∘ C ∘ Tr_{>t}` at every port time `t`,
/// where the inner trace discards inputs after `t` and re-embeds them as
/// vacuum.
///
/// Dense boxes are checked on their Choi matrix. Sequence boxes use a
/// backward recursion over slices: the Gram operator of the tail starting at
/// slice `s` must factor as `1 ⊗ G` over that slice's input and the memory,
/// with `G` its vacuum block. The deviation reported at `t` is the sum of the
/// per-slice factorization errors (Frobenius norm) over all slices reading
/// after `t`, which bounds the error of the condition to first order.
///
/// # Errors
/// `LabelNotFound` on a malformed dense box.
pub fn check_causality(cb: &CausalBox, tol: f64) -> Result<CausalityReport> {
    let times = port_times(cb);
    let mut out = Vec::new();
    match cb {
        CausalBox::Choi(c) => {
            for &t in &times {
                let d = choi_causality_at(c, t)?;
                out.push(CausalityAtTime { t, max_deviation: d, ok: d <= tol });
            }
        }
        CausalBox::Sequence(s) => {
            let per_slice = tail_factorization_errors(s);
            for &t in &times {
                let d: f64 = s.slices.iter().zip(&per_slice).filter(|(sl, _)| sl.input.time > t).fold(0.0, |a, (_, e)| a + e);
                out.push(CausalityAtTime { t, max_deviation: d, ok: d <= tol });
            }
        }
    }
    let ok = out.iter().all(|x| x.ok);
    Ok(CausalityReport { times: out, ok, exhaustive: true })
}

/// As [`check_causality`], except that sequence boxes are expanded into their
/// Stinespring columns and the condition `M M† = 1 ⊗ G` is tested directly,
/// on every basis vector when the row space is small and on random probes
/// otherwise. Much slower; kept as an independent route.
///
/// # Errors
/// As [`SequenceRep::stinespring`].
pub fn check_causality_seeded(cb: &CausalBox, tol: f64, seed: u64) -> Result<CausalityReport> {
    let CausalBox::Sequence(s) = cb else {
        return check_causality(cb, tol);
    };
    let cols = s.stinespring()?;
    let mut rng = sampling::rng(seed);
    let mut out = Vec::new();
    let mut exhaustive = true;
    for t in port_times(cb) {
        let (d, full) = sequence_causality_at(s, &cols, t, &mut rng);
        exhaustive &= full;
        out.push(CausalityAtTime { t, max_deviation: d, ok: d <= tol });
    }
    let ok = out.iter().all(|x| x.ok);
    Ok(CausalityReport { times: out, ok, exhaustive })
}

fn port_times(cb: &CausalBox) -> BTreeSet<i64> {
    cb.input_ports().iter().chain(cb.output_ports().iter()).map(|p| p.time).collect()
}

/// For every slice, the Frobenius distance of `R_s = V_s† (1 ⊗ G_{s+1}) V_s`
/// from `1_in ⊗ G_s`, where `G_s` is the vacuum-input block of `R_s` and
/// `G` after the last slice is the identity on the final memory.
fn tail_factorization_errors(s: &SequenceRep) -> Vec<f64> {
    // sparse Hermitian operators, keyed by (row, column)
    type Sparse = HashMap<(usize, usize), C64>;
    let mut g: Sparse = (0..s.final_memory()).map(|m| ((m, m), ONE)).collect();
    let mut errs = vec![0.0; s.slices.len()];
    for (k, sl) in s.slices.iter().enumerate().rev() {
        let (mi, mo) = (sl.mem_in, sl.mem_out);
        let basis = sl.input.basis();
        let vac = basis.index_of(&[]).unwrap_or(0);
        let mut g_cols: HashMap<usize, Vec<(usize, C64)>> = HashMap::new();
        for (&(r, c), &v) in &g {
            g_cols.entry(c).or_default().push((r, v));
        }
        let mut v_rows: HashMap<usize, Vec<(usize, C64)>> = HashMap::new();
        for c in 0..sl.op.ncols() {
            for &(r, v) in sl.op.column(c) {
                v_rows.entry(r).or_default().push((c, v));
            }
        }
        // R = V† (1 ⊗ G) V
        let mut r_op: Sparse = HashMap::new();
        for c2 in 0..sl.op.ncols() {
            for &(row, v) in sl.op.column(c2) {
                let (o, m) = (row / mo, row % mo);
                for &(m2, gv) in g_cols.get(&m).map_or(&[][..], Vec::as_slice) {
                    let w = gv * v;
                    for &(c1, v1) in v_rows.get(&(o * mo + m2)).map_or(&[][..], Vec::as_slice) {
                        *r_op.entry((c1, c2)).or_insert(ZERO) += v1.conj() * w;
                    }
                }
            }
        }
        let next: Sparse = r_op
            .iter()
            .filter(|((c1, c2), _)| c1 / mi == vac && c2 / mi == vac)
            .map(|(&(c1, c2), &v)| ((c1 % mi, c2 % mi), v))
            .collect();
        // distance of R from 1 ⊗ next
        let mut err2 = 0.0;
        for (&(c1, c2), &v) in &r_op {
            let want = if c1 / mi == c2 / mi { next.get(&(c1 % mi, c2 % mi)).copied().unwrap_or(ZERO) } else { ZERO };
            err2 += (v - want).norm_sqr();
        }
        for x in 0..basis.len() {
            for (&(m1, m2), &v) in &next {
                if !r_op.contains_key(&(x * mi + m1, x * mi + m2)) {
                    err2 += v.norm_sqr();
                }
            }
        }
        errs[k] = err2.sqrt();
        g = next;
    }
    errs
}

fn choi_causality_at(c: &ChoiBox, t: i64) -> Result<f64> {
    let mut traced: Vec<String> = c.outputs.iter().filter(|p| p.time > t).map(|p| p.label("out")).collect();
    if c.memory_dim > 1 {
        traced.push("mem".into());
    }
    let refs: Vec<&str> = traced.iter().map(String::as_str).collect();
    let jt = partial_trace(&c.choi, &refs)?;
    let early: Vec<String> = c.inputs.iter().filter(|p| p.time <= t).map(|p| p.label("in")).collect();
    let late: Vec<String> = c.inputs.iter().filter(|p| p.time > t).map(|p| p.label("in")).collect();
    let outs: Vec<String> = c.outputs.iter().filter(|p| p.time <= t).map(|p| p.label("out")).collect();
    let order: Vec<&str> = early.iter().chain(&late).chain(&outs).map(String::as_str).collect();
    let j = jt.reorder(&order, &order)?;
    let dim = |ls: &[String]| -> usize { ls.iter().map(|l| j.rows().dim_of(l).expect("label")).product() };
    let (da, dx, dout) = (dim(&early), dim(&late), dim(&outs));
    let idx = |a: usize, x: usize, o: usize| (a * dx + x) * dout + o;
    let mut dev: f64 = 0.0;
    for a in 0..da {
        for b in 0..da {
            for o in 0..dout {
                for o2 in 0..dout {
                    let reference = j.get(idx(a, 0, o), idx(b, 0, o2));
                    for x in 0..dx {
                        for y in 0..dx {
                            let want = if x == y { reference } else { ZERO };
                            dev = dev.max((j.get(idx(a, x, o), idx(b, y, o2)) - want).norm());
                        }
                    }
                }
            }
        }
    }
    Ok(dev)
}

/// Sequence boxes: with `M[(x, a, o≤), (o>, m)] = ⟨o, m|V|a, x⟩` the
/// condition reads `M M† = 1_x ⊗ G`, `G` being the `x = Ω` block. The
/// difference is applied to every basis vector when the row space is small
/// and to random probes otherwise.
fn sequence_causality_at(s: &SequenceRep, cols: &[StinespringColumn], t: i64, rng: &mut impl Rng) -> (f64, bool) {
    let n_early_in = s.slices.iter().filter(|sl| sl.input.time <= t).count();
    let n_early_out = s.slices.iter().filter(|sl| sl.output.time <= t).count();
    type Key = (Vec<usize>, Vec<usize>, Vec<usize>);
    let mut row_ids: HashMap<Key, usize> = HashMap::new();
    let mut col_ids: HashMap<(Vec<usize>, usize), usize> = HashMap::new();
    let mut rows_of: Vec<Key> = Vec::new();
    // M stored by row and by column
    let mut by_row: Vec<Vec<(usize, C64)>> = Vec::new();
    let mut by_col: Vec<Vec<(usize, C64)>> = Vec::new();
    for c in cols {
        let (a, x) = c.inputs.split_at(n_early_in);
        for ((o, m), amp) in &c.entries {
            let (lo, hi) = o.split_at(n_early_out);
            let key = (x.to_vec(), a.to_vec(), lo.to_vec());
            let r = *row_ids.entry(key.clone()).or_insert_with(|| {
                rows_of.push(key);
                by_row.push(Vec::new());
                rows_of.len() - 1
            });
            let ck = (hi.to_vec(), *m);
            let cidx = *col_ids.entry(ck).or_insert_with(|| {
                by_col.push(Vec::new());
                by_col.len() - 1
            });
            by_row[r].push((cidx, *amp));
            by_col[cidx].push((r, *amp));
        }
    }
    // x-blocks and the vacuum block
    let vac_x: Vec<usize> = vec![0; s.slices.len() - n_early_in];
    let xs: BTreeSet<Vec<usize>> = cols.iter().map(|c| c.inputs[n_early_in..].to_vec()).collect();
    let g_rows: Vec<(Vec<usize>, Vec<usize>)> =
        rows_of.iter().filter(|k| k.0 == vac_x).map(|k| (k.1.clone(), k.2.clone())).collect();
    // full index set: rows of M plus every x paired with every vacuum-block row
    let mut index: HashMap<Key, usize> = row_ids.clone();
    let mut keys = rows_of.clone();
    for x in &xs {
        for (a, o) in &g_rows {
            let k = (x.clone(), a.clone(), o.clone());
            if !index.contains_key(&k) {
                index.insert(k.clone(), keys.len());
                keys.push(k);
            }
        }
    }
    let n = keys.len();
    let exhaustive = n <= 1500;
    let probes: Vec<Vec<C64>> = if exhaustive {
        Vec::new()
    } else {
        (0..6)
            .map(|_| {
                let v: Vec<C64> = (0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
                let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                v.into_iter().map(|z| z / norm).collect()
            })
            .collect()
    };
    let apply = |r: &dyn Fn(usize) -> C64, support: &[usize]| -> f64 {
        // u = M† r on columns
        let mut u: HashMap<usize, C64> = HashMap::new();
        for &i in support {
            let ri = r(i);
            if i < by_row.len() {
                for &(c, v) in &by_row[i] {
                    *u.entry(c).or_insert(ZERO) += v.conj() * ri;
                }
            }
        }
        let mut res: HashMap<usize, C64> = HashMap::new();
        for (c, uc) in &u {
            for &(i, v) in &by_col[*c] {
                *res.entry(i).or_insert(ZERO) += v * uc;
            }
        }
        // subtract (1_x ⊗ G) r, G applied per x block through the vacuum rows
        let mut per_x: HashMap<&Vec<usize>, Vec<usize>> = HashMap::new();
        for &i in support {
            per_x.entry(&keys[i].0).or_default().push(i);
        }
        for (x, idxs) in per_x {
            let mut ug: HashMap<usize, C64> = HashMap::new();
            for &i in &idxs {
                let vk = (vac_x.clone(), keys[i].1.clone(), keys[i].2.clone());
                if let Some(&vr) = row_ids.get(&vk) {
                    let ri = r(i);
                    for &(c, v) in &by_row[vr] {
                        *ug.entry(c).or_insert(ZERO) += v.conj() * ri;
                    }
                }
            }
            for (c, uc) in &ug {
                for &(vr, v) in &by_col[*c] {
                    if rows_of[vr].0 == vac_x {
                        let k = (x.clone(), rows_of[vr].1.clone(), rows_of[vr].2.clone());
                        let i = index[&k];
                        *res.entry(i).or_insert(ZERO) -= v * uc;
                    }
                }
            }
        }
        res.values().map(|z| z.norm()).fold(0.0, f64::max)
    };
    let mut dev: f64 = 0.0;
    if exhaustive {
        for j in 0..n {
            dev = dev.max(apply(&|i| if i == j { ONE } else { ZERO }, &[j]));
        }
    } else {
        let all: Vec<usize> = (0..n).collect();
        for p in &probes {
            dev = dev.max(apply(&|i| p[i], &all));
        }
    }
    (dev, exhaustive)
}

/// Loop an output factor `out_label` back into an input factor `in_label`
/// of a labeled Choi matrix: `Σ_{k,l} J[(·, B=k, C=k), (·, B=l, C=l)]`.
///
/// # Errors
/// `LabelNotFound`, or `DimMismatch` when the two factors differ in dimension.
pub fn loop_compose_matrix(m: &CMatrix, out_label: &str, in_label: &str) -> Result<CMatrix> {
    let dc = m.rows().dim_of(out_label)?;
    let db = m.rows().dim_of(in_label)?;
    if dc != db {
        return Err(QcError::DimMismatch(format!("loop `{out_label}` ({dc}) into `{in_label}` ({db})")));
    }
    let rest: Vec<&str> = m.rows().labels().into_iter().filter(|l| *l != out_label && *l != in_label).collect();
    let order: Vec<&str> = rest.iter().copied().chain([in_label, out_label]).collect();
    let p = m.reorder(&order, &order)?;
    let space = m.rows().without(&[out_label, in_label]);
    let n = space.dim();
    let d = dc;
    let mut out = CMatrix::zeros(space.clone(), space);
    for r in 0..n {
        for c in 0..n {
            let mut s = ZERO;
            for k in 0..d {
                for l in 0..d {
                    s += p.get((r * d + k) * d + k, (c * d + l) * d + l);
                }
            }
            out.set(r, c, s);
        }
    }
    Ok(out)
}

/// Feed the output port labeled `out_label` back into the input port
/// `in_label`. The output may not come later than the input it feeds.
///
/// # Errors
/// `AcausalLoop` on a backwards-in-time loop, `DimMismatch` for unequal port
/// spaces, `LabelNotFound` for unknown labels.
pub fn loop_compose(cb: &ChoiBox, out_label: &str, in_label: &str) -> Result<ChoiBox> {
    let op = cb
        .outputs
        .iter()
        .position(|p| p.label("out") == out_label)
        .ok_or_else(|| QcError::LabelNotFound(out_label.to_string()))?;
    let ip = cb
        .inputs
        .iter()
        .position(|p| p.label("in") == in_label)
        .ok_or_else(|| QcError::LabelNotFound(in_label.to_string()))?;
    let (o, i) = (&cb.outputs[op], &cb.inputs[ip]);
    if o.time > i.time {
        return Err(QcError::AcausalLoop { out_label: out_label.into(), in_label: in_label.into() });
    }
    let dims = |p: &Port| p.wires.iter().map(PortWire::dim).collect::<Vec<_>>();
    if dims(o) != dims(i) || o.truncation != i.truncation {
        return Err(QcError::DimMismatch(format!("ports `{out_label}` and `{in_label}` differ")));
    }
    let j = loop_compose_matrix(&cb.choi, out_label, in_label)?;
    let mut inputs = cb.inputs.clone();
    inputs.remove(ip);
    let mut outputs = cb.outputs.clone();
    outputs.remove(op);
    ChoiBox::new(inputs, outputs, cb.memory_dim, j)
}

/// Parallel composition: tensor product of the Choi matrices.
///
/// # Errors
/// `LabelCollision` when both boxes read, or both write, the same wire at
/// the same time; `DimMismatch` when a
/// sequence box is too large to densify, or both boxes keep memory.
pub fn parallel_compose(a: &CausalBox, b: &CausalBox) -> Result<ChoiBox> {
    let (a, b) = (a.to_choi()?, b.to_choi()?);
    if a.memory_dim > 1 && b.memory_dim > 1 {
        return Err(QcError::DimMismatch("both boxes carry a final memory".into()));
    }
    // a wire may leave one box and enter the other; it may not appear twice on one side
    let keys = |ports: &[Port]| -> BTreeSet<(String, i64)> {
        ports.iter().flat_map(|p| p.wires.iter().map(move |w| (w.label.clone(), p.time))).collect()
    };
    for (x, y) in [(&a.inputs, &b.inputs), (&a.outputs, &b.outputs)] {
        if let Some((w, t)) = keys(x).intersection(&keys(y)).next() {
            return Err(QcError::LabelCollision(format!("{w}@{t}")));
        }
    }
    let j = tensor(&a.choi, &b.choi)?;
    let inputs: Vec<Port> = a.inputs.iter().chain(&b.inputs).cloned().collect();
    let outputs: Vec<Port> = a.outputs.iter().chain(&b.outputs).cloned().collect();
    let mem = a.memory_dim.max(b.memory_dim);
    let mut order: Vec<String> = inputs.iter().map(|p| p.label("in")).collect();
    order.extend(outputs.iter().map(|p| p.label("out")));
    if mem > 1 {
        order.push("mem".into());
    }
    let refs: Vec<&str> = order.iter().map(String::as_str).collect();
    ChoiBox::new(inputs, outputs, mem, j.reorder(&refs, &refs)?)
}

/// Restrict every port to at most `n` messages. Basis states are ordered by
/// message count, so the restriction keeps a leading block of each factor.
///
/// # Errors
/// `DimMismatch` when `n` exceeds a port's truncation.
pub fn restrict_truncation(cb: &CausalBox, n: usize) -> Result<CausalBox> {
    let cut = |p: &Port| -> Result<Port> {
        if n > p.truncation {
            return Err(QcError::DimMismatch(format!("cannot raise truncation {} to {n}", p.truncation)));
        }
        Ok(Port { truncation: n, ..p.clone() })
    };
    match cb {
        CausalBox::Choi(c) => {
            let inputs: Vec<Port> = c.inputs.iter().map(cut).collect::<Result<_>>()?;
            let outputs: Vec<Port> = c.outputs.iter().map(cut).collect::<Result<_>>()?;
            let old = c.choi.rows();
            let mut keep: Vec<usize> = inputs.iter().chain(&outputs).map(|p| p.basis().len()).collect();
            if c.memory_dim > 1 {
                keep.push(c.memory_dim);
            }
            let new_space = ChoiBox::space_for(&inputs, &outputs, c.memory_dim)?;
            let map: Vec<usize> = (0..new_space.dim())
                .map(|i| {
                    let multi = new_space.unflatten(i);
                    debug_assert!(multi.iter().zip(&keep).all(|(m, k)| m < k));
                    old.flatten(&multi)
                })
                .collect();
            let j = CMatrix::from_fn(new_space.clone(), new_space, |r, col| c.choi.get(map[r], map[col]));
            Ok(CausalBox::Choi(ChoiBox::new(inputs, outputs, c.memory_dim, j)?))
        }
        CausalBox::Sequence(s) => {
            let mut slices = Vec::new();
            for sl in &s.slices {
                let (input, output) = (cut(&sl.input)?, cut(&sl.output)?);
                let (ni, no) = (input.basis().len(), output.basis().len());
                let mut op = SparseOp::zeros(no * sl.mem_out, ni * sl.mem_in);
                for j in 0..op.ncols() {
                    for &(r, v) in sl.op.column(j) {
                        if r < op.nrows() {
                            op.add(r, j, v);
                        }
                    }
                }
                slices.push(Slice::new(input, output, sl.mem_in, sl.mem_out, op)?);
            }
            Ok(CausalBox::Sequence(SequenceRep { slices, readout: s.readout.clone() }))
        }
    }
}

/// Outcome of comparing loop composition with the link product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompLinkReport {
    pub max_deviation: f64,
    pub ok: bool,
}

/// Compose two labeled Choi matrices sharing labels in two ways: tensor them
/// with `b`'s copies renamed and loop each shared output of `a` into `b`'s
/// input, and take the link product directly.
///
/// # Errors
/// Label errors from the underlying operations.
pub fn verify_comp_is_link(a: &CMatrix, b: &CMatrix, tol: f64) -> Result<CompLinkReport> {
    let shared: Vec<String> =
        a.rows().labels().into_iter().filter(|l| b.rows().contains(l)).map(String::from).collect();
    let map: HashMap<String, String> = shared.iter().map(|l| (l.clone(), format!("{l}#in"))).collect();
    let mut j = tensor(a, &b.relabel(&map)?)?;
    for l in &shared {
        j = loop_compose_matrix(&j, l, &map[l])?;
    }
    let link = crate::linalg::link_matrices(a, b)?;
    let order: Vec<&str> = link.rows().labels();
    let j = j.reorder(&order, &order)?;
    let d = j.max_abs_diff(&link)?;
    Ok(CompLinkReport { max_deviation: d, ok: d <= tol })
}

/// Normalized image of one basis configuration under `Γ(v)`: entries of the
/// column in `out`'s normalized basis.
///
/// # Errors
/// `TruncationOverflow` when amplitude lands above the output truncation.
pub fn functor_apply(v: &CMatrix, inp: &FockBasis, out: &FockBasis, j: usize) -> Result<Vec<(usize, C64)>> {
    let mut res = Vec::new();
    for (c, amp) in functor_column(v, inp.config(j)) {
        let i = out.index_of(&c).ok_or(QcError::TruncationOverflow { messages: c.len(), truncation: out.truncation() })?;
        res.push((i, amp * config_weight(&c).sqrt() / inp.norm_factor(j)));
    }
    res.sort_by_key(|e| e.0);
    Ok(res)
}

/// A per-slot delayed identity: every wire of `input` reappears on the same
/// label at `input.time + delay`.
///
/// # Panics
/// If `delay` is not positive.
pub fn delay_slice(input: &Port, delay: i64) -> Slice {
    assert!(delay > 0, "delay must be positive");
    let output = Port { time: input.time + delay, ..input.clone() };
    let (bi, bo) = (input.basis(), output.basis());
    let mut op = SparseOp::zeros(bo.len(), bi.len());
    for j in 0..bi.len() {
        let occ = bi.occupation(j);
        let shifted = crate::fock::OccupationState::from_counts(
            occ.counts().iter().map(|(m, n)| (Mode::new(&m.wire, m.time + delay, m.idx), *n)),
        );
        op.add(bo.index_of_occupation(&shifted).expect("same shape"), j, ONE);
    }
    Slice::new(input.clone(), output, 1, 1, op).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{choi_matrix, CVector};
    use crate::sampling::random_contraction;

    fn qubit_port(w: &str, t: i64) -> Port {
        Port::single(w, 2, t, 1)
    }

    #[test]
    fn delayed_identity_is_causal() {
        let s = SequenceRep { slices: vec![delay_slice(&qubit_port("A", 1), 1)], readout: None };
        let cb = from_sequence(s).unwrap();
        let r = check_causality(&cb, 1e-10).unwrap();
        assert!(r.ok && r.exhaustive);
        let c = cb.to_choi().unwrap();
        assert!(c.trace_deviation() < 1e-12);
        // the Choi matrix of the identity on {Ω, |0⟩, |1⟩}
        let v = CVector::new(c.choi.rows().clone(), (0..9).map(|i| if i % 4 == 0 { ONE } else { ZERO }).collect()).unwrap();
        assert!(c.choi.max_abs_diff(&v.outer(&v)).unwrap() < 1e-15);
        let dense = CausalBox::Choi(c);
        assert!(check_causality(&dense, 1e-10).unwrap().ok);
    }

    #[test]
    fn swap_from_two_slices() {
        // slice 1 stores wire A (t=1) in memory and delays B; slice 2 releases A on wire B
        let p1 = Port::new(1, vec![PortWire::plain("A", 1), PortWire::plain("B", 1)], 1).unwrap();
        let o1 = Port::single("B", 1, 2, 1);
        let i2 = Port::single("Z", 1, 3, 1);
        let o2 = Port::single("A", 1, 4, 1);
        // basis of p1: Ω, A, B; memory 2 keeps whether A was present
        let mut op1 = SparseOp::zeros(2 * 2, 3);
        op1.add(0, 0, ONE); // Ω -> Ω, mem 0
        op1.add(1, 1, ONE); // A -> Ω, mem 1
        op1.add(2, 2, ONE); // B -> B@2, mem 0
        let s1 = Slice::new(p1, o1, 1, 2, op1).unwrap();
        // slice 2 ignores Z (dim 1, truncation 1 => {Ω, Z}); mem 1 -> A@4
        let mut op2 = SparseOp::zeros(2 * 2, 2 * 2);
        for z in 0..2 {
            for m in 0..2 {
                let col = z * 2 + m;
                // output config m (0 = Ω, 1 = one message), memory z
                op2.add(m * 2 + z, col, ONE);
            }
        }
        let s2 = Slice::new(i2, o2, 2, 2, op2).unwrap();
        let cb = from_sequence(SequenceRep { slices: vec![s1, s2], readout: None }).unwrap();
        assert!(check_causality(&cb, 1e-10).unwrap().ok);
        let c = cb.to_choi().unwrap();
        // oracle: single message on A@1 ends up on A@4, on B@1 on B@2
        let st = cb_sequence(&cb).stinespring().unwrap();
        let a_in = st.iter().find(|c| c.inputs == vec![1, 0]).unwrap();
        assert_eq!(a_in.entries, vec![((vec![0, 1], 0), ONE)]);
        let b_in = st.iter().find(|c| c.inputs == vec![2, 0]).unwrap();
        assert_eq!(b_in.entries, vec![((vec![1, 0], 0), ONE)]);
        assert!(c.trace_deviation() < 1e-12);
    }

    fn cb_sequence(cb: &CausalBox) -> &SequenceRep {
        match cb {
            CausalBox::Sequence(s) => s,
            CausalBox::Choi(_) => panic!("expected a sequence"),
        }
    }

    #[test]
    fn acausal_choi_fails_at_the_right_time() {
        // input at t=4 copied to an output at t=3
        let i = qubit_port("A", 4);
        let o = qubit_port("B", 3);
        let id = CMatrix::identity(SpaceSpec::single("x", 3));
        let cb = CausalBox::Choi(ChoiBox::from_kraus(vec![i], vec![o], &[id]).unwrap());
        let r = check_causality(&cb, 1e-10).unwrap();
        let at3 = r.times.iter().find(|x| x.t == 3).unwrap();
        assert!(!at3.ok);
        assert!(r.times.iter().find(|x| x.t == 4).unwrap().ok);
    }

    #[test]
    fn broken_sequence_is_caught() {
        // second slice kills a message arriving at t=3: the output at t=2 then
        // depends on a later input after tracing
        let s1 = delay_slice(&Port::single("A", 1, 1, 1), 1);
        let i2 = Port::single("B", 1, 3, 1);
        let o2 = Port::single("B", 1, 4, 1);
        let mut op = SparseOp::zeros(2, 2);
        op.add(0, 0, ONE);
        let s2 = Slice { input: i2, output: o2, mem_in: 1, mem_out: 1, op };
        let seq = SequenceRep { slices: vec![s1, s2], readout: None };
        assert!(matches!(seq.validate(1e-10), Err(QcError::InvalidSlice { index: 1, .. })));
        let cb = CausalBox::Sequence(seq);
        for r in [check_causality(&cb, 1e-10).unwrap(), check_causality_seeded(&cb, 1e-10, 1).unwrap()] {
            assert!(!r.times.iter().find(|x| x.t == 2).unwrap().ok);
            assert!(r.times.iter().find(|x| x.t == 3).unwrap().ok);
        }
    }

    #[test]
    fn loop_guard() {
        let i = qubit_port("A", 1);
        let o = qubit_port("B", 2);
        let id = CMatrix::identity(SpaceSpec::single("x", 3));
        let cb = ChoiBox::from_kraus(vec![i], vec![o], &[id]).unwrap();
        // output at t=2 fed into the input at t=1 goes backwards
        assert!(matches!(loop_compose(&cb, "out:B@2", "in:A@1"), Err(QcError::AcausalLoop { .. })));
    }

    #[test]
    fn loop_of_delay_fed_by_preparation_forwards() {
        // preparation box: no input, emits |1⟩ on A@1; delay box: A@1 -> C@2
        let prep_out = qubit_port("A", 1);
        let ket = CMatrix::from_fn(SpaceSpec::single("o", 3), SpaceSpec::trivial(), |r, _| if r == 2 { ONE } else { ZERO });
        let prep = ChoiBox::from_kraus(vec![], vec![prep_out], &[ket]).unwrap();
        let delay_in = Port::single("A2", 2, 1, 1);
        let id = CMatrix::identity(SpaceSpec::single("x", 3));
        let delay = ChoiBox::from_kraus(vec![delay_in], vec![qubit_port("C", 2)], &[id]).unwrap();
        let both = parallel_compose(&CausalBox::Choi(prep), &CausalBox::Choi(delay)).unwrap();
        let looped = loop_compose(&both, "out:A@1", "in:A2@1").unwrap();
        assert!(looped.trace_deviation() < 1e-12);
        assert!((looped.choi.get(2, 2) - ONE).norm() < 1e-12);
        assert!((looped.choi.trace() - ONE).norm() < 1e-12);
    }

    #[test]
    fn comp_is_link_on_random_maps() {
        let mut rng = sampling::rng(3);
        for _ in 0..5 {
            let x = SpaceSpec::single("X", 2);
            let y = SpaceSpec::single("Y", 3);
            let z = SpaceSpec::single("Z", 2);
            let ka = [random_contraction(&y, &x, &mut rng), random_contraction(&y, &x, &mut rng)];
            let kb = [random_contraction(&z, &y, &mut rng)];
            let r = verify_comp_is_link(&choi_matrix(&ka).unwrap(), &choi_matrix(&kb).unwrap(), 1e-11).unwrap();
            assert!(r.ok, "{r:?}");
        }
    }

    #[test]
    fn restriction_to_full_truncation_is_identity() {
        let p = Port::single("A", 2, 1, 2);
        let s = SequenceRep { slices: vec![delay_slice(&p, 1)], readout: None };
        let cb = CausalBox::Choi(s.to_choi().unwrap());
        assert_eq!(restrict_truncation(&cb, 2).unwrap(), cb);
        // one-message block of a message-conserving box
        let r = restrict_truncation(&cb, 1).unwrap();
        let CausalBox::Choi(rc) = &r else { panic!() };
        let CausalBox::Choi(full) = &cb else { panic!() };
        // ≤1-message configs are the first 3 of 6 on each factor
        for i in 0..9 {
            for j in 0..9 {
                let (a, b) = (i / 3, i % 3);
                let (c, d) = (j / 3, j % 3);
                assert_eq!(rc.choi.get(i, j), full.choi.get(a * 6 + b, c * 6 + d));
            }
        }
        assert!(rc.trace_deviation() < 1e-12);
    }

    #[test]
    fn sparse_isometry_deviation_matches_dense() {
        let mut rng = sampling::rng(5);
        let v = random_contraction(&SpaceSpec::single("o", 4), &SpaceSpec::single("i", 3), &mut rng);
        let s = SparseOp::from_dense(&v);
        let dense = crate::linalg::is_isometry(&v, 1e-10).max_deviation;
        assert!((s.isometry_deviation(None) - dense).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let s = SequenceRep { slices: vec![delay_slice(&qubit_port("A", 1), 2)], readout: None };
        let cb = CausalBox::Sequence(s);
        let text = serde_json::to_string(&cb).unwrap();
        let back: CausalBox = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cb);
        let c = CausalBox::Choi(cb.to_choi().unwrap());
        let back: CausalBox = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
