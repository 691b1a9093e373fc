// SPDX-License-Identifier: Apache-2.0
//! From circuits to causal boxes.
//!
//! Slice `s` of every construction reads at time `2s − 1` and writes at time
//! `2s`; the party acting at slot `n` therefore receives at `2n` and replies
//! at `2n + 1`. The past enters at time 1 and the future leaves at `2N + 2`.
//!
//! * [`isometric_extension`] keeps the control and ancilla in box memory and
//!   acts with the circuit's operators on the *correct* inputs (one message
//!   on the wire the control expects). Everything else is routed into a
//!   junk register, so the slices stay isometries on the whole truncated
//!   domain.
//! * [`projective_extension`] is the same box with an extra `ABORT` wire that
//!   carries a flag whenever an input outside the correct subspace arrives.
//! * [`photonic_extension`] lets control and ancilla travel with the message
//!   and applies the single-message operator to every message separately.
//! * [`grenoble_gate_extension`] builds the three-party dynamical-order
//!   circuit from COPY, CNOT and polarizing beam-splitter gates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::causalbox::{functor_apply, Port, PortWire, Readout, SequenceRep, Slice, SparseOp};
use crate::error::{QcError, Result};
use crate::fock::{FockBasis, Mode, TimestampSet};
use crate::linalg::{tensor, CMatrix, CVector, SpaceSpec, C64, ONE, ZERO};
use crate::qcqc::{ai, ao, future_vector, process_vector, ControlState, LocalOperation, OpKey, QcQc, FUTURE, PAST};
use crate::sampling;

/// Wire carrying the abort flag of the projective extension.
pub const ABORT: &str = "ABORT";

/// Slice tolerance for constructed isometries.
const SLICE_TOL: f64 = 1e-10;

/// Which construction to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Isometric,
    Projective,
    Photonic,
    Gates,
}

/// Treatment of inputs outside the correct subspace in the isometric
/// construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestPolicy {
    /// Middle slices forward the messages to the same party's input wire and
    /// push the old memory into junk; the first and last slices park.
    #[default]
    Forward,
    /// Every slice parks: the messages collapse to a canonical configuration
    /// with the same count and junk records the full input.
    Park,
}

/// Construction parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionPolicy {
    pub rest: RestPolicy,
    pub truncation: usize,
}

impl Default for ExtensionPolicy {
    fn default() -> Self {
        Self { rest: RestPolicy::Forward, truncation: 2 }
    }
}

fn slice_time_in(s: usize) -> i64 {
    2 * s as i64 - 1
}

fn slice_time_out(s: usize) -> i64 {
    2 * s as i64
}

pub(crate) fn party_of(wire: &str) -> Option<usize> {
    wire.strip_prefix("AI")
        .or_else(|| wire.strip_prefix("AO"))
        .and_then(|k| k.parse::<usize>().ok())
        .and_then(|k| k.checked_sub(1))
}

fn mode_idx(b: &FockBasis, wire: &str, time: i64, idx: usize) -> u32 {
    b.mode_index(&Mode::new(wire, time, idx)).expect("mode of this port") as u32
}

fn config_of(b: &FockBasis, mut modes: Vec<u32>) -> Result<usize> {
    modes.sort_unstable();
    b.index_of(&modes).ok_or(QcError::TruncationOverflow { messages: modes.len(), truncation: b.truncation() })
}

/// Layout of the correct part of memory at one stage: reachable controls
/// times the ancilla.
struct Stage {
    controls: Vec<ControlState>,
    alpha: usize,
}

impl Stage {
    fn of(q: &QcQc, s: usize) -> Self {
        let alpha = if s == q.n_parties() + 1 { q.alpha_f() } else { q.alpha(s) };
        Self { controls: q.reachable_controls(s), alpha }
    }

    fn size(&self) -> usize {
        self.controls.len() * self.alpha
    }

    fn index(&self, c: &ControlState, a: usize) -> Option<usize> {
        self.controls.iter().position(|x| x == c).map(|p| p * self.alpha + a)
    }
}

fn control_after(q: &QcQc, key: &OpKey) -> ControlState {
    let acted = key.from.map_or(key.acted, |k| key.acted | (1 << k));
    match key.to {
        Some(k) => ControlState { acted, current: Some(k) },
        None => ControlState { acted: (1u32 << q.n_parties()) - 1, current: None },
    }
}

fn party_ports(q: &QcQc, s: usize, truncation: usize, extra_wire: bool) -> (Port, Port) {
    let n = q.n_parties();
    let g = q.generic_dim();
    let input = if s == 1 {
        Port::single(PAST, q.past_dim(), 1, truncation)
    } else {
        Port { time: slice_time_in(s), wires: (0..n).map(|k| PortWire::plain(&ao(k), g)).collect(), truncation }
    };
    let mut wires: Vec<PortWire> = if s == n + 1 {
        vec![PortWire::plain(FUTURE, q.future_dim())]
    } else {
        (0..n).map(|k| PortWire::plain(&ai(k), g)).collect()
    };
    let mut out_trunc = truncation;
    if extra_wire {
        wires.push(PortWire::plain(ABORT, 1));
        out_trunc += 1;
    }
    (input, Port { time: slice_time_out(s), wires, truncation: out_trunc })
}

/// Isometric extension with memory `M_s = (controls ⊗ α_s) ⊕ junk_s`.
///
/// # Errors
/// `IncompleteQcQc` if the circuit does not validate; `InvalidPolicy` if a
/// slice fails to be an isometry.
pub fn isometric_extension(q: &QcQc, policy: &ExtensionPolicy) -> Result<SequenceRep> {
    build_memory_extension(q, policy, false)
}

/// Isometric extension with an abort flag on every input outside the correct
/// subspace. The flag is one message on the `ABORT` wire at the slice's
/// output time.
///
/// # Errors
/// As [`isometric_extension`].
pub fn projective_extension(q: &QcQc, truncation: usize) -> Result<SequenceRep> {
    build_memory_extension(q, &ExtensionPolicy { rest: RestPolicy::Forward, truncation }, true)
}

fn build_memory_extension(q: &QcQc, policy: &ExtensionPolicy, abort: bool) -> Result<SequenceRep> {
    let report = q.validate(SLICE_TOL);
    if !report.ok {
        return Err(QcError::IncompleteQcQc(format!("circuit fails validation: {report:?}")));
    }
    let n = q.n_parties();
    let mut slices = Vec::new();
    let mut mem_in = 1usize;
    for s in 1..=n + 1 {
        let (input, output) = party_ports(q, s, policy.truncation, abort);
        let (bi, bo) = (input.basis(), output.basis());
        let (prev, next) = (Stage::of(q, s - 1), Stage::of(q, s));
        let park = s == 1 || s == n + 1 || policy.rest == RestPolicy::Park;
        let junk = if park { bi.len() * mem_in } else { mem_in };
        let mem_out = next.size() + junk;
        let mut op = SparseOp::zeros(bo.len() * mem_out, bi.len() * mem_in);
        let abort_mode = abort.then(|| mode_idx(&bo, ABORT, output.time, 0));
        // parked messages sit on the first circuit wire, never on the flag
        let park_mode = bo.modes().iter().position(|md| md.wire != ABORT).expect("circuit wire") as u32;
        for c in 0..bi.len() {
            let cfg = bi.config(c);
            for m in 0..mem_in {
                let col = c * mem_in + m;
                if let Some(entries) = correct_action(q, &output, &bi, &bo, &prev, &next, cfg, m)? {
                    for (oc, m2, v) in entries {
                        op.add(oc * mem_out + m2, col, v);
                    }
                    continue;
                }
                let mut modes: Vec<u32> = if park {
                    vec![park_mode; cfg.len()]
                } else {
                    cfg.iter()
                        .map(|&mi| {
                            let md = &bi.modes()[mi as usize];
                            let k = party_of(&md.wire).expect("party wire");
                            mode_idx(&bo, &ai(k), output.time, md.idx)
                        })
                        .collect()
                };
                modes.extend(abort_mode);
                let oc = config_of(&bo, modes)?;
                let m2 = next.size() + if park { c * mem_in + m } else { m };
                op.add(oc * mem_out + m2, col, ONE);
            }
        }
        let dev = op.isometry_deviation(None);
        if dev > SLICE_TOL {
            return Err(QcError::InvalidPolicy(dev));
        }
        slices.push(Slice::new(input, output, mem_in, mem_out, op)?);
        mem_in = mem_out;
    }
    Ok(SequenceRep { slices, readout: Some(Readout { future_wire: FUTURE.into(), alpha_mem: q.alpha_f() }) })
}

/// The circuit's action on a correct input (one message on the wire the
/// control names, memory in the control part), or `None` for any other input.
#[allow(clippy::too_many_arguments)]
fn correct_action(
    q: &QcQc,
    output: &Port,
    bi: &FockBasis,
    bo: &FockBasis,
    prev: &Stage,
    next: &Stage,
    cfg: &[u32],
    m: usize,
) -> Result<Option<Vec<(usize, usize, C64)>>> {
    if cfg.len() != 1 || m >= prev.size() {
        return Ok(None);
    }
    let md = &bi.modes()[cfg[0] as usize];
    let c = prev.controls[m / prev.alpha];
    let a = m % prev.alpha;
    let d_from = match c.current {
        None => q.past_dim(),
        Some(k) => {
            if party_of(&md.wire) != Some(k) || md.wire != ao(k) {
                return Ok(None);
            }
            q.dims()[k].d_out
        }
    };
    if md.idx >= d_from {
        return Ok(None);
    }
    let mut out = Vec::new();
    for to in q.successors(c) {
        let key = OpKey::new(c.acted, c.current, to);
        let Some(v) = q.op(&key) else { continue };
        let co = control_after(q, &key);
        let col = md.idx * prev.alpha + a;
        let wire = to.map_or(FUTURE.to_string(), ai);
        for r in 0..v.nrows() {
            let x = v.get(r, col);
            if x == ZERO {
                continue;
            }
            let (t2, a2) = (r / next.alpha, r % next.alpha);
            let mem = next.index(&co, a2).ok_or_else(|| QcError::IncompleteQcQc(format!("control {co:?} unreachable")))?;
            let oc = config_of(bo, vec![mode_idx(bo, &wire, output.time, t2)])?;
            out.push((oc, mem, x));
        }
    }
    Ok(Some(out))
}

/// Photonic extension: messages carry `target ⊗ control ⊗ ancilla`, each
/// message is routed by the circuit's operators independently, and the
/// future leaves as one message on `F` with extra factor `α_F`.
///
/// # Errors
/// `IncompleteQcQc` if the circuit does not validate; `TruncationOverflow`
/// never occurs for message-conserving slices but is propagated.
pub fn photonic_extension(q: &QcQc, truncation: usize) -> Result<SequenceRep> {
    let report = q.validate(SLICE_TOL);
    if !report.ok {
        return Err(QcError::IncompleteQcQc(format!("circuit fails validation: {report:?}")));
    }
    let n = q.n_parties();
    // controls per stage with a given current party
    let ctl = |s: usize, k: usize| -> Vec<ControlState> {
        q.reachable_controls(s).into_iter().filter(|c| c.current == Some(k)).collect()
    };
    let mut slices = Vec::new();
    for s in 1..=n + 1 {
        let input = if s == 1 {
            Port::single(PAST, q.past_dim(), 1, truncation)
        } else {
            let wires = (0..n)
                .filter(|&k| !ctl(s - 1, k).is_empty())
                .map(|k| PortWire::new(&ao(k), q.dims()[k].d_out, ctl(s - 1, k).len() * q.alpha(s - 1)))
                .collect();
            Port::new(slice_time_in(s), wires, truncation)?
        };
        let output = if s == n + 1 {
            Port::new(slice_time_out(s), vec![PortWire::new(FUTURE, q.future_dim(), q.alpha_f())], truncation)?
        } else {
            let wires = (0..n)
                .filter(|&k| !ctl(s, k).is_empty())
                .map(|k| PortWire::new(&ai(k), q.dims()[k].d_in, ctl(s, k).len() * q.alpha(s)))
                .collect();
            Port::new(slice_time_out(s), wires, truncation)?
        };
        let (bi, bo) = (input.basis(), output.basis());
        let mut v = CMatrix::zeros(SpaceSpec::single("out", bo.modes().len()), SpaceSpec::single("in", bi.modes().len()));
        let stage = Stage::of(q, s - 1);
        let (a_in, a_out) = (stage.alpha, if s == n + 1 { q.alpha_f() } else { q.alpha(s) });
        for c in &stage.controls {
            let (wire_in, d_from, extra_in, cpos) = match c.current {
                None => (PAST.to_string(), q.past_dim(), 1, 0),
                Some(k) => {
                    let list = ctl(s - 1, k);
                    let p = list.iter().position(|x| x == c).expect("listed");
                    (ao(k), q.dims()[k].d_out, list.len() * a_in, p)
                }
            };
            for to in q.successors(*c) {
                let key = OpKey::new(c.acted, c.current, to);
                let Some(op) = q.op(&key) else { continue };
                let co = control_after(q, &key);
                let (wire_out, extra_out, cpos_out) = match to {
                    None => (FUTURE.to_string(), a_out, 0),
                    Some(k) => {
                        let list = ctl(s, k);
                        let p = list.iter().position(|x| *x == co).expect("reachable");
                        (ai(k), list.len() * a_out, p)
                    }
                };
                for t in 0..d_from {
                    for a in 0..a_in {
                        let mi = mode_idx(&bi, &wire_in, input.time, t * extra_in + cpos * a_in + a) as usize;
                        for r in 0..op.nrows() {
                            let x = op.get(r, t * a_in + a);
                            if x == ZERO {
                                continue;
                            }
                            let (t2, a2) = (r / a_out, r % a_out);
                            let mo = mode_idx(&bo, &wire_out, output.time, t2 * extra_out + cpos_out * a_out + a2);
                            v.add_at(mo as usize, mi, x);
                        }
                    }
                }
            }
        }
        slices.push(functor_slice(&input, &output, &v)?);
    }
    Ok(SequenceRep { slices, readout: Some(Readout { future_wire: FUTURE.into(), alpha_mem: 1 }) })
}

/// Slice `Γ(v)` for a single-message map `v` between the ports' modes.
///
/// # Errors
/// `TruncationOverflow`, or `InvalidSlice` when the result is not an isometry.
pub fn functor_slice(input: &Port, output: &Port, v: &CMatrix) -> Result<Slice> {
    let (bi, bo) = (input.basis(), output.basis());
    let mut op = SparseOp::zeros(bo.len(), bi.len());
    for j in 0..bi.len() {
        for (i, x) in functor_apply(v, &bi, &bo, j)? {
            op.add(i, j, x);
        }
    }
    let dev = op.isometry_deviation(None);
    if dev > SLICE_TOL {
        return Err(QcError::InvalidSlice { index: input.time as usize, reason: format!("deviation {dev:e}") });
    }
    Slice::new(input.clone(), output.clone(), 1, 1, op)
}

/// Single-photon gates on mode lists. Modes of a qubit photon are its two
/// polarizations; with an extra qubit the order is `(target, extra)`
/// lexicographic.
pub mod gates {
    use super::*;

    fn perm(n_out: usize, n_in: usize, f: impl Fn(usize) -> usize) -> CMatrix {
        CMatrix::from_fn(SpaceSpec::single("out", n_out), SpaceSpec::single("in", n_in), |r, c| {
            if f(c) == r {
                ONE
            } else {
                ZERO
            }
        })
    }

    /// `|i⟩ ↦ |i⟩|i⟩`: two input modes, four output modes.
    pub fn copy() -> CMatrix {
        perm(4, 2, |i| i * 2 + i)
    }

    /// `|i⟩|j⟩ ↦ |i⟩|i ⊕ j⟩` on the four modes of a target-plus-extra photon.
    pub fn cnot() -> CMatrix {
        perm(4, 4, |m| {
            let (i, j) = (m / 2, m % 2);
            i * 2 + (i ^ j)
        })
    }

    /// Polarizing beam splitter on two paths of `per_path` modes each: a
    /// photon whose polarization bit (`bit(local mode)`) is 1 switches path.
    pub fn pbs(per_path: usize, bit: impl Fn(usize) -> usize) -> CMatrix {
        perm(2 * per_path, 2 * per_path, |m| {
            let (p, l) = (m / per_path, m % per_path);
            (p ^ bit(l)) * per_path + l
        })
    }

    /// Act with `g` on paths `a` and `b` out of `paths`, identity elsewhere.
    pub fn on_paths(g: &CMatrix, paths: usize, per_path: usize, a: usize, b: usize) -> CMatrix {
        let n = paths * per_path;
        let embed = |p: usize, l: usize| -> Option<usize> {
            if p == a {
                Some(l)
            } else if p == b {
                Some(per_path + l)
            } else {
                None
            }
        };
        CMatrix::from_fn(SpaceSpec::single("out", n), SpaceSpec::single("in", n), |r, c| {
            let (pr, lr) = (r / per_path, r % per_path);
            let (pc, lc) = (c / per_path, c % per_path);
            match (embed(pr, lr), embed(pc, lc)) {
                (Some(x), Some(y)) => g.get(x, y),
                (None, None) if r == c => ONE,
                _ => ZERO,
            }
        })
    }

    /// Relabel path `k` as `k + 1 mod paths`.
    pub fn shift(paths: usize, per_path: usize) -> CMatrix {
        perm(paths * per_path, paths * per_path, |m| ((m / per_path + 1) % paths) * per_path + m % per_path)
    }

    /// Route a photon on path `k` to path `k + 1 + b`, `b` the bit that the
    /// beam splitters read: shift, then split paths 1/2, then paths 0/1.
    pub fn route(per_path: usize, bit: impl Fn(usize) -> usize + Copy) -> CMatrix {
        let pb = pbs(per_path, bit);
        let s = shift(3, per_path);
        let r12 = on_paths(&pb, 3, per_path, 1, 2);
        let r01 = on_paths(&pb, 3, per_path, 0, 1);
        r01.matmul(&r12.matmul(&s).expect("shape")).expect("shape")
    }

    /// Block-diagonal sum of `g` over `paths` copies.
    pub fn per_path(g: &CMatrix, paths: usize) -> CMatrix {
        let (r, c) = (g.nrows(), g.ncols());
        CMatrix::from_fn(SpaceSpec::single("out", r * paths), SpaceSpec::single("in", c * paths), |i, j| {
            if i / r == j / c {
                g.get(i % r, j % c)
            } else {
                ZERO
            }
        })
    }
}

/// Gate-level extension of the three-party dynamical-order circuit. The
/// photon's polarization is the ancilla: slice 2 copies the target onto it
/// and beam splitters route on it; slice 3 routes on it again and flips it
/// with a CNOT controlled by the target.
///
/// # Errors
/// `TruncationOverflow` from the Fock lifting.
pub fn grenoble_gate_extension(truncation: usize) -> Result<SequenceRep> {
    let paths = |t: i64, prefix: fn(usize) -> String, extra: usize| -> Result<Port> {
        Port::new(t, (0..3).map(|k| PortWire::new(&prefix(k), 2, extra)).collect(), truncation)
    };
    // modes of a three-wire port sorted by label: path-major, matching the gates
    let p1 = Port::single(PAST, 1, 1, truncation);
    let o1 = paths(2, ai, 1)?;
    let s3 = 1.0 / 3f64.sqrt();
    let split = CMatrix::from_fn(SpaceSpec::single("out", 6), SpaceSpec::single("in", 1), |r, _| {
        if r % 2 == 0 {
            C64::new(s3, 0.0)
        } else {
            ZERO
        }
    });
    let slice1 = functor_slice(&p1, &o1, &split)?;
    let i2 = paths(3, ao, 1)?;
    let o2 = paths(4, ai, 2)?;
    let copy_all = gates::per_path(&gates::copy(), 3);
    let v2 = gates::route(4, |l| l % 2).matmul(&copy_all)?;
    let slice2 = functor_slice(&i2, &o2, &v2)?;
    let i3 = paths(5, ao, 2)?;
    let o3 = paths(6, ai, 2)?;
    let v3 = gates::per_path(&gates::cnot(), 3).matmul(&gates::route(4, |l| l % 2))?;
    let slice3 = functor_slice(&i3, &o3, &v3)?;
    let i4 = paths(7, ao, 2)?;
    let o4 = Port::new(8, vec![PortWire::new(FUTURE, 1, 12)], truncation)?;
    // record (target, polarization) and the path of the last photon
    let v4 = CMatrix::from_fn(SpaceSpec::single("out", 12), SpaceSpec::single("in", 12), |r, c| {
        let (k, l) = (c / 4, c % 4);
        if r == l * 3 + k {
            ONE
        } else {
            ZERO
        }
    });
    let slice4 = functor_slice(&i4, &o4, &v4)?;
    Ok(SequenceRep {
        slices: vec![slice1, slice2, slice3, slice4],
        readout: Some(Readout { future_wire: FUTURE.into(), alpha_mem: 1 }),
    })
}

/// Build any variant.
///
/// # Errors
/// As the individual constructions; `DimMismatch` for the gate variant on a
/// circuit that is not the three-party two-level one.
pub fn build_extension(q: &QcQc, variant: Variant, truncation: usize) -> Result<SequenceRep> {
    match variant {
        Variant::Isometric => isometric_extension(q, &ExtensionPolicy { rest: RestPolicy::Forward, truncation }),
        Variant::Projective => projective_extension(q, truncation),
        Variant::Photonic => photonic_extension(q, truncation),
        Variant::Gates => {
            if *q != crate::qcqc::grenoble() {
                return Err(QcError::DimMismatch("the gate construction exists for the built-in three-party circuit only".into()));
            }
            grenoble_gate_extension(truncation)
        }
    }
}

/// Local operation on a timestamped wire pair: `AI_k @ t` to `AO_k @ t + 1`
/// for every `t` of `in_times`, each time slot truncated at `truncation`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLocalOp {
    pub base: LocalOperation,
    pub in_times: TimestampSet,
    pub truncation: usize,
}

/// Ports and dense spaces of an extended local operation.
fn local_ports(base: &LocalOperation, times: &TimestampSet, truncation: usize) -> (Vec<Port>, Vec<Port>) {
    let k = base.party;
    let (d_out, d_in) = (base.kraus.nrows(), base.kraus.ncols());
    let ins = times.times().iter().map(|&t| Port::single(&ai(k), d_in, t, truncation)).collect();
    let outs = times.times().iter().map(|&t| Port::single(&ao(k), d_out, t + 1, truncation)).collect();
    (ins, outs)
}

fn ports_space(ports: &[Port], dir: &str) -> Result<SpaceSpec> {
    let pairs: Vec<(String, usize)> = ports.iter().map(|p| (p.label(dir), p.basis().len())).collect();
    SpaceSpec::from_pairs(&pairs.iter().map(|(l, d)| (l.as_str(), *d)).collect::<Vec<_>>())
}

/// Extend a local operation to all times of `in_times`.
pub fn extend_local(a: &LocalOperation, in_times: TimestampSet, truncation: usize) -> ExtendedLocalOp {
    ExtendedLocalOp { base: a.clone(), in_times, truncation }
}

impl ExtendedLocalOp {
    pub fn ports(&self) -> (Vec<Port>, Vec<Port>) {
        local_ports(&self.base, &self.in_times, self.truncation)
    }

    /// One slot: `Ω ↦ Ω` (when `vacuum`), one message `↦ A`, more `↦ 0`.
    fn slot_matrix(&self, vacuum: bool) -> CMatrix {
        let a = &self.base.kraus;
        let (d_out, d_in) = (a.nrows(), a.ncols());
        let ni = FockBasis::from_modes((0..d_in).map(|i| Mode::new("x", 0, i)).collect(), self.truncation).len();
        let no = FockBasis::from_modes((0..d_out).map(|i| Mode::new("x", 0, i)).collect(), self.truncation).len();
        CMatrix::from_fn(SpaceSpec::single("out", no), SpaceSpec::single("in", ni), |r, c| {
            if r == 0 && c == 0 {
                if vacuum {
                    ONE
                } else {
                    ZERO
                }
            } else if (1..=d_out).contains(&r) && (1..=d_in).contains(&c) {
                a.get(r - 1, c - 1)
            } else {
                ZERO
            }
        })
    }

    /// `⊗_t (A ⊗ |t+1⟩⟨t| + |Ω⟩⟨Ω|)` with multi-message slots sent to zero.
    ///
    /// # Errors
    /// Label errors only.
    pub fn product_form(&self) -> Result<CMatrix> {
        let (ins, outs) = self.ports();
        let slot = self.slot_matrix(true);
        let mut acc = CMatrix::identity(SpaceSpec::trivial());
        for (i, o) in ins.iter().zip(&outs) {
            let f = slot.with_spaces(SpaceSpec::single(&o.label("out"), slot.nrows()), SpaceSpec::single(&i.label("in"), slot.ncols()))?;
            acc = tensor(&acc, &f)?;
        }
        Ok(acc)
    }

    /// `Σ_t A ⊗ |t+1⟩⟨t|` on the one-message sector, with `vacuum` adding
    /// `|Ω⟩⟨Ω|`; everything else is sent to zero.
    ///
    /// # Errors
    /// Label errors only.
    pub fn sum_form(&self, vacuum: bool) -> Result<CMatrix> {
        let (ins, outs) = self.ports();
        let (rs, cs) = (ports_space(&outs, "out")?, ports_space(&ins, "in")?);
        let slot = self.slot_matrix(false);
        let mut m = CMatrix::zeros(rs.clone(), cs.clone());
        if vacuum {
            m.set(0, 0, ONE);
        }
        let nt = ins.len();
        for t in 0..nt {
            for ci in 1..slot.ncols() {
                for ri in 1..slot.nrows() {
                    let x = slot.get(ri, ci);
                    if x == ZERO {
                        continue;
                    }
                    let mut cm = vec![0; nt];
                    cm[t] = ci;
                    let mut rm = vec![0; nt];
                    rm[t] = ri;
                    m.set(rs.flatten(&rm), cs.flatten(&cm), x);
                }
            }
        }
        Ok(m)
    }
}

/// Complete a family of extended outcome operators: their one-message
/// parts, the projector onto the all-vacuum state and the time-shifted
/// identity on configurations with two or more messages.
///
/// # Errors
/// `IncompleteKraus` when `Σ A†A` deviates from the identity by more than
/// `1e-10`; `DimMismatch` for unequal shapes, or input and output dimensions
/// that differ (the multi-message block needs equal spaces).
pub fn complete_kraus(ops: &[ExtendedLocalOp]) -> Result<Vec<CMatrix>> {
    let first = ops.first().ok_or(QcError::EmptyKrausSet)?;
    let (d_out, d_in) = (first.base.kraus.nrows(), first.base.kraus.ncols());
    if ops.iter().any(|o| o.base.kraus.nrows() != d_out || o.base.kraus.ncols() != d_in || o.in_times != first.in_times) {
        return Err(QcError::DimMismatch("outcome operators disagree in shape or times".into()));
    }
    if d_out != d_in {
        return Err(QcError::DimMismatch("multi-message completion needs equal input and output dimensions".into()));
    }
    let mut sum = CMatrix::zeros(first.base.kraus.cols().clone(), first.base.kraus.cols().clone());
    for o in ops {
        sum = sum.add(&o.base.kraus.adjoint().matmul(&o.base.kraus)?)?;
    }
    let dev = sum.sub(&CMatrix::identity(sum.rows().clone()))?.max_abs();
    if dev > 1e-10 {
        return Err(QcError::IncompleteKraus(dev));
    }
    let mut out = Vec::new();
    for o in ops {
        out.push(o.sum_form(false)?);
    }
    let (ins, outs) = first.ports();
    let (rs, cs) = (ports_space(&outs, "out")?, ports_space(&ins, "in")?);
    let mut vac = CMatrix::zeros(rs.clone(), cs.clone());
    vac.set(0, 0, ONE);
    out.push(vac);
    // with equal message dimensions input and output slots share their basis order
    let bases: Vec<FockBasis> = ins.iter().map(Port::basis).collect();
    let multi = CMatrix::from_fn(rs, cs.clone(), |r, c| {
        let total: usize = cs.unflatten(c).iter().zip(&bases).map(|(i, b)| b.config(*i).len()).sum();
        if r == c && total >= 2 {
            ONE
        } else {
            ZERO
        }
    });
    out.push(multi);
    Ok(out)
}

/// Box-side outcome of running one closed circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxRun {
    /// Amplitudes identified with `F ⊗ α_F`.
    pub future: CVector,
    /// Norm squared of everything that is not a clean future message.
    pub stray: f64,
    /// Fraction of the output norm squared without abort flags.
    pub accept_probability: f64,
    /// Largest number of messages seen on one party wire at one time.
    pub max_messages_per_slot: usize,
}

/// Apply the per-slot product form of the local operations to an output
/// configuration of one slice, yielding input configurations of the next.
#[allow(clippy::type_complexity)]
fn apply_locals(
    locals: &BTreeMap<usize, &CMatrix>,
    from: &Port,
    bo: &FockBasis,
    to: &Port,
    bi: &FockBasis,
    cfg: &[u32],
) -> Result<(Vec<(usize, C64)>, Vec<u32>, usize)> {
    // split the configuration by wire; non-party wires are residue
    let mut per_wire: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut residue = Vec::new();
    for &mi in cfg {
        let md = &bo.modes()[mi as usize];
        if md.wire.starts_with("AI") {
            per_wire.entry(md.wire.as_str()).or_default().push(md.idx);
        } else {
            residue.push(mi);
        }
    }
    let busiest = per_wire.values().map(Vec::len).max().unwrap_or(0);
    let mut acc: Vec<(Vec<u32>, C64)> = vec![(Vec::new(), ONE)];
    for (wire, idxs) in per_wire {
        if idxs.len() != 1 {
            return Ok((Vec::new(), residue, busiest));
        }
        let k = party_of(wire).expect("party wire");
        let a = locals.get(&k).ok_or_else(|| QcError::DimMismatch(format!("no local operation for party {}", k + 1)))?;
        let wi = from.wire(wire).expect("wire of port");
        let wo = to
            .wire(&ao(k))
            .ok_or_else(|| QcError::DimMismatch(format!("next slice has no input wire {}", ao(k))))?;
        if wi.extra_dim != wo.extra_dim {
            return Err(QcError::DimMismatch(format!("extra dimension changes across party {}", k + 1)));
        }
        let (t, e) = (idxs[0] / wi.extra_dim, idxs[0] % wi.extra_dim);
        let mut next = Vec::new();
        for (modes, amp) in &acc {
            for t2 in 0..wo.target_dim {
                let x = if t2 < a.nrows() && t < a.ncols() { a.get(t2, t) } else { ZERO };
                if x == ZERO {
                    continue;
                }
                let mut m2 = modes.clone();
                m2.push(mode_idx(bi, &wo.label, to.time, t2 * wo.extra_dim + e));
                next.push((m2, amp * x));
            }
        }
        acc = next;
    }
    let mut out = Vec::new();
    for (modes, amp) in acc {
        out.push((config_of(bi, modes)?, amp));
    }
    Ok((out, residue, busiest))
}

/// Run the box closed by the given local operations on a past state, time
/// slice by time slice.
///
/// # Errors
/// `DimMismatch` for interface mismatches or a box without readout.
pub fn run_closed(seq: &SequenceRep, q: &QcQc, locals: &[LocalOperation], past: &CVector) -> Result<BoxRun> {
    let readout = seq.readout.as_ref().ok_or_else(|| QcError::DimMismatch("box has no readout".into()))?;
    let local_map: BTreeMap<usize, &CMatrix> = locals.iter().map(|l| (l.party, &l.kraus)).collect();
    let first = &seq.slices[0];
    let b0 = first.input.basis();
    let pw = first.input.wire(PAST).ok_or_else(|| QcError::DimMismatch("first slice lacks the past wire".into()))?;
    if pw.dim() != past.len() {
        return Err(QcError::DimMismatch("past state dimension".into()));
    }
    // key: (residue history, input configuration, memory)
    type Key = (Vec<(usize, Vec<u32>)>, usize, usize);
    let mut state: HashMap<Key, C64> = HashMap::new();
    for (t, &x) in past.data().iter().enumerate() {
        if x != ZERO {
            let c = config_of(&b0, vec![mode_idx(&b0, PAST, first.input.time, t)])?;
            *state.entry((Vec::new(), c, 0)).or_insert(ZERO) += x;
        }
    }
    let mut busiest = 1usize;
    let last = seq.slices.len() - 1;
    // (per-wire final messages, memory, abort flag) -> amplitude
    type FinalKey = (Vec<(usize, Vec<u32>)>, usize, usize);
    let mut finals: HashMap<FinalKey, C64> = HashMap::new();
    for (s, sl) in seq.slices.iter().enumerate() {
        let bo = sl.output.basis();
        let mut after: HashMap<Key, C64> = HashMap::new();
        for ((res, c, m), amp) in &state {
            for (oc, m2, v) in seq.apply_slice(s, *c, *m) {
                *after.entry((res.clone(), oc, m2)).or_insert(ZERO) += amp * v;
            }
        }
        if s == last {
            finals = after;
            break;
        }
        let next = &seq.slices[s + 1];
        let bi = next.input.basis();
        let mut moved: HashMap<Key, C64> = HashMap::new();
        for ((res, oc, m), amp) in after {
            let (targets, residue, b) = apply_locals(&local_map, &sl.output, &bo, &next.input, &bi, bo.config(oc))?;
            busiest = busiest.max(b);
            let mut res2 = res.clone();
            if !residue.is_empty() {
                res2.push((s, residue));
            }
            for (ic, x) in targets {
                *moved.entry((res2.clone(), ic, m)).or_insert(ZERO) += amp * x;
            }
        }
        state = moved;
    }
    let fs = SpaceSpec::from_pairs(&[(FUTURE, q.future_dim()), ("alphaF", q.alpha_f())])?;
    let mut future = CVector::zeros(fs);
    let bo = seq.slices[last].output.basis();
    let fw = seq.slices[last]
        .output
        .wire(&readout.future_wire)
        .ok_or_else(|| QcError::DimMismatch("last slice lacks the future wire".into()))?;
    if fw.target_dim != q.future_dim() || fw.extra_dim * readout.alpha_mem != q.alpha_f() {
        return Err(QcError::DimMismatch("readout does not match the circuit's future".into()));
    }
    let (mut stray, mut aborted) = (0.0, 0.0);
    for ((res, oc, m), amp) in finals {
        let cfg = bo.config(oc);
        let only_future = cfg.len() == 1 && bo.modes()[cfg[0] as usize].wire == readout.future_wire;
        if res.is_empty() && only_future && m < readout.alpha_mem {
            let idx = bo.modes()[cfg[0] as usize].idx;
            let (f, e) = (idx / fw.extra_dim, idx % fw.extra_dim);
            future.data_mut()[f * q.alpha_f() + e * readout.alpha_mem + m] += amp;
        } else {
            stray += amp.norm_sqr();
            let flagged = !res.is_empty() || cfg.iter().any(|&mi| bo.modes()[mi as usize].wire == ABORT);
            if flagged {
                aborted += amp.norm_sqr();
            }
        }
    }
    let total = future.norm_sqr() + stray;
    let accept_probability = if total > 0.0 { 1.0 - aborted / total } else { 1.0 };
    Ok(BoxRun { future, stray, accept_probability, max_messages_per_slot: busiest })
}

/// Result of comparing a box against a circuit over random local operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub max_stray: f64,
    pub min_accept_probability: f64,
    pub ok: bool,
}

/// Compare the box (closed by extended local operations, fed `|ψ, t=1⟩`)
/// with the circuit's process vector linked with the same operations.
/// Samples alternate between unitaries (2 in 5) and random contractions.
///
/// # Errors
/// Interface mismatches between box and circuit.
pub fn verify_extension(seq: &SequenceRep, q: &QcQc, trials: usize, tol: f64, seed: u64) -> Result<ExtensionReport> {
    let w = process_vector(q)?;
    let mut rng = sampling::rng(seed);
    let n_unitary = trials * 2 / 5;
    let (mut dev, mut stray, mut accept): (f64, f64, f64) = (0.0, 0.0, 1.0);
    for trial in 0..trials {
        let locals: Vec<LocalOperation> = q
            .dims()
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let (o, i) = (SpaceSpec::single("o", d.d_out), SpaceSpec::single("i", d.d_in));
                let m = if trial < n_unitary && d.d_out >= d.d_in {
                    sampling::random_isometry(&o, &i, &mut rng)
                } else {
                    sampling::random_contraction(&o, &i, &mut rng)
                };
                LocalOperation::new(k, m)
            })
            .collect();
        let past = sampling::random_state(&SpaceSpec::single(PAST, q.past_dim()), &mut rng);
        let want = future_vector(&w, &locals, &past)?;
        let got = run_closed(seq, q, &locals, &past)?;
        dev = dev.max(got.future.max_abs_diff(&want)?).max(got.stray.sqrt());
        stray = stray.max(got.stray);
        accept = accept.min(got.accept_probability);
    }
    Ok(ExtensionReport { trials, max_deviation: dev, max_stray: stray, min_accept_probability: accept, ok: dev <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causalbox::{check_causality, check_causality_seeded, CausalBox};
    use crate::fock::fock_functor;
    use crate::qcqc::{grenoble, quantum_switch};

    fn pauli_x() -> CMatrix {
        CMatrix::from_fn(SpaceSpec::single("o", 2), SpaceSpec::single("i", 2), |r, c| if r != c { ONE } else { ZERO })
    }

    #[test]
    fn isometric_grenoble_slices_and_equivalence() {
        let q = grenoble();
        let seq = isometric_extension(&q, &ExtensionPolicy::default()).unwrap();
        seq.validate(1e-10).unwrap();
        let r = verify_extension(&seq, &q, 6, 1e-9, 1).unwrap();
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn park_policy_also_extends() {
        let q = quantum_switch();
        let seq = isometric_extension(&q, &ExtensionPolicy { rest: RestPolicy::Park, truncation: 2 }).unwrap();
        seq.validate(1e-10).unwrap();
        assert!(verify_extension(&seq, &q, 5, 1e-9, 2).unwrap().ok);
    }

    #[test]
    fn photonic_switch_matches() {
        let q = quantum_switch();
        let seq = photonic_extension(&q, 2).unwrap();
        seq.validate(1e-10).unwrap();
        let r = verify_extension(&seq, &q, 6, 1e-9, 3).unwrap();
        assert!(r.ok, "{r:?}");
        let cb = CausalBox::Sequence(seq);
        assert!(check_causality(&cb, 1e-10).unwrap().ok);
        // the direct route enumerates every input tuple
        assert!(check_causality_seeded(&cb, 1e-10, 5).unwrap().ok);
    }

    #[test]
    fn gate_extension_matches_grenoble() {
        let seq = grenoble_gate_extension(1).unwrap();
        seq.validate(1e-10).unwrap();
        let r = verify_extension(&seq, &grenoble(), 6, 1e-9, 4).unwrap();
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn wrong_phase_is_detected() {
        let q = quantum_switch();
        let mut seq = isometric_extension(&q, &ExtensionPolicy::default()).unwrap();
        // relative phase on the branch that reaches the last slice with the first control
        let ph = C64::from_polar(1.0, 0.7);
        let last = seq.slices.last_mut().unwrap();
        let mut op = SparseOp::zeros(last.op.nrows(), last.op.ncols());
        for j in 0..last.op.ncols() {
            for &(i, v) in last.op.column(j) {
                op.add(i, j, if j % last.mem_in == 0 { v * ph } else { v });
            }
        }
        last.op = op;
        let r = verify_extension(&seq, &q, 10, 1e-9, 9).unwrap();
        assert!(!r.ok && r.max_deviation > 1e-3, "{r:?}");
    }

    #[test]
    fn projective_abort_on_two_messages() {
        let q = grenoble();
        let seq = projective_extension(&q, 2).unwrap();
        seq.validate(1e-10).unwrap();
        let r = verify_extension(&seq, &q, 4, 1e-9, 5).unwrap();
        assert!(r.ok && (r.min_accept_probability - 1.0).abs() < 1e-10, "{r:?}");
        // two messages on the past wire: the first slice raises the flag
        let s1 = &seq.slices[0];
        let (bi, bo) = (s1.input.basis(), s1.output.basis());
        let two = bi.index_of(&[0, 0]).unwrap();
        let mut flagged = 0.0;
        for (oc, _, v) in seq.apply_slice(0, two, 0) {
            if bo.config(oc).iter().any(|&m| bo.modes()[m as usize].wire == ABORT) {
                flagged += v.norm_sqr();
            }
        }
        assert!((flagged - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gate_occupation_formulas() {
        // two-mode and four-mode bases of up to three photons
        let modes = |n: usize| (0..n).map(|i| Mode::new("w", 0, i)).collect::<Vec<_>>();
        let b2 = FockBasis::from_modes(modes(2), 3);
        let b4 = FockBasis::from_modes(modes(4), 3);
        let copy = fock_functor(&gates::copy(), &b2, &b4).unwrap();
        // |m, n⟩ -> |m, 0, 0, n⟩ for every occupation
        for j in 0..b2.len() {
            let o = b2.occupation(j);
            let count = |i: usize| o.counts().get(&Mode::new("w", 0, i)).copied().unwrap_or(0);
            let target = crate::fock::OccupationState::from_counts(
                [(Mode::new("w", 0, 0), count(0)), (Mode::new("w", 0, 3), count(1))].into_iter().filter(|x| x.1 > 0),
            );
            let i = b4.index_of_occupation(&target).unwrap();
            assert!((copy.get(i, j) - ONE).norm() < 1e-12);
        }
        assert!(crate::linalg::is_isometry(&copy, 1e-12).ok);
        let cnot = fock_functor(&gates::cnot(), &b4, &b4).unwrap();
        assert!(crate::linalg::is_isometry(&cnot, 1e-12).ok);
        // |m, n, k, l⟩ -> |m, n, l, k⟩
        let j = b4.index_of(&[2, 2, 3]).unwrap();
        let i = b4.index_of(&[2, 3, 3]).unwrap();
        assert!((cnot.get(i, j) - ONE).norm() < 1e-12);
        // beam splitter on two paths: |1,0⟩|0,0⟩ stays, |m,n⟩|k,l⟩ -> |m,l⟩|k,n⟩
        let pbs = fock_functor(&gates::pbs(2, |l| l), &b4, &b4).unwrap();
        assert!(crate::linalg::is_isometry(&pbs, 1e-12).ok);
        let j = b4.index_of(&[0]).unwrap();
        assert!((pbs.get(j, j) - ONE).norm() < 1e-12);
        let j = b4.index_of(&[0, 1, 1]).unwrap(); // m=1, n=2
        let i = b4.index_of(&[0, 3, 3]).unwrap(); // m=1, l=2
        assert!((pbs.get(i, j) - ONE).norm() < 1e-12);
    }

    #[test]
    fn extended_local_forms_agree_on_one_message() {
        let a = LocalOperation::new(0, pauli_x());
        let e = extend_local(&a, TimestampSet::new(vec![2, 4]).unwrap(), 2);
        let p = e.product_form().unwrap();
        let s = e.sum_form(true).unwrap();
        let (ins, _) = e.ports();
        let bases: Vec<FockBasis> = ins.iter().map(Port::basis).collect();
        for c in 0..p.ncols() {
            let total: usize = p.cols().unflatten(c).iter().zip(&bases).map(|(i, b)| b.config(*i).len()).sum();
            if total <= 1 {
                for r in 0..p.nrows() {
                    assert_eq!(p.get(r, c), s.get(r, c));
                }
            }
        }
    }

    #[test]
    fn completion_of_identity_and_projectors() {
        let times = TimestampSet::new(vec![2, 4]).unwrap();
        let id = CMatrix::identity(SpaceSpec::single("x", 2));
        let set = complete_kraus(&[extend_local(&LocalOperation::new(0, id), times.clone(), 2)]).unwrap();
        assert_eq!(set.len(), 3);
        let check = |set: &[CMatrix]| {
            let mut sum = CMatrix::zeros(set[0].cols().clone(), set[0].cols().clone());
            for k in set {
                sum = sum.add(&k.adjoint().matmul(k).unwrap()).unwrap();
            }
            sum.sub(&CMatrix::identity(sum.rows().clone())).unwrap().max_abs()
        };
        assert_eq!(check(&set), 0.0);
        let p0 = CMatrix::from_fn(SpaceSpec::single("o", 2), SpaceSpec::single("i", 2), |r, c| if r == 0 && c == 0 { ONE } else { ZERO });
        let p1 = CMatrix::from_fn(SpaceSpec::single("o", 2), SpaceSpec::single("i", 2), |r, c| if r == 1 && c == 1 { ONE } else { ZERO });
        let set = complete_kraus(&[
            extend_local(&LocalOperation::new(0, p0.clone()), times.clone(), 2),
            extend_local(&LocalOperation::new(0, p1), times.clone(), 2),
        ])
        .unwrap();
        assert!(check(&set) <= 1e-12);
        assert!(matches!(
            complete_kraus(&[extend_local(&LocalOperation::new(0, p0), times, 2)]),
            Err(QcError::IncompleteKraus(_))
        ));
    }

    #[test]
    fn vacuum_input_gives_shifted_vacuum() {
        let q = quantum_switch();
        let seq = photonic_extension(&q, 1).unwrap();
        for s in 0..seq.slices.len() {
            let out: Vec<_> = seq.apply_slice(s, 0, 0).collect();
            assert_eq!(out, vec![(0, 0, ONE)]);
        }
    }
}
