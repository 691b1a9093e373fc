// SPDX-License-Identifier: Apache-2.0
//! A circuit as a coarse-graining of its causal box.
//!
//! The circuit is read as a map `P ⊗ AO_1 ⊗ … ⊗ AO_N → AI_1 ⊗ … ⊗ AI_N ⊗ F ⊗ α_F`.
//! The encoder spreads the parties' outputs over every order, placing the
//! message of the party at slot `n` at time `2n + 1` with weight `λ`. The box
//! then runs on those messages, and the decoder keeps only the branches in
//! which every slot saw exactly the message its control expected. It undoes
//! `λ` order by order and forgets the timestamps.
//!
//! Signalling is probed with random unitaries and a replace channel on the
//! source. Witnesses found on the circuit are replayed on the box, applying
//! the same map at every time. Acyclicity is checked on the wiring graph of
//! slices and extended local operations.

use std::collections::{BTreeMap, HashMap};

use itertools::Itertools;
use petgraph::algo::{kosaraju_scc, toposort};
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::causalbox::SequenceRep;
use crate::error::{QcError, Result};
use crate::extension::{party_of, ExtendedLocalOp};
use crate::linalg::{choi_matrix, link_matrices, partial_trace, CMatrix, CVector, SpaceSpec, C64, ONE, ZERO};
use crate::qcqc::{ai, ao, order_term, process_vector, QcQc, FUTURE, PAST};
use crate::sampling;

/// Liveness threshold for order branches.
const LIVE_TOL: f64 = 1e-12;

/// Weight of one order for one basis input of the parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub order: Vec<usize>,
    pub index: Vec<usize>,
    pub value: C64,
}

/// Encoder weights; absent entries are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub lambdas: Vec<LambdaEntry>,
}

fn w_in_labels(n: usize) -> Vec<String> {
    std::iter::once(PAST.to_string()).chain((0..n).map(ao)).collect()
}

fn w_out_labels(n: usize) -> Vec<String> {
    (0..n).map(ai).chain([FUTURE.to_string(), "alphaF".to_string()]).collect()
}

fn sub_space(space: &SpaceSpec, labels: &[String]) -> Result<SpaceSpec> {
    let pairs: Vec<(&str, usize)> = labels.iter().map(|l| Ok((l.as_str(), space.dim_of(l)?))).collect::<Result<_>>()?;
    SpaceSpec::from_pairs(&pairs)
}

/// Read a vector on inputs ⊗ outputs as the map it is the Choi vector of.
fn vector_to_map(v: &CVector, ins: &[String], outs: &[String]) -> Result<CMatrix> {
    let order: Vec<&str> = ins.iter().chain(outs).map(String::as_str).collect();
    let v = v.reorder(&order)?;
    let (is, os) = (sub_space(v.space(), ins)?, sub_space(v.space(), outs)?);
    let od = os.dim();
    Ok(CMatrix::from_fn(os, is, |o, i| v.data()[i * od + o]))
}

/// The circuit as a map from `P ⊗ AO` to `AI ⊗ F ⊗ α_F`.
///
/// # Errors
/// Link errors of the process vector.
pub fn process_map(q: &QcQc) -> Result<CMatrix> {
    let n = q.n_parties();
    vector_to_map(&process_vector(q)?.vec, &w_in_labels(n), &w_out_labels(n))
}

/// One order's contribution to [`process_map`], `None` if the order uses an
/// absent operator.
///
/// # Errors
/// Link errors.
pub fn order_map(q: &QcQc, order: &[usize]) -> Result<Option<CMatrix>> {
    let n = q.n_parties();
    order_term(q, order)?.map(|t| vector_to_map(&t, &w_in_labels(n), &w_out_labels(n))).transpose()
}

fn ao_space(q: &QcQc) -> Result<SpaceSpec> {
    let labels: Vec<String> = (0..q.n_parties()).map(ao).collect();
    let pairs: Vec<(&str, usize)> = labels.iter().zip(q.dims()).map(|(l, d)| (l.as_str(), d.d_out)).collect();
    SpaceSpec::from_pairs(&pairs)
}

fn all_orders(n: usize) -> Vec<Vec<usize>> {
    (0..n).permutations(n).collect()
}

/// Whether an order's branch survives for a given parties' output index,
/// for some past input.
fn live(wk: &CMatrix, ao_index: usize, ao_dim: usize) -> bool {
    (0..wk.ncols() / ao_dim).any(|p| {
        let c = p * ao_dim + ao_index;
        (0..wk.nrows()).map(|r| wk.get(r, c).norm_sqr()).sum::<f64>().sqrt() > LIVE_TOL
    })
}

impl EncoderSpec {
    /// `λ = 1/√(number of live orders)` on live branches, zero elsewhere.
    ///
    /// # Errors
    /// Link errors.
    pub fn uniform(q: &QcQc) -> Result<Self> {
        let space = ao_space(q)?;
        let orders = all_orders(q.n_parties());
        let maps: Vec<Option<CMatrix>> = orders.iter().map(|o| order_map(q, o)).collect::<Result<_>>()?;
        let mut lambdas = Vec::new();
        for i in 0..space.dim() {
            let alive: Vec<usize> =
                (0..orders.len()).filter(|&k| maps[k].as_ref().is_some_and(|m| live(m, i, space.dim()))).collect();
            // an input that no order carries still needs a unit-norm image
            let chosen = if alive.is_empty() { vec![0] } else { alive };
            let v = C64::new(1.0 / (chosen.len() as f64).sqrt(), 0.0);
            for k in chosen {
                lambdas.push(LambdaEntry { order: orders[k].clone(), index: space.unflatten(i), value: v });
            }
        }
        Ok(Self { lambdas })
    }

    pub fn lambda(&self, order: &[usize], index: &[usize]) -> C64 {
        self.lambdas.iter().find(|e| e.order == order && e.index == index).map_or(ZERO, |e| e.value)
    }

    /// # Errors
    /// `InvalidLambda` if some index does not have unit total weight, or an
    /// entry names an unknown order or index.
    pub fn check(&self, q: &QcQc) -> Result<()> {
        let space = ao_space(q)?;
        let n = q.n_parties();
        let mut norms = vec![0.0; space.dim()];
        for e in &self.lambdas {
            let order_ok = e.order.len() == n && e.order.iter().sorted().copied().eq(0..n);
            let index_ok = e.index.len() == n && e.index.iter().zip(q.dims()).all(|(i, d)| *i < d.d_out);
            if !order_ok || !index_ok {
                return Err(QcError::InvalidLambda(format!("entry {:?} / {:?} out of range", e.order, e.index)));
            }
            norms[space.flatten(&e.index)] += e.value.norm_sqr();
        }
        for (i, s) in norms.iter().enumerate() {
            if (s - 1.0).abs() > 1e-10 {
                return Err(QcError::InvalidLambda(format!("weights for index {:?} sum to {s}", space.unflatten(i))));
            }
        }
        Ok(())
    }
}

/// Encoder as a dense map from `AO_1 ⊗ … ⊗ AO_N` to `order ⊗ AO_1 ⊗ … ⊗ AO_N`,
/// where the order factor fixes at which time each party's message arrives.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub orders: Vec<Vec<usize>>,
    pub matrix: CMatrix,
}

impl Encoder {
    /// `max |Enc†Enc − 1|`.
    pub fn isometry_deviation(&self) -> f64 {
        let g = self.matrix.adjoint().matmul(&self.matrix).expect("shape");
        g.sub(&CMatrix::identity(g.rows().clone())).expect("shape").max_abs()
    }

    fn ao_dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// # Errors
/// `InvalidLambda` from [`EncoderSpec::check`].
pub fn build_encoder(q: &QcQc, spec: &EncoderSpec) -> Result<Encoder> {
    spec.check(q)?;
    let space = ao_space(q)?;
    let orders = all_orders(q.n_parties());
    let rows = SpaceSpec::single("order", orders.len()).concat(&space)?;
    let d = space.dim();
    let mut m = CMatrix::zeros(rows, space.clone());
    for (o, order) in orders.iter().enumerate() {
        for i in 0..d {
            m.set(o * d + i, i, spec.lambda(order, &space.unflatten(i)));
        }
    }
    Ok(Encoder { orders, matrix: m })
}

/// Decoder: projection onto the branches without control mismatch, one
/// rescaling map per order on `AI ⊗ F ⊗ α_F`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub orders: Vec<Vec<usize>>,
    pub rescale: Vec<CMatrix>,
}

/// The rescaling of each order is the linear map sending `λ`-weighted
/// images to unweighted ones, fitted on the order's image.
///
/// # Errors
/// `DecoderSingular` when a live branch has zero weight, `InvalidLambda` as
/// in [`EncoderSpec::check`].
pub fn build_decoder(q: &QcQc, spec: &EncoderSpec) -> Result<Decoder> {
    spec.check(q)?;
    let space = ao_space(q)?;
    let d = space.dim();
    let orders = all_orders(q.n_parties());
    let mut rescale = Vec::new();
    for order in &orders {
        let Some(y) = order_map(q, order)? else {
            let s = sub_space(process_vector(q)?.vec.space(), &w_out_labels(q.n_parties()))?;
            rescale.push(CMatrix::zeros(s.clone(), s));
            continue;
        };
        let mut x = y.clone();
        for c in 0..y.ncols() {
            let lam = spec.lambda(order, &space.unflatten(c % d));
            let norm: f64 = (0..y.nrows()).map(|r| y.get(r, c).norm_sqr()).sum::<f64>().sqrt();
            if norm > LIVE_TOL && lam == ZERO {
                return Err(QcError::DecoderSingular(format!("order {order:?} index {:?}", space.unflatten(c % d))));
            }
            for r in 0..y.nrows() {
                x.set(r, c, y.get(r, c) * lam);
            }
        }
        let pinv = x.to_nalgebra().pseudo_inverse(1e-12).map_err(|e| QcError::DecoderSingular(e.to_string()))?;
        let dmat = y.to_nalgebra() * pinv;
        rescale.push(CMatrix::from_nalgebra(y.rows().clone(), y.rows().clone(), &dmat)?);
    }
    Ok(Decoder { orders, rescale })
}

fn require_internal_control(seq: &SequenceRep, q: &QcQc) -> Result<()> {
    let readout = seq.readout.as_ref().ok_or_else(|| QcError::DimMismatch("box has no readout".into()))?;
    let plain = seq.slices.iter().all(|s| s.input.wires.iter().chain(&s.output.wires).all(|w| w.extra_dim == 1));
    if readout.alpha_mem != q.alpha_f() || !plain || seq.slices.len() != q.n_parties() + 1 {
        return Err(QcError::DimMismatch("the encoder needs a box that keeps control and ancilla internal".into()));
    }
    Ok(())
}

/// Per-slice input configurations for past index `p`, parties' outputs `i`
/// arriving in `order`.
fn encoded_inputs(seq: &SequenceRep, order: &[usize], p: usize, i: &[usize]) -> Result<Vec<usize>> {
    let one = |s: usize, wire: &str, idx: usize| -> Result<usize> {
        let port = &seq.slices[s].input;
        let b = port.basis();
        let m = b.mode_index(&port.mode(wire, idx)).ok_or_else(|| QcError::LabelNotFound(format!("{wire}[{idx}]")))?;
        b.index_of(&[m as u32]).ok_or(QcError::TruncationOverflow { messages: 1, truncation: b.truncation() })
    };
    let mut v = vec![one(0, PAST, p)?];
    for (s, &k) in order.iter().enumerate() {
        v.push(one(s + 1, &ao(k), i[k])?);
    }
    Ok(v)
}

type OutKey = (Vec<usize>, usize);

/// Run the open box on one tuple of input configurations.
fn run_open(seq: &SequenceRep, inputs: &[usize]) -> HashMap<OutKey, C64> {
    let mut state: HashMap<OutKey, C64> = HashMap::from([((Vec::new(), 0), ONE)]);
    for (s, &c) in inputs.iter().enumerate() {
        let mut next: HashMap<OutKey, C64> = HashMap::new();
        for ((outs, m), amp) in &state {
            for (oc, m2, v) in seq.apply_slice(s, c, *m) {
                let mut o2 = outs.clone();
                o2.push(oc);
                *next.entry((o2, m2)).or_insert(ZERO) += amp * v;
            }
        }
        state = next;
    }
    state.retain(|_, a| *a != ZERO);
    state
}

/// Order and output index of a branch in the correct sector, if it is one.
fn sector(seq: &SequenceRep, q: &QcQc, orders: &[Vec<usize>], out_space: &SpaceSpec, key: &OutKey) -> Option<(usize, usize)> {
    let (outs, mem) = key;
    let n = q.n_parties();
    let readout = seq.readout.as_ref()?;
    let single = |s: usize| {
        let b = seq.slices[s].output.basis();
        let cfg = b.config(outs[s]);
        (cfg.len() == 1).then(|| b.modes()[cfg[0] as usize].clone())
    };
    let mut order = Vec::with_capacity(n);
    let mut multi = vec![0; n + 2];
    for s in 0..n {
        let m = single(s)?;
        let k = party_of(&m.wire).filter(|_| m.wire.starts_with("AI"))?;
        if m.idx >= q.dims()[k].d_in {
            return None;
        }
        order.push(k);
        multi[k] = m.idx;
    }
    let f = single(n)?;
    if f.wire != readout.future_wire || f.idx >= q.future_dim() || *mem >= readout.alpha_mem {
        return None;
    }
    multi[n] = f.idx;
    multi[n + 1] = *mem;
    let o = orders.iter().position(|x| *x == order)?;
    Some((o, out_space.flatten(&multi)))
}

/// Box output for one circuit input basis vector, through the encoder.
fn box_column(seq: &SequenceRep, enc: &Encoder, p: usize, ao_multi: &[usize], ao_flat: usize) -> Result<HashMap<OutKey, C64>> {
    let mut acc: HashMap<OutKey, C64> = HashMap::new();
    let d = enc.ao_dim();
    for (o, order) in enc.orders.iter().enumerate() {
        let lam = enc.matrix.get(o * d + ao_flat, ao_flat);
        if lam == ZERO {
            continue;
        }
        for (k, v) in run_open(seq, &encoded_inputs(seq, order, p, ao_multi)?) {
            *acc.entry(k).or_insert(ZERO) += lam * v;
        }
    }
    Ok(acc)
}

fn decode(seq: &SequenceRep, q: &QcQc, dec: &Decoder, out_space: &SpaceSpec, col: &HashMap<OutKey, C64>) -> Result<CVector> {
    let mut parts = vec![CVector::zeros(out_space.clone()); dec.orders.len()];
    for (key, amp) in col {
        if let Some((o, idx)) = sector(seq, q, &dec.orders, out_space, key) {
            parts[o].data_mut()[idx] += amp;
        }
    }
    let mut out = CVector::zeros(out_space.clone());
    for (d, part) in dec.rescale.iter().zip(&parts) {
        out = out.add(&d.with_spaces(out_space.clone(), out_space.clone())?.apply(part)?)?;
    }
    Ok(out)
}

/// Outcome of comparing `Dec ∘ C ∘ Enc` with the circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineGrainingReport {
    /// Largest entry of `W − Dec∘C∘Enc` over all basis inputs.
    pub max_deviation: f64,
    pub encoder_deviation: f64,
    /// Largest entry of the Gram difference between `C∘Enc` and `Dec∘C∘Enc`.
    pub decoder_gram_deviation: f64,
    pub ok: bool,
}

/// Compare the maps column by column on the basis of `P ⊗ AO`, which is
/// the comparison of their Choi vectors.
///
/// # Errors
/// `DimMismatch` when the box does not keep control and ancilla internal.
pub fn verify_finegraining(q: &QcQc, seq: &SequenceRep, enc: &Encoder, dec: &Decoder, tol: f64) -> Result<FineGrainingReport> {
    require_internal_control(seq, q)?;
    let w = process_map(q)?;
    let out_space = w.rows().clone();
    let ao = ao_space(q)?;
    let d = ao.dim();
    let mut dev: f64 = 0.0;
    let mut boxed = Vec::with_capacity(w.ncols());
    let mut decoded = Vec::with_capacity(w.ncols());
    for c in 0..w.ncols() {
        let (p, i) = (c / d, c % d);
        let col = box_column(seq, enc, p, &ao.unflatten(i), i)?;
        let got = decode(seq, q, dec, &out_space, &col)?;
        dev = dev.max(got.max_abs_diff(&w.column(c))?);
        boxed.push(col);
        decoded.push(got);
    }
    let mut gram: f64 = 0.0;
    for a in 0..boxed.len() {
        for b in 0..boxed.len() {
            let gb: C64 = boxed[a].iter().map(|(k, x)| x.conj() * boxed[b].get(k).copied().unwrap_or(ZERO)).sum();
            gram = gram.max((gb - decoded[a].inner(&decoded[b])?).norm());
        }
    }
    let enc_dev = enc.isometry_deviation();
    Ok(FineGrainingReport {
        max_deviation: dev,
        encoder_deviation: enc_dev,
        decoder_gram_deviation: gram,
        ok: dev <= tol && gram <= tol && enc_dev <= tol,
    })
}

/// Fine-graining of a single extended local operation: encode the input at
/// one of its times, decode the output one step later. Returns the largest
/// deviation from the base operator over all times.
///
/// # Errors
/// Label errors of the product form.
pub fn verify_local_finegraining(op: &ExtendedLocalOp) -> Result<f64> {
    let m = op.product_form()?;
    let (ins, _) = op.ports();
    let a = &op.base.kraus;
    let (ci, co) = (m.cols().clone(), m.rows().clone());
    let mut dev: f64 = 0.0;
    for t in 0..ins.len() {
        for i in 0..a.ncols() {
            // one message with index i at slot t, vacuum elsewhere
            let mut multi = vec![0; ins.len()];
            multi[t] = 1 + i;
            let col = ci.flatten(&multi);
            let mut got = vec![ZERO; a.nrows()];
            for r in 0..m.nrows() {
                let rm = co.unflatten(r);
                let only_t = rm.iter().enumerate().all(|(s, &x)| (s == t) == (x != 0));
                if only_t && (1..=a.nrows()).contains(&rm[t]) {
                    got[rm[t] - 1] += m.get(r, col);
                }
            }
            for (j, g) in got.iter().enumerate() {
                dev = dev.max((g - a.get(j, i)).norm());
            }
        }
    }
    Ok(dev)
}

/// Input and output subsets for a signalling test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignallingQuery {
    pub source: Vec<String>,
    pub sink: Vec<String>,
}

impl SignallingQuery {
    pub fn new(source: &[&str], sink: &[&str]) -> Self {
        Self { source: source.iter().map(|s| s.to_string()).collect(), sink: sink.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessKind {
    Unitary,
    Replace,
}

/// Local operation on the source, as Kraus operators on the source space.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub kind: WitnessKind,
    pub kraus: Vec<CMatrix>,
}

/// Result of a randomized signalling search. `witness` is `None` when no
/// sampled operation changed the marginal; that is not a proof of
/// no-signalling.
#[derive(Clone, Debug, PartialEq)]
pub struct SignallingResult {
    pub witness: Option<Witness>,
    pub trials: usize,
    pub max_deviation: f64,
}

/// Trial 0 replaces the source by `|0⟩`; later trials apply Haar unitaries.
pub fn sample_witness(source: &SpaceSpec, trial: usize, rng: &mut impl rand::Rng) -> Witness {
    if trial == 0 {
        let d = source.dim();
        let kraus = (0..d)
            .map(|i| CMatrix::from_fn(source.clone(), source.clone(), |r, c| if r == 0 && c == i { ONE } else { ZERO }))
            .collect();
        Witness { kind: WitnessKind::Replace, kraus }
    } else {
        Witness { kind: WitnessKind::Unitary, kraus: vec![sampling::random_unitary(source, rng)] }
    }
}

fn pre_label(l: &str) -> String {
    format!("{l}#pre")
}

/// Choi matrix of `M ∘ N` for `N` acting on the source labels.
fn precompose(choi: &CMatrix, source: &[String], w: &Witness) -> Result<CMatrix> {
    let rename: HashMap<String, String> = source.iter().map(|l| (l.clone(), pre_label(l))).collect();
    let kraus: Vec<CMatrix> = w
        .kraus
        .iter()
        .map(|k| k.with_spaces(k.rows().clone(), k.cols().relabeled(&rename)?))
        .collect::<Result<_>>()?;
    let jn = choi_matrix(&kraus)?;
    let back: HashMap<String, String> = source.iter().map(|l| (pre_label(l), l.clone())).collect();
    let linked = link_matrices(&jn, choi)?.relabel(&back)?;
    let labels = choi.rows().labels();
    linked.reorder(&labels, &labels)
}

/// `max |Tr_{rest}(J) − Tr_{rest}(J∘N)|` over the inputs and the sink.
///
/// # Errors
/// `LabelNotFound` for unknown labels.
pub fn signalling_deviation(choi: &CMatrix, inputs: &[&str], query: &SignallingQuery, w: &Witness) -> Result<f64> {
    let traced: Vec<&str> =
        choi.rows().labels().into_iter().filter(|l| !inputs.contains(l) && !query.sink.iter().any(|s| s == l)).collect();
    let base = partial_trace(choi, &traced)?;
    let moved = partial_trace(&precompose(choi, &query.source, w)?, &traced)?;
    base.max_abs_diff(&moved)
}

/// Randomized search for a local operation on `query.source` that changes
/// the marginal on `query.sink`.
///
/// # Errors
/// `LabelNotFound` for unknown labels.
pub fn check_signalling(
    choi: &CMatrix,
    inputs: &[&str],
    query: &SignallingQuery,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<SignallingResult> {
    let source = sub_space(choi.rows(), &query.source)?;
    let mut rng = sampling::rng(seed);
    let mut best: f64 = 0.0;
    for t in 0..trials {
        let w = sample_witness(&source, t, &mut rng);
        let d = signalling_deviation(choi, inputs, query, &w)?;
        best = best.max(d);
        if d > tol {
            return Ok(SignallingResult { witness: Some(w), trials: t + 1, max_deviation: best });
        }
    }
    Ok(SignallingResult { witness: None, trials, max_deviation: best })
}

/// Choi matrix of the circuit as a map, with its input labels.
///
/// # Errors
/// Link errors.
pub fn circuit_choi(q: &QcQc) -> Result<(CMatrix, Vec<String>)> {
    let v = process_vector(q)?.vec;
    Ok((v.outer(&v), w_in_labels(q.n_parties())))
}

type SinkKey = Vec<Vec<u32>>;

/// Box-level replay of a witness: the source operation is applied to the
/// one message each source wire carries, whatever its time, and the sink
/// marginal of `C ∘ Enc` (with a reference system for the circuit input) is
/// compared with and without it.
///
/// # Errors
/// `DimMismatch` for boxes the encoder does not apply to or sinks that are
/// not wires of the box.
pub fn transfer_deviation(q: &QcQc, seq: &SequenceRep, enc: &Encoder, query: &SignallingQuery, w: &Witness) -> Result<f64> {
    require_internal_control(seq, q)?;
    let wires: Vec<String> = seq.slices.iter().flat_map(|s| s.output.wires.iter().map(|w| w.label.clone())).collect();
    if let Some(bad) = query.sink.iter().find(|s| !wires.contains(s)) {
        return Err(QcError::DimMismatch(format!("sink `{bad}` is not a wire of the box")));
    }
    let base = reduced_box_state(seq, q, enc, query, None)?;
    let moved = reduced_box_state(seq, q, enc, query, Some(w))?;
    let mut dev: f64 = 0.0;
    for (k, v) in &base {
        dev = dev.max((v - moved.get(k).copied().unwrap_or(ZERO)).norm());
    }
    for (k, v) in &moved {
        if !base.contains_key(k) {
            dev = dev.max(v.norm());
        }
    }
    Ok(dev)
}

type Reduced = HashMap<((usize, SinkKey), (usize, SinkKey)), C64>;

fn reduced_box_state(seq: &SequenceRep, q: &QcQc, enc: &Encoder, query: &SignallingQuery, w: Option<&Witness>) -> Result<Reduced> {
    let ao = ao_space(q)?;
    let d = ao.dim();
    let n_in = q.past_dim() * d;
    let kraus: Vec<Option<&CMatrix>> = match w {
        None => vec![None],
        Some(w) => w.kraus.iter().map(Some).collect(),
    };
    let in_bases: Vec<_> = seq.slices.iter().map(|s| s.input.basis()).collect();
    let out_bases: Vec<_> = seq.slices.iter().map(|s| s.output.basis()).collect();
    let mut cache: HashMap<Vec<usize>, HashMap<OutKey, C64>> = HashMap::new();
    // (kraus index, rest key) -> list of (reference index, sink key, amplitude)
    type Group = Vec<(usize, SinkKey, C64)>;
    let mut groups: HashMap<(usize, SinkKey, usize), Group> = HashMap::new();
    for r in 0..n_in {
        let (p, i) = (r / d, r % d);
        let multi = ao.unflatten(i);
        for (a, k) in kraus.iter().enumerate() {
            let mut inputs: HashMap<Vec<usize>, C64> = HashMap::new();
            for (o, order) in enc.orders.iter().enumerate() {
                let lam = enc.matrix.get(o * d + i, i);
                if lam == ZERO {
                    continue;
                }
                let cfgs = encoded_inputs(seq, order, p, &multi)?;
                match k {
                    None => *inputs.entry(cfgs).or_insert(ZERO) += lam,
                    Some(k) => {
                        for (c2, x) in apply_source_op(&in_bases, seq, &cfgs, &query.source, k)? {
                            *inputs.entry(c2).or_insert(ZERO) += lam * x;
                        }
                    }
                }
            }
            let mut out: HashMap<OutKey, C64> = HashMap::new();
            for (cfgs, x) in inputs {
                let col = cache.entry(cfgs.clone()).or_insert_with(|| run_open(seq, &cfgs));
                for (key, v) in col.iter() {
                    *out.entry(key.clone()).or_insert(ZERO) += x * v;
                }
            }
            for ((outs, mem), amp) in out {
                let (mut sink, mut rest) = (Vec::new(), Vec::new());
                for (s, &oc) in outs.iter().enumerate() {
                    let b = &out_bases[s];
                    let (si, re): (Vec<u32>, Vec<u32>) =
                        b.config(oc).iter().partition(|&&m| query.sink.contains(&b.modes()[m as usize].wire));
                    sink.push(si);
                    rest.push(re);
                }
                groups.entry((a, rest, mem)).or_default().push((r, sink, amp));
            }
        }
    }
    let mut rho: Reduced = HashMap::new();
    for list in groups.values() {
        for (r1, s1, x1) in list {
            for (r2, s2, x2) in list {
                *rho.entry(((*r1, s1.clone()), (*r2, s2.clone()))).or_insert(ZERO) += x1 * x2.conj();
            }
        }
    }
    Ok(rho)
}

/// Apply `k` to the joint index of the single messages on the source wires.
/// Configurations without exactly one message per source wire pass through.
fn apply_source_op(
    in_bases: &[crate::fock::FockBasis],
    seq: &SequenceRep,
    cfgs: &[usize],
    source: &[String],
    k: &CMatrix,
) -> Result<Vec<(Vec<usize>, C64)>> {
    // locate the message of each source wire: (slice, position in config)
    let mut found: Vec<Option<(usize, usize)>> = vec![None; source.len()];
    for (s, &c) in cfgs.iter().enumerate() {
        for (pos, &m) in in_bases[s].config(c).iter().enumerate() {
            let wire = &in_bases[s].modes()[m as usize].wire;
            if let Some(j) = source.iter().position(|l| l == wire) {
                if found[j].is_some() {
                    return Ok(vec![(cfgs.to_vec(), ONE)]);
                }
                found[j] = Some((s, pos));
            }
        }
    }
    let Some(found) = found.into_iter().collect::<Option<Vec<_>>>() else {
        return Ok(vec![(cfgs.to_vec(), ONE)]);
    };
    let sspace = k.cols();
    let idx: Vec<usize> =
        found.iter().map(|&(s, pos)| in_bases[s].modes()[in_bases[s].config(cfgs[s])[pos] as usize].idx).collect();
    if idx.iter().zip(sspace.dims()).any(|(i, d)| *i >= d) {
        return Ok(vec![(cfgs.to_vec(), ONE)]);
    }
    let col = sspace.flatten(&idx);
    let mut out = Vec::new();
    for r in 0..k.nrows() {
        let x = k.get(r, col);
        if x == ZERO {
            continue;
        }
        let new_idx = k.rows().unflatten(r);
        let mut c2 = cfgs.to_vec();
        for (j, &(s, pos)) in found.iter().enumerate() {
            let b = &in_bases[s];
            let mut cfg = b.config(c2[s]).to_vec();
            let port = &seq.slices[s].input;
            cfg[pos] = b.mode_index(&port.mode(&source[j], new_idx[j])).expect("source mode") as u32;
            cfg.sort_unstable();
            c2[s] = b.index_of(&cfg).expect("same message count");
        }
        out.push((c2, x));
    }
    Ok(out)
}

/// Per-query outcome of the preservation test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignallingOutcome {
    pub query: SignallingQuery,
    pub witness_found: bool,
    pub witnesses: usize,
    pub transferred: usize,
}

/// For every query, sample `trials` source operations; each one that
/// signals in the circuit is replayed on the box.
///
/// # Errors
/// As [`check_signalling`] and [`transfer_deviation`].
pub fn signalling_preservation(
    q: &QcQc,
    seq: &SequenceRep,
    enc: &Encoder,
    queries: &[SignallingQuery],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<SignallingOutcome>> {
    let (choi, inputs) = circuit_choi(q)?;
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let mut rng = sampling::rng(seed);
    let mut out = Vec::new();
    for query in queries {
        let source = sub_space(choi.rows(), &query.source)?;
        let (mut found, mut moved) = (0, 0);
        for t in 0..trials {
            let w = sample_witness(&source, t, &mut rng);
            if signalling_deviation(&choi, &inputs, query, &w)? > tol {
                found += 1;
                if transfer_deviation(q, seq, enc, query, &w)? > tol {
                    moved += 1;
                }
            }
        }
        out.push(SignallingOutcome { query: query.clone(), witness_found: found > 0, witnesses: found, transferred: moved });
    }
    Ok(out)
}

/// Node of a wiring graph: a slice or an extended local operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringNode {
    pub name: String,
    pub in_time: i64,
    pub out_time: i64,
}

/// Directed graph of maps connected by wires.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringGraph {
    pub nodes: Vec<WiringNode>,
    pub edges: Vec<(usize, usize, String)>,
}

/// Acyclicity verdict with a time-ordered listing of the nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcyclicityReport {
    pub acyclic: bool,
    /// Every edge goes from an earlier to a later input time.
    pub forward_in_time: bool,
    /// Nodes sorted by input time; a topological order when both flags hold.
    pub order: Vec<String>,
    /// Nodes of one strongly connected component when a cycle exists.
    pub cycle: Vec<String>,
    pub backward_edges: Vec<(String, String)>,
}

impl WiringGraph {
    pub fn add_node(&mut self, name: &str, in_time: i64, out_time: i64) -> usize {
        self.nodes.push(WiringNode { name: name.into(), in_time, out_time });
        self.nodes.len() - 1
    }

    pub fn add_edge(&mut self, from: usize, to: usize, wire: &str) {
        self.edges.push((from, to, wire.into()));
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Slices in sequence (memory edges) and one local node per party input
    /// wire and time, feeding the next slice when it reads that party's
    /// output wire one step later.
    pub fn from_sequence(seq: &SequenceRep) -> Self {
        let mut g = Self::default();
        let slices: Vec<usize> =
            seq.slices.iter().enumerate().map(|(s, sl)| g.add_node(&format!("slice{}", s + 1), sl.input.time, sl.output.time)).collect();
        for (s, sl) in seq.slices.iter().enumerate() {
            if s + 1 < seq.slices.len() && sl.mem_out > 1 {
                g.add_edge(slices[s], slices[s + 1], "mem");
            }
            for w in &sl.output.wires {
                let Some(k) = party_of(&w.label).filter(|_| w.label.starts_with("AI")) else { continue };
                let t = sl.output.time;
                let node = g.add_node(&format!("A{}@{t}", k + 1), t, t + 1);
                g.add_edge(slices[s], node, &w.label);
                if let Some((s2, _)) =
                    seq.slices.iter().enumerate().find(|(_, x)| x.input.time == t + 1 && x.input.wire(&ao(k)).is_some())
                {
                    g.add_edge(node, slices[s2], &ao(k));
                }
            }
        }
        g
    }

    pub fn check(&self) -> AcyclicityReport {
        let mut dg = DiGraph::<usize, ()>::new();
        let idx: Vec<_> = (0..self.nodes.len()).map(|i| dg.add_node(i)).collect();
        for &(a, b, _) in &self.edges {
            dg.add_edge(idx[a], idx[b], ());
        }
        let acyclic = toposort(&dg, None).is_ok();
        let cycle = if acyclic {
            Vec::new()
        } else {
            kosaraju_scc(&dg)
                .into_iter()
                .find(|c| c.len() > 1 || dg.contains_edge(c[0], c[0]))
                .map(|c| c.iter().map(|&n| self.nodes[dg[n]].name.clone()).sorted().collect())
                .unwrap_or_default()
        };
        let backward_edges: Vec<(String, String)> = self
            .edges
            .iter()
            .filter(|(a, b, _)| self.nodes[*a].in_time >= self.nodes[*b].in_time)
            .map(|(a, b, _)| (self.nodes[*a].name.clone(), self.nodes[*b].name.clone()))
            .collect();
        let order =
            self.nodes.iter().sorted_by(|a, b| (a.in_time, &a.name).cmp(&(b.in_time, &b.name))).map(|n| n.name.clone()).collect();
        AcyclicityReport { acyclic, forward_in_time: backward_edges.is_empty(), order, cycle, backward_edges }
    }
}

/// Wiring graph of the box closed by extended local operations.
pub fn check_acyclicity(seq: &SequenceRep) -> AcyclicityReport {
    WiringGraph::from_sequence(seq).check()
}

/// Convenience bundle for the whole pipeline with default weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainingRun {
    pub report: FineGrainingReport,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Build the default encoder and decoder and verify.
///
/// # Errors
/// As the individual steps.
pub fn finegrain_default(q: &QcQc, seq: &SequenceRep, tol: f64) -> Result<FineGrainingRun> {
    let spec = EncoderSpec::uniform(q)?;
    let encoder = build_encoder(q, &spec)?;
    let decoder = build_decoder(q, &spec)?;
    let report = verify_finegraining(q, seq, &encoder, &decoder, tol)?;
    Ok(FineGrainingRun { report, encoder, decoder })
}

/// Default queries: every party output and the past against every party
/// input and the future.
pub fn default_queries(q: &QcQc) -> Vec<SignallingQuery> {
    let n = q.n_parties();
    let sources: Vec<String> = std::iter::once(PAST.to_string()).chain((0..n).map(ao)).collect();
    let sinks: Vec<String> = (0..n).map(ai).chain(std::iter::once(FUTURE.to_string())).collect();
    sources
        .iter()
        .cartesian_product(&sinks)
        .map(|(s, t)| SignallingQuery { source: vec![s.clone()], sink: vec![t.clone()] })
        .collect()
}

/// Summaries keyed by query, for reports.
pub fn outcomes_by_query(outcomes: &[SignallingOutcome]) -> BTreeMap<String, (usize, usize)> {
    outcomes
        .iter()
        .map(|o| (format!("{} -> {}", o.query.source.join("+"), o.query.sink.join("+")), (o.witnesses, o.transferred)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{extend_local, isometric_extension, ExtensionPolicy};
    use crate::fock::TimestampSet;
    use crate::qcqc::{fixed_order_chain, grenoble, quantum_switch, LocalOperation};

    fn iso(q: &QcQc) -> SequenceRep {
        isometric_extension(q, &ExtensionPolicy { truncation: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn single_party_encoder_is_identity() {
        let id = CMatrix::identity(SpaceSpec::single("x", 2));
        let q = fixed_order_chain(&[id.clone(), id]).unwrap();
        let spec = EncoderSpec::uniform(&q).unwrap();
        assert!(spec.lambdas.iter().all(|e| e.value == ONE));
        let enc = build_encoder(&q, &spec).unwrap();
        assert_eq!(enc.matrix.nrows(), 2);
        assert_eq!(enc.isometry_deviation(), 0.0);
        let dec = build_decoder(&q, &spec).unwrap();
        let r = verify_finegraining(&q, &iso(&q), &enc, &dec, 1e-9).unwrap();
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn switch_and_grenoble_finegrain() {
        for q in [quantum_switch(), grenoble()] {
            let run = finegrain_default(&q, &iso(&q), 1e-9).unwrap();
            assert!(run.report.ok, "{:?}", run.report);
            assert!(run.report.encoder_deviation <= 1e-12);
        }
    }

    #[test]
    fn two_party_default_weights() {
        let spec = EncoderSpec::uniform(&quantum_switch()).unwrap();
        assert!(spec.lambdas.iter().all(|e| (e.value.re - 0.5f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn corrupted_decoder_fails() {
        let q = quantum_switch();
        let seq = iso(&q);
        let mut run = finegrain_default(&q, &seq, 1e-9).unwrap();
        run.decoder.rescale[0] = run.decoder.rescale[0].scale(C64::new(-1.0, 0.0));
        let r = verify_finegraining(&q, &seq, &run.encoder, &run.decoder, 1e-9).unwrap();
        assert!(r.max_deviation > 0.1);
    }

    #[test]
    fn bad_lambdas_are_rejected() {
        let q = quantum_switch();
        let mut spec = EncoderSpec::uniform(&q).unwrap();
        spec.lambdas[0].value = C64::new(2.0, 0.0);
        assert!(matches!(build_encoder(&q, &spec), Err(QcError::InvalidLambda(_))));
        let mut spec = EncoderSpec::uniform(&q).unwrap();
        // move all weight of one index to one order: the other order is live
        let i0 = spec.lambdas[0].index.clone();
        spec.lambdas.retain(|e| e.index != i0 || e.order == vec![0, 1]);
        spec.lambdas.iter_mut().filter(|e| e.index == i0).for_each(|e| e.value = ONE);
        assert!(matches!(build_decoder(&q, &spec), Err(QcError::DecoderSingular(_))));
    }

    #[test]
    fn identity_channel_signals_and_preparations_do_not() {
        let id = CMatrix::identity(SpaceSpec::single("x", 2));
        let q = fixed_order_chain(&[id.clone(), id]).unwrap();
        let (choi, inputs) = circuit_choi(&q).unwrap();
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let r = check_signalling(&choi, &inputs, &SignallingQuery::new(&["AO1"], &["F"]), 20, 1e-9, 1).unwrap();
        assert!(r.witness.is_some());
        // two independent preparations: |0⟩ on A and |+⟩ on B
        let a = SpaceSpec::from_pairs(&[("A", 2), ("B", 2)]).unwrap();
        let s = 0.5f64.sqrt();
        let v = CVector::new(a, vec![C64::new(s, 0.0), C64::new(s, 0.0), ZERO, ZERO]).unwrap();
        let rho = v.outer(&v);
        // add a trivial input `X` so there is something to act on
        let x = CMatrix::identity(SpaceSpec::single("X", 2));
        let j = crate::linalg::tensor(&x, &rho).unwrap();
        let r = check_signalling(&j, &["X"], &SignallingQuery::new(&["X"], &["A"]), 200, 1e-9, 2).unwrap();
        assert!(r.witness.is_none() && r.max_deviation < 1e-12);
    }

    #[test]
    fn switch_witnesses_transfer() {
        let q = quantum_switch();
        let seq = iso(&q);
        let run = finegrain_default(&q, &seq, 1e-9).unwrap();
        let out = signalling_preservation(&q, &seq, &run.encoder, &[SignallingQuery::new(&["AO1"], &["F"])], 4, 1e-9, 3).unwrap();
        assert!(out[0].witness_found);
        assert_eq!(out[0].witnesses, out[0].transferred);
    }

    #[test]
    fn extensions_are_acyclic_in_time_order() {
        for q in [quantum_switch(), grenoble()] {
            let r = check_acyclicity(&iso(&q));
            assert!(r.acyclic && r.forward_in_time, "{r:?}");
            assert_eq!(r.order.first().map(String::as_str), Some("slice1"));
        }
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let mut g = WiringGraph::from_sequence(&iso(&quantum_switch()));
        let (a, s) = (g.find("A1@2").unwrap(), g.find("slice2").unwrap());
        g.add_edge(s, a, "back");
        let r = g.check();
        assert!(!r.acyclic && !r.forward_in_time);
        assert_eq!(r.cycle, vec!["A1@2".to_string(), "slice2".to_string()]);
    }

    #[test]
    fn local_operation_finegrains() {
        let x = CMatrix::from_fn(SpaceSpec::single("o", 2), SpaceSpec::single("i", 2), |r, c| if r != c { ONE } else { ZERO });
        let e = extend_local(&LocalOperation::new(0, x), TimestampSet::new(vec![2, 4, 6]).unwrap(), 2);
        assert!(verify_local_finegraining(&e).unwrap() < 1e-15);
    }
}
