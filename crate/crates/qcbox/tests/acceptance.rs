// SPDX-License-Identifier: Apache-2.0
//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::time::{Duration, Instant};

use qcbox::causalbox::{check_causality, check_causality_seeded, verify_comp_is_link, CausalBox, SequenceRep};
use qcbox::extension::{
    grenoble_gate_extension, isometric_extension, photonic_extension, projective_extension, verify_extension, ExtensionPolicy,
    RestPolicy,
};
use qcbox::finegraining::{check_acyclicity, default_queries, finegrain_default, signalling_preservation, WiringGraph};
use qcbox::fock::{fock_inner, symmetric_product, FockState, Message, WireSpec};
use qcbox::linalg::{choi_matrix, SpaceSpec, C64};
use qcbox::qcqc::{grenoble, quantum_switch, QcQc};
use qcbox::sampling::{random_contraction, rng};
use qcbox::scenarios::{born_normalization, composability_demo, switch_oracle_fidelity, two_message_abort};
use rand::Rng;

const SAMPLES: usize = 50;
const TRUNC: usize = 2;
const SEED: u64 = 2024;

struct Tally {
    failed: Vec<usize>,
}

impl Tally {
    fn line(&mut self, id: usize, pass: bool, what: &str, detail: String, took: Duration) {
        println!("{} [{id:>2}] {what}: {detail} ({:.2} s)", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
        if !pass {
            self.failed.push(id);
        }
    }
}

fn builtins() -> [(&'static str, QcQc); 2] {
    [("grenoble", grenoble()), ("switch", quantum_switch())]
}

fn worst_causality(seq: &SequenceRep) -> f64 {
    let r = check_causality(&CausalBox::Sequence(seq.clone()), 1e-10).expect("causality");
    r.times.iter().map(|t| t.max_deviation).fold(0.0, f64::max)
}

fn main() {
    let mut tally = Tally { failed: Vec::new() };

    // 1
    let t = Instant::now();
    let v = grenoble().validate(1e-10);
    let slot = v.slots.iter().map(|s| s.max_deviation).fold(0.0, f64::max);
    let took = t.elapsed();
    tally.line(
        1,
        v.slots.len() == 4 && slot <= 1e-10 && v.kraus_cross_max <= 1e-12 && took < Duration::from_secs(1),
        "three-party circuit validates",
        format!("{} slots, isometry {slot:.1e} <= 1e-10, cross terms {:.1e} <= 1e-12", v.slots.len(), v.kraus_cross_max),
        took,
    );

    // 2
    let t = Instant::now();
    let dev = builtins().iter().map(|(_, q)| born_normalization(q, 20, SEED).expect("born")).fold(0.0, f64::max);
    let took = t.elapsed();
    tally.line(
        2,
        dev <= 1e-9 && took < Duration::from_secs(10),
        "Born probabilities sum to one",
        format!("20 instruments per circuit, max |sum - 1| {dev:.1e} <= 1e-9"),
        took,
    );

    // 3
    let t = Instant::now();
    let (oracle, reference) = switch_oracle_fidelity().expect("switch");
    tally.line(
        3,
        oracle >= 1.0 - 1e-10 && reference >= 1.0 - 1e-10,
        "switch with X and Z on |+>|0>",
        format!("fidelity to matrix-product oracle {oracle:.12}, to (-|0>+|1>)/sqrt2 x |1> {reference:.12}"),
        t.elapsed(),
    );

    // 4
    let t = Instant::now();
    let mut r = rng(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d: Vec<usize> = (0..3).map(|_| r.random_range(2..=3)).collect();
        let (x, y, z) = (SpaceSpec::single("X", d[0]), SpaceSpec::single("Y", d[1]), SpaceSpec::single("Z", d[2]));
        let ka: Vec<_> = (0..r.random_range(1..=2)).map(|_| random_contraction(&y, &x, &mut r)).collect();
        let kb: Vec<_> = (0..r.random_range(1..=2)).map(|_| random_contraction(&z, &y, &mut r)).collect();
        let rep = verify_comp_is_link(&choi_matrix(&ka).unwrap(), &choi_matrix(&kb).unwrap(), 1e-11).expect("link");
        worst = worst.max(rep.max_deviation);
    }
    let took = t.elapsed();
    tally.line(
        4,
        worst <= 1e-11 && took < Duration::from_secs(30),
        "loop composition equals link product",
        format!("100 random pairs, max deviation {worst:.1e} <= 1e-11"),
        took,
    );

    // 5
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, q) in builtins() {
        let iso = isometric_extension(&q, &ExtensionPolicy { truncation: TRUNC, ..Default::default() }).unwrap();
        let pho = photonic_extension(&q, TRUNC).unwrap();
        for (kind, seq) in [("isometric", &iso), ("photonic", &pho)] {
            let rep = verify_extension(seq, &q, SAMPLES, 1e-9, SEED).unwrap();
            worst = worst.max(rep.max_deviation);
            detail.push(format!("{name}/{kind} {:.1e}", rep.max_deviation));
        }
    }
    let took = t.elapsed();
    tally.line(
        5,
        worst <= 1e-9 && took < Duration::from_secs(120),
        "extensions reproduce their circuits",
        format!("{SAMPLES} samples at truncation {TRUNC}: {}", detail.join(", ")),
        took,
    );

    // 6
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (_, q) in builtins() {
        let mut boxes = vec![
            isometric_extension(&q, &ExtensionPolicy { truncation: TRUNC, ..Default::default() }).unwrap(),
            isometric_extension(&q, &ExtensionPolicy { rest: RestPolicy::Park, truncation: TRUNC }).unwrap(),
            projective_extension(&q, TRUNC).unwrap(),
            photonic_extension(&q, TRUNC).unwrap(),
        ];
        if q == grenoble() {
            boxes.push(grenoble_gate_extension(TRUNC).unwrap());
        }
        for seq in &boxes {
            worst = worst.max(worst_causality(seq));
            count += 1;
        }
    }
    // second route: expand every input tuple of the small switch boxes
    let q = quantum_switch();
    let mut direct: f64 = 0.0;
    for seq in [
        isometric_extension(&q, &ExtensionPolicy { truncation: 1, ..Default::default() }).unwrap(),
        projective_extension(&q, 1).unwrap(),
    ] {
        let rep = check_causality_seeded(&CausalBox::Sequence(seq), 1e-10, SEED).unwrap();
        direct = direct.max(rep.times.iter().map(|t| t.max_deviation).fold(0.0, f64::max));
    }
    tally.line(
        6,
        worst <= 1e-10 && direct <= 1e-10,
        "every extension is causal at every time",
        format!("{count} boxes, slice recursion {worst:.1e}; direct expansion {direct:.1e}; bound 1e-10"),
        t.elapsed(),
    );

    // 7
    let t = Instant::now();
    let mut accept: f64 = 1.0;
    let mut abort: f64 = 1.0;
    for (_, q) in builtins() {
        let seq = projective_extension(&q, TRUNC).unwrap();
        accept = accept.min(verify_extension(&seq, &q, SAMPLES, 1e-9, SEED).unwrap().min_accept_probability);
        abort = abort.min(two_message_abort(&seq).unwrap());
    }
    tally.line(
        7,
        (accept - 1.0).abs() <= 1e-10 && (abort - 1.0).abs() <= 1e-10,
        "projective extension accepts and aborts",
        format!("min accept {accept:.12}, abort on two messages {abort:.12}"),
        t.elapsed(),
    );

    // 8
    let t = Instant::now();
    let (mut fg, mut enc): (f64, f64) = (0.0, 0.0);
    let mut ordered = true;
    for (_, q) in builtins() {
        let seq = isometric_extension(&q, &ExtensionPolicy { truncation: TRUNC, ..Default::default() }).unwrap();
        let run = finegrain_default(&q, &seq, 1e-9).unwrap();
        fg = fg.max(run.report.max_deviation);
        enc = enc.max(run.report.encoder_deviation);
        let a = check_acyclicity(&seq);
        ordered &= a.acyclic && a.forward_in_time && topological_in_time(&WiringGraph::from_sequence(&seq), &a.order);
    }
    tally.line(
        8,
        fg <= 1e-9 && enc <= 1e-12 && ordered,
        "fine-graining recovers the circuit",
        format!("max deviation {fg:.1e} <= 1e-9, encoder {enc:.1e} <= 1e-12, topological order is time order: {ordered}"),
        t.elapsed(),
    );

    // 9
    let t = Instant::now();
    let q = quantum_switch();
    let seq = isometric_extension(&q, &ExtensionPolicy { truncation: TRUNC, ..Default::default() }).unwrap();
    let run = finegrain_default(&q, &seq, 1e-9).unwrap();
    let out = signalling_preservation(&q, &seq, &run.encoder, &default_queries(&q), 10, 1e-9, SEED).unwrap();
    let found: usize = out.iter().map(|o| o.witnesses).sum();
    let moved: usize = out.iter().map(|o| o.transferred).sum();
    tally.line(
        9,
        found > 0 && moved == found,
        "switch signalling survives the extension",
        format!("{moved} of {found} witnesses transfer over {} queries", out.len()),
        t.elapsed(),
    );

    // 10
    let t = Instant::now();
    let d = composability_demo().unwrap();
    let seq_ok = d.alice_messages == [(0, 1), (1, 5)];
    tally.line(
        10,
        d.joint_born.abs() <= 1e-12 && d.trace_deviation <= 1e-10 && seq_ok && d.assumption_violated,
        "loop composition example",
        format!(
            "circuit-picture Born value {:.1e} (deterministic value {}), box trace deviation {:.1e}, messages {:?}, one-message assumption flagged: {}",
            d.joint_born, d.product_born, d.trace_deviation, d.alice_messages, d.assumption_violated
        ),
        t.elapsed(),
    );

    // 11
    let t = Instant::now();
    let (psi, pair, cross) = fock_conventions();
    tally.line(
        11,
        (psi - 1.0).abs() <= 4.0 * f64::EPSILON && pair == 2.0 && cross == 0.0,
        "Fock inner products",
        format!("<psi|psi> = {psi}, <0.0|0.0> = {pair}, wire-exchanged product = {cross}"),
        t.elapsed(),
    );

    if tally.failed.is_empty() {
        println!("all criteria pass");
    } else {
        println!("failing criteria: {:?}", tally.failed);
        std::process::exit(1);
    }
}

/// `order` lists every node once, sorted by input time, and every edge
/// points forward in it.
fn topological_in_time(g: &WiringGraph, order: &[String]) -> bool {
    let pos = |name: &str| order.iter().position(|n| n == name);
    let times: Vec<i64> = order.iter().map(|n| g.nodes.iter().find(|x| &x.name == n).map_or(i64::MIN, |x| x.in_time)).collect();
    order.len() == g.nodes.len()
        && times.windows(2).all(|w| w[0] <= w[1])
        && g.edges.iter().all(|(a, b, _)| match (pos(&g.nodes[*a].name), pos(&g.nodes[*b].name)) {
            (Some(i), Some(j)) => i < j,
            _ => false,
        })
}

/// The vacuum-plus-pair superposition, a doubly occupied mode, and two
/// states that differ only by which wire carries which messages.
fn fock_conventions() -> (f64, f64, f64) {
    let w = vec![WireSpec::new("a", 2, vec![1]).unwrap()];
    let vac = symmetric_product(w.clone(), 2, &[]).unwrap();
    let pair = symmetric_product(w.clone(), 2, &[Message::basis("a", 1, 2, 0), Message::basis("a", 1, 2, 1)]).unwrap();
    let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let psi = vac.combine(h, &pair, h).unwrap();
    let psi_norm = fock_inner(&psi, &psi).unwrap().re;

    let doubled = symmetric_product(w, 2, &[Message::basis("a", 1, 2, 0), Message::basis("a", 1, 2, 0)]).unwrap();
    let pair_norm = fock_inner(&doubled, &doubled).unwrap().re;

    let (t, t2) = (1, 2);
    let wires = vec![WireSpec::new("A", 2, vec![t, t2]).unwrap(), WireSpec::new("B", 2, vec![t, t2]).unwrap()];
    let state = |x: &str, y: &str, second_x: (i64, usize)| -> FockState {
        symmetric_product(
            wires.clone(),
            4,
            &[
                Message::basis(x, t, 2, 0),
                Message::basis(x, second_x.0, 2, second_x.1),
                Message::basis(y, t, 2, 0),
                Message::basis(y, t2, 2, 0),
            ],
        )
        .unwrap()
    };
    let left = state("A", "B", (t, 1));
    let right = state("B", "A", (t, 1));
    (psi_norm, pair_norm, fock_inner(&left, &right).unwrap().norm())
}
