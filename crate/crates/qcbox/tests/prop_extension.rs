// SPDX-License-Identifier: Apache-2.0
//! Properties of the extension boxes: slice isometries, message counting,
//! separation of correct and incorrect inputs, and non-uniqueness.

use proptest::prelude::*;
use qcbox::causalbox::SequenceRep;
use qcbox::extension::{
    grenoble_gate_extension, isometric_extension, photonic_extension, projective_extension, run_closed, verify_extension,
    ExtensionPolicy, RestPolicy, ABORT,
};
use qcbox::linalg::SpaceSpec;
use qcbox::qcqc::{grenoble, quantum_switch, LocalOperation, QcQc, PAST};
use qcbox::sampling::{random_contraction, random_state, random_unitary, rng};

fn builtin(i: usize) -> QcQc {
    if i == 0 {
        quantum_switch()
    } else {
        grenoble()
    }
}

fn all_boxes(q: &QcQc, trunc: usize) -> Vec<(&'static str, SequenceRep)> {
    let mut v = vec![
        ("isometric", isometric_extension(q, &ExtensionPolicy { truncation: trunc, ..Default::default() }).unwrap()),
        ("park", isometric_extension(q, &ExtensionPolicy { rest: RestPolicy::Park, truncation: trunc }).unwrap()),
        ("projective", projective_extension(q, trunc).unwrap()),
        ("photonic", photonic_extension(q, trunc).unwrap()),
    ];
    if *q == grenoble() {
        v.push(("gates", grenoble_gate_extension(trunc).unwrap()));
    }
    v
}

/// Messages of a configuration, not counting abort flags.
fn messages(seq: &SequenceRep, s: usize, out: bool, config: usize) -> usize {
    let sl = &seq.slices[s];
    let b = if out { sl.output.basis() } else { sl.input.basis() };
    b.config(config).iter().filter(|&&m| b.modes()[m as usize].wire != ABORT).count()
}

#[test]
fn slices_are_isometries_and_conserve_messages() {
    for which in 0..2 {
        let q = builtin(which);
        for (name, seq) in all_boxes(&q, 2) {
            for (s, sl) in seq.slices.iter().enumerate() {
                assert!(sl.op.isometry_deviation(None) <= 1e-10, "{name} slice {s}");
                for c in 0..sl.input.basis().len() {
                    for m in 0..sl.mem_in {
                        for (oc, _, v) in seq.apply_slice(s, c, m) {
                            if v.norm() > 1e-12 {
                                assert_eq!(messages(&seq, s, true, oc), messages(&seq, s, false, c), "{name} slice {s}");
                                let flags = sl.output.basis().config(oc).len() - messages(&seq, s, true, oc);
                                assert!(flags <= 1, "{name} slice {s}");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn correct_and_incorrect_inputs_never_mix() {
    for which in 0..2 {
        let q = builtin(which);
        let n = q.n_parties();
        // size of the correct memory block after each slice
        let corr: Vec<usize> = (0..=n + 1)
            .map(|s| {
                let alpha = if s == n + 1 { q.alpha_f() } else { q.alpha(s) };
                q.reachable_controls(s).len() * alpha
            })
            .collect();
        for policy in [RestPolicy::Forward, RestPolicy::Park] {
            let seq = isometric_extension(&q, &ExtensionPolicy { rest: policy, truncation: 2 }).unwrap();
            for (s, sl) in seq.slices.iter().enumerate() {
                for c in 0..sl.input.basis().len() {
                    for m in 0..sl.mem_in {
                        let (mut in_corr, mut in_junk) = (0.0, 0.0);
                        for (_, m2, v) in seq.apply_slice(s, c, m) {
                            if m2 < corr[s + 1] {
                                in_corr += v.norm_sqr();
                            } else {
                                in_junk += v.norm_sqr();
                            }
                        }
                        assert!(in_corr.min(in_junk) <= 1e-12, "slice {s} column ({c}, {m})");
                        if s > 0 && m >= corr[s] {
                            assert!(in_corr <= 1e-12, "junk memory re-entered the correct block");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn distinct_extensions_both_match_the_circuit() {
    let q = quantum_switch();
    let fwd = isometric_extension(&q, &ExtensionPolicy { rest: RestPolicy::Forward, truncation: 2 }).unwrap();
    let park = isometric_extension(&q, &ExtensionPolicy { rest: RestPolicy::Park, truncation: 2 }).unwrap();
    assert!(verify_extension(&fwd, &q, 10, 1e-9, 4).unwrap().ok);
    assert!(verify_extension(&park, &q, 10, 1e-9, 4).unwrap().ok);
    // they disagree on a two-message input to a middle slice
    let s = 1;
    let b = fwd.slices[s].input.basis();
    let two = (0..b.len()).find(|&c| b.config(c).len() == 2).unwrap();
    let f: Vec<_> = fwd.apply_slice(s, two, 0).collect();
    let p: Vec<_> = park.apply_slice(s, two, 0).collect();
    assert_ne!(f, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn one_message_per_party_slot(which in 0usize..2, contraction in any::<bool>(), seed in any::<u64>()) {
        let q = builtin(which);
        let mut r = rng(seed);
        let locals: Vec<LocalOperation> = q
            .dims()
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let (o, i) = (SpaceSpec::single("o", d.d_out), SpaceSpec::single("i", d.d_in));
                let a = if contraction { random_contraction(&o, &i, &mut r) } else { random_unitary(&i, &mut r).with_spaces(o, i.clone()).unwrap() };
                LocalOperation::new(k, a)
            })
            .collect();
        let past = random_state(&SpaceSpec::single(PAST, q.past_dim()), &mut r);
        for (name, seq) in all_boxes(&q, 2) {
            let run = run_closed(&seq, &q, &locals, &past).unwrap();
            prop_assert!(run.max_messages_per_slot <= 1, "{name}");
            prop_assert!(run.stray <= 1e-12, "{name}: {}", run.stray);
            prop_assert!((run.accept_probability - 1.0).abs() <= 1e-10, "{name}");
        }
    }
}
