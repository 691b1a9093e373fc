// SPDX-License-Identifier: Apache-2.0
//! Properties of sequence boxes, loops and the composition/link identity.

use proptest::prelude::*;
use qcbox::causalbox::{
    check_causality, check_causality_seeded, from_sequence, loop_compose, verify_comp_is_link, CausalBox, Port, SequenceRep,
    Slice, SparseOp,
};
use qcbox::linalg::{choi_matrix, SpaceSpec};
use qcbox::sampling::{random_contraction, random_isometry, rng};

/// Three slices on one wire `S` with random isometries and growing memory.
fn random_sequence(d: usize, seed: u64) -> SequenceRep {
    let mut r = rng(seed);
    let mut slices = Vec::new();
    let mut mem_in = 1;
    for s in 1..=3i64 {
        let (i, o) = (Port::single("S", d, 2 * s - 1, 1), Port::single("S", d, 2 * s, 1));
        let (bi, bo) = (i.basis().len(), o.basis().len());
        let mem_out = 2 * mem_in;
        let v = random_isometry(&SpaceSpec::single("o", bo * mem_out), &SpaceSpec::single("i", bi * mem_in), &mut r);
        slices.push(Slice::new(i, o, mem_in, mem_out, SparseOp::from_dense(&v)).unwrap());
        mem_in = mem_out;
    }
    SequenceRep { slices, readout: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sequences_are_causal_by_both_routes(d in 1usize..=2, seed in any::<u64>()) {
        let cb = from_sequence(random_sequence(d, seed)).unwrap();
        let fast = check_causality(&cb, 1e-10).unwrap();
        let direct = check_causality_seeded(&cb, 1e-10, seed).unwrap();
        prop_assert!(fast.ok, "{fast:?}");
        prop_assert!(direct.ok && direct.exhaustive, "{direct:?}");
    }

    #[test]
    fn forward_loops_keep_trace(seed in any::<u64>()) {
        let c = from_sequence(random_sequence(1, seed)).unwrap().to_choi().unwrap();
        prop_assert!(c.trace_deviation() <= 1e-10);
        let once = loop_compose(&c, "out:S@2", "in:S@3").unwrap();
        prop_assert!(once.trace_deviation() <= 1e-10);
        let twice = loop_compose(&once, "out:S@4", "in:S@5").unwrap();
        prop_assert!(twice.trace_deviation() <= 1e-10);
        prop_assert!(check_causality(&CausalBox::Choi(twice), 1e-10).unwrap().ok);
    }

    #[test]
    fn loop_composition_is_the_link_product(dx in 2usize..=3, dy in 2usize..=3, dz in 2usize..=3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, y, z) = (SpaceSpec::single("X", dx), SpaceSpec::single("Y", dy), SpaceSpec::single("Z", dz));
        let a = choi_matrix(&[random_contraction(&y, &x, &mut r), random_contraction(&y, &x, &mut r)]).unwrap();
        let b = choi_matrix(&[random_contraction(&z, &y, &mut r)]).unwrap();
        let rep = verify_comp_is_link(&a, &b, 1e-11).unwrap();
        prop_assert!(rep.ok, "{rep:?}");
    }
}
