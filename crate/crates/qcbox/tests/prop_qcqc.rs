// SPDX-License-Identifier: Apache-2.0
//! Properties of the circuit layer: Born normalization, order sums and the
//! fixed-order special case.

use proptest::prelude::*;
use qcbox::linalg::{CMatrix, SpaceSpec};
use qcbox::qcqc::{
    fixed_order_chain, future_vector, grenoble, process_vector, process_vector_with_orders, quantum_switch, LocalOperation, QcQc,
    PAST,
};
use qcbox::sampling::{random_state, random_unitary, rng};
use qcbox::scenarios::born_normalization;

fn builtin(i: usize) -> QcQc {
    if i == 0 {
        quantum_switch()
    } else {
        grenoble()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn born_probabilities_sum_to_one(which in 0usize..2, seed in any::<u64>()) {
        prop_assert!(born_normalization(&builtin(which), 2, seed).unwrap() <= 1e-9);
    }

    #[test]
    fn order_sum_is_order_insensitive(which in 0usize..2, shift in 0usize..6) {
        let q = builtin(which);
        let mut orders = permutations(q.n_parties());
        let k = shift % orders.len();
        orders.rotate_left(k);
        orders.reverse();
        let w = process_vector(&q).unwrap().vec;
        let shuffled = process_vector_with_orders(&q, orders).unwrap().vec;
        prop_assert_eq!(w.max_abs_diff(&shuffled).unwrap(), 0.0);
    }

    #[test]
    fn fixed_order_chain_matches_channel_composition(seed in any::<u64>()) {
        let mut r = rng(seed);
        let q2 = SpaceSpec::single("x", 2);
        let channels: Vec<CMatrix> = (0..3).map(|_| random_unitary(&q2, &mut r)).collect();
        let locals: Vec<CMatrix> = (0..2).map(|_| random_unitary(&q2, &mut r)).collect();
        let past = random_state(&SpaceSpec::single(PAST, 2), &mut r);
        let q = fixed_order_chain(&channels).unwrap();
        let ops: Vec<LocalOperation> = locals.iter().enumerate().map(|(k, a)| LocalOperation::new(k, a.clone())).collect();
        let got = future_vector(&process_vector(&q).unwrap(), &ops, &past).unwrap();
        // channel after local after channel, right to left
        let mut v: Vec<_> = past.data().to_vec();
        for m in [&channels[0], &locals[0], &channels[1], &locals[1], &channels[2]] {
            v = (0..2).map(|i| (0..2).map(|j| m.get(i, j) * v[j]).sum()).collect();
        }
        let diff = got.data().iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-10, "{diff}");
    }
}

#[test]
fn operator_family_cross_terms_vanish() {
    for q in [grenoble(), quantum_switch()] {
        let r = q.validate(1e-10);
        assert!(r.ok && r.kraus_cross_max <= 1e-12, "{r:?}");
    }
}
