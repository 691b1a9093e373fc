// SPDX-License-Identifier: Apache-2.0
//! Properties of symmetric products and the Fock inner product.

use proptest::prelude::*;
use qcbox::fock::{fock_inner, symmetric_product, FockBasis, FockState, Message, WireSpec};
use qcbox::linalg::{C64, ZERO};

fn wires() -> Vec<WireSpec> {
    vec![WireSpec::new("a", 2, vec![1, 2]).unwrap(), WireSpec::new("b", 2, vec![1]).unwrap()]
}

const SLOTS: [(&str, i64); 3] = [("a", 1), ("a", 2), ("b", 1)];

fn message() -> impl Strategy<Value = Message> {
    (0usize..3, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_map(|(s, a, b, c, d)| Message::new(SLOTS[s].0, SLOTS[s].1, vec![C64::new(a, b), C64::new(c, d)]))
}

fn state(n: usize, msgs: &[Message]) -> FockState {
    symmetric_product(wires(), 3, &msgs[..n]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_ignores_message_order(msgs in prop::collection::vec(message(), 1..=3), rot in 0usize..3) {
        let mut shuffled = msgs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(symmetric_product(wires(), 3, &msgs).unwrap(), symmetric_product(wires(), 3, &shuffled).unwrap());
    }

    #[test]
    fn sectors_are_orthogonal(msgs in prop::collection::vec(message(), 3), n in 0usize..3, m in 0usize..3) {
        prop_assume!(n != m);
        prop_assert_eq!(fock_inner(&state(n, &msgs), &state(m, &msgs)).unwrap(), ZERO);
    }

    #[test]
    fn norm_is_nonnegative_and_zero_only_when_empty(msgs in prop::collection::vec(message(), 0..=3)) {
        let s = symmetric_product(wires(), 3, &msgs).unwrap();
        let n = fock_inner(&s, &s).unwrap();
        prop_assert_eq!(n.im, 0.0);
        prop_assert!(n.re >= 0.0);
        prop_assert_eq!(n.re == 0.0, s.terms().is_empty());
    }

    #[test]
    fn dense_bridge_matches(x in prop::collection::vec(message(), 0..=3), y in prop::collection::vec(message(), 0..=3)) {
        let basis = FockBasis::from_wires(&wires(), 3);
        let (a, b) = (symmetric_product(wires(), 3, &x).unwrap(), symmetric_product(wires(), 3, &y).unwrap());
        let dense = a.as_dense(&basis).unwrap().inner(&b.as_dense(&basis).unwrap()).unwrap();
        prop_assert!((dense - fock_inner(&a, &b).unwrap()).norm() <= 1e-12);
    }
}
