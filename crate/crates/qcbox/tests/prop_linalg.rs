// SPDX-License-Identifier: Apache-2.0
//! Properties of the link product and Choi vectors on random inputs.

use proptest::prelude::*;
use qcbox::linalg::{choi_vector, link_matrices, link_vectors, CMatrix, CVector, SpaceSpec};
use qcbox::sampling::{random_isometry, random_state, rng};

fn space(pairs: &[(&str, usize)]) -> SpaceSpec {
    SpaceSpec::from_pairs(pairs).unwrap()
}

/// Random positive semidefinite matrix `G G†` of rank up to 2.
fn random_psd(s: &SpaceSpec, seed: u64) -> CMatrix {
    let mut r = rng(seed);
    let a = random_state(s, &mut r);
    let b = random_state(s, &mut r);
    a.outer(&a).add(&b.outer(&b).scale(0.5.into())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn link_is_commutative(dx in 1usize..=4, dy in 1usize..=4, dz in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_state(&space(&[("X", dx), ("Y", dy)]), &mut r);
        let b = random_state(&space(&[("Y", dy), ("Z", dz)]), &mut r);
        let ab = link_vectors(&a, &b).unwrap();
        let ba = link_vectors(&b, &a).unwrap().reorder(&["X", "Z"]).unwrap();
        prop_assert!(ab.reorder(&["X", "Z"]).unwrap().max_abs_diff(&ba).unwrap() <= 1e-12);
    }

    #[test]
    fn link_is_associative(d in prop::collection::vec(1usize..=3, 4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_state(&space(&[("W", d[0]), ("X", d[1])]), &mut r);
        let b = random_state(&space(&[("X", d[1]), ("Y", d[2])]), &mut r);
        let c = random_state(&space(&[("Y", d[2]), ("Z", d[3])]), &mut r);
        let left = link_vectors(&link_vectors(&a, &b).unwrap(), &c).unwrap().reorder(&["W", "Z"]).unwrap();
        let right = link_vectors(&a, &link_vectors(&b, &c).unwrap()).unwrap().reorder(&["W", "Z"]).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12);
    }

    #[test]
    fn choi_of_composition_is_link_of_chois(dx in 1usize..=3, dy in 1usize..=3, extra in 0usize..=2, seed in any::<u64>()) {
        let mut r = rng(seed);
        let dz = dy + extra;
        let v1 = random_isometry(&space(&[("Y", dy.max(dx))]), &space(&[("X", dx)]), &mut r);
        let v2 = random_isometry(&space(&[("Z", dz.max(dy.max(dx)))]), &space(&[("Y", dy.max(dx))]), &mut r);
        let direct = choi_vector(&v2.matmul(&v1).unwrap()).unwrap().reorder(&["X", "Z"]).unwrap();
        let linked = link_vectors(&choi_vector(&v1).unwrap(), &choi_vector(&v2).unwrap()).unwrap().reorder(&["X", "Z"]).unwrap();
        prop_assert!(direct.max_abs_diff(&linked).unwrap() <= 1e-12);
    }

    #[test]
    fn link_keeps_positivity(dx in 1usize..=3, dy in 1usize..=3, dz in 1usize..=3, seed in any::<u64>()) {
        let a = random_psd(&space(&[("X", dx), ("Y", dy)]), seed);
        let b = random_psd(&space(&[("Y", dy), ("Z", dz)]), seed ^ 0x9e37);
        let l = link_matrices(&a, &b).unwrap();
        prop_assert!(l.hermiticity_deviation() <= 1e-12);
        prop_assert!(l.min_eigenvalue() >= -1e-10);
    }
}

#[test]
fn scalar_link_is_a_plain_product() {
    let a = CVector::scalar(2.0.into());
    let b = CVector::scalar(3.0.into());
    assert_eq!(link_vectors(&a, &b).unwrap().data()[0], 6.0.into());
}
