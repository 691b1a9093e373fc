// SPDX-License-Identifier: Apache-2.0
//! Seeded random states, unitaries, contractions and instruments.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::linalg::{CMatrix, CVector, SpaceSpec, C64};

/// Deterministic generator used by every randomized check.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut impl Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn ginibre(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Haar-random isometry `cols → rows` (requires `rows ≥ cols`).
pub fn random_isometry_raw(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<C64> {
    assert!(rows >= cols, "an isometry cannot shrink the dimension");
    let g = ginibre(rows, cols, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix the phases so the distribution is Haar
    for j in 0..cols {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..rows {
            q[(i, j)] *= ph;
        }
    }
    q
}

/// Haar-random unitary on `space`.
pub fn random_unitary(space: &SpaceSpec, rng: &mut impl Rng) -> CMatrix {
    let d = space.dim();
    CMatrix::from_nalgebra(space.clone(), space.clone(), &random_isometry_raw(d, d, rng))
        .expect("shape")
}

/// Haar-random isometry between labeled spaces.
pub fn random_isometry(out: &SpaceSpec, inp: &SpaceSpec, rng: &mut impl Rng) -> CMatrix {
    CMatrix::from_nalgebra(out.clone(), inp.clone(), &random_isometry_raw(out.dim(), inp.dim(), rng))
        .expect("shape")
}

/// Random operator with operator norm at most one.
pub fn random_contraction(out: &SpaceSpec, inp: &SpaceSpec, rng: &mut impl Rng) -> CMatrix {
    let g = ginibre(out.dim(), inp.dim(), rng);
    let s = g.clone().svd(false, false).singular_values.max();
    let scale: f64 = rng.random_range(0.2..1.0);
    let m = g.map(|z| z * (scale / s.max(1e-300)));
    CMatrix::from_nalgebra(out.clone(), inp.clone(), &m).expect("shape")
}

/// Normalized random state.
pub fn random_state(space: &SpaceSpec, rng: &mut impl Rng) -> CVector {
    let mut data: Vec<C64> = (0..space.dim()).map(|_| gaussian(rng)).collect();
    let n: f64 = data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut data {
        *z /= n;
    }
    CVector::new(space.clone(), data).expect("shape")
}

/// A complete instrument `{K_x}` with `outcomes` elements, obtained by
/// slicing a Haar isometry `inp → out ⊗ C^outcomes`.
pub fn random_instrument(out: &SpaceSpec, inp: &SpaceSpec, outcomes: usize, rng: &mut impl Rng) -> Vec<CMatrix> {
    let (dout, din) = (out.dim(), inp.dim());
    let v = random_isometry_raw(dout * outcomes, din, rng);
    (0..outcomes)
        .map(|x| CMatrix::from_fn(out.clone(), inp.clone(), |i, j| v[(x * dout + i, j)]))
        .collect()
}
