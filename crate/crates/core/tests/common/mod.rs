//! Shared helpers for integration tests: seeded random systems and dense
//! covariance oracles.

#![allow(dead_code)]

use rand::prelude::*;
use rand_xoshiro::Xoshiro256PlusPlus;
use srfvio::mat::Mat;
use srfvio::srf::{LinearizedMeasurement, SqrtState};
use srfvio::tri;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_mat(r: usize, c: usize, g: &mut impl Rng) -> Mat<f64> {
    Mat::from_fn(r, c, |_, _| g.gen_range(-1.0..1.0))
}

/// Random upper-triangular factor with a comfortable condition number.
pub fn random_factor(n: usize, g: &mut impl Rng) -> Mat<f64> {
    let a = random_mat(n, n, g).add(&Mat::identity(n).scale(3.0));
    tri::qr_triangularize(&a).into_mat()
}

pub fn random_state(n: usize, g: &mut impl Rng) -> SqrtState<f64> {
    let mean = (0..n).map(|_| g.gen_range(-2.0..2.0)).collect();
    SqrtState::from_blocks(
        &[(srfvio::srf::BlockKind::Lin(n), srfvio::srf::BlockTag::Generic(0))],
        mean,
        random_factor(n, g),
    )
}

pub fn random_meas(m: usize, n: usize, g: &mut impl Rng) -> LinearizedMeasurement<f64> {
    let h = random_mat(m, n, g);
    let r = (0..m).map(|_| g.gen_range(-1.0..1.0)).collect();
    LinearizedMeasurement::new_dense(r, h, g.gen_range(0.5..2.0))
}

pub fn max_rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    a.rel_err(b)
}

pub fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    num / den
}
