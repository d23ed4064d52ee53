#![allow(dead_code)]

use ccup::store::EmbeddingMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(d: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, m, |_, _| StandardNormal.sample(rng))
}

/// `d x m` matrix of random unit columns.
pub fn unit_columns(d: usize, m: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let raw = randn(d, m, rng);
    if m == 0 {
        return EmbeddingMatrix::new(raw).unwrap();
    }
    EmbeddingMatrix::new(raw).unwrap().normalize_columns().unwrap()
}

/// Random forget/retain pair with `1 <= m_f` and `0 <= m_r`, both at most `d / 2`.
pub fn instance(d: usize, rng: &mut ChaCha8Rng) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let half = (d / 2).max(1);
    let m_f = rng.random_range(1..=half);
    let m_r = rng.random_range(0..=half);
    (unit_columns(d, m_f, rng), unit_columns(d, m_r, rng))
}

pub fn condition_of_gram(t: &DMatrix<f64>) -> f64 {
    let sv = t.singular_values();
    (sv.max() / sv.min()).powi(2)
}
