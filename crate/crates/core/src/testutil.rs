//! Seeded random problem instances shared across unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mdp::{FiniteMdp, Policy};

fn random_row(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + floor).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Fully mixing random MDP (every transition probability positive).
pub(crate) fn random_mdp(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> FiniteMdp {
    let kernels = (0..n_actions)
        .map(|_| {
            let rows: Vec<f64> =
                (0..n_states).flat_map(|_| random_row(rng, n_states, 0.05)).collect();
            DMatrix::from_row_slice(n_states, n_states, &rows)
        })
        .collect();
    let rewards = DMatrix::from_fn(n_states, n_actions, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let initial = DVector::from_element(n_states, 1.0 / n_states as f64);
    FiniteMdp::new(kernels, rewards, gamma, initial).unwrap()
}

/// Random policy with full support; the floor keeps importance ratios at
/// desk scale.
pub(crate) fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> Policy {
    let rows: Vec<f64> =
        (0..n_states).flat_map(|_| random_row(rng, n_actions, 0.2)).collect();
    Policy::new(DMatrix::from_row_slice(n_states, n_actions, &rows)).unwrap()
}

/// Random full-rank-with-overwhelming-probability feature matrix.
pub(crate) fn random_features(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    dim: usize,
) -> crate::mdp::FeatureMap {
    let m = DMatrix::from_fn(n_states, dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    crate::mdp::FeatureMap::new(m).unwrap()
}
