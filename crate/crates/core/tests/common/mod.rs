#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use offline_lmdp::experiment::auto_tau;
use offline_lmdp::{build_random_cmdp, CmdpSizes, FeatureMap, LinearCmdp, OfflineDataset, TabularPolicy, Transition};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The benchmark instance shape: six states, three actions, `d = 5`, `γ = 0.9`.
pub const REFERENCE_SIZES: (usize, usize, usize) = (6, 3, 5);
pub const REFERENCE_GAMMA: f64 = 0.9;

/// First generator seed whose automatic threshold leaves a Slater margin of
/// at least 0.05 under the dual-grid oracle.
pub fn reference_seed() -> u64 {
    let (s, a, d) = REFERENCE_SIZES;
    (0..100)
        .find(|&seed| {
            let m = build_random_cmdp(seed, CmdpSizes::new(s, a, d, 1), REFERENCE_GAMMA).unwrap();
            let tau = auto_tau(&m).unwrap();
            m.optimal_constrained(&[tau], 2000).map(|o| o.slater_margin >= 0.05).unwrap_or(false)
        })
        .expect("no seed below 100 gives a usable Slater margin")
}

pub fn reference_instance(constraints: usize) -> LinearCmdp {
    let (s, a, d) = REFERENCE_SIZES;
    build_random_cmdp(reference_seed(), CmdpSizes::new(s, a, d, constraints), REFERENCE_GAMMA).unwrap()
}

/// A feature map with one state per row and a single action.
pub struct Rows(pub DMatrix<f64>);

impl FeatureMap for Rows {
    fn num_actions(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn action_features(&self, s: usize) -> DMatrix<f64> {
        self.0.rows(s, 1).into_owned()
    }
}

/// Dataset whose `k`-th feature row is row `k` of `x`.
pub fn dataset_of_rows(x: &DMatrix<f64>) -> OfflineDataset {
    let rows = Rows(x.clone());
    let transitions = (0..x.nrows()).map(|k| Transition { state: k, action: 0, next_state: 0 }).collect();
    OfflineDataset::new(transitions, &rows).unwrap()
}

pub fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
    let mut p = DMatrix::<f64>::zeros(ns, na);
    for s in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = row.iter().sum();
        for (a, v) in row.into_iter().enumerate() {
            p[(s, a)] = v / total;
        }
    }
    TabularPolicy::new(p).unwrap()
}

/// Random point in the Euclidean ball of the given radius.
pub fn random_in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let dir: DVector<f64> = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
    let norm = dir.norm().max(1e-12);
    let r = radius * rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64);
    dir * (r / norm)
}

pub fn median(values: &[f64]) -> f64 {
    offline_lmdp::experiment::median(values)
}
