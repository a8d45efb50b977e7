//! Offline datasets, the empirical Gram matrix, and concentrability.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{FeatureMap, LinearCmdp, TabularPolicy};

/// Occupancy entries below this are treated as zero mass.
const SUPPORT_EPS: f64 = 1e-14;

/// Relative eigenvalue cutoff for the Gram pseudo-inverse.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// A distribution `μ_B` over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDistribution {
    probs: Vec<f64>,
}

impl BehaviorDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("behavior distribution is empty"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("behavior probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("behavior probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_pairs: usize) -> Self {
        Self { probs: vec![1.0 / num_pairs as f64; num_pairs] }
    }

    /// `κ·μ_target + (1−κ)·uniform`.
    pub fn blend(target: &DVector<f64>, kappa: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(invalid(format!("blend weight {kappa} outside [0, 1]")));
        }
        let m = target.len() as f64;
        let mut probs: Vec<f64> = target.iter().map(|&t| kappa * t.max(0.0) + (1.0 - kappa) / m).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// One offline sample `(s, a, s')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// `n` transitions plus the cached feature rows `φ(s_k, a_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    /// `n × d`.
    features: DMatrix<f64>,
}

impl OfflineDataset {
    /// Builds a dataset from transitions, looking up `φ(s_k, a_k)` through
    /// the known feature map.
    pub fn new<F: FeatureMap + ?Sized>(transitions: Vec<Transition>, features: &F) -> Result<Self> {
        if transitions.is_empty() {
            return Err(invalid("dataset must contain at least one transition"));
        }
        let d = features.dim();
        let mut rows = DMatrix::<f64>::zeros(transitions.len(), d);
        for (k, t) in transitions.iter().enumerate() {
            if t.action >= features.num_actions() {
                return Err(invalid(format!("action {} out of range in row {k}", t.action)));
            }
            rows.set_row(k, &features.action_features(t.state).row(t.action));
        }
        Ok(Self { transitions, features: rows })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Cached `φ(s_k, a_k)` rows, `n × d`.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// `φ(s'_k, ·)` for every action, fetched on demand.
    pub fn next_features<F: FeatureMap + ?Sized>(&self, k: usize, features: &F) -> DMatrix<f64> {
        features.action_features(self.transitions[k].next_state)
    }

    /// Writes `k,s,a,s_next` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "s", "a", "s_next"])?;
        for (k, t) in self.transitions.iter().enumerate() {
            out.write_record(&[k.to_string(), t.state.to_string(), t.action.to_string(), t.next_state.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read, F: FeatureMap + ?Sized>(r: R, features: &F) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            k: usize,
            s: usize,
            a: usize,
            s_next: usize,
        }
        let mut reader = csv::Reader::from_reader(r);
        let mut transitions = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            if row.k != i {
                return Err(invalid(format!("row {i} carries index {}", row.k)));
            }
            transitions.push(Transition { state: row.s, action: row.a, next_state: row.s_next });
        }
        Self::new(transitions, features)
    }
}

/// Draws `n` i.i.d. pairs from `μ_B` and a next state for each from `P`.
pub fn sample_dataset(
    mdp: &LinearCmdp,
    mu_b: &BehaviorDistribution,
    n: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if mu_b.probs.len() != mdp.num_pairs() {
        return Err(invalid(format!(
            "behavior distribution has {} entries, instance has {} pairs",
            mu_b.probs.len(),
            mdp.num_pairs()
        )));
    }
    let p = mdp.transition_matrix();
    let pair_dist = WeightedIndex::new(&mu_b.probs).map_err(|e| invalid(e.to_string()))?;
    let mut next_dists: Vec<Option<WeightedIndex<f64>>> = vec![None; mdp.num_pairs()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = mdp.num_actions();
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let pair = pair_dist.sample(&mut rng);
        let dist = match &next_dists[pair] {
            Some(d) => d,
            None => {
                let row: Vec<f64> = p.row(pair).iter().map(|&x| x.max(0.0)).collect();
                let d = WeightedIndex::new(row).map_err(|e| Error::Degenerate(e.to_string()))?;
                next_dists[pair].insert(d)
            }
        };
        let next_state = dist.sample(&mut rng);
        transitions.push(Transition { state: pair / na, action: pair % na, next_state });
    }
    OfflineDataset::new(transitions, mdp)
}

/// `Λ̂_n = (1/n) Σ φ_k φ_kᵀ` with its pseudo-inverse and `(nΛ̂_n + I)⁻¹`.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub lambda_hat: DMatrix<f64>,
    pub pseudo_inverse: DMatrix<f64>,
    pub regularized_inverse: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl GramMatrix {
    /// Solves `(nΛ̂_n + I) x = rhs` with the cached factorization.
    pub fn solve_regularized(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }
}

pub fn gram_matrix(ds: &OfflineDataset) -> GramMatrix {
    let n = ds.len() as f64;
    let x = ds.features();
    let raw = x.tr_mul(x);
    let scatter = (&raw + raw.transpose()) * 0.5;
    let lambda_hat = &scatter / n;

    let eig = SymmetricEigen::new(lambda_hat.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * top;
    let d = lambda_hat.nrows();
    let mut pseudo_inverse = DMatrix::<f64>::zeros(d, d);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cutoff && ev > 0.0 {
            let u = eig.eigenvectors.column(i);
            pseudo_inverse += (u * u.transpose()) / ev;
        }
    }

    let regularized = scatter + DMatrix::<f64>::identity(d, d);
    let factor = Cholesky::new(regularized).expect("nΛ̂ + I is positive definite");
    let regularized_inverse = factor.inverse();
    GramMatrix { lambda_hat, pseudo_inverse, regularized_inverse, factor }
}

/// `max μ^target(s,a) / μ_B(s,a)` over the behavior support.
pub fn concentrability(mdp: &LinearCmdp, target: &TabularPolicy, mu_b: &BehaviorDistribution) -> Result<f64> {
    let mu = mdp.exact_eval(target, &[])?.mu;
    concentrability_of(&mu, mu_b, mdp.num_actions())
}

/// Concentrability of an explicit target occupancy measure.
///
/// Pairs where both measures vanish are covered.
pub fn concentrability_of(target: &DVector<f64>, mu_b: &BehaviorDistribution, num_actions: usize) -> Result<f64> {
    if target.len() != mu_b.probs.len() {
        return Err(invalid("target occupancy and behavior distribution differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (pair, (&t, &b)) in target.iter().zip(&mu_b.probs).enumerate() {
        if b > 0.0 {
            worst = worst.max(t / b);
        } else if t > SUPPORT_EPS {
            return Err(Error::Coverage { state: pair / num_actions, action: pair % num_actions });
        }
    }
    Ok(worst)
}
