//! Data-driven estimates consumed by the solver.
//!
//! Everything here touches only `s0` and the next states that occur in the
//! dataset, so the cost per call does not depend on `|S|`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{GramMatrix, OfflineDataset};
use crate::error::{invalid, Result};
use crate::model::FeatureMap;
use crate::players::{softmax_of_logits, SoftmaxPolicy};

/// Feature blocks of the distinct states `{s0} ∪ {s'_k}`.
#[derive(Clone, Debug)]
pub struct StateCache {
    /// State index of each slot; slot 0 is `s0`.
    pub states: Vec<usize>,
    /// `|A| × d` feature block per slot.
    pub blocks: Vec<DMatrix<f64>>,
    /// Slot of `s'_k` for each sample.
    pub next_slot: Vec<usize>,
    num_samples: usize,
}

impl StateCache {
    pub fn build<F: FeatureMap + ?Sized>(ds: &OfflineDataset, features: &F, s0: usize) -> Result<Self> {
        if features.dim() != ds.dim() {
            return Err(invalid(format!(
                "feature map has dimension {}, dataset {}",
                features.dim(),
                ds.dim()
            )));
        }
        let mut slot_of: HashMap<usize, usize> = HashMap::new();
        let mut states = vec![s0];
        slot_of.insert(s0, 0);
        let next_slot = ds
            .transitions()
            .iter()
            .map(|t| {
                *slot_of.entry(t.next_state).or_insert_with(|| {
                    states.push(t.next_state);
                    states.len() - 1
                })
            })
            .collect();
        let blocks = states.iter().map(|&s| features.action_features(s)).collect();
        Ok(Self { states, blocks, next_slot, num_samples: ds.len() })
    }

    pub fn num_slots(&self) -> usize {
        self.states.len()
    }

    /// Policy probabilities and `φ(s, π) = Σ_a π(a|s) φ(s,a)` at every slot.
    pub fn localize(&self, pol: &SoftmaxPolicy) -> LocalPolicy {
        let d = pol.z.len();
        let mut mean_features = DMatrix::<f64>::zeros(self.blocks.len(), d);
        let mut probs = Vec::with_capacity(self.blocks.len());
        for (u, block) in self.blocks.iter().enumerate() {
            let p = softmax_of_logits(&(block * &pol.z));
            mean_features.set_row(u, &(block.tr_mul(&p)).transpose());
            probs.push(p);
        }
        LocalPolicy { probs, mean_features }
    }
}

/// A softmax policy evaluated at the cached states only.
#[derive(Clone, Debug)]
pub struct LocalPolicy {
    pub probs: Vec<DVector<f64>>,
    /// `slots × d`, row `u` is `φ(state_u, π)`.
    pub mean_features: DMatrix<f64>,
}

/// `v_{ζ,π}` at `s0` and at every sampled next state.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueAtStates {
    pub at_s0: f64,
    pub at_next: DVector<f64>,
}

/// `v_{ζ,π}(s) = Σ_a π(a|s)⟨ζ, φ(s,a)⟩` at the cached states.
pub fn v_values(zeta: &DVector<f64>, pi: &LocalPolicy, cache: &StateCache) -> ValueAtStates {
    let per_slot = &pi.mean_features * zeta;
    ValueAtStates {
        at_s0: per_slot[0],
        at_next: DVector::from_iterator(cache.next_slot.len(), cache.next_slot.iter().map(|&u| per_slot[u])),
    }
}

/// Regularized least squares `(nΛ̂ + I)⁻¹ Σ_k v(s'_k) φ(s_k, a_k)`.
pub fn psi_v_hat(vals: &ValueAtStates, ds: &OfflineDataset, gram: &GramMatrix) -> DVector<f64> {
    let rhs = ds.features().tr_mul(&vals.at_next);
    gram.solve_regularized(&rhs)
}

/// `(1−γ)φ(s0, π) + (γ/n) Σ_k c_k φ(s'_k, π)`.
pub fn phi_mu_hat(c: &DVector<f64>, pi: &LocalPolicy, cache: &StateCache, gamma: f64) -> DVector<f64> {
    let mut weight = DVector::<f64>::zeros(pi.mean_features.nrows());
    for (&ck, &u) in c.iter().zip(&cache.next_slot) {
        weight[u] += ck;
    }
    weight *= gamma / cache.num_samples as f64;
    weight[0] += 1.0 - gamma;
    pi.mean_features.tr_mul(&weight)
}
