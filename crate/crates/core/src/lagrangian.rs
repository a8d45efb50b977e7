//! Oracle-side Lagrangian quantities.
//!
//! These need the true Ψ and are only used to check identities and to
//! measure the per-player regret of a finished run. The solver never calls
//! into this module.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{LinearCmdp, TabularPolicy};

/// `v_{ζ,π}(s) = Σ_a π(a|s)⟨ζ, φ(s,a)⟩` over every state.
pub fn value_of(mdp: &LinearCmdp, zeta: &DVector<f64>, pi: &TabularPolicy) -> DVector<f64> {
    let q = mdp.phi() * zeta;
    DVector::from_iterator(
        mdp.num_states(),
        (0..mdp.num_states()).map(|s| (0..mdp.num_actions()).map(|a| pi.probs[(s, a)] * q[mdp.pair(s, a)]).sum()),
    )
}

/// `μ_{λ,π}(s,a) = π(a|s)[(1−γ)ν_0(s) + γ⟨ψ(s), λ⟩]` over pairs.
pub fn parameterized_occupancy(mdp: &LinearCmdp, lambda: &DVector<f64>, pi: &TabularPolicy) -> DVector<f64> {
    let gamma = mdp.gamma();
    let mut state_mass = mdp.psi().tr_mul(lambda) * gamma;
    state_mass[mdp.s0()] += 1.0 - gamma;
    DVector::from_iterator(
        mdp.num_pairs(),
        (0..mdp.num_states()).flat_map(|s| {
            let mass = state_mass[s];
            (0..mdp.num_actions()).map(move |a| pi.probs[(s, a)] * mass)
        }),
    )
}

fn constraint_term(mdp: &LinearCmdp, lambda: &DVector<f64>, w: &[f64]) -> f64 {
    w.iter()
        .zip(mdp.tau())
        .zip(&mdp.thetas()[1..])
        .map(|((wi, ti), theta)| wi * (ti - theta.dot(lambda)))
        .sum()
}

/// `g(λ, ζ, w, π) = ⟨λ, θ_0⟩ + ⟨ζ, Φᵀμ_{λ,π} − λ⟩ − ⟨w, τ − Θᵀλ⟩`.
///
/// With `w` empty this is the unconstrained `f(λ, ζ, π)`.
pub fn lagrangian_flow_form(
    mdp: &LinearCmdp,
    zeta: &DVector<f64>,
    lambda: &DVector<f64>,
    w: &[f64],
    pi: &TabularPolicy,
) -> f64 {
    let flow = mdp.phi().tr_mul(&parameterized_occupancy(mdp, lambda, pi));
    lambda.dot(&mdp.thetas()[0]) + zeta.dot(&(flow - lambda)) - constraint_term(mdp, lambda, w)
}

/// `g = (1−γ)⟨ν_0, v_{ζ,π}⟩ + ⟨λ, θ_0 + γΨv_{ζ,π} − ζ⟩ − ⟨w, τ − Θᵀλ⟩`.
pub fn lagrangian_value_form(
    mdp: &LinearCmdp,
    zeta: &DVector<f64>,
    lambda: &DVector<f64>,
    w: &[f64],
    pi: &TabularPolicy,
) -> f64 {
    let gamma = mdp.gamma();
    let v = value_of(mdp, zeta, pi);
    let xi = &mdp.thetas()[0] + (mdp.psi() * &v) * gamma - zeta;
    (1.0 - gamma) * v[mdp.s0()] + lambda.dot(&xi) - constraint_term(mdp, lambda, w)
}

/// `L(π, w) = J_0(π) + w·(J(π) − τ)`.
pub fn lagrangian_of_policy(mdp: &LinearCmdp, pi: &TabularPolicy, w: &[f64]) -> Result<f64> {
    let returns = mdp.exact_eval(pi, &[])?.returns;
    Ok(returns[0]
        + w.iter()
            .zip(mdp.tau())
            .zip(&returns[1..])
            .map(|((wi, ti), ji)| wi * (ji - ti))
            .sum::<f64>())
}

/// One iteration's split of `J(π*) − J(π_t)` into the three player regrets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegretTerms {
    pub gap: f64,
    pub policy: f64,
    pub lambda: f64,
    pub zeta: f64,
}

impl RegretTerms {
    pub fn sum(&self) -> f64 {
        self.policy + self.lambda + self.zeta
    }
}

/// Unconstrained regret decomposition at one iterate.
///
/// `lambda_star = Φᵀμ^{π*}` and `j_star = J(π*)` come from the oracle;
/// `zeta_t`, `lambda_t`, `pi_t` are the players' actions at step `t`.
pub fn regret_terms(
    mdp: &LinearCmdp,
    pi_star: &TabularPolicy,
    lambda_star: &DVector<f64>,
    j_star: f64,
    pi_t: &TabularPolicy,
    zeta_t: &DVector<f64>,
    lambda_t: &DVector<f64>,
) -> Result<RegretTerms> {
    let f = |zeta: &DVector<f64>, lambda: &DVector<f64>, pi: &TabularPolicy| {
        lagrangian_value_form(mdp, zeta, lambda, &[], pi)
    };
    let exact = mdp.exact_eval(pi_t, &[])?;
    let at_star_star = f(zeta_t, lambda_star, pi_star);
    let at_star_t = f(zeta_t, lambda_star, pi_t);
    let at_t_t = f(zeta_t, lambda_t, pi_t);
    let at_exact = f(&exact.zeta, lambda_t, pi_t);
    Ok(RegretTerms {
        gap: j_star - exact.returns[0],
        policy: at_star_star - at_star_t,
        lambda: at_star_t - at_t_t,
        zeta: at_t_t - at_exact,
    })
}

/// State-action probabilities of a policy stacked over pairs, `π(a|s)` at `s·|A|+a`.
pub fn policy_over_pairs(pi: &TabularPolicy) -> DVector<f64> {
    let t: DMatrix<f64> = pi.probs.transpose();
    DVector::from_column_slice(t.as_slice())
}
