//! Per-iteration strategies of the π-, ζ-, w- and λ-players.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::error::{invalid, Result};
use crate::model::{FeatureMap, TabularPolicy};
use crate::spanner::CoefLambda;

/// Softmax policy `π(a|s) ∝ exp⟨φ(s,a), z⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicy {
    pub z: DVector<f64>,
}

impl SoftmaxPolicy {
    pub fn uniform(dim: usize) -> Self {
        Self { z: DVector::zeros(dim) }
    }

    /// Materializes the policy at every state. Evaluation only.
    pub fn to_tabular<F: FeatureMap + ?Sized>(&self, features: &F, num_states: usize) -> TabularPolicy {
        let na = features.num_actions();
        let mut probs = DMatrix::<f64>::zeros(num_states, na);
        for s in 0..num_states {
            probs.set_row(s, &softmax_at(self, s, features).transpose());
        }
        TabularPolicy { probs }
    }
}

/// Max-shifted softmax of a logit vector.
pub fn softmax_of_logits(logits: &DVector<f64>) -> DVector<f64> {
    let top = logits.max();
    let mut p = logits.map(|l| (l - top).exp());
    let total = p.sum();
    p /= total;
    p
}

/// Action distribution at `s`.
pub fn softmax_at<F: FeatureMap + ?Sized>(pol: &SoftmaxPolicy, s: usize, features: &F) -> DVector<f64> {
    softmax_of_logits(&(features.action_features(s) * &pol.z))
}

/// `z ← z + α ζ`.
pub fn pi_update(pol: &SoftmaxPolicy, zeta: &DVector<f64>, alpha: f64) -> SoftmaxPolicy {
    let mut z = pol.z.clone();
    z.axpy(alpha, zeta, 1.0);
    SoftmaxPolicy { z }
}

/// Minimizer of `⟨ζ, g⟩` over the ball of radius `d_zeta`; zero when `g` vanishes.
pub fn zeta_greedy(g: &DVector<f64>, d_zeta: f64) -> DVector<f64> {
    let norm = g.norm();
    if norm <= 1e-14 {
        DVector::zeros(g.len())
    } else {
        g * (-d_zeta / norm)
    }
}

/// Minimizer of `⟨w, τ − Θᵀλ⟩` over `d_w·{w ≥ 0, Σw ≤ 1}`.
///
/// `thetas` is the `d × I` constraint matrix. Ties go to the lowest index.
pub fn w_greedy(lambda: &DVector<f64>, thetas: &DMatrix<f64>, tau: &[f64], d_w: f64) -> Vec<f64> {
    let gap: Vec<f64> = tau
        .iter()
        .enumerate()
        .map(|(i, t)| t - thetas.column(i).dot(lambda))
        .collect();
    let mut w = vec![0.0; tau.len()];
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in gap.iter().enumerate() {
        if best.is_none_or(|(_, b)| g < b) {
            best = Some((i, g));
        }
    }
    if let Some((i, g)) = best {
        if g < 0.0 {
            w[i] = d_w;
        }
    }
    w
}

/// One projected gradient-ascent step on `⟨λ(c), ξ̂⟩` over `[−B, B]ⁿ`.
pub fn oco_step(c: &CoefLambda, xi_hat: &DVector<f64>, ds: &OfflineDataset, eta: f64) -> CoefLambda {
    let n = ds.len() as f64;
    let b = c.bound;
    let grad = ds.features() * xi_hat;
    let mut coefs = c.coefs.clone();
    coefs.axpy(eta / n, &grad, 1.0);
    coefs.apply(|x| *x = x.clamp(-b, b));
    let lambda = ds.features().tr_mul(&coefs) / n;
    CoefLambda::from_parts(coefs, b, lambda)
}

/// Radii and step sizes shared by the players.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerBounds {
    pub d_zeta: f64,
    /// Zero when there are no constraints to price.
    pub d_w: f64,
    pub d_pi: f64,
    pub alpha: f64,
    pub oco_step: f64,
    /// Coefficient box `B`, set to the concentrability bound.
    pub c_star: f64,
}

impl PlayerBounds {
    /// Bounds for the unconstrained problem (`D_ψ = 1`).
    pub fn unconstrained(dim: usize, num_actions: usize, gamma: f64, t_iters: usize, n: usize, c_star: f64) -> Self {
        let d_zeta = unconstrained_d_zeta(dim, gamma);
        Self::assemble(d_zeta, 0.0, dim, num_actions, gamma, t_iters, n, c_star)
    }

    /// Bounds for the constrained problem with multiplier radius `d_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn constrained(
        dim: usize,
        num_actions: usize,
        gamma: f64,
        t_iters: usize,
        n: usize,
        c_star: f64,
        d_w: f64,
    ) -> Self {
        let d_zeta = constrained_d_zeta(dim, gamma, d_w);
        Self::assemble(d_zeta, d_w, dim, num_actions, gamma, t_iters, n, c_star)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        d_zeta: f64,
        d_w: f64,
        dim: usize,
        num_actions: usize,
        gamma: f64,
        t_iters: usize,
        n: usize,
        c_star: f64,
    ) -> Self {
        let t = t_iters.max(1) as f64;
        let alpha = default_alpha(dim, num_actions, gamma, t_iters);
        let g = gradient_bound(d_zeta, d_w, dim, gamma);
        Self {
            d_zeta,
            d_w,
            d_pi: alpha * t * d_zeta,
            alpha,
            oco_step: default_oco_step(c_star, n, g, t_iters),
            c_star,
        }
    }

    /// Replaces `α` and keeps `D_π = αT·D_ζ` consistent.
    pub fn with_alpha(mut self, alpha: f64, t_iters: usize) -> Self {
        self.alpha = alpha;
        self.d_pi = alpha * t_iters as f64 * self.d_zeta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_zeta", self.d_zeta),
            ("d_pi", self.d_pi),
            ("alpha", self.alpha),
            ("oco_step", self.oco_step),
            ("c_star", self.c_star),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} = {v} must be finite and positive")));
            }
        }
        if !(self.d_w >= 0.0 && self.d_w.is_finite()) {
            return Err(invalid(format!("d_w = {} must be finite and nonnegative", self.d_w)));
        }
        Ok(())
    }
}

/// `√d + γ√d/(1−γ)`.
pub fn unconstrained_d_zeta(dim: usize, gamma: f64) -> f64 {
    let sd = (dim as f64).sqrt();
    sd + gamma * sd / (1.0 - gamma)
}

/// `1 + D_w + γ√d(1 + D_w)/(1−γ)`.
pub fn constrained_d_zeta(dim: usize, gamma: f64, d_w: f64) -> f64 {
    1.0 + d_w + gamma * (dim as f64).sqrt() * (1.0 + d_w) / (1.0 - gamma)
}

/// `(1−γ)√(log|A| / (dT))`, falling back to `log 2` when `|A| = 1`.
pub fn default_alpha(dim: usize, num_actions: usize, gamma: f64, t_iters: usize) -> f64 {
    let log_a = (num_actions.max(2) as f64).ln();
    (1.0 - gamma) * (log_a / (dim as f64 * t_iters.max(1) as f64)).sqrt()
}

/// Bound on `‖ξ̂‖`: `1 + D_w + D_ζ + γD_ζ√d`.
pub fn gradient_bound(d_zeta: f64, d_w: f64, dim: usize, gamma: f64) -> f64 {
    1.0 + d_w + d_zeta + gamma * d_zeta * (dim as f64).sqrt()
}

/// `2Bn / (G√T)`: the box `[−B, B]ⁿ` has diameter `2B√n` and the
/// coefficient-space gradient has norm at most `G/√n`.
pub fn default_oco_step(c_star: f64, n: usize, g: f64, t_iters: usize) -> f64 {
    2.0 * c_star * n as f64 / (g * (t_iters.max(1) as f64).sqrt())
}
