//! Primal-dual loops for the unconstrained and constrained offline problems.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{gram_matrix, OfflineDataset};
use crate::error::{invalid, Error, Result};
use crate::estimators::{phi_mu_hat, psi_v_hat, v_values, StateCache};
use crate::model::{stack_columns, FeatureMap, LinearCmdp};
use crate::par::{self, Execution};
use crate::players::{
    oco_step, pi_update, w_greedy, zeta_greedy, PlayerBounds, SoftmaxPolicy,
};
use crate::spanner::{compute_spanner, convert_coeffs, CoefLambda};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unconstrained,
    Constrained,
    ConstrainedExactFeasibility,
}

impl Mode {
    pub fn is_constrained(self) -> bool {
        !matches!(self, Mode::Unconstrained)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unconstrained => "unconstrained",
            Mode::Constrained => "constrained",
            Mode::ConstrainedExactFeasibility => "constrained_exact_feasibility",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconstrained" => Ok(Mode::Unconstrained),
            "constrained" => Ok(Mode::Constrained),
            "constrained_exact_feasibility" | "exact_feasibility" => Ok(Mode::ConstrainedExactFeasibility),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Which coefficient vector drives the flow estimate `Φᵀμ̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEstimator {
    /// The spanner-supported `c'_t`: at most `d` next states carry weight.
    #[default]
    Converted,
    /// The λ-player's own `c_t`, which spreads weight over all `n` samples.
    /// Same conditional mean as `Converted` since `λ(c_t) = λ(c'_t)`, with
    /// variance that shrinks in `n`.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t_iters: usize,
    pub bounds: PlayerBounds,
    pub mode: Mode,
    pub epsilon: f64,
    /// Slater margin; unused in unconstrained mode.
    pub phi: f64,
    /// Thresholds the loop actually prices.
    pub tau_input: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub flow: FlowEstimator,
}

/// `⌈d log|A| / ((1−γ)² ε²)⌉`, clamped to `[1, cap]`.
pub fn default_t_iters(dim: usize, num_actions: usize, gamma: f64, epsilon: f64, cap: usize) -> usize {
    let log_a = (num_actions.max(2) as f64).ln();
    let t = (dim as f64 * log_a / ((1.0 - gamma).powi(2) * epsilon * epsilon)).ceil();
    if t.is_finite() {
        (t as usize).clamp(1, cap.max(1))
    } else {
        cap.max(1)
    }
}

impl SolverConfig {
    pub fn unconstrained(dim: usize, num_actions: usize, gamma: f64, n: usize, c_star: f64, t_iters: usize) -> Self {
        Self {
            t_iters,
            bounds: PlayerBounds::unconstrained(dim, num_actions, gamma, t_iters, n, c_star),
            mode: Mode::Unconstrained,
            epsilon: 0.1,
            phi: 0.0,
            tau_input: Vec::new(),
            seed: 0,
            flow: FlowEstimator::default(),
        }
    }

    /// Thresholds `τ` as given and `D_w = 1 + 1/φ`.
    #[allow(clippy::too_many_arguments)]
    pub fn constrained(
        dim: usize,
        num_actions: usize,
        gamma: f64,
        n: usize,
        c_star: f64,
        t_iters: usize,
        tau: Vec<f64>,
        phi: f64,
    ) -> Self {
        let d_w = 1.0 + 1.0 / phi;
        Self {
            t_iters,
            bounds: PlayerBounds::constrained(dim, num_actions, gamma, t_iters, n, c_star, d_w),
            mode: Mode::Constrained,
            epsilon: 0.1,
            phi,
            tau_input: tau,
            seed: 0,
            flow: FlowEstimator::default(),
        }
    }

    /// Thresholds tightened to `τ + φε` and `D_w = 4/φ`.
    #[allow(clippy::too_many_arguments)]
    pub fn exact_feasibility(
        dim: usize,
        num_actions: usize,
        gamma: f64,
        n: usize,
        c_star: f64,
        t_iters: usize,
        tau: &[f64],
        phi: f64,
        epsilon: f64,
    ) -> Self {
        let d_w = 4.0 / phi;
        Self {
            t_iters,
            bounds: PlayerBounds::constrained(dim, num_actions, gamma, t_iters, n, c_star, d_w),
            mode: Mode::ConstrainedExactFeasibility,
            epsilon,
            phi,
            tau_input: tau.iter().map(|t| t + phi * epsilon).collect(),
            seed: 0,
            flow: FlowEstimator::default(),
        }
    }

    pub fn validate(&self, num_constraints: usize) -> Result<()> {
        if self.t_iters == 0 {
            return Err(invalid("t_iters must be at least 1"));
        }
        self.bounds.validate()?;
        if self.mode.is_constrained() {
            if !(self.phi > 0.0 && self.phi.is_finite()) {
                return Err(invalid(format!("constrained modes need a positive Slater margin, got {}", self.phi)));
            }
            if self.tau_input.len() != num_constraints {
                return Err(invalid(format!(
                    "{} thresholds for {num_constraints} constraints",
                    self.tau_input.len()
                )));
            }
            if self.tau_input.iter().any(|t| !t.is_finite()) {
                return Err(invalid("thresholds must be finite"));
            }
        }
        Ok(())
    }
}

/// What the learner knows: features, reward parameters, `γ`, `s0`, `τ`.
pub struct KnownModel<'a, F: FeatureMap + ?Sized> {
    pub features: &'a F,
    pub thetas: Vec<DVector<f64>>,
    pub gamma: f64,
    pub s0: usize,
    pub tau: Vec<f64>,
}

impl<'a> KnownModel<'a, LinearCmdp> {
    pub fn of(mdp: &'a LinearCmdp) -> Self {
        Self {
            features: mdp,
            thetas: mdp.thetas().to_vec(),
            gamma: mdp.gamma(),
            s0: mdp.s0(),
            tau: mdp.tau().to_vec(),
        }
    }
}

/// `π̄ = Unif(π_1, …, π_T)` with `π_t = σ(Φ z_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePolicy {
    pub alpha: f64,
    pub zs: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureDocument {
    alpha: f64,
    zs: Vec<Vec<f64>>,
}

impl MixturePolicy {
    pub fn len(&self) -> usize {
        self.zs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }

    pub fn iterate(&self, t: usize) -> SoftmaxPolicy {
        SoftmaxPolicy { z: self.zs[t].clone() }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let doc = MixtureDocument {
            alpha: self.alpha,
            zs: self.zs.iter().map(|z| z.iter().copied().collect()).collect(),
        };
        serde_json::to_writer(w, &doc)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let doc: MixtureDocument = serde_json::from_reader(r)?;
        if doc.zs.is_empty() {
            return Err(invalid("mixture policy has no iterates"));
        }
        let d = doc.zs[0].len();
        if doc.zs.iter().any(|z| z.len() != d) {
            return Err(invalid("mixture iterates differ in dimension"));
        }
        Ok(Self { alpha: doc.alpha, zs: doc.zs.into_iter().map(DVector::from_vec).collect() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// `⟨ζ_t, Φᵀμ̂ − λ_t⟩`, the ζ-player's estimated objective.
    pub zeta_objective: f64,
    pub lambda_norm: f64,
    pub w: Vec<f64>,
    pub zeta: DVector<f64>,
    /// `λ(c'_t)`, the λ iterate in play at step `t`.
    pub lambda: DVector<f64>,
    /// `J_0(π_t), …, J_I(π_t)` when an oracle is attached.
    pub exact_returns: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<IterationRecord>,
}

pub fn solve<F: FeatureMap + ?Sized>(
    ds: &OfflineDataset,
    known: &KnownModel<'_, F>,
    cfg: &SolverConfig,
) -> Result<(MixturePolicy, RunTrace)> {
    run(ds, known, cfg, None)
}

/// Same iterates as [`solve`]; the oracle only fills diagnostics.
pub fn solve_with_oracle<F: FeatureMap + ?Sized>(
    ds: &OfflineDataset,
    known: &KnownModel<'_, F>,
    cfg: &SolverConfig,
    oracle: &LinearCmdp,
) -> Result<(MixturePolicy, RunTrace)> {
    run(ds, known, cfg, Some(oracle))
}

fn run<F: FeatureMap + ?Sized>(
    ds: &OfflineDataset,
    known: &KnownModel<'_, F>,
    cfg: &SolverConfig,
    oracle: Option<&LinearCmdp>,
) -> Result<(MixturePolicy, RunTrace)> {
    let d = known.features.dim();
    if ds.dim() != d {
        return Err(invalid(format!("dataset dimension {} differs from feature dimension {d}", ds.dim())));
    }
    if known.thetas.is_empty() || known.thetas.iter().any(|t| t.len() != d) {
        return Err(invalid("reward parameters must be nonempty and match the feature dimension"));
    }
    if !(known.gamma >= 0.0 && known.gamma < 1.0) {
        return Err(invalid(format!("gamma {} must lie in [0, 1)", known.gamma)));
    }
    let num_constraints = known.thetas.len() - 1;
    cfg.validate(num_constraints)?;
    let constrained = cfg.mode.is_constrained() && num_constraints > 0;

    let gamma = known.gamma;
    let b = cfg.bounds;
    let theta0 = &known.thetas[0];
    let theta_c: DMatrix<f64> = stack_columns(d, &known.thetas[1..]);

    let cache = StateCache::build(ds, known.features, known.s0)?;
    let gram = gram_matrix(ds);
    let spanner = compute_spanner(ds, 2.0)?;

    let mut pol = SoftmaxPolicy::uniform(d);
    let mut c = CoefLambda::zeros(b.c_star, ds);
    let mut c_prime = CoefLambda::zeros(0.0, ds);
    let mut zs = Vec::with_capacity(cfg.t_iters);
    let mut records = Vec::with_capacity(cfg.t_iters);

    for t in 0..cfg.t_iters {
        let local = cache.localize(&pol);
        let flow_coefs = match cfg.flow {
            FlowEstimator::Converted => &c_prime.coefs,
            FlowEstimator::Direct => &c.coefs,
        };
        let g = phi_mu_hat(flow_coefs, &local, &cache, gamma) - &c_prime.lambda;
        let zeta = zeta_greedy(&g, b.d_zeta);

        let w = if constrained {
            w_greedy(&c_prime.lambda, &theta_c, &cfg.tau_input, b.d_w)
        } else {
            Vec::new()
        };

        let vals = v_values(&zeta, &local, &cache);
        let mut xi = theta0 - &zeta + psi_v_hat(&vals, ds, &gram) * gamma;
        for (wi, col) in w.iter().zip(theta_c.column_iter()) {
            xi.axpy(*wi, &col, 1.0);
        }
        if zeta.iter().chain(xi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: t, what: "player update".into() });
        }

        let exact_returns = match oracle {
            Some(mdp) => Some(mdp.exact_eval(&pol.to_tabular(mdp, mdp.num_states()), &[])?.returns),
            None => None,
        };
        records.push(IterationRecord {
            zeta_objective: zeta.dot(&g),
            lambda_norm: c_prime.lambda.norm(),
            w,
            zeta: zeta.clone(),
            lambda: c_prime.lambda.clone(),
            exact_returns,
        });

        c = oco_step(&c, &xi, ds, b.oco_step);
        c_prime = convert_coeffs(&c, &spanner);
        zs.push(pol.z.clone());
        pol = pi_update(&pol, &zeta, b.alpha);
    }

    Ok((MixturePolicy { alpha: b.alpha, zs }, RunTrace { records }))
}

/// `J_i(π̄) = (1/T) Σ_t J_i(π_t)`, evaluated exactly.
pub fn evaluate_mixture(mdp: &LinearCmdp, mix: &MixturePolicy, exec: Execution) -> Result<Vec<f64>> {
    if mix.is_empty() {
        return Err(invalid("mixture policy has no iterates"));
    }
    if mix.zs.iter().any(|z| z.len() != mdp.dim()) {
        return Err(invalid("mixture dimension differs from the instance"));
    }
    let per_iterate = par::map(exec, &mix.zs, |z| {
        let pi = SoftmaxPolicy { z: z.clone() }.to_tabular(mdp, mdp.num_states());
        mdp.exact_eval(&pi, &[]).map(|e| e.returns)
    });
    let mut total = vec![0.0; mdp.num_constraints() + 1];
    for returns in per_iterate {
        for (acc, r) in total.iter_mut().zip(returns?) {
            *acc += r;
        }
    }
    let t = mix.len() as f64;
    Ok(total.into_iter().map(|s| s / t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, BehaviorDistribution};
    use crate::model::{build_random_cmdp, CmdpSizes, TabularPolicy};

    #[test]
    fn single_state_single_action_is_trivially_optimal() {
        let m = build_random_cmdp(0, CmdpSizes::new(1, 1, 1, 0), 0.9).unwrap();
        let ds = sample_dataset(&m, &BehaviorDistribution::uniform(1), 20, 1).unwrap();
        let cfg = SolverConfig::unconstrained(1, 1, 0.9, 20, 1.0, 30);
        let (mix, trace) = solve(&ds, &KnownModel::of(&m), &cfg).unwrap();
        assert_eq!(mix.len(), 30);
        assert_eq!(trace.records.len(), 30);
        let (_, j_star) = m.optimal_unconstrained(1e-10).unwrap();
        let j = evaluate_mixture(&m, &mix, Execution::Sequential).unwrap()[0];
        assert!((j - j_star).abs() < 1e-12);
    }

    #[test]
    fn mixture_of_one_and_of_copies() {
        let m = build_random_cmdp(4, CmdpSizes::new(5, 3, 3, 1), 0.9).unwrap();
        let z = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let pi = SoftmaxPolicy { z: z.clone() }.to_tabular(&m, 5);
        let single = m.exact_eval(&pi, &[]).unwrap().returns;
        let one = MixturePolicy { alpha: 0.1, zs: vec![z.clone()] };
        let many = MixturePolicy { alpha: 0.1, zs: vec![z; 7] };
        for mix in [one, many] {
            let got = evaluate_mixture(&m, &mix, Execution::Parallel).unwrap();
            for (a, b) in got.iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_json_round_trip() {
        let mix = MixturePolicy {
            alpha: 0.0123,
            zs: vec![DVector::from_vec(vec![0.1, 1.0 / 3.0]), DVector::from_vec(vec![-2.5, 1e-17])],
        };
        let mut buf = Vec::new();
        mix.write_json(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("{\"alpha\""));
        assert_eq!(MixturePolicy::read_json(buf.as_slice()).unwrap(), mix);
    }

    #[test]
    fn config_validation() {
        let m = build_random_cmdp(2, CmdpSizes::new(4, 2, 3, 1), 0.9).unwrap();
        let ds = sample_dataset(&m, &BehaviorDistribution::uniform(8), 50, 0).unwrap();
        let mut cfg = SolverConfig::constrained(3, 2, 0.9, 50, 2.0, 10, vec![0.3], 0.2);
        cfg.phi = 0.0;
        assert!(solve(&ds, &KnownModel::of(&m), &cfg).is_err());
        let cfg = SolverConfig::constrained(3, 2, 0.9, 50, 2.0, 10, vec![0.3, 0.1], 0.2);
        assert!(solve(&ds, &KnownModel::of(&m), &cfg).is_err());
        let mut cfg = SolverConfig::unconstrained(3, 2, 0.9, 50, 2.0, 10);
        cfg.t_iters = 0;
        assert!(solve(&ds, &KnownModel::of(&m), &cfg).is_err());

        let exact = SolverConfig::exact_feasibility(3, 2, 0.9, 50, 2.0, 10, &[0.3], 0.2, 0.1);
        assert!((exact.tau_input[0] - 0.32).abs() < 1e-15);
        assert!((exact.bounds.d_w - 20.0).abs() < 1e-12);
        let plain = SolverConfig::constrained(3, 2, 0.9, 50, 2.0, 10, vec![0.3], 0.2);
        assert!((plain.bounds.d_w - 6.0).abs() < 1e-12);
    }

    #[test]
    fn default_iteration_count() {
        // 5 · ln 3 / (0.01 · 0.01) = 54930.6…
        assert_eq!(default_t_iters(5, 3, 0.9, 0.1, 1_000_000), 54_931);
        assert_eq!(default_t_iters(5, 3, 0.9, 0.1, 5000), 5000);
    }

    #[test]
    fn oracle_does_not_change_iterates() {
        let m = build_random_cmdp(7, CmdpSizes::new(6, 3, 4, 0), 0.8).unwrap();
        let ds = sample_dataset(&m, &BehaviorDistribution::uniform(18), 300, 2).unwrap();
        let cfg = SolverConfig::unconstrained(4, 3, 0.8, 300, 2.0, 40);
        let (a, ta) = solve(&ds, &KnownModel::of(&m), &cfg).unwrap();
        let (b, tb) = solve_with_oracle(&ds, &KnownModel::of(&m), &cfg, &m).unwrap();
        assert_eq!(a, b);
        assert!(ta.records.iter().all(|r| r.exact_returns.is_none()));
        let first = tb.records[0].exact_returns.as_ref().unwrap()[0];
        let uniform = m.exact_eval(&TabularPolicy::uniform(6, 3), &[]).unwrap().returns[0];
        assert!((first - uniform).abs() < 1e-12);
    }
}
