//! Synthetic linear CMDPs and the exact tabular oracle.
//!
//! State-action pairs are flattened as `s * num_actions + a` everywhere in
//! this crate. The initial distribution is a point mass on `s0`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Read access to the known feature map φ.
///
/// The solver only ever sees the environment through this trait, which keeps
/// the transition measures out of reach.
pub trait FeatureMap {
    fn num_actions(&self) -> usize;
    fn dim(&self) -> usize;
    /// Feature rows φ(s, a) for every action at `s`, as an `|A| × d` block.
    fn action_features(&self, s: usize) -> DMatrix<f64>;
}

/// Instance dimensions: `|S|`, `|A|`, `d` and the number of constraints `I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmdpSizes {
    pub states: usize,
    pub actions: usize,
    pub dim: usize,
    pub constraints: usize,
}

impl CmdpSizes {
    pub fn new(states: usize, actions: usize, dim: usize, constraints: usize) -> Self {
        Self { states, actions, dim, constraints }
    }
}

/// A linear CMDP with `P = ΦΨ` and rewards `r_i = Φθ_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCmdp {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    /// `(|S|·|A|) × d`, one feature row per pair.
    phi: DMatrix<f64>,
    /// `d × |S|`, one next-state distribution per feature coordinate.
    psi: DMatrix<f64>,
    thetas: Vec<DVector<f64>>,
    gamma: f64,
    s0: usize,
    tau: Vec<f64>,
    d_psi: f64,
}

impl LinearCmdp {
    /// Validates and assembles an instance.
    ///
    /// `thetas[0]` is the objective reward; `thetas[1..]` are the constraint
    /// rewards, and `tau` must have one threshold per constraint.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        phi: DMatrix<f64>,
        psi: DMatrix<f64>,
        thetas: Vec<DVector<f64>>,
        gamma: f64,
        s0: usize,
        tau: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("need at least one state and one action"));
        }
        let dim = phi.ncols();
        let pairs = num_states * num_actions;
        if dim == 0 || dim > pairs {
            return Err(invalid(format!("feature dimension {dim} must lie in 1..={pairs}")));
        }
        if phi.nrows() != pairs {
            return Err(invalid(format!("phi has {} rows, expected {pairs}", phi.nrows())));
        }
        if psi.nrows() != dim || psi.ncols() != num_states {
            return Err(invalid(format!(
                "psi is {}x{}, expected {dim}x{num_states}",
                psi.nrows(),
                psi.ncols()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("gamma {gamma} must lie in [0, 1)")));
        }
        if s0 >= num_states {
            return Err(invalid(format!("s0 {s0} out of range")));
        }
        if thetas.is_empty() {
            return Err(invalid("at least the objective reward parameter is required"));
        }
        if tau.len() + 1 != thetas.len() {
            return Err(invalid(format!(
                "{} thresholds for {} constraint rewards",
                tau.len(),
                thetas.len() - 1
            )));
        }
        for (i, row) in phi.row_iter().enumerate() {
            check_simplex(row.iter().copied(), || format!("feature row {i}"))?;
        }
        for (i, row) in psi.row_iter().enumerate() {
            check_simplex(row.iter().copied(), || format!("psi row {i}"))?;
        }
        for (i, theta) in thetas.iter().enumerate() {
            if theta.len() != dim {
                return Err(invalid(format!("theta {i} has length {}, expected {dim}", theta.len())));
            }
            if theta.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(invalid(format!("theta {i} has entries outside [0, 1]")));
            }
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(invalid("thresholds must be finite"));
        }
        Ok(Self { num_states, num_actions, dim, phi, psi, thetas, gamma, s0, tau, d_psi: 1.0 })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_constraints(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn thetas(&self) -> &[DVector<f64>] {
        &self.thetas
    }

    /// `Θ = [θ_1 … θ_I]`, a `d × I` matrix.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        stack_columns(self.dim, &self.thetas[1..])
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn s0(&self) -> usize {
        self.s0
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn d_psi(&self) -> f64 {
        self.d_psi
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Returns a copy with different constraint thresholds.
    pub fn with_tau(&self, tau: Vec<f64>) -> Result<Self> {
        if tau.len() != self.num_constraints() {
            return Err(invalid(format!(
                "{} thresholds for {} constraints",
                tau.len(),
                self.num_constraints()
            )));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(invalid("thresholds must be finite"));
        }
        Ok(Self { tau, ..self.clone() })
    }

    /// `P[(s,a), s'] = ⟨φ(s,a), ψ(s')⟩`.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        &self.phi * &self.psi
    }

    /// Reward vector `r_i = Φθ_i` over pairs.
    pub fn reward(&self, i: usize) -> DVector<f64> {
        &self.phi * &self.thetas[i]
    }

    /// `θ_0 + Θw`, the parameter of the linearized reward `r_0 + w·r`.
    pub fn linearized_theta(&self, w: &[f64]) -> DVector<f64> {
        let mut theta = self.thetas[0].clone();
        for (wi, ti) in w.iter().zip(&self.thetas[1..]) {
            theta.axpy(*wi, ti, 1.0);
        }
        theta
    }

    /// Exact evaluation of `pi` under the linearized reward `r_0 + w·r`.
    ///
    /// `w` may be empty (objective only) or have one entry per constraint.
    pub fn exact_eval(&self, pi: &TabularPolicy, w: &[f64]) -> Result<ExactEval> {
        self.check_policy(pi)?;
        if !w.is_empty() && w.len() != self.num_constraints() {
            return Err(invalid(format!("w has length {}, expected {}", w.len(), self.num_constraints())));
        }
        let (ns, na) = (self.num_states, self.num_actions);
        let gamma = self.gamma;
        let theta_u = self.linearized_theta(w);
        let reward = &self.phi * &theta_u;
        let p = self.transition_matrix();

        let mut p_pi = DMatrix::<f64>::zeros(ns, ns);
        let mut r_pi = DVector::<f64>::zeros(ns);
        for s in 0..ns {
            for a in 0..na {
                let prob = pi.probs[(s, a)];
                if prob == 0.0 {
                    continue;
                }
                let row = self.pair(s, a);
                r_pi[s] += prob * reward[row];
                for t in 0..ns {
                    p_pi[(s, t)] += prob * p[(row, t)];
                }
            }
        }

        let system = DMatrix::<f64>::identity(ns, ns) - &p_pi * gamma;
        let lu = system.clone().lu();
        let v = lu
            .solve(&r_pi)
            .ok_or_else(|| Error::Singular("I - gamma P_pi".into()))?;
        let mut e0 = DVector::<f64>::zeros(ns);
        e0[self.s0] = 1.0 - gamma;
        let nu = system
            .transpose()
            .lu()
            .solve(&e0)
            .ok_or_else(|| Error::Singular("I - gamma P_pi^T".into()))?;

        let pv = &p * &v;
        let mut q = DMatrix::<f64>::zeros(ns, na);
        let mut mu = DVector::<f64>::zeros(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let row = self.pair(s, a);
                q[(s, a)] = reward[row] + gamma * pv[row];
                mu[row] = pi.probs[(s, a)] * nu[s];
            }
        }
        let zeta = &theta_u + (&self.psi * &v) * gamma;
        let lambda_pi = self.phi.tr_mul(&mu);
        let j = reward.dot(&mu);
        let returns = self.thetas.iter().map(|t| t.dot(&lambda_pi)).collect();
        Ok(ExactEval { v, q, zeta, j, returns, mu, lambda_pi, nu })
    }

    /// Value iteration on `reward`, stopped once successive iterates differ by
    /// at most `tol (1-γ) / 2γ` in sup norm, followed by greedy extraction.
    ///
    /// Ties go to the lowest action index.
    pub fn greedy_policy(&self, reward: &DVector<f64>, tol: f64) -> TabularPolicy {
        let p = self.transition_matrix();
        self.greedy_policy_with(&p, reward, tol)
    }

    fn greedy_policy_with(&self, p: &DMatrix<f64>, reward: &DVector<f64>, tol: f64) -> TabularPolicy {
        let (ns, na) = (self.num_states, self.num_actions);
        let gamma = self.gamma;
        let stop = tol * (1.0 - gamma) / (2.0 * gamma);
        let mut v = DVector::<f64>::zeros(ns);
        for _ in 0..1_000_000 {
            let q = reward + (p * &v) * gamma;
            let mut next = DVector::<f64>::zeros(ns);
            for s in 0..ns {
                next[s] = (0..na).map(|a| q[self.pair(s, a)]).fold(f64::NEG_INFINITY, f64::max);
            }
            let gap = (&next - &v).amax();
            v = next;
            if gap <= stop {
                break;
            }
        }
        let q = reward + (p * &v) * gamma;
        let actions: Vec<usize> = (0..ns)
            .map(|s| {
                let mut best = 0;
                for a in 1..na {
                    if q[self.pair(s, a)] > q[self.pair(s, best)] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        TabularPolicy::deterministic(&actions, na).expect("greedy actions are in range")
    }

    /// Optimal policy for `r_0` and its exact normalized return.
    pub fn optimal_unconstrained(&self, tol: f64) -> Result<(TabularPolicy, f64)> {
        if !(tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        let pi = self.greedy_policy(&self.reward(0), tol);
        let j = self.exact_eval(&pi, &[])?.returns[0];
        Ok((pi, j))
    }

    /// Optimal constrained return for a single constraint via the dual
    /// function `g(w) = max_π J_0(π) + w (J_1(π) − τ)`.
    ///
    /// `g` is minimized over a uniform grid on `[0, W]` with `W` just above
    /// the `1/φ` bound on the optimal multiplier, then refined by golden
    /// section inside the best grid cell (`g` is convex).
    pub fn optimal_constrained(&self, tau: &[f64], grid: usize) -> Result<ConstrainedOptimum> {
        if self.num_constraints() != 1 || tau.len() != 1 {
            return Err(Error::Unsupported(format!(
                "constrained oracle handles exactly one constraint, got {}",
                self.num_constraints()
            )));
        }
        if grid < 100 {
            return Err(invalid(format!("grid must have at least 100 points, got {grid}")));
        }
        const VI_TOL: f64 = 1e-10;
        let tau = tau[0];
        let p = self.transition_matrix();
        let r0 = self.reward(0);
        let r1 = self.reward(1);

        let mut candidates: Vec<(TabularPolicy, f64, f64)> = Vec::new();
        let evaluate = |pi: TabularPolicy, cands: &mut Vec<(TabularPolicy, f64, f64)>| -> Result<(f64, f64)> {
            if let Some((_, j0, j1)) = cands.iter().find(|(c, _, _)| c == &pi) {
                return Ok((*j0, *j1));
            }
            let ret = self.exact_eval(&pi, &[])?.returns;
            cands.push((pi, ret[0], ret[1]));
            Ok((ret[0], ret[1]))
        };

        let (_, j1_max) = evaluate(self.greedy_policy_with(&p, &r1, VI_TOL), &mut candidates)?;
        let max_margin = j1_max - tau;
        if !(max_margin > 0.0) {
            return Err(Error::Infeasible(format!(
                "largest achievable J_1 is {j1_max:.6}, threshold {tau:.6} leaves no Slater margin"
            )));
        }
        let w_max = 1.0 / max_margin + 1.0;

        let dual_at = |w: f64, cands: &mut Vec<(TabularPolicy, f64, f64)>| -> Result<f64> {
            let reward = &r0 + &r1 * w;
            let (j0, j1) = evaluate(self.greedy_policy_with(&p, &reward, VI_TOL), cands)?;
            Ok(j0 + w * (j1 - tau))
        };

        let step = w_max / (grid - 1) as f64;
        let mut best = (f64::INFINITY, 0.0, 0usize);
        for i in 0..grid {
            let w = step * i as f64;
            let value = dual_at(w, &mut candidates)?;
            if value < best.0 {
                best = (value, w, i);
            }
        }

        let (mut lo, mut hi) = (
            step * best.2.saturating_sub(1) as f64,
            step * (best.2 + 1).min(grid - 1) as f64,
        );
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let mut f1 = dual_at(x1, &mut candidates)?;
        let mut f2 = dual_at(x2, &mut candidates)?;
        for _ in 0..80 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = dual_at(x1, &mut candidates)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = dual_at(x2, &mut candidates)?;
            }
            for (value, w) in [(f1, x1), (f2, x2)] {
                if value < best.0 {
                    best = (value, w, best.2);
                }
            }
        }

        let slater_margin = candidates
            .iter()
            .map(|(_, _, j1)| j1 - tau)
            .fold(f64::NEG_INFINITY, f64::max);

        // Best feasible trajectory-level mixture of two candidate policies.
        let mut primal: Option<(f64, f64, usize, usize, f64)> = None;
        for (i, (_, j0p, j1p)) in candidates.iter().enumerate() {
            if *j1p < tau {
                continue;
            }
            if primal.is_none_or(|(v, ..)| *j0p > v) {
                primal = Some((*j0p, *j1p, i, i, 1.0));
            }
            for (k, (_, j0q, j1q)) in candidates.iter().enumerate() {
                if *j1q >= tau || j0q <= j0p {
                    continue;
                }
                let beta = (tau - j1q) / (j1p - j1q);
                let value = beta * j0p + (1.0 - beta) * j0q;
                if primal.is_none_or(|(v, ..)| value > v) {
                    primal = Some((value, tau, i, k, beta));
                }
            }
        }
        let (primal_j0, primal_j1, i, k, beta) =
            primal.ok_or_else(|| Error::Infeasible("no candidate policy satisfies the constraint".into()))?;
        let mu_p = self.exact_eval(&candidates[i].0, &[])?.mu;
        let mu_q = self.exact_eval(&candidates[k].0, &[])?.mu;
        let occupancy = mu_p * beta + mu_q * (1.0 - beta);

        Ok(ConstrainedOptimum {
            j0_star: best.0,
            slater_margin,
            dual_w: best.1,
            primal_j0,
            primal_j1,
            occupancy,
        })
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.probs.nrows() != self.num_states || pi.probs.ncols() != self.num_actions {
            return Err(invalid(format!(
                "policy is {}x{}, instance is {}x{}",
                pi.probs.nrows(),
                pi.probs.ncols(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    pub fn to_document(&self) -> CmdpDocument {
        CmdpDocument {
            num_states: self.num_states,
            num_actions: self.num_actions,
            dim: self.dim,
            gamma: self.gamma,
            s0: self.s0,
            phi: row_major(&self.phi),
            psi: row_major(&self.psi),
            thetas: self.thetas.iter().map(|t| t.iter().copied().collect()).collect(),
            tau: self.tau.clone(),
        }
    }

    pub fn from_document(doc: CmdpDocument) -> Result<Self> {
        let pairs = doc.num_states * doc.num_actions;
        if doc.phi.len() != pairs * doc.dim {
            return Err(invalid(format!("phi has {} entries, expected {}", doc.phi.len(), pairs * doc.dim)));
        }
        if doc.psi.len() != doc.dim * doc.num_states {
            return Err(invalid(format!(
                "psi has {} entries, expected {}",
                doc.psi.len(),
                doc.dim * doc.num_states
            )));
        }
        let phi = DMatrix::from_row_slice(pairs, doc.dim, &doc.phi);
        let psi = DMatrix::from_row_slice(doc.dim, doc.num_states, &doc.psi);
        let thetas = doc.thetas.into_iter().map(DVector::from_vec).collect();
        Self::new(doc.num_states, doc.num_actions, phi, psi, thetas, doc.gamma, doc.s0, doc.tau)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.to_document())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        Self::from_document(serde_json::from_reader(r)?)
    }
}

impl FeatureMap for LinearCmdp {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn action_features(&self, s: usize) -> DMatrix<f64> {
        self.phi.rows(s * self.num_actions, self.num_actions).into_owned()
    }
}

/// On-disk form of a [`LinearCmdp`]. Matrices are flattened row-major.
///
/// Floats are written in shortest round-trip form, so a write/read cycle is
/// bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdpDocument {
    pub num_states: usize,
    pub num_actions: usize,
    pub dim: usize,
    pub gamma: f64,
    pub s0: usize,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
}

/// Random instance whose feature rows and Ψ rows are uniform draws from
/// their simplices and whose reward parameters are uniform on `[0, 1]`.
///
/// Thresholds start at zero; callers set them with [`LinearCmdp::with_tau`].
pub fn build_random_cmdp(seed: u64, sizes: CmdpSizes, gamma: f64) -> Result<LinearCmdp> {
    let CmdpSizes { states, actions, dim, constraints } = sizes;
    if states == 0 || actions == 0 {
        return Err(invalid("need at least one state and one action"));
    }
    if dim == 0 || dim > states * actions {
        return Err(invalid(format!("dim {dim} must lie in 1..={}", states * actions)));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma {gamma} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = DMatrix::<f64>::zeros(states * actions, dim);
    for mut row in phi.row_iter_mut() {
        let draw = simplex_point(&mut rng, dim);
        row.copy_from_slice(&draw);
    }
    let mut psi = DMatrix::<f64>::zeros(dim, states);
    for mut row in psi.row_iter_mut() {
        let draw = simplex_point(&mut rng, states);
        row.copy_from_slice(&draw);
    }
    let unit = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
    let thetas = (0..=constraints)
        .map(|_| DVector::from_iterator(dim, (0..dim).map(|_| unit.sample(&mut rng))))
        .collect();
    LinearCmdp::new(states, actions, phi, psi, thetas, gamma, 0, vec![0.0; constraints])
}

/// Uniform draw from the probability simplex in `R^k` (normalized exponentials).
pub(crate) fn simplex_point<R: rand::Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = x.iter().sum();
    if total > 0.0 {
        x.iter_mut().for_each(|v| *v /= total);
    } else {
        x.iter_mut().for_each(|v| *v = 1.0 / k as f64);
    }
    x
}

/// A stationary stochastic policy as an `|S| × |A|` row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for (s, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self { probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::<f64>::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(invalid(format!("action {a} out of range at state {s}")));
            }
            probs[(s, a)] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }
}

/// Everything the oracle knows about one policy under one linearized reward.
#[derive(Clone, Debug)]
pub struct ExactEval {
    /// Unnormalized state values `V^π`.
    pub v: DVector<f64>,
    /// `|S| × |A|` action values `Q^π`.
    pub q: DMatrix<f64>,
    /// `ζ = θ_w + γΨV`, so that `Q = Φζ`.
    pub zeta: DVector<f64>,
    /// Normalized return of the linearized reward, `⟨r_w, μ^π⟩`.
    pub j: f64,
    /// Normalized returns `J_0 … J_I` of the individual rewards.
    pub returns: Vec<f64>,
    /// Normalized occupancy over pairs.
    pub mu: DVector<f64>,
    /// `Φᵀμ^π`.
    pub lambda_pi: DVector<f64>,
    /// State occupancy.
    pub nu: DVector<f64>,
}

/// Output of the single-constraint oracle.
#[derive(Clone, Debug)]
pub struct ConstrainedOptimum {
    /// Minimum of the dual function found on the grid (upper bound on the optimum).
    pub j0_star: f64,
    /// `max_π J_1(π) − τ` over every policy the search visited.
    pub slater_margin: f64,
    /// Multiplier attaining `j0_star`.
    pub dual_w: f64,
    /// Best feasible mixture of two visited deterministic policies.
    pub primal_j0: f64,
    pub primal_j1: f64,
    /// Occupancy measure of that mixture.
    pub occupancy: DVector<f64>,
}

pub(crate) fn stack_columns(rows: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn check_simplex(entries: impl Iterator<Item = f64>, what: impl Fn() -> String) -> Result<()> {
    let mut sum = 0.0;
    for x in entries {
        if !(x >= -SIMPLEX_TOL) {
            return Err(invalid(format!("{} has a negative entry", what())));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("{} sums to {sum}, not 1", what())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_loop(reward: f64) -> LinearCmdp {
        LinearCmdp::new(
            1,
            1,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![DVector::from_element(1, reward)],
            0.9,
            0,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn trivial_instance_is_a_self_loop() {
        let m = build_random_cmdp(0, CmdpSizes::new(1, 1, 1, 0), 0.9).unwrap();
        assert_eq!(m.phi()[(0, 0)], 1.0);
        assert_eq!(m.psi()[(0, 0)], 1.0);
        assert_eq!(m.transition_matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn transition_rows_are_distributions() {
        for seed in 0..20 {
            let m = build_random_cmdp(seed, CmdpSizes::new(5, 3, 4, 1), 0.8).unwrap();
            let p = m.transition_matrix();
            for row in p.row_iter() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = build_random_cmdp(7, CmdpSizes::new(4, 2, 3, 2), 0.9).unwrap();
        let b = build_random_cmdp(7, CmdpSizes::new(4, 2, 3, 2), 0.9).unwrap();
        assert_eq!(a, b);
        let c = build_random_cmdp(8, CmdpSizes::new(4, 2, 3, 2), 0.9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_features_give_psi_as_transition() {
        let m0 = build_random_cmdp(3, CmdpSizes::new(3, 2, 6, 0), 0.9).unwrap();
        let m = LinearCmdp::new(
            3,
            2,
            DMatrix::identity(6, 6),
            m0.psi().clone(),
            m0.thetas().to_vec(),
            0.9,
            0,
            vec![],
        )
        .unwrap();
        assert_eq!(m.transition_matrix(), *m.psi());
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(build_random_cmdp(0, CmdpSizes::new(0, 1, 1, 0), 0.9).is_err());
        assert!(build_random_cmdp(0, CmdpSizes::new(2, 1, 3, 0), 0.9).is_err());
        assert!(build_random_cmdp(0, CmdpSizes::new(2, 1, 1, 0), 1.0).is_err());
        assert!(build_random_cmdp(0, CmdpSizes::new(2, 1, 0, 0), 0.5).is_err());
    }

    #[test]
    fn single_state_returns_geometric_value() {
        let m = self_loop(0.3);
        let ev = m.exact_eval(&TabularPolicy::uniform(1, 1), &[]).unwrap();
        assert!((ev.j - 0.3).abs() < 1e-12);
        assert!((ev.v[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn q_is_linear_in_features() {
        for seed in 0..10 {
            let m = build_random_cmdp(seed, CmdpSizes::new(6, 3, 4, 1), 0.9).unwrap();
            let pi = TabularPolicy::uniform(6, 3);
            let ev = m.exact_eval(&pi, &[0.7]).unwrap();
            let q_lin = m.phi() * &ev.zeta;
            for s in 0..6 {
                for a in 0..3 {
                    assert!((ev.q[(s, a)] - q_lin[m.pair(s, a)]).abs() <= 1e-9);
                }
            }
            assert!((ev.mu.sum() - 1.0).abs() <= 1e-9);
            assert!(ev.mu.iter().all(|&x| x >= -1e-15));
            assert!((ev.j - (1.0 - m.gamma()) * ev.v[m.s0()]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_action_optimum_is_the_only_policy() {
        let m = build_random_cmdp(4, CmdpSizes::new(5, 1, 3, 0), 0.9).unwrap();
        let (pi, j) = m.optimal_unconstrained(1e-8).unwrap();
        let only = m.exact_eval(&TabularPolicy::uniform(5, 1), &[]).unwrap();
        assert_eq!(pi, TabularPolicy::uniform(5, 1));
        assert!((j - only.returns[0]).abs() < 1e-12);
    }

    #[test]
    fn one_state_optimum_is_reward_argmax() {
        let m = build_random_cmdp(11, CmdpSizes::new(1, 4, 2, 0), 0.9).unwrap();
        let r = m.reward(0);
        let best = (0..4).max_by(|&a, &b| r[a].partial_cmp(&r[b]).unwrap()).unwrap();
        let (pi, _) = m.optimal_unconstrained(1e-8).unwrap();
        assert_eq!(pi.probs[(0, best)], 1.0);
    }

    #[test]
    fn constrained_oracle_rejects_multiple_constraints() {
        let m = build_random_cmdp(1, CmdpSizes::new(3, 2, 2, 2), 0.9).unwrap();
        assert!(matches!(m.optimal_constrained(&[0.1, 0.1], 100), Err(Error::Unsupported(_))));
        let m1 = build_random_cmdp(1, CmdpSizes::new(3, 2, 2, 1), 0.9).unwrap();
        assert!(matches!(m1.optimal_constrained(&[2.0], 100), Err(Error::Infeasible(_))));
        assert!(m1.optimal_constrained(&[0.1], 10).is_err());
    }

    #[test]
    fn inactive_constraint_recovers_unconstrained_optimum() {
        let m = build_random_cmdp(2, CmdpSizes::new(6, 3, 4, 1), 0.9).unwrap();
        let (pi_star, j_star) = m.optimal_unconstrained(1e-10).unwrap();
        let opt = m.optimal_constrained(&[0.0], 200).unwrap();
        assert!((opt.j0_star - j_star).abs() < 1e-6, "{} vs {j_star}", opt.j0_star);
        let j1 = m.exact_eval(&pi_star, &[]).unwrap().returns[1];
        let opt = m.optimal_constrained(&[j1], 200).unwrap();
        assert!((opt.j0_star - j_star).abs() < 1e-6);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = build_random_cmdp(5, CmdpSizes::new(4, 3, 5, 2), 0.95)
            .unwrap()
            .with_tau(vec![0.123_456_789_012_345_68, 1.0 / 3.0])
            .unwrap();
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        let back = LinearCmdp::read_json(buf.as_slice()).unwrap();
        assert_eq!(m, back);
        let text = String::from_utf8(buf).unwrap();
        for key in ["num_states", "num_actions", "dim", "gamma", "s0", "phi", "psi", "thetas", "tau"] {
            assert!(text.contains(key));
        }
    }
}
