//! Seeded sweeps over dataset size and their CSV / summary reports.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{concentrability_of, sample_dataset, BehaviorDistribution};
use crate::error::{invalid, Error, Result};
use crate::model::{build_random_cmdp, CmdpSizes, LinearCmdp};
use crate::par::{self, Execution};
use crate::players::{default_oco_step, gradient_bound};
use crate::solver::{default_t_iters, evaluate_mixture, solve, FlowEstimator, KnownModel, Mode, SolverConfig};

/// Grid size used by the constrained oracle.
pub const ORACLE_GRID: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub states: usize,
    pub actions: usize,
    pub dim: usize,
    #[serde(default)]
    pub constraints: usize,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl InstanceSpec {
    pub fn build(&self) -> Result<LinearCmdp> {
        build_random_cmdp(
            self.seed,
            CmdpSizes::new(self.states, self.actions, self.dim, self.constraints),
            self.gamma,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    Uniform,
    /// `κ μ* + (1−κ)·uniform`.
    MixOptimal { kappa: f64 },
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        BehaviorSpec::MixOptimal { kappa: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOverrides {
    pub mode: Option<Mode>,
    pub t_iters: Option<usize>,
    /// Upper limit for the default iteration count.
    pub t_cap: Option<usize>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    /// Slater margin handed to the solver; defaults to the oracle's.
    pub phi: Option<f64>,
    /// Thresholds; defaults to [`auto_tau`] for one constraint.
    pub tau: Option<Vec<f64>>,
    pub flow: Option<FlowEstimator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub instance: InstanceSpec,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub solver: SolverOverrides,
    pub num_seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(invalid("n_grid is empty"));
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("n_grid must be positive and strictly increasing"));
        }
        if self.num_seeds == 0 {
            return Err(invalid("num_seeds must be at least 1"));
        }
        if let BehaviorSpec::MixOptimal { kappa } = self.behavior {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(invalid(format!("kappa {kappa} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.solver.mode.unwrap_or(Mode::Unconstrained)
    }
}

/// One `(n, seed)` outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub seed: u64,
    pub mode: Mode,
    pub j0_mix: f64,
    pub j0_star: f64,
    pub subopt: f64,
    /// `max_i max(0, τ_i − J_i(π̄))` against the original thresholds.
    pub viol_max: f64,
    pub c_star: f64,
    pub t: usize,
    pub wall_ms: f64,
    /// Set when the point could not be run.
    #[serde(default)]
    pub skipped: Option<String>,
}

/// Threshold halfway between `J_1(π*)` and `max_π J_1(π)`.
///
/// The constraint binds whenever the unconstrained optimum is not already
/// the `J_1` maximizer.
pub fn auto_tau(mdp: &LinearCmdp) -> Result<f64> {
    if mdp.num_constraints() != 1 {
        return Err(Error::Unsupported("automatic thresholds need exactly one constraint".into()));
    }
    let (pi_star, _) = mdp.optimal_unconstrained(1e-10)?;
    let j1_star = mdp.exact_eval(&pi_star, &[])?.returns[1];
    let best = mdp.greedy_policy(&mdp.reward(1), 1e-10);
    let j1_max = mdp.exact_eval(&best, &[])?.returns[1];
    Ok(j1_star + 0.5 * (j1_max - j1_star))
}

/// Everything the oracle contributes to a sweep.
#[derive(Clone, Debug)]
pub struct Reference {
    pub mdp: LinearCmdp,
    pub j0_star: f64,
    pub slater_margin: f64,
    pub occupancy: DVector<f64>,
    pub behavior: BehaviorDistribution,
    pub c_star: f64,
}

pub fn reference(spec: &ExperimentSpec) -> Result<Reference> {
    let base = spec.instance.build()?;
    let mode = spec.mode();
    let (mdp, j0_star, slater_margin, occupancy) = if mode.is_constrained() {
        let tau = match &spec.solver.tau {
            Some(t) => t.clone(),
            None => vec![auto_tau(&base)?],
        };
        let mdp = base.with_tau(tau)?;
        let opt = mdp.optimal_constrained(mdp.tau(), ORACLE_GRID)?;
        (mdp, opt.j0_star, opt.slater_margin, opt.occupancy)
    } else {
        let (pi, j) = base.optimal_unconstrained(1e-10)?;
        let mu = base.exact_eval(&pi, &[])?.mu;
        (base, j, f64::INFINITY, mu)
    };
    let behavior = match spec.behavior {
        BehaviorSpec::Uniform => BehaviorDistribution::uniform(mdp.num_pairs()),
        BehaviorSpec::MixOptimal { kappa } => BehaviorDistribution::blend(&occupancy, kappa)?,
    };
    let c_star = concentrability_of(&occupancy, &behavior, mdp.num_actions())?;
    Ok(Reference { mdp, j0_star, slater_margin, occupancy, behavior, c_star })
}

/// Solver configuration for one grid point.
pub fn solver_config(spec: &ExperimentSpec, r: &Reference, n: usize) -> SolverConfig {
    let m = &r.mdp;
    let o = &spec.solver;
    let (d, na, gamma) = (m.dim(), m.num_actions(), m.gamma());
    let epsilon = o.epsilon.unwrap_or(0.1);
    let t = o.t_iters.unwrap_or_else(|| default_t_iters(d, na, gamma, epsilon, o.t_cap.unwrap_or(20_000)));
    let phi = o.phi.unwrap_or(r.slater_margin);
    let mut cfg = match spec.mode() {
        Mode::Unconstrained => SolverConfig::unconstrained(d, na, gamma, n, r.c_star, t),
        Mode::Constrained => SolverConfig::constrained(d, na, gamma, n, r.c_star, t, m.tau().to_vec(), phi),
        Mode::ConstrainedExactFeasibility => {
            SolverConfig::exact_feasibility(d, na, gamma, n, r.c_star, t, m.tau(), phi, epsilon)
        }
    };
    cfg.epsilon = epsilon;
    if let Some(alpha) = o.alpha {
        cfg.bounds = cfg.bounds.with_alpha(alpha, t);
    }
    cfg.bounds.oco_step = o.eta.unwrap_or_else(|| {
        default_oco_step(r.c_star, n, gradient_bound(cfg.bounds.d_zeta, cfg.bounds.d_w, d, gamma), t)
    });
    if let Some(flow) = o.flow {
        cfg.flow = flow;
    }
    cfg
}

/// Seed of the dataset for the `index`-th repetition at size `n`.
pub fn dataset_seed(base: u64, n: usize, index: usize) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut x = base ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).rotate_left(32);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Runs one grid point.
pub fn run_point(spec: &ExperimentSpec, r: &Reference, n: usize, index: usize) -> Result<ReportRow> {
    let seed = dataset_seed(spec.seed, n, index);
    let ds = sample_dataset(&r.mdp, &r.behavior, n, seed)?;
    let mut cfg = solver_config(spec, r, n);
    cfg.seed = seed;
    let known = KnownModel::of(&r.mdp);
    let start = Instant::now();
    let (mix, _) = solve(&ds, &known, &cfg)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let returns = evaluate_mixture(&r.mdp, &mix, Execution::Sequential)?;
    let viol_max = r
        .mdp
        .tau()
        .iter()
        .zip(&returns[1..])
        .map(|(t, j)| (t - j).max(0.0))
        .fold(0.0, f64::max);
    let viol_max = if spec.mode().is_constrained() { viol_max } else { 0.0 };
    Ok(ReportRow {
        n,
        seed,
        mode: spec.mode(),
        j0_mix: returns[0],
        j0_star: r.j0_star,
        subopt: r.j0_star - returns[0],
        viol_max,
        c_star: r.c_star,
        t: cfg.t_iters,
        wall_ms,
        skipped: None,
    })
}

/// Runs every `(n, seed)` point.
///
/// When `spec.output` is set, finished rows are appended to
/// `<output>.partial` as they complete and the sorted CSV is written to
/// `output` at the end.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let points: Vec<(usize, usize)> = spec
        .n_grid
        .iter()
        .flat_map(|&n| (0..spec.num_seeds).map(move |i| (n, i)))
        .collect();

    let r = match reference(spec) {
        Ok(r) => r,
        Err(e @ (Error::Infeasible(_) | Error::Coverage { .. })) => {
            let reason = e.to_string();
            return Ok(points
                .iter()
                .map(|&(n, i)| skipped_row(spec, n, dataset_seed(spec.seed, n, i), &reason))
                .collect());
        }
        Err(e) => return Err(e),
    };

    let partial = match &spec.output {
        Some(path) => {
            let p = partial_path(path);
            let mut f = File::create(&p)?;
            writeln!(f, "{CSV_HEADER}")?;
            Some(Mutex::new(OpenOptions::new().append(true).open(&p)?))
        }
        None => None,
    };

    let results = par::map(exec, &points, |&(n, i)| {
        let row = run_point(spec, &r, n, i)?;
        if let Some(file) = &partial {
            let mut f = file.lock().expect("partial report lock");
            writeln!(f, "{}", csv_line(&row))?;
            f.flush()?;
        }
        Ok::<_, Error>(row)
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.n, r.seed));

    if let Some(path) = &spec.output {
        fs::write(path, report(&rows, ReportFormat::Csv)?)?;
        fs::remove_file(partial_path(path))?;
    }
    Ok(rows)
}

fn skipped_row(spec: &ExperimentSpec, n: usize, seed: u64, reason: &str) -> ReportRow {
    ReportRow {
        n,
        seed,
        mode: spec.mode(),
        j0_mix: f64::NAN,
        j0_star: f64::NAN,
        subopt: f64::NAN,
        viol_max: f64::NAN,
        c_star: f64::NAN,
        t: 0,
        wall_ms: 0.0,
        skipped: Some(reason.to_string()),
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub const CSV_HEADER: &str = "n,seed,mode,J0_mix,J0_star,subopt,viol_max,c_star,T,wall_ms";

fn csv_line(r: &ReportRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{:.3}",
        r.n,
        r.seed,
        r.mode.as_str(),
        r.j0_mix,
        r.j0_star,
        r.subopt,
        r.viol_max,
        r.c_star,
        r.t,
        r.wall_ms
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Summary,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "summary" => Ok(ReportFormat::Summary),
            other => Err(invalid(format!("unknown report format {other:?}"))),
        }
    }
}

/// Renders the rows that were actually run. Skipped rows are left out.
pub fn report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    let done: Vec<&ReportRow> = rows.iter().filter(|r| r.skipped.is_none()).collect();
    if done.is_empty() {
        return Err(invalid("no rows to report"));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in done {
                out.push_str(&csv_line(r));
                out.push('\n');
            }
        }
        ReportFormat::Summary => {
            out.push_str("n,count,subopt_median,subopt_iqr,viol_median,viol_iqr\n");
            let mut ns: Vec<usize> = done.iter().map(|r| r.n).collect();
            ns.dedup();
            ns.sort_unstable();
            ns.dedup();
            for n in ns {
                let subopt: Vec<f64> = done.iter().filter(|r| r.n == n).map(|r| r.subopt).collect();
                let viol: Vec<f64> = done.iter().filter(|r| r.n == n).map(|r| r.viol_max).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    n,
                    subopt.len(),
                    quantile(&subopt, 0.5),
                    quantile(&subopt, 0.75) - quantile(&subopt, 0.25),
                    quantile(&viol, 0.5),
                    quantile(&viol, 0.75) - quantile(&viol, 0.25)
                );
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation sample quantile (the usual "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            instance: InstanceSpec { states: 1, actions: 1, dim: 1, constraints: 0, gamma: 0.9, seed: 0 },
            behavior: BehaviorSpec::default(),
            n_grid: vec![100],
            solver: SolverOverrides { t_iters: Some(20), ..Default::default() },
            num_seeds: 1,
            seed: 3,
            output: None,
        }
    }

    #[test]
    fn trivial_instance_has_zero_suboptimality() {
        let rows = run_experiment(&tiny_spec(), Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].subopt.abs() < 1e-12);
        assert_eq!(rows[0].viol_max, 0.0);
    }

    #[test]
    fn seeds_are_distinct() {
        let mut spec = tiny_spec();
        spec.num_seeds = 3;
        spec.n_grid = vec![10, 20];
        let rows = run_experiment(&spec, Execution::Parallel).unwrap();
        assert_eq!(rows.len(), 6);
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = tiny_spec();
        spec.n_grid = vec![20, 10];
        assert!(run_experiment(&spec, Execution::Sequential).is_err());
        let mut spec = tiny_spec();
        spec.behavior = BehaviorSpec::MixOptimal { kappa: 1.5 };
        assert!(run_experiment(&spec, Execution::Sequential).is_err());
        assert!(report(&[], ReportFormat::Csv).is_err());
    }

    #[test]
    fn infeasible_points_are_skipped_with_a_reason() {
        let mut spec = tiny_spec();
        spec.instance = InstanceSpec { states: 3, actions: 2, dim: 2, constraints: 1, gamma: 0.9, seed: 1 };
        spec.solver.mode = Some(Mode::Constrained);
        spec.solver.tau = Some(vec![5.0]);
        let rows = run_experiment(&spec, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].skipped.as_deref().unwrap().contains("infeasible"));
    }

    fn row(n: usize, seed: u64, subopt: f64) -> ReportRow {
        ReportRow {
            n,
            seed,
            mode: Mode::Unconstrained,
            j0_mix: 1.0 - subopt,
            j0_star: 1.0,
            subopt,
            viol_max: 0.0,
            c_star: 2.0,
            t: 10,
            wall_ms: 1.0,
            skipped: None,
        }
    }

    #[test]
    fn report_shapes() {
        let one = report(&[row(5, 1, 0.1)], ReportFormat::Csv).unwrap();
        assert_eq!(one.lines().count(), 2);
        assert_eq!(one.lines().next().unwrap(), CSV_HEADER);
        let rows = vec![row(5, 1, 0.3), row(5, 2, 0.1), row(5, 3, 0.2), row(9, 1, 0.0)];
        let summary = report(&rows, ReportFormat::Summary).unwrap();
        assert_eq!(summary.lines().count(), 3);
        assert!(summary.lines().nth(1).unwrap().starts_with("5,3,0.2,"));
    }

    #[test]
    fn quantiles_match_sorted_reference() {
        let v = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        // sorted: 1 1 2 3 4 5 6 9
        assert_eq!(median(&v), 3.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 9.0);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-12);
    }
}
