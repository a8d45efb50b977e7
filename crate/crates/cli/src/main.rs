use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use offline_lmdp::experiment::{auto_tau, ORACLE_GRID};
use offline_lmdp::players::{default_oco_step, gradient_bound};
use offline_lmdp::{
    build_random_cmdp, concentrability_of, default_t_iters, evaluate_mixture, report, run_experiment,
    sample_dataset, solve, BehaviorDistribution, CmdpSizes, Execution, ExperimentSpec, FlowEstimator, KnownModel,
    LinearCmdp, MixturePolicy, Mode, OfflineDataset, ReportFormat, SolverConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lmdp", version, about = "Offline primal-dual solvers for linear (C)MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random linear CMDP and write it as JSON.
    Gen(GenArgs),
    /// Sample an offline dataset from an instance.
    Sample(SampleArgs),
    /// Run the solver on a dataset and write the mixture policy.
    Solve(SolveArgs),
    /// Evaluate a mixture policy exactly on an instance.
    Eval(EvalArgs),
    /// Run a dataset-size sweep described by a JSON spec.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    constraints: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constraint thresholds; one constraint defaults to halfway between
    /// J_1 of the unconstrained optimum and the best achievable J_1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BehaviorKind {
    Uniform,
    MixOptimal,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BehaviorKind::MixOptimal)]
    behavior: BehaviorKind,
    /// Weight on the optimal occupancy in the mix-optimal blend.
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unconstrained,
    Constrained,
    ExactFeasibility,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unconstrained => Mode::Unconstrained,
            ModeArg::Constrained => Mode::Constrained,
            ModeArg::ExactFeasibility => Mode::ConstrainedExactFeasibility,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowArg {
    Converted,
    Direct,
}

#[derive(Args)]
struct SolveArgs {
    /// Instance file; only features, rewards, γ, s0 and τ are passed on.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Concentrability bound, used as the coefficient box.
    #[arg(long)]
    c_star: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Unconstrained)]
    mode: ModeArg,
    #[arg(long)]
    t_iters: Option<usize>,
    /// Upper limit on the default iteration count.
    #[arg(long, default_value_t = 20_000)]
    t_cap: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Slater margin; required in constrained modes.
    #[arg(long)]
    phi: Option<f64>,
    /// Thresholds overriding the ones stored in the instance.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = FlowArg::Converted)]
    flow: FlowArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Also report the optimum and the suboptimality.
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Summary,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the experiment file's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Where the per-row CSV goes; overrides the experiment file's output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Summary)]
    format: FormatArg,
    /// Run grid points one at a time.
    #[arg(long)]
    sequential: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(a),
        Command::Sample(a) => sample(a),
        Command::Solve(a) => solve_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_instance(path: &Path) -> Result<LinearCmdp> {
    LinearCmdp::read_json(open(path)?).with_context(|| format!("reading instance {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let base = build_random_cmdp(a.seed, CmdpSizes::new(a.states, a.actions, a.dim, a.constraints), a.gamma)?;
    let tau = match (a.tau, a.constraints) {
        (Some(t), _) => t,
        (None, 0) => Vec::new(),
        (None, 1) => vec![auto_tau(&base)?],
        (None, _) => bail!("--tau is required with more than one constraint"),
    };
    let m = base.with_tau(tau)?;
    let mut out = output(a.out.as_deref())?;
    m.write_json(&mut out)?;
    writeln!(out)?;
    Ok(())
}

/// Occupancy of the oracle's optimal (possibly mixed) policy.
fn optimal_occupancy(m: &LinearCmdp) -> Result<(DVector<f64>, f64)> {
    match m.num_constraints() {
        0 => {
            let (pi, j) = m.optimal_unconstrained(1e-10)?;
            Ok((m.exact_eval(&pi, &[])?.mu, j))
        }
        1 => {
            let opt = m.optimal_constrained(m.tau(), ORACLE_GRID)?;
            Ok((opt.occupancy, opt.j0_star))
        }
        i => bail!("the oracle handles at most one constraint, instance has {i}"),
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let m = read_instance(&a.instance)?;
    let oracle = optimal_occupancy(&m);
    let mu_b = match (a.behavior, &oracle) {
        (BehaviorKind::Uniform, _) => BehaviorDistribution::uniform(m.num_pairs()),
        (BehaviorKind::MixOptimal, Ok((mu_star, _))) => BehaviorDistribution::blend(mu_star, a.kappa)?,
        (BehaviorKind::MixOptimal, Err(e)) => bail!("mix-optimal behavior needs the oracle: {e}"),
    };
    let ds = sample_dataset(&m, &mu_b, a.n, a.seed)?;
    let mut out = output(a.out.as_deref())?;
    ds.write_csv(&mut out)?;
    out.flush()?;
    if let Ok((mu_star, _)) = &oracle {
        eprintln!("c_star={}", concentrability_of(mu_star, &mu_b, m.num_actions())?);
    }
    Ok(())
}

fn solve_cmd(a: SolveArgs) -> Result<()> {
    let m = read_instance(&a.instance)?;
    let ds = OfflineDataset::read_csv(open(&a.dataset)?, &m)
        .with_context(|| format!("reading dataset {}", a.dataset.display()))?;
    let mode = Mode::from(a.mode);
    let tau = a.tau.unwrap_or_else(|| m.tau().to_vec());
    let (d, na, gamma, n) = (m.dim(), m.num_actions(), m.gamma(), ds.len());
    let t = a.t_iters.unwrap_or_else(|| default_t_iters(d, na, gamma, a.epsilon, a.t_cap));
    let phi = || a.phi.context("--phi is required in constrained modes");
    let mut cfg = match mode {
        Mode::Unconstrained => SolverConfig::unconstrained(d, na, gamma, n, a.c_star, t),
        Mode::Constrained => SolverConfig::constrained(d, na, gamma, n, a.c_star, t, tau.clone(), phi()?),
        Mode::ConstrainedExactFeasibility => {
            SolverConfig::exact_feasibility(d, na, gamma, n, a.c_star, t, &tau, phi()?, a.epsilon)
        }
    };
    cfg.epsilon = a.epsilon;
    cfg.seed = a.seed;
    cfg.flow = match a.flow {
        FlowArg::Converted => FlowEstimator::Converted,
        FlowArg::Direct => FlowEstimator::Direct,
    };
    if let Some(alpha) = a.alpha {
        cfg.bounds = cfg.bounds.with_alpha(alpha, t);
    }
    cfg.bounds.oco_step = a.eta.unwrap_or_else(|| {
        default_oco_step(a.c_star, n, gradient_bound(cfg.bounds.d_zeta, cfg.bounds.d_w, d, gamma), t)
    });
    let known = KnownModel { features: &m, thetas: m.thetas().to_vec(), gamma, s0: m.s0(), tau };
    let (mix, _) = solve(&ds, &known, &cfg)?;
    let mut out = output(a.out.as_deref())?;
    mix.write_json(&mut out)?;
    writeln!(out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = read_instance(&a.instance)?;
    let mix = MixturePolicy::read_json(open(&a.policy)?)
        .with_context(|| format!("reading policy {}", a.policy.display()))?;
    let returns = evaluate_mixture(&m, &mix, Execution::Parallel)?;
    let violations: Vec<f64> = m.tau().iter().zip(&returns[1..]).map(|(t, j)| (t - j).max(0.0)).collect();
    let mut doc = json!({
        "T": mix.len(),
        "returns": returns,
        "violations": violations,
    });
    if a.oracle {
        let (_, j0_star) = optimal_occupancy(&m)?;
        doc["J0_star"] = json!(j0_star);
        doc["subopt"] = json!(j0_star - returns[0]);
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut spec: ExperimentSpec = serde_json::from_reader(open(&a.spec)?)
        .with_context(|| format!("reading spec {}", a.spec.display()))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if a.out.is_some() {
        spec.output = a.out;
    }
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let rows = run_experiment(&spec, exec)?;
    for r in rows.iter().filter(|r| r.skipped.is_some()) {
        eprintln!("skipped n={} seed={}: {}", r.n, r.seed, r.skipped.as_deref().unwrap_or(""));
    }
    if rows.iter().all(|r| r.skipped.is_some()) {
        bail!("every grid point was skipped");
    }
    let format = match a.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Summary => ReportFormat::Summary,
    };
    print!("{}", report(&rows, format)?);
    Ok(())
}
