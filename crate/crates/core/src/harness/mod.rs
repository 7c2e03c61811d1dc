//! Command-line front end: wires a configuration to a problem, the
//! trainer and the reference solutions, and writes run artifacts.

mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use artifacts::{
    CurvePoint, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE, ORACLE_FILE, PLOT_FILE, PLOT_SVG, SUMMARY_FILE,
    SWEEPS_FILE, TIMING_FILE,
};
pub use config::{load_config, OracleSection, ProblemId, RunConfig, TrainerSection};

use crate::mmcc::{RunError, StopReason, SweepReport, TrainError, Trainer};
use crate::policy::PolicyStack;
use crate::problems::dsice::{check_dsice_invariants, dsice_best_constant, dsice_constant_stack};
use crate::problems::fbsde::{fbsde_oracle_y, fbsde_zero_control_loss};
use crate::problems::growth::{growth_finite_optimal, growth_infinite_baseline};
use crate::problems::heston::heston_pde_oracle;
use crate::problems::{
    lq_optimal_value, DsiceProblem, FbsdeProblem, GrowthProblem, HestonProblem, LqProblem, SpecError,
};
use crate::simulate::{simulate_full, ControlProblem, Purpose, SimError, StreamKey};
use artifacts::{display, io_err, read_file, write_file, write_json};

/// `git describe` of the build, or the package version outside a checkout.
pub const VERSION: &str = env!("MMCC_VERSION");

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "MMCC_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    /// Process exit status: 2 for configuration and I/O problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io { .. } => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<SpecError> for HarnessError {
    fn from(e: SpecError) -> Self {
        match e {
            SpecError::Invalid(_) => HarnessError::Config(e.to_string()),
            SpecError::Oracle(_) => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

/// A configured problem instance.
pub enum BuiltProblem {
    Fbsde(FbsdeProblem),
    Heston(HestonProblem),
    Growth(GrowthProblem),
    Dsice(DsiceProblem),
    Custom(LqProblem),
}

impl BuiltProblem {
    pub fn build(config: &RunConfig) -> Result<Self, HarnessError> {
        Ok(match config.problem {
            ProblemId::Fbsde => BuiltProblem::Fbsde(FbsdeProblem::new(config.fbsde.clone())?),
            ProblemId::Heston => BuiltProblem::Heston(HestonProblem::new(config.heston.clone())?),
            ProblemId::Growth => BuiltProblem::Growth(GrowthProblem::new(config.growth.clone())?),
            ProblemId::Dsice => BuiltProblem::Dsice(DsiceProblem::new(config.dsice.clone())?),
            ProblemId::Custom => BuiltProblem::Custom(LqProblem::new(config.custom.clone())?),
        })
    }

    pub fn as_dyn(&self) -> &dyn ControlProblem {
        match self {
            BuiltProblem::Fbsde(p) => p,
            BuiltProblem::Heston(p) => p,
            BuiltProblem::Growth(p) => p,
            BuiltProblem::Dsice(p) => p,
            BuiltProblem::Custom(p) => p,
        }
    }
}

/// Every problem with the configuration; empty when it can run.
pub fn validate(config: &RunConfig) -> Vec<String> {
    let mut out: Vec<String> = config
        .trainer_config()
        .diagnostics()
        .into_iter()
        .map(|d| format!("trainer: {d}"))
        .collect();
    let table = config.problem.table();
    let spec_diag = match config.problem {
        ProblemId::Fbsde => config.fbsde.diagnostics(),
        ProblemId::Heston => config.heston.diagnostics(),
        ProblemId::Growth => config.growth.diagnostics(),
        ProblemId::Dsice => config.dsice.diagnostics(),
        ProblemId::Custom => config.custom.diagnostics(),
    };
    let spec_ok = spec_diag.is_empty();
    out.extend(spec_diag.into_iter().map(|d| format!("{table}: {d}")));
    if spec_ok {
        match BuiltProblem::build(config) {
            Ok(p) => {
                if let Err(e) = p.as_dyn().policy_layout().validate() {
                    out.push(format!("{table}: policy head: {e}"));
                }
            }
            Err(e) => out.push(format!("{table}: {e}")),
        }
    }
    if config.output.as_os_str().is_empty() {
        out.push("output directory must not be empty".into());
    }
    out
}

fn checked(config: &RunConfig) -> Result<BuiltProblem, HarnessError> {
    let diag = validate(config);
    if !diag.is_empty() {
        return Err(HarnessError::Config(diag.join("; ")));
    }
    BuiltProblem::build(config)
}

/// Stream keys used by a run, derived from the single configured seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
    pub init_stream: u64,
    pub eval_stream: u64,
    pub oracle_stream: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            init_stream: StreamKey::new(seed, Purpose::Init, 0, 0, 0).raw(),
            eval_stream: StreamKey::new(seed, Purpose::Eval, 0, 0, 0).raw(),
            oracle_stream: StreamKey::new(seed, Purpose::Oracle, 0, 0, 0).raw(),
        }
    }
}

/// Freshly initialized policy for a run seed.
pub fn initial_stack(problem: &dyn ControlProblem, seed: u64) -> Result<PolicyStack, HarnessError> {
    let mut rng = StreamKey::new(seed, Purpose::Init, 0, 0, 0).rng(0, 0);
    PolicyStack::init(problem.policy_layout(), &mut rng).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Contents of `summary.json`. Objectives are in the problem's own sign
/// (losses for minimization problems).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: ProblemId,
    pub version: String,
    pub objective: f64,
    pub se: Option<f64>,
    pub eval_paths: usize,
    pub initial_objective: f64,
    pub sweeps: usize,
    pub accepted_updates: usize,
    pub stop: StopReason,
    pub tracked: BTreeMap<String, f64>,
    /// Reference policy evaluated on the same evaluation paths.
    pub baseline: Option<String>,
    pub baseline_objective: Option<f64>,
    /// `objective - baseline_objective`, path by path.
    pub paired_difference: Option<f64>,
    pub paired_se: Option<f64>,
    pub oracle: Option<Value>,
    pub seeds: Seeds,
    pub policy_fingerprint: String,
    pub config: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct History {
    initial_mean: f64,
    initial_se: Option<f64>,
    reports: Vec<SweepReport>,
}

/// Train per `config` and write all artifacts into `config.output`.
pub fn run(config: &RunConfig) -> Result<RunSummary, HarnessError> {
    let built = checked(config)?;
    let problem = built.as_dyn();
    let dir = config.output.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir, CONFIG_FILE, config.echo().as_bytes())?;
    let stack = initial_stack(problem, config.seed)?;
    let trainer = Trainer::new(problem, config.trainer_config(), &stack)?;
    let initial = trainer.incumbent();
    let history = History {
        initial_mean: initial.mean,
        initial_se: initial.se,
        reports: Vec::new(),
    };
    execute(config, &built, trainer, stack, history, &dir)
}

/// Continue the run in `dir` from its last completed sweep. `sets` are
/// applied on top of the saved configuration (e.g. `sweeps=20`); only
/// trainer settings that do not change the sampled paths may differ.
pub fn resume(dir: &Path, sets: &[String]) -> Result<RunSummary, HarnessError> {
    let text = String::from_utf8(read_file(dir, CONFIG_FILE)?)
        .map_err(|e| HarnessError::Config(format!("{CONFIG_FILE}: {e}")))?;
    let saved = load_config(Some(&text), None, &[])?;
    let mut config = load_config(Some(&text), None, sets)?;
    config.output = dir.to_path_buf();
    let mut same = config.clone();
    same.trainer.max_sweeps = saved.trainer.max_sweeps;
    same.trainer.rel_tol = saved.trainer.rel_tol;
    same.output = saved.output.clone();
    same.oracle = saved.oracle;
    same.oracle_settings = saved.oracle_settings.clone();
    if same != saved {
        return Err(HarnessError::Config(
            "resume may only change max_sweeps, rel_tol, oracle and output settings".into(),
        ));
    }
    let built = checked(&config)?;
    let problem = built.as_dyn();
    let history: History = serde_json::from_slice(&read_file(dir, HISTORY_FILE)?)
        .map_err(|e| HarnessError::Config(format!("{HISTORY_FILE}: {e}")))?;
    let stack = PolicyStack::from_bytes(problem.policy_layout(), &read_file(dir, CHECKPOINT_FILE)?)
        .map_err(|e| HarnessError::Config(format!("{CHECKPOINT_FILE}: {e}")))?;
    write_file(dir, CONFIG_FILE, config.echo().as_bytes())?;
    let mut trainer = Trainer::new(problem, config.trainer_config(), &stack)?;
    trainer.set_initial(history.initial_mean);
    execute(&config, &built, trainer, stack, history, dir)
}

fn execute(
    config: &RunConfig,
    built: &BuiltProblem,
    mut trainer: Trainer<'_>,
    mut stack: PolicyStack,
    history: History,
    dir: &Path,
) -> Result<RunSummary, HarnessError> {
    let problem = built.as_dyn();
    let started = Instant::now();
    let (initial_mean, initial_se) = (history.initial_mean, history.initial_se);
    let (reports, stop) = trainer
        .run(&mut stack, history.reports, |stack, reports| {
            write_file(dir, CHECKPOINT_FILE, &stack.to_bytes())?;
            write_json(
                dir,
                HISTORY_FILE,
                &History {
                    initial_mean,
                    initial_se,
                    reports: reports.to_vec(),
                },
            )?;
            Ok::<_, HarnessError>(())
        })
        .map_err(|e| match e {
            RunError::Train(t) => HarnessError::from(t),
            RunError::Callback(c) => c,
        })?;
    // Also covers a resume that had nothing left to do.
    write_file(dir, CHECKPOINT_FILE, &stack.to_bytes())?;
    write_json(
        dir,
        HISTORY_FILE,
        &History {
            initial_mean,
            initial_se,
            reports: reports.clone(),
        },
    )?;

    let minimizes = problem.minimizes();
    let shown = |v: f64| display(minimizes, v);
    let incumbent = trainer.incumbent();
    if !incumbent.mean.is_finite() {
        return Err(HarnessError::Numerical("final objective is not finite".into()));
    }
    let mut curve = vec![CurvePoint {
        sweep: 0,
        objective: shown(initial_mean),
        se: initial_se,
        tracked: Vec::new(),
    }];
    curve.extend(reports.iter().map(|r| CurvePoint {
        sweep: r.sweep,
        objective: shown(r.eval_mean),
        se: r.eval_se,
        tracked: r.tracked.clone(),
    }));
    if let Some(first) = reports.first() {
        // Sweep 0 has no tracked scalars of its own; reuse the names so
        // the CSV stays rectangular, with the values from the initial stack.
        let initial_stack = initial_stack(problem, config.seed)?;
        let names: Vec<String> = first.tracked.iter().map(|(k, _)| k.clone()).collect();
        let vals = problem.tracked_scalars(&initial_stack);
        curve[0].tracked = names
            .into_iter()
            .map(|k| {
                let v = vals.iter().find(|(n, _)| *n == k).map(|(_, v)| *v).unwrap_or(f64::NAN);
                (k, v)
            })
            .collect();
    }
    write_file(dir, SWEEPS_FILE, &artifacts::sweeps_csv(&reports, minimizes))?;
    write_file(dir, PLOT_FILE, &artifacts::plot_csv(&curve))?;
    let title = format!("{} objective by sweep", config.problem.table());
    write_file(dir, PLOT_SVG, artifacts::plot_svg(&curve, &title).as_bytes())?;

    let values = trainer.incumbent_values()?;
    let mut baseline = None;
    if let Some((name, base)) = baseline_stack(built, config)? {
        let other = Trainer::new(problem, config.trainer_config(), &base)?;
        let bv = other.incumbent_values()?;
        let diffs: Vec<f64> = values.iter().zip(&bv).map(|(a, b)| shown(*a) - shown(*b)).collect();
        let d = crate::simulate::ObjectiveEstimate::from_samples(&diffs);
        baseline = Some((name, shown(other.incumbent().mean), d.mean, d.se));
    }
    let tracked: BTreeMap<String, f64> = problem.tracked_scalars(&stack).into_iter().collect();
    let oracle = if config.oracle {
        Some(run_oracle_comparison(
            built,
            config,
            &trainer,
            &stack,
            &tracked,
            shown(incumbent.mean),
        )?)
    } else {
        None
    };
    let summary = RunSummary {
        problem: config.problem,
        version: VERSION.to_string(),
        objective: shown(incumbent.mean),
        se: incumbent.se,
        eval_paths: incumbent.n,
        initial_objective: shown(initial_mean),
        sweeps: reports.len(),
        accepted_updates: reports.iter().flat_map(|r| &r.updates).filter(|u| u.accepted).count(),
        stop,
        tracked,
        baseline: baseline.as_ref().map(|b| b.0.clone()),
        baseline_objective: baseline.as_ref().map(|b| b.1),
        paired_difference: baseline.as_ref().map(|b| b.2),
        paired_se: baseline.as_ref().and_then(|b| b.3),
        oracle,
        seeds: Seeds::new(config.seed),
        policy_fingerprint: format!("{:016x}", stack.fingerprint()),
        config: config_value(config),
    };
    write_json(dir, SUMMARY_FILE, &summary)?;
    write_json(
        dir,
        TIMING_FILE,
        &json!({
            "seconds_this_invocation": started.elapsed().as_secs_f64(),
            "sweep_seconds": reports.iter().map(|r| r.seconds).collect::<Vec<_>>(),
        }),
    )?;
    Ok(summary)
}

fn config_value(config: &RunConfig) -> Value {
    let table: toml::Table = toml::from_str(&config.echo()).expect("echo parses");
    serde_json::to_value(table).expect("toml converts to json")
}

/// Reference policy for the paired comparison, if the problem has one.
fn baseline_stack(built: &BuiltProblem, config: &RunConfig) -> Result<Option<(String, PolicyStack)>, HarnessError> {
    Ok(match built {
        BuiltProblem::Growth(p) if p.spec().tau.iter().all(|&t| t == 1.0) => {
            Some(("infinite-horizon closed form".into(), growth_infinite_baseline(p)?))
        }
        BuiltProblem::Dsice(p) => {
            let (mu, pp, _) = dsice_best_constant(p, config.oracle_settings.grid_points)?;
            Some((
                format!("best constant policy mu={mu} p={pp}"),
                dsice_constant_stack(p, mu, pp)?,
            ))
        }
        _ => None,
    })
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn run_oracle_comparison(
    built: &BuiltProblem,
    config: &RunConfig,
    trainer: &Trainer<'_>,
    stack: &PolicyStack,
    tracked: &BTreeMap<String, f64>,
    objective: f64,
) -> Result<Value, HarnessError> {
    let mut v = reference(built, config)?;
    let obj = v.as_object_mut().expect("reference is an object");
    match built {
        BuiltProblem::Fbsde(_) => {
            let y = tracked["y"];
            let star = obj["y_star"].as_f64().unwrap();
            let scale = obj["variance_scale"].as_f64().unwrap();
            obj.insert("y_trained".into(), json!(y));
            obj.insert("relative_error".into(), json!(relative(y, star)));
            obj.insert("objective_over_variance_scale".into(), json!(objective / scale));
        }
        BuiltProblem::Heston(_) => {
            let xi = tracked["xi0"];
            let pde = obj["xi0_pde"].as_f64().unwrap();
            obj.insert("xi0_trained".into(), json!(xi));
            obj.insert("relative_error".into(), json!(relative(xi, pde)));
        }
        BuiltProblem::Growth(p) => {
            if p.spec().tau.iter().all(|&t| t == 1.0) {
                let best = Trainer::new(p, config.trainer_config(), &growth_finite_optimal(p)?)?;
                let opt = best.incumbent();
                obj.insert("finite_optimal_objective".into(), json!(opt.mean));
                obj.insert("finite_optimal_se".into(), json!(opt.se));
                obj.insert("gap_to_finite_optimal".into(), json!(opt.mean - objective));
            }
        }
        BuiltProblem::Dsice(p) => {
            let key = StreamKey::new(config.seed, Purpose::Eval, 0, 0, 0);
            let batch = simulate_full(p, stack, trainer.config().eval_paths, key)?;
            let status = match check_dsice_invariants(p, &batch) {
                Ok(()) => "ok".to_string(),
                Err(e) => e,
            };
            obj.insert("invariants".into(), json!(status));
        }
        BuiltProblem::Custom(_) => {
            let best = obj["optimal_value"].as_f64().unwrap();
            obj.insert("gap_to_optimal".into(), json!(best - objective));
        }
    }
    Ok(v)
}

/// The problem's reference solution, independent of any training.
pub fn reference(built: &BuiltProblem, config: &RunConfig) -> Result<Value, HarnessError> {
    let o = &config.oracle_settings;
    Ok(match built {
        BuiltProblem::Fbsde(p) => {
            let y = fbsde_oracle_y(p.spec(), o.samples, config.seed)?;
            let var = fbsde_zero_control_loss(p.spec(), o.samples, config.seed)?;
            json!({
                "y_star": y.value,
                "y_star_se": y.se,
                "samples": y.samples,
                "variance_scale": var.value,
                "variance_scale_se": var.se,
            })
        }
        BuiltProblem::Heston(p) => {
            let s = heston_pde_oracle(p.spec(), o.grid)?;
            json!({
                "xi0_pde": s.value,
                "xi0_pde_coarse": s.coarse,
                "grid_change": s.change,
                "grid": o.grid,
            })
        }
        BuiltProblem::Growth(p) => {
            let gamma = crate::problems::growth::growth_gamma(p.spec())?;
            json!({ "gamma": gamma })
        }
        BuiltProblem::Dsice(p) => {
            let (mu, pp, value) = dsice_best_constant(p, o.grid_points)?;
            json!({
                "best_constant": { "mu": mu, "p": pp, "objective": value },
                "grid_points": o.grid_points,
            })
        }
        BuiltProblem::Custom(p) => json!({ "optimal_value": lq_optimal_value(p.spec())? }),
    })
}

/// Compute the reference solution alone and write `oracle.json` (with the
/// configuration echoed) into `config.output`.
pub fn oracle(config: &RunConfig) -> Result<Value, HarnessError> {
    let built = BuiltProblem::build(config)?;
    let result = reference(&built, config)?;
    let out = json!({
        "problem": config.problem,
        "version": VERSION,
        "result": result,
        "inputs": config_value(config),
    });
    let dir = &config.output;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(dir, ORACLE_FILE, &out)?;
    Ok(out)
}

/// Size the global worker pool. `None` leaves the default.
pub fn set_threads(threads: Option<usize>) -> Result<(), HarnessError> {
    match threads {
        Some(0) => Err(HarnessError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(e.to_string())),
        None => Ok(()),
    }
}
