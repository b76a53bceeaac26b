//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | unreadable, unparsable or invalid scenario, bad flags, bad policy file |
//! | 3 | explicit slot violates the one-event bound |
//! | 4 | solver hit its iteration cap (artifacts are still written) |
//! | 5 | a required structural check failed |
//! | 6 | bad simulation parameter |
//!
//! Failures print one JSON object on stderr:
//! `{"error": kind, "exit_code": n, "message": text, "details": ...}`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Algorithm, ConfigError, Resolved, ScenarioConfig};
use crate::export::{self, Meta, SweepRow};
use crate::mdp::{build_kernel, SleepMdp};
use crate::model::ModelError;
use crate::sim::{estimate_discounted_cost, make_baseline_policy, Baseline, SimError, SimReport};
use crate::solver::{policy_iteration_from, value_iteration, Policy, Solution};
use crate::structure::{
    check_hysteretic, check_monotone, check_partial_submodular, check_value_difference_props,
    extract_thresholds, search_full_submodularity_violation, LatticeFunction, StructureReport,
    DEFAULT_RELATIVE_TOLERANCE,
};

/// Overrides the output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "SLEEPWAKE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "sleepwake-out";
/// Finite-horizon length for the value-difference checks.
const VERIFY_HORIZON: usize = 200;
/// Violations listed per check in the structure report.
const LISTED_VIOLATIONS: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "sleepwake",
    version,
    about = "Optimal server sleep/wake control under bursty traffic"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to $SLEEPWAKE_OUT_DIR, then the scenario's output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub algorithm: Option<Algorithm>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// solve | always_on | always_off | n_policy:N,m | n_policy_sweep:N1-N2:m1,m2,...
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Policy table with phase,queue,active,action columns.
    #[arg(long, global = true)]
    pub policy_file: Option<PathBuf>,
    /// Print the effective scenario and exit without running.
    #[arg(long, global = true)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the scenario and write values, policy, Q-factors and thresholds.
    Solve,
    /// Solve, then run the structural checks.
    Verify,
    /// Monte-Carlo estimate of a policy's discounted cost.
    Simulate,
    /// Print the effective scenario (the built-in reference without --config).
    DumpConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub details: Value,
}

impl CliError {
    fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            kind,
            message: message.into(),
            details: Value::Null,
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(2, "config", message)
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(2, "io", format!("{}: {err}", path.display()))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
            "details": self.details,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Model(ModelError::SlotTooLarge {
                slot,
                max_slot,
                worst,
                action,
                mass,
            }) => {
                let mut err = CliError::new(
                    3,
                    "slot_too_large",
                    format!("slot {slot} s exceeds the maximum admissible slot {max_slot} s"),
                );
                err.details = json!({
                    "slot_s": slot,
                    "max_slot_s": max_slot,
                    "state": worst,
                    "action": action,
                    "event_mass": mass,
                });
                err
            }
            ConfigError::Validation(errs) => {
                let mut err = CliError::config(errs.to_string());
                err.details = json!(errs.0.iter().map(|e| e.to_string()).collect::<Vec<_>>());
                err
            }
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::new(6, "bad_parameter", e.to_string())
    }
}

/// Runs one invocation; anything printed for the user goes to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    if cli.dump_config || cli.command == Command::DumpConfig {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let ctx = Context::prepare(cli, cfg)?;
    match cli.command {
        Command::Solve => cmd_solve(&ctx),
        Command::Verify => cmd_verify(&ctx, cli.policy_file.as_deref()),
        Command::Simulate => cmd_simulate(&ctx, cli.policy.as_deref(), cli.policy_file.as_deref()),
        Command::DumpConfig => unreachable!(),
    }
}

fn effective_config(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match (&cli.config, cli.command) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Command::DumpConfig) => ScenarioConfig::reference(),
        (None, _) => return Err(CliError::config("--config is required")),
    };
    if let Some(a) = cli.algorithm {
        cfg.solver.algorithm = a;
    }
    if let Some(eps) = cli.epsilon {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(CliError::config(format!(
                "--epsilon must be positive, got {eps}"
            )));
        }
        cfg.solver.epsilon = eps;
    }
    if let Some(n) = cli.reps {
        cfg.sim.replications = n;
    }
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

struct Context {
    cfg: ScenarioConfig,
    res: Resolved,
    mdp: SleepMdp<f64>,
    meta: Meta,
    out: PathBuf,
}

impl Context {
    fn prepare(cli: &Cli, cfg: ScenarioConfig) -> Result<Self, CliError> {
        let res = cfg.resolve()?;
        let mdp = build_kernel(&res.model, &res.params, res.slot)
            .map_err(|e| CliError::from(ConfigError::Model(e)))?;
        let meta = Meta::new(cfg.sha256(), res.slot, res.discount);
        let out = cli
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let path = out.join("config.json");
        fs::write(&path, cfg.to_json_pretty() + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(Context {
            cfg,
            res,
            mdp,
            meta,
            out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn solve(&self) -> Solution<f64> {
        let s = &self.cfg.solver;
        let (k, c, r) = (&self.mdp.kernel, &self.mdp.costs, self.res.discount);
        match s.algorithm {
            Algorithm::Vi => value_iteration(k, c, r, s.epsilon, s.max_iters),
            Algorithm::Pi => policy_iteration_from(
                Policy::constant(*k.space(), 0),
                k,
                c,
                r,
                s.epsilon,
                s.max_iters,
            ),
        }
    }

    fn write_json(&self, name: &str, body: Value) -> Result<(), CliError> {
        let path = self.path(name);
        export::write_json(&path, &self.meta, body).map_err(|e| CliError::io(&path, e))
    }

    fn read_policy(&self, path: &Path) -> Result<Policy, CliError> {
        export::read_policy_table(path, *self.mdp.space()).map_err(CliError::config)
    }
}

fn not_converged(sol: &Solution<f64>) -> CliError {
    let mut err = CliError::new(
        4,
        "not_converged",
        format!(
            "{} stopped after {} iterations with residual {}; artifacts were written",
            sol.report.algorithm, sol.report.iterations, sol.report.residual
        ),
    );
    err.details = json!({ "iterations": sol.report.iterations, "residual": sol.report.residual });
    err
}

fn cmd_solve(ctx: &Context) -> Result<(), CliError> {
    let sol = ctx.solve();
    let io = |p: PathBuf| move |e| CliError::io(&p, e);
    export::write_policy_table(
        &ctx.path("policy.csv"),
        &ctx.meta,
        &sol.policy,
        Some(&sol.values),
    )
    .map_err(io(ctx.path("policy.csv")))?;
    export::write_qfactor_table(&ctx.path("qfactors.csv"), &ctx.meta, &sol.qfactor)
        .map_err(io(ctx.path("qfactors.csv")))?;
    let thresholds = extract_thresholds(&sol.policy);
    let threshold_note = match &thresholds {
        Ok(table) => {
            export::write_threshold_table(&ctx.path("thresholds.csv"), &ctx.meta, table)
                .map_err(io(ctx.path("thresholds.csv")))?;
            export::write_step_table(&ctx.path("threshold_steps.csv"), &ctx.meta, table)
                .map_err(io(ctx.path("threshold_steps.csv")))?;
            ctx.write_json(
                "thresholds.json",
                json!({ "phase_names": phase_names(ctx), "thresholds": table }),
            )?;
            Value::Null
        }
        Err(e) => json!(e.to_string()),
    };
    let start = ctx.res.sim.start;
    let v_start = sol.values.get(start);
    ctx.write_json(
        "solve_report.json",
        json!({
            "warning": if sol.report.converged { Value::Null } else { json!("not_converged") },
            "states": ctx.mdp.space().len(),
            "actions": ctx.mdp.space().n_actions(),
            "kernel_entries": ctx.mdp.kernel.n_entries(),
            "start": start,
            "value_at_start": v_start,
            "threshold_error": threshold_note,
            "report": sol.report,
        }),
    )?;
    println!(
        "{}: {} iterations, residual {:.3e}, converged {}",
        sol.report.algorithm, sol.report.iterations, sol.report.residual, sol.report.converged
    );
    println!("V*{start} = {v_start}");
    println!("artifacts in {}", ctx.out.display());
    if sol.report.converged {
        Ok(())
    } else {
        Err(not_converged(&sol))
    }
}

fn phase_names(ctx: &Context) -> Vec<String> {
    (0..ctx.res.model.n_phases())
        .map(|s| ctx.res.model.phase_name(s))
        .collect()
}

#[derive(Serialize)]
struct CheckSummary {
    property: String,
    passed: bool,
    tolerance: f64,
    checked: usize,
    violation_count: usize,
    worst: f64,
    violations: Vec<crate::structure::Violation>,
}

impl From<StructureReport> for CheckSummary {
    fn from(r: StructureReport) -> Self {
        CheckSummary {
            worst: r.worst(),
            violation_count: r.violations.len(),
            property: r.property,
            passed: r.passed,
            tolerance: r.tolerance,
            checked: r.checked,
            violations: r.violations.into_iter().take(LISTED_VIOLATIONS).collect(),
        }
    }
}

fn cmd_verify(ctx: &Context, policy_file: Option<&Path>) -> Result<(), CliError> {
    let sol = ctx.solve();
    let (policy, source) = match policy_file {
        Some(p) => (ctx.read_policy(p)?, format!("file:{}", p.display())),
        None => (sol.policy.clone(), "solve".to_string()),
    };
    let tol = DEFAULT_RELATIVE_TOLERANCE;
    let horizon = crate::solver::finite_horizon_values(
        &ctx.mdp.kernel,
        &ctx.mdp.costs,
        ctx.res.discount,
        VERIFY_HORIZON,
    );
    let checks: Vec<CheckSummary> = vec![
        check_monotone(&policy).into(),
        check_hysteretic(&policy).into(),
        check_partial_submodular(&sol.qfactor, tol).into(),
        check_value_difference_props(&horizon.values, tol).into(),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.property.as_str())
        .collect();
    let full_v = search_full_submodularity_violation(LatticeFunction::Value(&sol.values), tol);
    let full_q = search_full_submodularity_violation(LatticeFunction::QFactor(&sol.qfactor), tol);
    ctx.write_json(
        "structure_report.json",
        json!({
            "passed": failed.is_empty(),
            "failed_checks": failed,
            "policy_source": source,
            "finite_horizon": VERIFY_HORIZON,
            "solver": sol.report,
            "checks": checks,
            "full_submodularity": { "values": full_v, "qfactor": full_q },
        }),
    )?;
    for c in &checks {
        println!(
            "{:<28} {}  ({} checked, {} violations, worst {:.3e})",
            c.property,
            if c.passed { "PASS" } else { "FAIL" },
            c.checked,
            c.violation_count,
            c.worst
        );
    }
    match &full_v {
        Some(v) => println!(
            "full submodularity: violated in {:?} at {} by {:.3e}",
            v.pair, v.state, v.cross_difference
        ),
        None => println!("full submodularity: no violation"),
    }
    if !failed.is_empty() {
        let mut err = CliError::new(
            5,
            "structure",
            format!("structural checks failed: {}", failed.join(", ")),
        );
        err.details = json!(failed);
        return Err(err);
    }
    if !sol.report.converged {
        return Err(not_converged(&sol));
    }
    Ok(())
}

enum PolicySource {
    Optimal,
    Baseline(Baseline),
    Sweep {
        thresholds: Vec<usize>,
        servers: Vec<usize>,
    },
    File(PathBuf),
}

fn parse_policy_source(spec: Option<&str>, file: Option<&Path>) -> Result<PolicySource, CliError> {
    match (spec, file) {
        (Some(_), Some(_)) => Err(CliError::config(
            "give at most one of --policy, --policy-file",
        )),
        (None, Some(f)) => Ok(PolicySource::File(f.to_path_buf())),
        (None, None) | (Some("solve"), None) => Ok(PolicySource::Optimal),
        (Some(s), None) => match s.strip_prefix("n_policy_sweep:") {
            Some(rest) => parse_sweep(rest),
            None => Ok(PolicySource::Baseline(s.parse()?)),
        },
    }
}

/// `N1-N2:m1,m2,...`
fn parse_sweep(rest: &str) -> Result<PolicySource, CliError> {
    let bad = || {
        SimError::BadParameter(format!(
            "sweep expects 'n_policy_sweep:N1-N2:m1,m2,...', got '{rest}'"
        ))
    };
    let (range, servers) = rest.split_once(':').ok_or_else(bad)?;
    let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
    let (lo, hi) = (num(lo)?, num(hi)?);
    if lo > hi {
        return Err(bad().into());
    }
    let servers = servers.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
    Ok(PolicySource::Sweep {
        thresholds: (lo..=hi).collect(),
        servers,
    })
}

fn row(
    label: String,
    threshold: Option<usize>,
    servers: Option<usize>,
    rep: &SimReport,
    v_star: f64,
) -> SweepRow {
    SweepRow {
        policy: label,
        threshold,
        servers,
        mean: rep.mean,
        ci99_low: rep.ci99_low,
        ci99_high: rep.ci99_high,
        delta_vs_optimal: Some(rep.mean - v_star),
    }
}

fn cmd_simulate(ctx: &Context, spec: Option<&str>, file: Option<&Path>) -> Result<(), CliError> {
    let source = parse_policy_source(spec, file)?;
    let sol = ctx.solve();
    let sim = ctx.res.sim;
    let v_star = if ctx.mdp.space().contains(sim.start) {
        sol.values.get(sim.start)
    } else {
        return Err(SimError::BadParameter(format!(
            "start state {} outside the state space",
            sim.start
        ))
        .into());
    };
    let estimate = |p: &Policy| {
        estimate_discounted_cost(
            p,
            &ctx.res.model,
            &ctx.res.params,
            ctx.res.slot,
            ctx.res.discount,
            &sim,
        )
    };
    let space = *ctx.mdp.space();
    let mut rows = Vec::new();
    let body = match source {
        PolicySource::Sweep {
            thresholds,
            servers,
        } => {
            for &m in &servers {
                for &n in &thresholds {
                    let b = Baseline::NPolicy {
                        threshold: n,
                        servers: m,
                    };
                    let rep = estimate(&make_baseline_policy(&b, space)?)?;
                    rows.push(row(
                        format!("n_policy:{n},{m}"),
                        Some(n),
                        Some(m),
                        &rep,
                        v_star,
                    ));
                }
            }
            let beaten = rows
                .iter()
                .filter(|r| v_star - r.mean > r.ci99_high - r.ci99_low)
                .count();
            let worse = rows.iter().filter(|r| r.ci99_low > v_star).count();
            println!("V*{} = {v_star}", sim.start);
            println!(
                "{} baselines: {beaten} beat V* by more than their CI width, {worse} significantly worse",
                rows.len()
            );
            json!({
                "policy_source": "n_policy_sweep",
                "start": sim.start,
                "value_at_start": v_star,
                "replications": sim.replications,
                "baselines": rows,
                "significantly_beating_optimal": beaten,
                "significantly_worse_than_optimal": worse,
            })
        }
        other => {
            let optimal = matches!(other, PolicySource::Optimal);
            let (label, policy) = match other {
                PolicySource::Optimal => ("solve".to_string(), sol.policy.clone()),
                PolicySource::Baseline(b) => (
                    spec.unwrap_or_default().to_string(),
                    make_baseline_policy(&b, space)?,
                ),
                PolicySource::File(p) => (format!("file:{}", p.display()), ctx.read_policy(&p)?),
                PolicySource::Sweep { .. } => unreachable!(),
            };
            let rep = estimate(&policy)?;
            let inside = rep.consistent_with(v_star);
            let verdict = if inside {
                "V* in 99% CI"
            } else {
                "V* outside 99% CI"
            };
            println!("V*{} = {v_star}", sim.start);
            println!(
                "{label}: mean {} over {} replications, 99% CI [{}, {}], truncation bias <= {:.3e}",
                rep.mean, rep.replications, rep.ci99_low, rep.ci99_high, rep.truncation_bias_bound
            );
            if optimal {
                println!("verdict: {verdict}");
            }
            rows.push(row(label.clone(), None, None, &rep, v_star));
            json!({
                "policy_source": label,
                "value_at_start": v_star,
                "verdict": if optimal { json!(verdict) } else { Value::Null },
                "significantly_worse_than_optimal": rep.ci99_low > v_star,
                "report": rep,
            })
        }
    };
    let path = ctx.path("comparison.csv");
    export::write_sweep_table(&path, &ctx.meta, &rows).map_err(|e| CliError::io(&path, e))?;
    ctx.write_json("sim_report.json", body)?;
    if !sol.report.converged {
        return Err(not_converged(&sol));
    }
    Ok(())
}
