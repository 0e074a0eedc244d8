//! Command-line front end: duality checks on finite spaces, risk evaluation,
//! optimal rules, adaptive risk curves, and the finite-sample treatment
//! effect experiment.
//!
//! Exit codes: 0 on success, 2 for validation errors (bad flags, malformed
//! files, inconsistent configurations), 3 for numerical failures
//! (non-convergence, duality gaps above tolerance).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use limitrisk::{
    finite_m_dual_risk, infinite_m_risk, mc_attainability, optimal_rule, optimize_spline,
    rule_risk_curve, tune_threshold, AdaptiveReport, AteConfig, Error, FiniteSpacePrimal,
    IntegratorSettings, LambdaGrid, LimitExperimentConfig, LossSpec, MomentOrder, RiskReport,
    RuleSpec, ShrinkageFamily, SolveStatus,
};

#[derive(Parser)]
#[command(name = "limitrisk", version, about = "Misspecification-robust risk toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for Monte Carlo integration backends.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Gauss-Hermite nodes per Gaussian dimension.
    #[arg(long, global = true, default_value_t = 128)]
    nodes: usize,

    /// Monte Carlo draws when quadrature is not applicable.
    #[arg(long, global = true, default_value_t = 1_000_000)]
    mc_draws: usize,

    /// Solver convergence tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol: f64,

    /// Output file (stdout when omitted; directory stem for multi-file
    /// outputs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify strong duality on a finite-space instance.
    DualCheck {
        /// JSON file with keys "q", "loss", "phi", and optionally "lambda".
        #[arg(long)]
        space: PathBuf,
        /// Overrides the penalty weight from the file.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate the constrained-multiplier risk of a rule.
    Risk {
        /// Experiment configuration JSON (keys I0, Psi, Omega, K, lambda).
        #[arg(long)]
        config: PathBuf,
        /// Rule as inline JSON or a path to a JSON file.
        #[arg(long)]
        rule: String,
        /// Moment order: a nonnegative integer or "inf".
        #[arg(long, default_value = "0")]
        m: String,
        /// Overrides lambda from the configuration file.
        #[arg(long)]
        lambda: Option<f64>,
        /// Local parameter (comma-separated); defaults to the origin.
        #[arg(long)]
        h: Option<String>,
        /// Restrict multipliers to be nonnegative (moment inequalities).
        #[arg(long)]
        nonneg_beta: bool,
    },
    /// Solve for the optimal rule under squared loss.
    Optimal {
        #[arg(long)]
        config: PathBuf,
        /// Moment order: a nonnegative integer or "inf".
        #[arg(long, default_value = "inf")]
        m: String,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Emit adaptive risk curves as CSV.
    Adaptive {
        #[arg(long)]
        omega: f64,
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Fixed threshold for st/erm (tuned when omitted or with --auto).
        #[arg(long)]
        tau: Option<f64>,
        /// Tune the threshold to minimize adaptive regret.
        #[arg(long)]
        auto: bool,
        #[arg(long, default_value_t = 37)]
        grid_points: usize,
        /// Knot count for the spline family.
        #[arg(long, default_value_t = 11)]
        knots: usize,
        /// Coefficient for the linear family.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
    /// Finite-sample attainability experiment for the two-team model.
    Ate {
        #[arg(long)]
        mu0: f64,
        #[arg(long)]
        mu1: f64,
        #[arg(long)]
        pi1: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        h0: f64,
        #[arg(long, default_value_t = 0.0)]
        h1: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        m: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        /// Rule as inline JSON or a file path; defaults to the plain plug-in.
        #[arg(long)]
        rule: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    St,
    Erm,
    Spline,
    Linear,
    All,
}

enum CliError {
    Validation(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::NonIntegrableTilt { .. } => CliError::Numerical(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Validation(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = IntegratorSettings {
        nodes: cli.nodes,
        mc_draws: cli.mc_draws,
        seed: cli.seed,
        tol: cli.tol,
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::DualCheck { space, lambda } => cmd_dual_check(&cli, &settings, space, *lambda),
        Command::Risk { config, rule, m, lambda, h, nonneg_beta } => {
            cmd_risk(&cli, &settings, config, rule, m, *lambda, h.as_deref(), *nonneg_beta)
        }
        Command::Optimal { config, m, lambda } => {
            cmd_optimal(&cli, &settings, config, m, *lambda)
        }
        Command::Adaptive { omega, family, tau, auto, grid_points, knots, c } => cmd_adaptive(
            &cli,
            &settings,
            *omega,
            *family,
            *tau,
            *auto,
            *grid_points,
            *knots,
            *c,
            started,
        ),
        Command::Ate { mu0, mu1, pi1, n, h0, h1, lambda, m, reps, rule } => cmd_ate(
            &cli,
            &settings,
            AteConfig { mu0: *mu0, mu1: *mu1, pi1: *pi1, n: *n, h: [*h0, *h1] },
            *lambda,
            *m,
            *reps,
            rule.as_deref(),
            started,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

/// 17 significant digits, losslessly round-trippable; infinities print as
/// "inf" / "-inf".
fn fmt17(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{x:.16e}")
}

fn json_extended(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else if x > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

fn manifest(
    cli: &Cli,
    settings: &IntegratorSettings,
    command: &str,
    resolved: serde_json::Value,
    started: Instant,
) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "config": resolved,
        "seed": cli.seed,
        "integrator": settings,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": started.elapsed().as_secs_f64(),
    })
}

fn emit(cli: &Cli, text: &str) -> Result<(), CliError> {
    match &cli.out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read_rule(arg: &str) -> Result<RuleSpec, CliError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg)?
    };
    Ok(RuleSpec::from_json(&text)?)
}

fn parse_vector(text: &str) -> Result<DVector<f64>, CliError> {
    let parts: Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    match parts {
        Ok(v) if !v.is_empty() => Ok(DVector::from_vec(v)),
        _ => Err(CliError::Validation(format!("could not parse vector {text:?}"))),
    }
}

fn cmd_dual_check(
    cli: &Cli,
    settings: &IntegratorSettings,
    space: &Path,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let text = std::fs::read_to_string(space)?;
    let mut problem: FiniteSpacePrimal = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(l) = lambda {
        problem.lambda = l;
    }
    let (primal, worst_case) = limitrisk::primal_risk_finite_space(&problem)?;
    let (dual, beta, diag) = limitrisk::dual_risk_finite_space(&problem)?;
    let gap = (primal - dual).abs();
    let tol = 1e-6 * (1.0 + primal.abs());

    let mut report = String::new();
    let _ = writeln!(report, "primal_value {}", fmt17(primal));
    let _ = writeln!(report, "dual_value {}", fmt17(dual));
    let _ = writeln!(report, "abs_gap {}", fmt17(gap));
    let _ = writeln!(
        report,
        "worst_case_p {}",
        worst_case.iter().map(|p| fmt17(*p)).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(
        report,
        "beta_star {}",
        beta.iter().map(|b| fmt17(*b)).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(
        report,
        "manifest {}",
        manifest(cli, settings, "dual-check", serde_json::json!({"space": text.trim()}), started)
    );
    emit(cli, report.trim_end())?;

    if diag.status != SolveStatus::Converged {
        return Err(CliError::Numerical("dual solver did not converge".into()));
    }
    if gap > tol {
        return Err(CliError::Numerical(format!(
            "duality gap {gap:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    Ok(())
}

fn report_json(report: &RiskReport) -> serde_json::Value {
    serde_json::json!({
        "value": json_extended(report.value),
        "beta_star": report.beta_star.as_ref().map(|b| b.iter().cloned().collect::<Vec<f64>>()),
        "iterations": report.iterations,
        "gradient_norm": report.gradient_norm,
        "status": report.status,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_risk(
    cli: &Cli,
    settings: &IntegratorSettings,
    config_path: &Path,
    rule_arg: &str,
    m: &str,
    lambda: Option<f64>,
    h: Option<&str>,
    nonneg_beta: bool,
) -> Result<(), CliError> {
    let started = Instant::now();
    let config_text = std::fs::read_to_string(config_path)?;
    let mut config = LimitExperimentConfig::from_json(&config_text)?;
    if let Some(l) = lambda {
        config = config.with_lambda(l)?;
    }
    let rule = read_rule(rule_arg)?;
    let order: MomentOrder = m.parse()?;
    let h_vec = h.map(parse_vector).transpose()?;

    let report = match order {
        MomentOrder::Finite(m) => finite_m_dual_risk(
            &config,
            &rule,
            &LossSpec::Squared,
            m,
            h_vec.as_ref(),
            settings,
            nonneg_beta,
        )?,
        MomentOrder::Infinite => infinite_m_risk(&config, &rule, &LossSpec::Squared, settings)?,
    };
    let payload = serde_json::json!({
        "results": report_json(&report),
        "manifest": manifest(
            cli,
            settings,
            "risk",
            serde_json::json!({
                "config": config.to_json(),
                "rule": rule.to_json(),
                "m": order.to_string(),
                "nonneg_beta": nonneg_beta,
            }),
            started,
        ),
    });
    emit(cli, &payload.to_string())?;
    if report.status == SolveStatus::MaxIterations {
        return Err(CliError::Numerical("risk solver hit its iteration budget".into()));
    }
    Ok(())
}

fn cmd_optimal(
    cli: &Cli,
    settings: &IntegratorSettings,
    config_path: &Path,
    m: &str,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let config_text = std::fs::read_to_string(config_path)?;
    let mut config = LimitExperimentConfig::from_json(&config_text)?;
    if let Some(l) = lambda {
        config = config.with_lambda(l)?;
    }
    let order: MomentOrder = m.parse()?;
    let (rule, report) = optimal_rule(&config, order, &LossSpec::Squared, settings)?;

    // The minimizing multiplier of the optimal rule, when an order is given.
    let beta_star = match order {
        MomentOrder::Finite(mm) if report.value.is_finite() => finite_m_dual_risk(
            &config,
            &rule,
            &LossSpec::Squared,
            mm,
            None,
            settings,
            false,
        )?
        .beta_star
        .map(|b| b.iter().cloned().collect::<Vec<f64>>()),
        _ => None,
    };
    let c_star = match &rule {
        RuleSpec::Linear { c } => Some(
            (0..c.nrows())
                .map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let payload = serde_json::json!({
        "results": {
            "family": rule.family_name(),
            "c_star": c_star,
            "beta_star": beta_star,
            "risk": json_extended(report.value),
        },
        "manifest": manifest(
            cli,
            settings,
            "optimal",
            serde_json::json!({"config": config.to_json(), "m": order.to_string()}),
            started,
        ),
    });
    emit(cli, &payload.to_string())
}

fn curve_csv(report: &AdaptiveReport) -> String {
    let mut csv = String::from("lambda,log_lambda,risk_rule,risk_opt,ratio\n");
    for i in 0..report.grid.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt17(report.grid.values[i]),
            fmt17(report.grid.log_values[i]),
            fmt17(report.risk_rule[i]),
            fmt17(report.risk_opt[i]),
            fmt17(report.ratio[i]),
        );
    }
    csv
}

fn write_curve(
    cli: &Cli,
    settings: &IntegratorSettings,
    path: &Path,
    report: &AdaptiveReport,
    resolved: serde_json::Value,
    started: Instant,
) -> Result<(), CliError> {
    std::fs::write(path, curve_csv(report))?;
    let manifest_path = path.with_extension("manifest.json");
    let manifest = manifest(cli, settings, "adaptive", resolved, started);
    std::fs::write(&manifest_path, manifest.to_string())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adaptive(
    cli: &Cli,
    settings: &IntegratorSettings,
    omega: f64,
    family: FamilyArg,
    tau: Option<f64>,
    auto: bool,
    grid_points: usize,
    knots: usize,
    c: f64,
    started: Instant,
) -> Result<(), CliError> {
    let grid = LambdaGrid::new(grid_points)?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("adaptive requires --out <file.csv>".into()))?;

    let single = |fam: ShrinkageFamily,
                  name: &str|
     -> Result<(String, f64, AdaptiveReport), CliError> {
        if let (Some(t), false) = (tau, auto) {
            let report = rule_risk_curve(&fam.rule(t), omega, &grid, settings)?;
            Ok((name.to_string(), t, report))
        } else {
            let (t, report) = tune_threshold(fam, omega, &grid, settings)?;
            Ok((name.to_string(), t, report))
        }
    };

    let mut summaries = Vec::new();
    let mut emit_one = |name: &str,
                        report: &AdaptiveReport,
                        resolved: serde_json::Value,
                        dedicated: bool|
     -> Result<(), CliError> {
        let path = if dedicated {
            out.clone()
        } else {
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
            out.with_file_name(format!("{stem}_{name}.csv"))
        };
        write_curve(cli, settings, &path, report, resolved, started)?;
        summaries.push(serde_json::json!({
            "family": name,
            "file": path.display().to_string(),
            "regret": json_extended(report.regret),
            "argmax_lambda": report.argmax_lambda,
        }));
        Ok(())
    };

    match family {
        FamilyArg::St => {
            let (name, t, report) = single(ShrinkageFamily::SoftThreshold, "st")?;
            emit_one(&name, &report, serde_json::json!({"family": "st", "tau": t, "omega": omega}), true)?;
        }
        FamilyArg::Erm => {
            let (name, t, report) = single(ShrinkageFamily::Erm, "erm")?;
            emit_one(&name, &report, serde_json::json!({"family": "erm", "tau": t, "omega": omega}), true)?;
        }
        FamilyArg::Spline => {
            let (rule, report) = optimize_spline(omega, &grid, knots, settings)?;
            emit_one("spline", &report, serde_json::json!({"family": "spline", "rule": rule.to_json(), "omega": omega}), true)?;
        }
        FamilyArg::Linear => {
            let rule = RuleSpec::linear_scalar(c);
            let report = rule_risk_curve(&rule, omega, &grid, settings)?;
            emit_one("linear", &report, serde_json::json!({"family": "linear", "c": c, "omega": omega}), true)?;
        }
        FamilyArg::All => {
            let (_, t_st, report_st) = single(ShrinkageFamily::SoftThreshold, "st")?;
            emit_one("st", &report_st, serde_json::json!({"family": "st", "tau": t_st, "omega": omega}), false)?;
            let (_, t_erm, report_erm) = single(ShrinkageFamily::Erm, "erm")?;
            emit_one("erm", &report_erm, serde_json::json!({"family": "erm", "tau": t_erm, "omega": omega}), false)?;
            let (rule, report_sp) = optimize_spline(omega, &grid, knots, settings)?;
            emit_one("spline", &report_sp, serde_json::json!({"family": "spline", "rule": rule.to_json(), "omega": omega}), false)?;
        }
    }
    println!("{}", serde_json::json!({ "curves": summaries }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ate(
    cli: &Cli,
    settings: &IntegratorSettings,
    cfg: AteConfig,
    lambda: f64,
    m: usize,
    reps: usize,
    rule_arg: Option<&str>,
    started: Instant,
) -> Result<(), CliError> {
    let rule = match rule_arg {
        Some(arg) => read_rule(arg)?,
        None => RuleSpec::Zero,
    };
    let report = mc_attainability(&cfg, &rule, m, lambda, reps, cli.seed, settings)?;
    let payload = serde_json::json!({
        "results": report,
        "manifest": manifest(
            cli,
            settings,
            "ate",
            serde_json::json!({
                "ate": cfg,
                "rule": rule.to_json(),
                "lambda": lambda,
                "m": m,
                "reps": reps,
            }),
            started,
        ),
    });
    emit(cli, &payload.to_string())
}
