use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use harvest_core::game::{nash_solve, GameConfig};
use harvest_core::kernel::KernelEvaluator;
use harvest_core::measures::TimeMeasure;
use harvest_core::model::{derive_constants, validate_scenario};
use harvest_core::optimizer::{optimize, CertificateStatus, OptimizerConfig};
use harvest_core::payoff::{
    concavity_certificate, direction_dictionary, euler_residual, evaluate_j, j_scan, DictionarySpec,
};
use harvest_core::scenario::{parse_measure, Scenario};
use harvest_core::solver::{solve_forward, SolveOptions};
use harvest_core::{Error, Grid};

const EULER_TOL: f64 = 1e-6;
const MAX_PRINCIPLE_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "harvest", version, about = "Optimal harvesting of a diffusing population")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve with a fixed control.
    Solve(Common),
    /// Maximize the payoff over budget-feasible controls.
    Optimize(Common),
    /// Euler residual, payoff scan and concavity certificate of a control.
    Certify(Common),
    /// Nash equilibrium by best-response iteration.
    Nash(Common),
    /// Check heat-kernel estimates and the duality identity.
    VerifyKernel(KernelArgs),
}

#[derive(Args, Serialize)]
struct Common {
    /// Scenario file, or the name of a shipped scenario.
    #[arg(long)]
    scenario: String,
    /// Grid as `n_x,n_t`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Frank-Wolfe gap tolerance (optimize, certify) or displacement
    /// tolerance (nash).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    delta_cap: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Measure file with the control (solve, certify).
    #[arg(long)]
    measure: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct KernelArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Domain length.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Grid size for the duality check.
    #[arg(long, default_value_t = 401)]
    n_x: usize,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected n_x,n_t")?;
    let nx = a.trim().parse().map_err(|e| format!("n_x: {e}"))?;
    let nt = b.trim().parse().map_err(|e| format!("n_t: {e}"))?;
    Ok((nx, nt))
}

/// Error wrapper that remembers whether the input was at fault.
struct Failure {
    input: bool,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let input = error.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(
                    Error::Invalid(_)
                        | Error::Parse { .. }
                        | Error::DomainMismatch(_)
                        | Error::Precondition(_)
                        | Error::Infeasible(_)
                )
            )
        });
        Failure { input, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn input_error(error: anyhow::Error) -> Failure {
    Failure { input: true, error }
}

/// Result of a command: the report and whether all checks passed.
struct Outcome {
    report: Value,
    ok: bool,
    summary: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn create<P: AsRef<Path>>(path: P) -> anyhow::Result<BufWriter<File>> {
    let path = path.as_ref();
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_scenario(spec: &str) -> anyhow::Result<Scenario> {
    let path = Path::new(spec);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("reading scenario {spec}"));
    }
    if let Some(s) = Scenario::builtin(spec) {
        return Ok(s);
    }
    let names: Vec<_> = Scenario::builtin_names().collect();
    bail!("no scenario file {spec:?} and no shipped scenario of that name (shipped: {})", names.join(", "))
}

fn load_measure(path: &Path) -> anyhow::Result<TimeMeasure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_measure(&text).with_context(|| format!("measure file {}", path.display()))
}

fn grid_for(args: &Common, scenario: &Scenario) -> anyhow::Result<Grid> {
    let (nx, nt) = args.grid.or(scenario.grid).unwrap_or((101, 200));
    Ok(Grid::new(scenario.params.r, scenario.params.t, nx, nt)?)
}

fn optimizer_config(args: &Common, scenario: &Scenario) -> OptimizerConfig {
    let mut cfg =
        OptimizerConfig { seed: args.seed, delta_cap: args.delta_cap.or(scenario.delta_cap), ..Default::default() };
    if let Some(t) = args.tol {
        cfg.fw_gap_tol = t;
    }
    if let Some(m) = args.max_iters {
        cfg.max_iters = m;
    }
    cfg
}

fn prepare(args: &Common) -> Result<(Scenario, Grid), Failure> {
    let scenario = load_scenario(&args.scenario).map_err(input_error)?;
    let grid = grid_for(args, &scenario).map_err(input_error)?;
    let report = validate_scenario(&scenario.params, &grid);
    if !report.is_admissible() {
        let lines: Vec<String> = report.violations.iter().map(|v| format!("({}) {}", v.hypothesis, v.detail)).collect();
        return Err(input_error(anyhow::anyhow!("scenario is not admissible:\n  {}", lines.join("\n  "))));
    }
    Ok((scenario, grid))
}

fn cmd_solve(args: &Common) -> Result<Outcome, Failure> {
    let (scenario, grid) = prepare(args)?;
    let mu = match &args.measure {
        Some(p) => load_measure(p).map_err(input_error)?,
        None => scenario.control.clone().unwrap_or_else(|| TimeMeasure::zero(grid.r, grid.t)),
    };
    let params = &scenario.params;
    let options = SolveOptions::default();
    let phi = solve_forward(params, &mu, &grid, &options)?;
    phi.write_csv(create(args.out.join("phi.csv"))?).context("writing phi.csv")?;
    let payoff = evaluate_j(params, &mu, &grid, &options)?;
    let m = derive_constants(params)?.m;
    let w = grid.weights();
    let mass: Vec<f64> = (0..=grid.n_t).map(|n| phi.trace(n).iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
    let h = harvest_core::Field::from_fn(grid, |t, x| params.h.eval(t, x, params.r, params.t));
    let h_dev = phi.difference(&h)?.sup_abs();
    let margin = phi.min().min(m - phi.max());
    let ok = margin >= -MAX_PRINCIPLE_TOL;
    let report = json!({
        "min": phi.min(),
        "max": phi.max(),
        "M": m,
        "max_principle_margin": margin,
        "sup_deviation_from_h": h_dev,
        "mass": mass,
        "payoff": payoff,
    });
    let summary = vec![
        format!("phi in [{:.6e}, {:.6e}], M = {m}", phi.min(), phi.max()),
        format!("max-principle margin {margin:.3e}"),
        format!("sup |phi - h| = {h_dev:.3e}"),
        format!("J = {:.10}", payoff.j),
    ];
    Ok(Outcome { report, ok, summary })
}

fn cmd_optimize(args: &Common) -> Result<Outcome, Failure> {
    let (scenario, grid) = prepare(args)?;
    let cfg = optimizer_config(args, &scenario);
    let rep = optimize(&scenario.params, &grid, &cfg)?;
    write_json(&args.out.join("mu_opt.json"), &rep.mu_opt)?;
    rep.write_trace_csv(create(args.out.join("j_trace.csv"))?).context("writing j_trace.csv")?;
    let ok = rep.euler_residual <= EULER_TOL && !matches!(rep.certificate, CertificateStatus::NotCertified { .. });
    let summary = vec![
        format!("J = {:.10} after {} iterations (converged: {})", rep.payoff.j, rep.iterations, rep.converged),
        format!(
            "final gap {:.3e}, Euler residual {:.3e} over {} directions",
            rep.final_gap, rep.euler_residual, rep.dictionary_size
        ),
        format!("certificate: {}", certificate_label(&rep.certificate)),
    ];
    Ok(Outcome { report: serde_json::to_value(&rep).context("encoding report")?, ok, summary })
}

fn certificate_label(c: &CertificateStatus) -> String {
    match c {
        CertificateStatus::NotRequested => "not requested".into(),
        CertificateStatus::Certified { .. } => "certified".into(),
        CertificateStatus::NotCertified { report } => format!("FAILED (key values {:?})", report.key_values),
        CertificateStatus::Refused { reason } => format!("refused: {reason}"),
    }
}

fn cmd_certify(args: &Common) -> Result<Outcome, Failure> {
    let (scenario, grid) = prepare(args)?;
    let params = &scenario.params;
    let cfg = optimizer_config(args, &scenario);
    let mu_star = match &args.measure {
        Some(p) => load_measure(p).map_err(input_error)?,
        None => optimize(params, &grid, &cfg)?.mu_opt,
    };
    let dict = DictionarySpec { delta_cap: cfg.delta_cap, seed: args.seed, ..Default::default() };
    let targets = direction_dictionary(params, &mu_star, &grid, &dict)?;
    let residual = euler_residual(params, &mu_star, &targets, &grid, &cfg.solve)?;
    let zero = TimeMeasure::zero(grid.r, grid.t);
    let scan = j_scan(params, &mu_star, &zero, 21, &grid, &cfg.solve)?;
    scan.write_csv(create(args.out.join("j_scan.csv"))?).context("writing j_scan.csv")?;
    let certificate = match cfg.delta_cap {
        None => CertificateStatus::NotRequested,
        Some(_) if mu_star.total_variation_sup() == 0.0 => CertificateStatus::Refused { reason: "zero control".into() },
        Some(delta) => match concavity_certificate(params, &mu_star, &zero, delta, 5, &grid, &cfg.solve) {
            Ok(r) if r.certified() => CertificateStatus::Certified { report: r },
            Ok(r) => CertificateStatus::NotCertified { report: r },
            Err(Error::Precondition(reason)) => CertificateStatus::Refused { reason },
            Err(e) => return Err(e.into()),
        },
    };
    let ok = residual.value() <= EULER_TOL && !matches!(certificate, CertificateStatus::NotCertified { .. });
    let summary = vec![
        format!("Euler residual {:.3e} over {} directions", residual.value(), targets.len()),
        format!("certificate: {}", certificate_label(&certificate)),
    ];
    let report = json!({
        "euler_residual": residual.value(),
        "worst_direction": residual.worst,
        "residuals": residual.values,
        "j_scan": scan,
        "certificate": certificate,
    });
    Ok(Outcome { report, ok, summary })
}

fn cmd_nash(args: &Common) -> Result<Outcome, Failure> {
    let (scenario, grid) = prepare(args)?;
    let mut spec = scenario.game();
    if let Some(d) = args.delta_cap {
        spec.delta_cap = Some(d);
    }
    let mut cfg = GameConfig { seed: args.seed, ..Default::default() };
    if let Some(t) = args.tol {
        cfg.tol = t;
    }
    if let Some(m) = args.max_iters {
        cfg.optimizer.max_iters = m;
    }
    let rep = nash_solve(&spec, &grid, &cfg)?;
    for (i, mu) in rep.profile.iter().enumerate() {
        write_json(&args.out.join(format!("player{i}.json")), mu)?;
    }
    rep.write_displacements_csv(create(args.out.join("displacements.csv"))?).context("writing displacements.csv")?;
    let summary = vec![
        format!("{} players, {} rounds, converged: {}", rep.profile.len(), rep.rounds, rep.converged),
        format!("Euler residuals {:?}", rep.euler_residuals),
        format!("best deviation gains {:?}", rep.deviation_gains),
    ];
    let ok = rep.converged;
    Ok(Outcome { report: serde_json::to_value(&rep).context("encoding report")?, ok, summary })
}

fn cmd_verify_kernel(args: &KernelArgs) -> Result<Outcome, Failure> {
    let k = KernelEvaluator::new(args.r, 1e-14).map_err(|e| input_error(e.into()))?;
    let ts: Vec<f64> = (0..9).map(|j| 1e-3 * 10f64.powf(j as f64 / 4.0)).collect();
    let xs: Vec<f64> = (1..160).map(|i| args.r * i as f64 / 160.0).collect();
    let est = k.verify_estimates(&ts, &xs)?;
    let r = args.r;
    let samples: Vec<(f64, f64)> =
        [0.01, 0.1, 0.5].iter().flat_map(|&t| [0.1, 0.37, 0.5, 0.83].map(|x| (t, x * r))).collect();
    let u0 = |y: f64| (std::f64::consts::PI * y / r).cos();
    let du0 = |y: f64| -std::f64::consts::PI / r * (std::f64::consts::PI * y / r).sin();
    let duality = k.verify_duality(u0, du0, args.n_x, &samples)?;
    let ok = est.pass && duality <= 1e-6;
    let mut summary: Vec<String> = est
        .fits
        .iter()
        .map(|f| {
            format!(
                "{}: slope {:.3} (target {} +- {}) {}",
                f.quantity,
                f.slope,
                f.target,
                f.tolerance,
                if f.pass { "ok" } else { "FAIL" }
            )
        })
        .collect();
    summary.push(format!("kernel mass error {:.3e}", est.l1_max_error));
    summary.push(format!("duality residual {duality:.3e} at n_x = {}", args.n_x));
    Ok(Outcome {
        report: json!({ "estimates": est, "duality_residual": duality, "duality_n_x": args.n_x }),
        ok,
        summary,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, out, manifest) = match &cli.command {
        Command::Solve(a) => ("solve", &a.out, serde_json::to_value(a)),
        Command::Optimize(a) => ("optimize", &a.out, serde_json::to_value(a)),
        Command::Certify(a) => ("certify", &a.out, serde_json::to_value(a)),
        Command::Nash(a) => ("nash", &a.out, serde_json::to_value(a)),
        Command::VerifyKernel(a) => ("verify-kernel", &a.out, serde_json::to_value(a)),
    };
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create output directory {}: {e}", out.display());
        return ExitCode::from(2);
    }
    let manifest = json!({ "command": name, "arguments": manifest.unwrap_or(Value::Null) });
    if let Err(e) = write_json(&out.join("manifest.json"), &manifest) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }

    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Nash(a) => cmd_nash(a),
        Command::VerifyKernel(a) => cmd_verify_kernel(a),
    };
    let report_path = out.join("report.json");
    match result {
        Ok(outcome) => {
            let status = if outcome.ok { "ok" } else { "check-failed" };
            let doc = json!({ "command": name, "status": status, "report": outcome.report });
            if let Err(e) = write_json(&report_path, &doc) {
                eprintln!("error: {e:#}");
                return ExitCode::from(1);
            }
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("{name}: {status} (report in {})", report_path.display());
            ExitCode::from(if outcome.ok { 0 } else { 1 })
        }
        Err(Failure { input, error }) => {
            let status = if input { "input-error" } else { "numerical-failure" };
            let doc = json!({ "command": name, "status": status, "error": format!("{error:#}") });
            let _ = write_json(&report_path, &doc);
            eprintln!("error: {error:#}");
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}
