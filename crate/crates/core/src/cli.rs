//! Command-line front end: `fpsi`, `toy`, `study` and `check`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::check::run_checks;
use crate::config::{load_config, RunConfig, ToyEnergyKind};
use crate::error::{Error, Result};
use crate::grid::{stream_to_velocity, write_snapshot};
use crate::minimizer::certificate_tolerance;
use crate::scheme::{solve_horizon, HaltReason, Problem, Trajectory};
use crate::study::{fpsi_study, is_monotone, toy_naive_study, toy_two_scale_study, ToyStudyRow};
use crate::toy::{
    hyperbolic_estimate_check, naive_scheme, reference_integrate, sup_energy, two_scale_scheme, ToyEnergy,
    ToyTrajectory,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_COLLISION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "fpsi",
    version,
    about = "Two-scale minimizing movements for a poroelastic solid in an incompressible fluid"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the coupled problem over the horizon.
    Fpsi(RunArgs),
    /// Run the particle model with the naive and two-scale schemes.
    Toy(ToyArgs),
    /// Refinement tables for the particle model and a small coupled problem.
    Study(RunArgs),
    /// Gradient, adjoint and identity suites on random fields.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; defaults are used for missing keys or a missing file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub energy: Option<EnergyArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EnergyArg {
    Zero,
    Quadratic,
    DoubleWell,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Config whose `seed` is used when `--seed` is absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random states per suite.
    #[arg(long, default_value_t = 100)]
    pub states: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::CollisionDetected { .. } => EXIT_COLLISION,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_SOLVER,
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Fpsi(a) => cmd_fpsi(a),
        Command::Toy(a) => cmd_toy(a),
        Command::Study(a) => cmd_study(a),
        Command::Check(a) => cmd_check(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Loads the config and applies `--out` and `--snapshot-every`; the step
/// overrides are left to the subcommand.
fn load(args: &RunArgs) -> Result<(RunConfig, Option<String>)> {
    let (mut cfg, text) = match &args.config {
        Some(p) => (load_config(p)?, Some(fs::read_to_string(p)?)),
        None => (RunConfig::default(), None),
    };
    if let Some(n) = args.snapshot_every {
        cfg.output.snapshot_every = n;
    }
    if let Some(d) = &args.out {
        cfg.output.dir = d.clone();
    }
    Ok((cfg, text))
}

/// Git-style content hash: `sha256("blob <len>\0" ‖ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Writes `manifest.toml`: the effective config, the command, and content
/// hashes of the config file, input files and outputs.
fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    config_text: Option<&str>,
    outputs: &[&str],
) -> Result<()> {
    let mut inputs = toml::Table::new();
    if let Some(t) = config_text {
        inputs.insert("config".into(), content_hash(t.as_bytes()).into());
    }
    for p in cfg.input_files() {
        inputs.insert(p.display().to_string(), content_hash(&fs::read(&p)?).into());
    }
    let mut outs = toml::Table::new();
    for name in outputs {
        outs.insert((*name).into(), content_hash(&fs::read(dir.join(name))?).into());
    }
    let mut run = toml::Table::new();
    run.insert("command".into(), command.into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    let mut m = toml::Table::new();
    m.insert("run".into(), run.into());
    m.insert("inputs".into(), inputs.into());
    m.insert("outputs".into(), outs.into());
    m.insert(
        "config".into(),
        toml::Value::try_from(cfg).map_err(|e| Error::Io(format!("manifest: {e}")))?,
    );
    let text = toml::to_string_pretty(&m).map_err(|e| Error::Io(format!("manifest: {e}")))?;
    write_file(&dir.join("manifest.toml"), text.as_bytes())
}

pub const WINDOW_COLUMNS: [&str; 18] = [
    "window",
    "t_start",
    "t_end",
    "stored_start",
    "stored_end",
    "dissipation",
    "kinetic_in",
    "kinetic_out",
    "work",
    "lhs",
    "rhs",
    "excess",
    "allowed_slack",
    "holds",
    "volume_defect",
    "relative_volume_defect",
    "volume_bound",
    "max_phi_det_deviation",
];

pub fn windows_csv(traj: &Trajectory) -> String {
    let mut s = WINDOW_COLUMNS.join(",");
    s.push('\n');
    for w in &traj.windows {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e}",
            w.index,
            w.t_start,
            w.t_end,
            w.stored_start,
            w.stored_end,
            w.dissipation,
            w.kinetic_in,
            w.kinetic_out,
            w.work,
            w.lhs(),
            w.rhs(),
            w.excess,
            w.allowed_slack,
            w.holds(),
            w.volume_defect,
            w.relative_volume_defect,
            w.volume_bound,
            w.max_phi_det_deviation
        );
    }
    s
}

fn write_snapshots(dir: &Path, problem: &Problem, traj: &Trajectory, every: usize) -> Result<()> {
    if every == 0 {
        return Ok(());
    }
    let dir = dir.join("snapshots");
    fs::create_dir_all(&dir)?;
    for (k, eta) in traj.deformations.iter().enumerate().step_by(every) {
        let x: Vec<f64> = eta.values.iter().map(|p| p[0]).collect();
        let y: Vec<f64> = eta.values.iter().map(|p| p[1]).collect();
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &problem.ctx.solid.lattice, &[&x, &y])?;
        fs::write(dir.join(format!("solid_{k:06}.txt")), buf)?;
        // the velocity that produced step k
        if k > 0 {
            let v = stream_to_velocity(&problem.ctx.fluid, &traj.streams[k - 1])?;
            let vx: Vec<f64> = v.iter().map(|p| p[0]).collect();
            let vy: Vec<f64> = v.iter().map(|p| p[1]).collect();
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &problem.ctx.fluid.lattice, &[&vx, &vy])?;
            fs::write(dir.join(format!("fluid_{k:06}.txt")), buf)?;
        }
    }
    Ok(())
}

fn cmd_fpsi(args: &RunArgs) -> Result<i32> {
    let (cfg, text) = load(args)?;
    let cfg = cfg.with_overrides(args.tau, args.h, args.horizon)?;
    println!("# effective config\n{}", cfg.echo());
    let (problem, init) = cfg.build_problem()?;
    let dir = cfg.output.dir.clone();
    let traj = match solve_horizon(&problem, &init, cfg.scheme.horizon) {
        Err(Error::CollisionDetected { time, reason }) => {
            println!("collision at T* = {time}: {reason}");
            return Ok(EXIT_COLLISION);
        }
        other => other?,
    };
    write_file(&dir.join("ledger.csv"), traj.ledger_csv().as_bytes())?;
    write_file(&dir.join("windows.csv"), windows_csv(&traj).as_bytes())?;
    write_snapshots(&dir, &problem, &traj, cfg.output.snapshot_every)?;
    write_manifest(&dir, "fpsi", &cfg, text.as_deref(), &["ledger.csv", "windows.csv"])?;

    let failed_windows = traj.windows.iter().filter(|w| !w.holds()).count();
    let bad_cert = traj
        .ledger
        .iter()
        .filter(|r| r.certificate_gap > certificate_tolerance(r.value_at_rest))
        .count();
    println!(
        "steps {}  windows {}  window inequality failures {}  certificate failures {}  min det {:.6}",
        traj.ledger.len(),
        traj.windows.len(),
        failed_windows,
        bad_cert,
        traj.min_det()
    );
    if let HaltReason::CollisionDetected { time, reason } = &traj.halt {
        println!("collision at T* = {time}: {reason}");
        return Ok(EXIT_COLLISION);
    }
    Ok(if bad_cert > 0 { EXIT_SOLVER } else { EXIT_OK })
}

fn toy_csv(traj: &ToyTrajectory, e: ToyEnergy) -> String {
    let d = traj.positions[0].len();
    let mut s = String::from("t");
    for i in 0..d {
        let _ = write!(s, ",x{i}");
    }
    for i in 0..d {
        let _ = write!(s, ",v{i}");
    }
    s.push_str(",potential,discrete_energy\n");
    for k in 0..traj.times.len() {
        let _ = write!(s, "{:e}", traj.times[k]);
        for v in traj.positions[k].iter().chain(&traj.velocities[k]) {
            let _ = write!(s, ",{v:e}");
        }
        let _ = writeln!(s, ",{:e},{:e}", e.value(&traj.positions[k]), traj.energies[k]);
    }
    s
}

fn cmd_toy(args: &ToyArgs) -> Result<i32> {
    // the step overrides apply to the particle model here
    let (mut cfg, text) = load(&args.run)?;
    if let Some(t) = args.run.tau {
        cfg.toy.tau = t;
    }
    if let Some(h) = args.run.h {
        cfg.toy.h = h;
    }
    if let Some(t) = args.run.horizon {
        cfg.toy.horizon = t;
    }
    if let Some(e) = args.energy {
        cfg.toy.energy = match e {
            EnergyArg::Zero => ToyEnergyKind::Zero,
            EnergyArg::Quadratic => ToyEnergyKind::Quadratic,
            EnergyArg::DoubleWell => ToyEnergyKind::DoubleWell,
        };
    }
    cfg.validate()?;
    println!("# effective config\n{}", cfg.echo());
    let t = &cfg.toy;
    let e: ToyEnergy = t.energy.into();
    let dir = cfg.output.dir.clone();
    let mut outputs = vec!["toy_two_scale.csv", "toy_reference.csv", "toy_windows.csv"];

    let two = two_scale_scheme(e, &t.x0, &t.xstar, t.tau, t.h, t.horizon)?;
    write_file(&dir.join("toy_two_scale.csv"), toy_csv(&two, e).as_bytes())?;
    let reference = reference_integrate(e, &t.x0, &t.xstar, t.horizon, t.reference_tol)?;
    write_file(&dir.join("toy_reference.csv"), toy_csv(&reference, e).as_bytes())?;
    let checks = hyperbolic_estimate_check(&two, e, t.tau, t.h)?;
    let mut s = String::from("a,b,excess,slack,holds\n");
    for c in &checks {
        let _ = writeln!(s, "{},{},{:e},{:e},{}", c.a, c.b, c.excess, c.slack, c.holds());
    }
    write_file(&dir.join("toy_windows.csv"), s.as_bytes())?;
    let failed = checks.iter().filter(|c| !c.holds()).count();
    println!(
        "two-scale: {} steps, window pairs {} failed {}, sup E {:.6}",
        two.times.len() - 1,
        checks.len(),
        failed,
        sup_energy(&two, e)
    );
    if t.naive {
        let naive = naive_scheme(e, &t.x0, &t.xstar, t.tau, t.horizon)?;
        write_file(&dir.join("toy_naive.csv"), toy_csv(&naive, e).as_bytes())?;
        outputs.push("toy_naive.csv");
        let incr = crate::toy::largest_energy_increase(&naive);
        println!(
            "naive: {} steps, largest energy increase {:?}",
            naive.times.len() - 1,
            incr
        );
    }
    write_manifest(&dir, "toy", &cfg, text.as_deref(), &outputs)?;
    Ok(if failed > 0 { EXIT_SOLVER } else { EXIT_OK })
}

pub const STUDY_COLUMNS: [&str; 8] = ["kind", "energy", "tau", "h", "sup_error", "cauchy", "order", "monotone"];

fn push_toy_rows(s: &mut String, kind: &str, energy: &str, rows: &[ToyStudyRow]) {
    let mono = is_monotone(rows);
    for r in rows {
        let _ = writeln!(
            s,
            "{kind},{energy},{:e},{:e},{:e},{:e},{:e},{mono}",
            r.tau, r.h, r.sup_error, r.cauchy, r.order
        );
    }
}

fn cmd_study(args: &RunArgs) -> Result<i32> {
    let (cfg, text) = load(args)?;
    let cfg = cfg.with_overrides(args.tau, args.h, args.horizon)?;
    println!("# effective config\n{}", cfg.echo());
    let st = &cfg.study;
    let t = &cfg.toy;
    let mut s = STUDY_COLUMNS.join(",");
    s.push('\n');
    let mut monotone = true;
    for (name, e) in [
        ("quadratic", ToyEnergy::Quadratic),
        ("double-well", ToyEnergy::DoubleWell),
    ] {
        let rows = toy_two_scale_study(e, &t.x0, &t.xstar, &st.toy_hs, st.toy_horizon, t.reference_tol)?;
        monotone &= is_monotone(&rows);
        push_toy_rows(&mut s, "toy-two-scale", name, &rows);
        let rows = toy_naive_study(e, &t.x0, &t.xstar, &st.toy_hs, st.toy_horizon, t.reference_tol)?;
        push_toy_rows(&mut s, "toy-naive", name, &rows);
    }
    if !st.fpsi_levels.is_empty() {
        for r in fpsi_study(&cfg)? {
            let _ = writeln!(s, "fpsi,,{:e},{:e},,{:e},{:e},", r.tau, r.h, r.distance, r.order);
        }
    }
    print!("{s}");
    let dir = cfg.output.dir.clone();
    write_file(&dir.join("study.csv"), s.as_bytes())?;
    write_manifest(&dir, "study", &cfg, text.as_deref(), &["study.csv"])?;
    if !monotone {
        println!("two-scale refinement errors are not monotone");
    }
    Ok(EXIT_OK)
}

fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let seed = match (args.seed, &args.config) {
        (Some(s), _) => s,
        (None, Some(p)) => load_config(p)?.seed,
        (None, None) => 0,
    };
    let results = run_checks(seed, args.states)?;
    let mut s = String::from("suite,states,worst,tolerance,passed\n");
    let mut all = true;
    for r in &results {
        all &= r.passed();
        println!(
            "{} {:<40} worst {:.3e} (tol {:.0e}, {} states)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.tolerance,
            r.states
        );
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{}",
            r.name,
            r.states,
            r.worst,
            r.tolerance,
            r.passed()
        );
    }
    if let Some(dir) = &args.out {
        write_file(&dir.join("check.csv"), s.as_bytes())?;
    }
    let _ = std::io::stdout().flush();
    Ok(if all { EXIT_OK } else { EXIT_SOLVER })
}
