use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use capmfg_core::export::{self, SolveReport};
use capmfg_core::field::Checkpoint;
use capmfg_core::mfg::{self, MfgNets};
use capmfg_core::oracles::{self, FdConfig};
use capmfg_core::stackelberg::{self, PlannerNets};
use capmfg_core::verify;
use capmfg_core::{DriftConvention, Error, LrSchedule, MarketParams, ScenarioFile};

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_VERIFY: u8 = 3;

const MANIFEST: &str = "manifest.json";
const CONFIG_ECHO: &str = "config.json";

#[derive(Parser)]
#[command(name = "capmfg", version, about = "Capacity-expansion mean field game and planner solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the market equilibrium solver and export its run directory.
    SolveMfg(SolveArgs),
    /// Train the planner's subsidy solver and export its run directory.
    SolveStackelberg(SolveArgs),
    /// Reference solutions.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Re-check a run directory; exits with 3 if any invariant fails.
    Verify {
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario file (JSON).
    config: PathBuf,
    /// Overrides `seeds.train`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `runs/<label>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Constant learning rate, replacing the file's schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Use `1 / c_a` instead of `1 / (2 c_a)` in the capacity drift.
    #[arg(long)]
    compat_paper_drift: bool,
    /// Planner only: do not divide `Z_V` by `sigma0` in the subsidy rule.
    #[arg(long)]
    compat_undivided_z: bool,
    /// Skip training and evaluate the networks stored in this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CostParams {
    #[arg(long, default_value_t = 0.005)]
    delta: f64,
    /// Price cap.
    #[arg(long = "M", default_value_t = 300.0)]
    cap: f64,
    #[arg(long = "c-p", default_value_t = 5.65)]
    c_p: f64,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Costate when the price sits at its cap.
    CappedY {
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[command(flatten)]
        cost: CostParams,
    },
    /// Time at which the capped-regime installation rate turns negative.
    Crossing {
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long = "c-i", default_value_t = 37.35)]
        c_i: f64,
        #[command(flatten)]
        cost: CostParams,
    },
    /// Deterministic mean paths by shooting; needs `sigma0 = 0`.
    Shoot {
        config: PathBuf,
        /// Also write `shoot.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference decoupling field with no subsidy.
    PhiFd {
        config: PathBuf,
        #[arg(long, default_value_t = 800)]
        cells: usize,
        /// Mesh CSV destination.
        #[arg(long, default_value = "phi.csv")]
        out: PathBuf,
    },
}

/// Error carrying its own exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) | Some(Error::NonFinite { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `MFG_THREADS` caps the worker pool. Results do not depend on it.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MFG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("MFG_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        bail!("MFG_THREADS must be a positive integer, got `{raw}`");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SolveMfg(args) => solve(&args, Solver::Mfg),
        Command::SolveStackelberg(args) => solve(&args, Solver::Planner),
        Command::Oracle(o) => oracle(o),
        Command::Verify { run_dir } => verify_dir(&run_dir),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Solver {
    Mfg,
    Planner,
}

/// Loads the scenario and applies the command-line overrides.
fn resolve(args: &SolveArgs) -> Result<ScenarioFile> {
    let mut file = ScenarioFile::load(&args.config)?;
    if let Some(seed) = args.seed {
        file.seeds.train = seed;
    }
    let t = &mut file.training;
    if let Some(k) = args.iterations {
        t.iterations = k;
    }
    if let Some(b) = args.batch {
        t.batch = b;
    }
    if let Some(lr) = args.lr {
        t.lr = LrSchedule::Constant { lr };
    }
    if args.compat_paper_drift {
        t.drift = DriftConvention::Inverse;
    }
    if args.compat_undivided_z {
        t.undivided_z = true;
    }
    Ok(file)
}

fn default_out(args: &SolveArgs, file: &ScenarioFile) -> PathBuf {
    let stem = file
        .label
        .clone()
        .or_else(|| args.config.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    Path::new("runs").join(stem)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn solve(args: &SolveArgs, solver: Solver) -> Result<()> {
    let start = Instant::now();
    let file = resolve(args)?;
    let cfg = file.training();
    let out = args.out.clone().unwrap_or_else(|| default_out(args, &file));
    let report: SolveReport = match solver {
        Solver::Mfg => {
            let scn = file.mfg()?;
            let nets = match &args.checkpoint {
                Some(p) => Some(
                    MfgNets::from_checkpoint(load_checkpoint(p)?)
                        .map_err(|e| Exit(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
                ),
                None => None,
            };
            mfg::solve_and_export(&scn, &cfg, &out, nets)?
        }
        Solver::Planner => {
            let scn = file.stackelberg()?;
            let nets = match &args.checkpoint {
                Some(p) => Some(
                    PlannerNets::from_checkpoint(load_checkpoint(p)?)
                        .map_err(|e| Exit(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
                ),
                None => None,
            };
            stackelberg::export_planner(&scn, &cfg, &out, nets)?
        }
    };
    write_json(&out.join(CONFIG_ECHO), &file)?;
    let manifest = Manifest::new(&file, &out, start.elapsed().as_secs_f64())?;
    write_json_atomic(&out.join(MANIFEST), &manifest)?;

    for (name, loss) in &report.final_losses {
        println!("final loss {name}: {loss:.6e}");
    }
    for (name, loss) in &report.eval_losses {
        println!("evaluation loss {name}: {loss:.6e}");
    }
    for (name, value) in &report.initial_values {
        println!("{name} = {value:.6}");
    }
    if !report.restarts.is_empty() {
        println!("restarted at iterations {:?}", report.restarts);
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Host {
    os: &'static str,
    arch: &'static str,
    hostname: Option<String>,
    threads: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: String,
    config: &'a ScenarioFile,
    seed: u64,
    files: Vec<FileEntry>,
    wall_clock_secs: f64,
    host: Host,
}

impl<'a> Manifest<'a> {
    fn new(file: &'a ScenarioFile, out: &Path, secs: f64) -> Result<Self> {
        let mut files = Vec::new();
        for name in [export::TRAJECTORIES, export::SAMPLES, export::CHECKPOINT, export::REPORT, CONFIG_ECHO] {
            let path = out.join(name);
            let bytes = std::fs::metadata(&path)
                .with_context(|| format!("reading {}", path.display()))?
                .len();
            files.push(FileEntry {
                name: name.to_string(),
                bytes,
            });
        }
        Ok(Manifest {
            version: version(),
            config: file,
            seed: file.seeds.train,
            files,
            wall_clock_secs: secs,
            host: Host {
                os: std::env::consts::OS,
                arch: std::env::consts::ARCH,
                hostname: std::env::var("HOSTNAME").ok(),
                threads: rayon::current_num_threads(),
            },
        })
    }
}

fn version() -> String {
    match option_env!("CAPMFG_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, value)?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn oracle(cmd: OracleCmd) -> Result<()> {
    match cmd {
        OracleCmd::CappedY { t, horizon, cost } => {
            if !(t <= horizon) {
                bail!("--t must not exceed --T");
            }
            println!("{:.4}", oracles::capped_y(t, horizon, cost.delta, cost.cap, cost.c_p));
        }
        OracleCmd::Crossing { horizon, c_i, cost } => {
            let t = oracles::alpha_crossing(horizon, cost.delta, cost.cap, cost.c_p, c_i)?;
            println!("{t:.4}");
        }
        OracleCmd::Shoot { config, out } => {
            let file = ScenarioFile::load(&config)?;
            let scn = file.mfg()?;
            let shot = oracles::shoot_deterministic(&scn.market, &scn.grid, scn.mu0)?;
            println!("y0 = {:.6}", shot.y0);
            let (xt, yt) = shot.at_grid(scn.grid.steps);
            println!("x(T) = {xt:.6}, y(T) = {yt:.3e}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("shoot.csv");
                let mut text = String::from("t,muX,muY\n");
                for k in 0..=scn.grid.steps {
                    let (x, y) = shot.at_grid(k);
                    text.push_str(&format!("{},{x},{y}\n", scn.grid.time(k)));
                }
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                println!("wrote {}", path.display());
            }
        }
        OracleCmd::PhiFd { config, cells, out } => {
            let file = ScenarioFile::load(&config)?;
            let scn = file.mfg()?;
            let m: MarketParams = scn.market;
            let fd = FdConfig::covering(&m, &scn.grid, scn.mu0, cells, 0.0);
            let table = oracles::solve_phi_fd(&m, &scn.grid, &fd, None)?;
            println!(
                "phi(0, {}) = {:.6} on [{:.2}, {:.2}] with {} cells, {} substeps",
                scn.mu0,
                table.eval(0.0, scn.mu0),
                fd.x_min,
                fd.x_max,
                fd.cells,
                fd.substeps
            );
            table.write_csv(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn verify_dir(dir: &Path) -> Result<()> {
    let v = verify::verify_run(dir)?;
    print!("{v}");
    if v.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        let names: Vec<_> = v.failures().map(|c| c.name).collect();
        Err(Exit(EXIT_VERIFY, format!("failed checks: {}", names.join(", "))).into())
    }
}
