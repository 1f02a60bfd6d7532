use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use resilient_backstep::anomaly::replay_modes;
use resilient_backstep::config::{BoundsReport, Resolved, ScenarioFile};
use resilient_backstep::scenario::{preset, presets};
use resilient_backstep::sim::{self, diagnostics, mse, Termination, Trajectory, RATIO_EPS};
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Environment variable that overrides the default output directory.
const OUT_ENV: &str = "RBSIM_OUT";

#[derive(Parser)]
#[command(name = "rbsim", version, about = "Resilient distributed back-stepping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trajectory.csv, metadata.json and summary files.
    Simulate(SimulateArgs),
    /// Evaluate the anomaly-duration and resting-time bounds.
    Bounds(BoundsArgs),
    /// Per-column MSE of one run, or a side-by-side table of two runs.
    Mse(MseArgs),
    /// List or dump the built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Args)]
struct Source {
    /// Built-in preset name (see `presets list`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scenario file in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Output directory (default: $RBSIM_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Integration step; also becomes the control period.
    #[arg(long)]
    dt: Option<f64>,
    /// Estimator replay mode for anomalous controllers.
    #[arg(long)]
    mode: Option<String>,
    /// Run several presets in parallel, one subdirectory each (all presets when none given).
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    batch: Option<Vec<String>>,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    source: Source,
    /// Anomaly durations for the resting-time bound, comma separated.
    #[arg(long = "t-d", value_delimiter = ',')]
    t_d: Option<Vec<f64>>,
    /// Where to write bounds.json (default: next to the config, or ./ for presets).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MseArgs {
    /// One or two trajectory CSV files.
    #[arg(required = true, num_args = 1..=2)]
    runs: Vec<PathBuf>,
    /// Columns to compare (default: every x_<i>_1).
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a scenario file.
    Dump {
        name: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

/// Errors carrying a distinct exit code.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Bounds(a) => bounds(a).map(|()| 0),
        Command::Mse(a) => mse_cmd(a).map(|()| 0),
        Command::Presets { action } => presets_cmd(action).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}

fn load(source: &Source) -> anyhow::Result<(String, ScenarioFile)> {
    match (&source.preset, &source.config) {
        (Some(name), None) => {
            let p = preset(name).map_err(config_error)?;
            Ok((p.name.to_string(), p.scenario()))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            let file = ScenarioFile::from_toml(&text)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let name = file.name.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map_or("scenario".into(), |s| s.to_string_lossy().into_owned())
            });
            Ok((name, file))
        }
        _ => Err(config_error("give exactly one of --preset or --config")),
    }
}

fn apply_overrides(
    file: &mut ScenarioFile,
    seed: Option<u64>,
    dt: Option<f64>,
    mode: Option<&str>,
) {
    if let Some(s) = seed {
        file.sim.seed = s;
    }
    if let Some(dt) = dt {
        file.sim.dt = dt;
        file.sim.control_period = Some(dt);
    }
    if let Some(m) = mode {
        file.estimator.mode = m.to_string();
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

struct RunOutput {
    name: String,
    status: Termination,
}

fn simulate(a: SimulateArgs) -> anyhow::Result<u8> {
    let out = out_dir(a.out);
    let jobs: Vec<(String, ScenarioFile)> = match &a.batch {
        None => vec![load(&a.source)?],
        Some(names) => {
            if a.source.config.is_some() || a.source.preset.is_some() {
                return Err(config_error("--batch takes preset names; drop --preset/--config"));
            }
            let names: Vec<String> = if names.is_empty() {
                presets().iter().map(|p| p.name.to_string()).collect()
            } else {
                names.clone()
            };
            names
                .iter()
                .map(|n| {
                    let p = preset(n).map_err(config_error)?;
                    Ok((p.name.to_string(), p.scenario()))
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    // Resolve everything before touching the filesystem.
    let mut resolved = Vec::with_capacity(jobs.len());
    for (name, mut file) in jobs {
        apply_overrides(&mut file, a.seed, a.dt, a.mode.as_deref());
        let r = file
            .resolve()
            .map_err(|e| config_error(format!("{name}: {e}")))?;
        resolved.push((name, r));
    }
    let batch = a.batch.is_some();
    let results: Vec<anyhow::Result<RunOutput>> = if batch {
        std::thread::scope(|s| {
            let handles: Vec<_> = resolved
                .iter()
                .map(|(name, r)| {
                    let dir = out.join(name);
                    s.spawn(move || run_one(name, r, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked"))
                .collect()
        })
    } else {
        let (name, r) = &resolved[0];
        vec![run_one(name, r, &out)]
    };
    let mut code = 0;
    for r in results {
        let r = r?;
        match r.status {
            Termination::Completed => println!("{}: completed", r.name),
            Termination::Diverged { t, subsystem } => {
                println!("{}: diverged at t = {t} (subsystem {})", r.name, subsystem + 1);
                code = EXIT_DIVERGED;
            }
        }
    }
    Ok(code)
}

fn run_one(name: &str, r: &Resolved, dir: &Path) -> anyhow::Result<RunOutput> {
    let traj = sim::run(&r.config).map_err(|e| anyhow::anyhow!("{name}: {e}"))?;
    let csv = traj.to_csv_string();
    let metadata = metadata(r, &traj);
    let (summary_json, summary_txt) = summary(name, &traj)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("trajectory.csv"), csv)?;
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&metadata)? + "\n",
    )?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_json)? + "\n",
    )?;
    fs::write(dir.join("summary.txt"), summary_txt)?;
    Ok(RunOutput {
        name: name.to_string(),
        status: traj.status,
    })
}

fn metadata(r: &Resolved, traj: &Trajectory) -> serde_json::Value {
    let c = &r.config;
    let modes: Vec<_> = replay_modes()
        .iter()
        .map(|m| json!({"name": m.name(), "description": m.description()}))
        .collect();
    json!({
        "tool": concat!("rbsim ", env!("CARGO_PKG_VERSION")),
        "scenario": r.file,
        "resolved": {
            "integrator": "classical RK4 on plant states",
            "control": "sample-and-hold at the control period",
            "control_period": c.control_period,
            "dt": c.dt,
            "t_end": c.t_end,
            "steps": c.steps(),
            "estimator_integration": "explicit Euler on held rates, then projection",
            "projection": "radial rescale of theta onto the theta_bar ball, clamp of lambda to [-lambda_bar, lambda_bar]",
            "estimator_replay_mode": c.mode.name(),
            "available_replay_modes": modes,
            "divergence_threshold": c.divergence_threshold,
            "history_lookup": "exact record when t - tau is on the grid (relative tolerance 1e-9), linear interpolation otherwise",
            "history_capacity": c.history_capacity(),
            "e_h": "sum over all subsystems of |z(t) - z(t - tau)|, zero outside anomaly windows",
            "ratio_guard": RATIO_EPS,
            "mse": "arithmetic mean of squared samples at the control grid over [0, T_end]; partial mean for diverged runs",
            "rbf": c.model.subsystems().iter().map(|s| json!({
                "count": s.approximator().count(),
                "width": s.approximator().width,
            })).collect::<Vec<_>>(),
            "bounding": c.model.subsystems().iter().map(|s| s.bounding().source().to_string()).collect::<Vec<_>>(),
            "seed": c.seed,
        },
        "status": traj.status,
        "delayed_history_lookups": traj.delayed_lookups,
    })
}

fn state_columns(traj: &Trajectory) -> Vec<String> {
    traj.csv_columns()
        .iter()
        .filter(|c| c.starts_with("x_"))
        .cloned()
        .collect()
}

fn summary(name: &str, traj: &Trajectory) -> anyhow::Result<(serde_json::Value, String)> {
    let cols = state_columns(traj);
    let mut rows = Vec::new();
    let mut txt = String::new();
    writeln!(txt, "scenario: {name}")?;
    match traj.status {
        Termination::Completed => writeln!(txt, "status: completed")?,
        Termination::Diverged { t, subsystem } => writeln!(
            txt,
            "status: diverged at t = {t} (subsystem {})",
            subsystem + 1
        )?,
    }
    writeln!(txt, "\n{:<10} {:>14}", "state", "MSE")?;
    for c in &cols {
        let m = mse(traj, c)?;
        writeln!(txt, "{c:<10} {:>14.6e}", m.value)?;
        rows.push(json!({"column": c, "mse": m.value, "samples": m.samples, "diverged": m.diverged}));
    }
    let events = diagnostics(traj);
    if !events.is_empty() {
        writeln!(
            txt,
            "\n{:>5} {:>8} {:>8} {:>12} {:>12} {:>12}",
            "event", "start", "end", "max e_h", "max ratio", "recovery"
        )?;
        for e in &events {
            let rec = e
                .recovery_time
                .map_or("-".to_string(), |r| format!("{r:.3}"));
            writeln!(
                txt,
                "{:>5} {:>8.3} {:>8.3} {:>12.4e} {:>12.4e} {:>12}",
                e.event, e.start, e.end, e.max_e_h, e.max_ratio, rec
            )?;
        }
    }
    let json = json!({
        "scenario": name,
        "status": traj.status,
        "mse": rows,
        "events": events,
    });
    Ok((json, txt))
}

fn bounds(a: BoundsArgs) -> anyhow::Result<()> {
    let (name, file) = load(&a.source)?;
    let r = file.resolve().map_err(config_error)?;
    let report = r
        .bounds_report(a.t_d.as_deref())
        .map_err(config_error)?;
    print!("{}", render_bounds(&report));
    let target = match (&a.out, &a.source.config) {
        (Some(dir), _) => dir.join(format!("{name}.bounds.json")),
        (None, Some(cfg)) => cfg.with_extension("bounds.json"),
        (None, None) => PathBuf::from(format!("{name}.bounds.json")),
    };
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&target, serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!("wrote {}", target.display());
    Ok(())
}

fn render_bounds(r: &BoundsReport) -> String {
    let d = &r.duration;
    let mut s = String::new();
    let _ = writeln!(s, "w1       = {:.12e}", d.w1);
    let _ = writeln!(s, "w2       = {:.12e}", d.w2);
    let _ = writeln!(s, "w3       = {:.12e}", d.w3);
    let _ = writeln!(s, "t_d_max  = {:.12e}", d.t_d_max);
    if r.constants.gamma_substituted {
        let _ = writeln!(s, "note: gains differ across subsystems; the smallest gamma = {} is used", r.constants.gamma);
    }
    if !r.lipschitz.estimated.is_empty() {
        let _ = writeln!(s, "sampled Lipschitz constants: {}", r.lipschitz.estimated.join(", "));
    }
    if let Some(first) = r.resting.first() {
        let b = &first.bound;
        let _ = writeln!(s, "rho1     = {:.12e}", b.rho1);
        let _ = writeln!(s, "rho2     = {:.12e}", b.rho2);
        let _ = writeln!(s, "kappa    = {:.12e}", b.kappa);
        for (i, si) in b.s.iter().enumerate() {
            let _ = writeln!(s, "s_{}      = {:.12e}", i + 1, si);
        }
        let _ = writeln!(s, "\n{:>12} {:>20}", "t_d", "t_r_min");
        for row in &r.resting {
            let _ = writeln!(s, "{:>12} {:>20.12e}", row.t_d, row.bound.t_r_min);
        }
    }
    s
}

struct CsvRun {
    headers: Vec<String>,
    columns: Vec<Vec<f64>>,
    status: String,
}

fn read_run(path: &Path) -> anyhow::Result<CsvRun> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.first().map(String::as_str) != Some("t") || headers.last().map(String::as_str) != Some("status") {
        bail!("{}: not a trajectory CSV (expected t ... status)", path.display());
    }
    let numeric = headers.len() - 1;
    let mut columns = vec![Vec::new(); numeric];
    let mut status = String::new();
    for rec in rdr.records() {
        let rec = rec?;
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(rec[c].parse::<f64>().with_context(|| {
                format!("{}: bad number in column {}", path.display(), headers[c])
            })?);
        }
        status = rec[numeric].to_string();
    }
    Ok(CsvRun {
        headers,
        columns,
        status,
    })
}

fn column_mse(run: &CsvRun, name: &str, path: &Path) -> anyhow::Result<f64> {
    let idx = run.headers[..run.headers.len() - 1]
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| {
            anyhow::anyhow!(
                "{}: no column '{name}'; available: {}",
                path.display(),
                run.headers[..run.headers.len() - 1].join(", ")
            )
        })?;
    let v = &run.columns[idx];
    Ok(if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
    })
}

fn mse_cmd(a: MseArgs) -> anyhow::Result<()> {
    let runs: Vec<CsvRun> = a.runs.iter().map(|p| read_run(p)).collect::<anyhow::Result<_>>()?;
    if runs.len() == 2 && runs[0].headers != runs[1].headers {
        bail!(
            "schema mismatch: {} and {} have different columns",
            a.runs[0].display(),
            a.runs[1].display()
        );
    }
    let columns = a.columns.unwrap_or_else(|| {
        runs[0]
            .headers
            .iter()
            .filter(|h| h.starts_with("x_") && h.ends_with("_1"))
            .cloned()
            .collect()
    });
    let mut out = format!("{:<10}", "state");
    for p in &a.runs {
        let label = p.display().to_string();
        let _ = write!(out, " {label:>24}");
    }
    out.push('\n');
    for c in &columns {
        let _ = write!(out, "{c:<10}");
        for (run, path) in runs.iter().zip(&a.runs) {
            let _ = write!(out, " {:>24.6e}", column_mse(run, c, path)?);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "status");
    for run in &runs {
        let _ = write!(out, " {:>24}", run.status);
    }
    out.push('\n');
    print!("{out}");
    Ok(())
}

fn presets_cmd(action: PresetAction) -> anyhow::Result<()> {
    match action {
        PresetAction::List => {
            for p in presets() {
                println!("{:<20} {:<9} {}", p.name, format!("{:?}", p.outcome).to_lowercase(), p.summary);
            }
        }
        PresetAction::Dump { name, to } => {
            let p = preset(&name).map_err(config_error)?;
            let text = p.scenario().resolve().map_err(config_error)?.file.to_toml();
            match to {
                Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
