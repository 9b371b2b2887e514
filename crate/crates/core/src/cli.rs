//! Command-line front end: `run`, `oracle` and `check`.
//!
//! Exit codes: 0 ok, 1 invariant failure, 2 input error, 3 solver failure,
//! 4 simulation abort.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::analysis::{self, ConditionId};
use crate::equilibrium::{self, KktPoint, SolveOptions};
use crate::error::{Error, Result};
use crate::invariants::{self, CheckOptions};
use crate::netmodel::{self, NetworkModel};
use crate::plot::{LinePlot, Series};
use crate::sim::{self, MetricOptions, Scenario, Trajectory, WindowMetrics, F_BASE_HZ};

/// Decimal with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Parser)]
#[command(name = "mgsim", version, about = "Microgrid primal-dual control: simulation, steady-state oracle and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write trajectory, metrics and plots.
    Run(RunArgs),
    /// Solve the steady-state optimum at every demand level of a scenario.
    Oracle(OracleArgs),
    /// Run the numerical invariant suite and print a pass/fail table.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PsiArg {
    Exact,
    Hat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    /// Oracle optimum of each window's demand level.
    Window,
    /// Oracle optimum of the initial demand level for every window.
    Initial,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Network configuration (bundled 12-node grid if omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario file (bundled step scenario if omitted). `run` accepts it repeatedly.
    #[arg(long)]
    pub scenario: Vec<PathBuf>,
    /// Excitation-bound map used by controller and oracle.
    #[arg(long, value_enum)]
    pub psi: Option<PsiArg>,
    /// Integration step, seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Recording interval, seconds.
    #[arg(long)]
    pub record: Option<f64>,
    /// Truncate the scenario at this time, dropping later events.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Evaluate the passivity conditions and Lyapunov monotonicity.
    #[arg(long)]
    pub analysis: bool,
    /// Also solve the aggregate-balance problem at every level and report the cost gap.
    #[arg(long)]
    pub compare_op: bool,
    /// Scenarios simulated concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Reference equilibrium for shifted quantities.
    #[arg(long, value_enum, default_value_t = ReferenceArg::Window)]
    pub reference: ReferenceArg,
    /// Skip SVG and data-file output.
    #[arg(long)]
    pub no_plots: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub compare_op: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Horizon of the step-halving comparison (scenario horizon if omitted).
    #[arg(long)]
    pub halving_horizon: Option<f64>,
    /// Fewer random samples and a 10 s stationarity run.
    #[arg(long)]
    pub quick: bool,
}

/// Options applied on top of a scenario file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub psi: Option<PsiArg>,
    pub dt: Option<f64>,
    pub record: Option<f64>,
    pub horizon: Option<f64>,
}

impl Overrides {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::Precondition(format!("{what} must be positive and finite, got {v}"));
        for (what, v) in [("--dt", self.dt), ("--record", self.record), ("--horizon", self.horizon)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad(what, v));
                }
            }
        }
        if let Some(dt) = self.dt {
            if dt > 0.1 {
                return Err(Error::Precondition(format!("--dt {dt} exceeds the supported maximum of 0.1 s")));
            }
        }
        Ok(())
    }

    pub fn apply(&self, scenario: &mut Scenario) {
        if let Some(p) = self.psi {
            scenario.hat = p == PsiArg::Hat;
        }
        if let Some(dt) = self.dt {
            scenario.dt = dt;
        }
        if let Some(r) = self.record {
            scenario.record = r;
        }
        if let Some(h) = self.horizon {
            scenario.horizon = h;
            scenario.events.retain(|e| e.t < h);
        }
    }
}

/// Everything one `run` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
    pub analysis: bool,
    pub compare_op: bool,
    pub reference: ReferenceArg,
    pub plots: bool,
}

impl RunManifest {
    pub fn bundled(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            scenario: None,
            out: out.into(),
            overrides: Overrides::default(),
            analysis: false,
            compare_op: false,
            reference: ReferenceArg::Window,
            plots: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.config.iter().chain(&self.scenario) {
            if !p.is_file() {
                return Err(Error::Io {
                    path: p.display().to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                });
            }
        }
        self.overrides.validate()
    }

    pub fn load(&self) -> Result<(NetworkModel, Scenario)> {
        self.validate()?;
        let model = load_model(self.config.as_deref())?;
        let scenario = load_scenario(self.scenario.as_deref(), &model, &self.overrides)?;
        Ok((model, scenario))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{}, {location}", path.display()), message },
        Error::Invariant(m) => Error::Invariant(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn load_model(path: Option<&Path>) -> Result<NetworkModel> {
    match path {
        Some(p) => netmodel::load_network(&read(p)?).map_err(|e| with_path(p, e)),
        None => Ok(netmodel::ieee12()),
    }
}

pub fn load_scenario(path: Option<&Path>, model: &NetworkModel, overrides: &Overrides) -> Result<Scenario> {
    let mut sc = match path {
        Some(p) => sim::load_scenario(&read(p)?, model).map_err(|e| with_path(p, e))?,
        None => sim::load_scenario(sim::IEEE12_SCENARIO, model)?,
    };
    overrides.apply(&mut sc);
    sc.validate(model)?;
    Ok(sc)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes the trajectory table: time, frequency deviations in Hz, voltages,
/// dispatch, prices, total losses and the Lyapunov value.
pub fn write_trajectory_csv<W: Write>(mut out: W, model: &NetworkModel, traj: &Trajectory, v_lyap: &[f64]) -> std::io::Result<()> {
    let ids: Vec<u32> = model.nodes().iter().map(|n| n.id).collect();
    let nd = model.n_dispatch();
    let mut head = vec!["t".to_string()];
    head.extend(ids.iter().map(|i| format!("omega_{i}")));
    head.extend(ids.iter().map(|i| format!("U_{i}")));
    head.extend(ids[..nd].iter().map(|i| format!("pg_{i}")));
    head.extend(ids.iter().map(|i| format!("lambda_{i}")));
    head.push("Phi".into());
    head.push("V_lyap".into());
    writeln!(out, "{}", head.join(","))?;
    let mut line = String::new();
    for (s, v) in traj.samples.iter().zip(v_lyap) {
        line.clear();
        line.push_str(&fmt17(s.t));
        let cols = s
            .omega
            .iter()
            .map(|w| w * F_BASE_HZ)
            .chain(s.u.iter().copied())
            .chain(s.ctrl.p_g.iter().copied())
            .chain(s.ctrl.lambda.iter().copied())
            .chain([s.phi, *v]);
        for c in cols {
            line.push(',');
            line.push_str(&fmt17(c));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[WindowMetrics]) -> std::io::Result<()> {
    writeln!(
        out,
        "window,t_start,t_end,peak_omega_hz,peak_omega_dispatch_hz,voltage_excursion,voltage_excursion_dispatch,\
         settling_time,steady_omega,steady_u_min,steady_u_max,sharing_residual,steady_p_max,peak_p"
    )?;
    for (w, m) in metrics.iter().enumerate() {
        let settle = m.settling_time.map(fmt17).unwrap_or_default();
        writeln!(
            out,
            "{w},{},{},{},{},{},{},{settle},{},{},{},{},{},{}",
            fmt17(m.t_start),
            fmt17(m.t_end),
            fmt17(m.peak_omega_hz),
            fmt17(m.peak_omega_dispatch_hz),
            fmt17(m.voltage_excursion),
            fmt17(m.voltage_excursion_dispatch),
            fmt17(m.steady_omega),
            fmt17(m.steady_u_min),
            fmt17(m.steady_u_max),
            fmt17(m.sharing_residual),
            fmt17(m.steady_p_max),
            fmt17(m.peak_p),
        )?;
    }
    Ok(())
}

/// Long-format dump of every KKT point: `level,field,node,value`, followed by
/// the residual report with an empty node column.
pub fn write_kkt_csv<W: Write>(
    mut out: W,
    model: &NetworkModel,
    points: &[(KktPoint, equilibrium::KktReport)],
) -> std::io::Result<()> {
    writeln!(out, "level,field,node,value")?;
    let ids: Vec<u32> = model.nodes().iter().map(|n| n.id).collect();
    let (ng, nd) = (model.n_gen(), model.n_dispatch());
    let gens = &ids[..ng];
    let invs = &ids[ng..nd];
    let disp = &ids[..nd];
    let edges: Vec<String> = model.comm_edges().iter().map(|&(i, j)| format!("{}-{}", ids[i], ids[j])).collect();
    let lines: Vec<String> = model.lines().iter().map(|l| format!("{}-{}", ids[l.from], ids[l.to])).collect();
    let loads = &ids[nd..];
    for (lvl, (p, rep)) in points.iter().enumerate() {
        let mut put = |field: &str, keys: &[String], vals: &[f64]| -> std::io::Result<()> {
            for (k, v) in keys.iter().zip(vals) {
                writeln!(out, "{lvl},{field},{k},{}", fmt17(*v))?;
            }
            Ok(())
        };
        let s = |v: &[u32]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>();
        put("p_g", &s(disp), &p.p_g)?;
        put("lambda", &s(&ids), &p.lambda)?;
        put("nu", &edges, &p.nu)?;
        put("u_f", &s(gens), &p.u_f)?;
        put("u_g", &s(gens), &p.plant.u_g)?;
        put("u_i", &s(invs), &p.u_i)?;
        put("u_l", &s(loads), &p.plant.u_l)?;
        put("theta", &s(&ids), &p.theta)?;
        put("theta_diff", &lines, &p.plant.theta_diff)?;
        put("mu_g_minus", &s(gens), &p.mu_g_minus)?;
        put("mu_g_plus", &s(gens), &p.mu_g_plus)?;
        put("mu_i_minus", &s(invs), &p.mu_i_minus)?;
        put("mu_i_plus", &s(invs), &p.mu_i_plus)?;
        put("mu_p_plus", &s(disp), &p.mu_p_plus)?;
        writeln!(out, "{lvl},cost,,{}", fmt17(p.cost))?;
        for (name, v) in &rep.entries {
            writeln!(out, "{lvl},residual_{name},,{}", fmt17(*v))?;
        }
    }
    Ok(())
}

/// Oracle optimum at every demand level, each hinted with the previous
/// level's generator voltages.
pub fn oracle_points(model: &NetworkModel, scenario: &Scenario) -> Result<Vec<(KktPoint, equilibrium::KktReport)>> {
    let opts = SolveOptions::default();
    let mut hint = scenario.initial_u_g.clone();
    let mut out = Vec::new();
    for (lvl, d) in scenario.demand_levels().into_iter().enumerate() {
        let prob = scenario.problem(model, d, hint.clone());
        let point = equilibrium::solve_op_sharp(&prob, &opts).map_err(|e| match e {
            Error::Solver { message, residual } => Error::Solver { message: format!("demand level {lvl}: {message}"), residual },
            other => other,
        })?;
        let rep = equilibrium::kkt_residual(&prob, &point)?;
        hint = Some(point.plant.u_g.clone());
        out.push((point, rep));
    }
    Ok(out)
}

/// Relative cost gap between the two oracle routes at every level.
pub fn op_gaps(model: &NetworkModel, scenario: &Scenario, points: &[(KktPoint, equilibrium::KktReport)]) -> Result<Vec<f64>> {
    scenario
        .demand_levels()
        .into_par_iter()
        .zip(points.par_iter())
        .map(|(d, (p, _))| {
            let op = equilibrium::solve_op(&scenario.problem(model, d, Some(p.plant.u_g.clone())), &SolveOptions::default())?;
            Ok((op.cost - p.cost).abs() / p.cost.abs().max(1e-12))
        })
        .collect()
}

fn print_gaps(gaps: &[f64]) {
    println!("level  OP vs OP# relative cost gap");
    for (k, g) in gaps.iter().enumerate() {
        println!("{k:>5}  {g:.3e}");
    }
}

pub fn cmd_oracle(model: &NetworkModel, scenario: &Scenario, out: &Path, compare_op: bool) -> Result<()> {
    mkdir(out)?;
    let points = match oracle_points(model, scenario) {
        Ok(p) => p,
        Err(e) => {
            if let Error::Solver { residual, .. } = &e {
                eprintln!("residual at failure: {residual:.6e}");
            }
            return Err(e);
        }
    };
    let path = out.join("kkt.csv");
    let mut f = create(&path)?;
    write_kkt_csv(&mut f, model, &points).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;
    println!("level  cost                   max KKT residual");
    for (k, (p, r)) in points.iter().enumerate() {
        println!("{k:>5}  {:<22}  {:.3e}", fmt17(p.cost), r.max());
    }
    if compare_op {
        print_gaps(&op_gaps(model, scenario, &points)?);
    }
    Ok(())
}

/// Summary of one `run`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub metrics: Vec<WindowMetrics>,
    pub tracking: Vec<sim::TrackingWindow>,
    pub conditions: Option<Vec<analysis::ConditionReport>>,
    pub monotonicity: Option<Vec<analysis::MonotonicityWindow>>,
    pub op_gaps: Option<Vec<f64>>,
    pub max_dual_clip: f64,
}

/// Conditions under which the Lyapunov decrease is expected.
pub const MONOTONICITY_PREMISE: [ConditionId; 3] =
    [ConditionId::PlantPassivity, ConditionId::FreqPassivity, ConditionId::VoltageStability];

pub fn cmd_run(manifest: &RunManifest) -> Result<RunSummary> {
    let (model, scenario) = manifest.load()?;
    let out = &manifest.out;
    mkdir(out)?;
    log::info!("simulating {} s at h = {} s", scenario.horizon, scenario.dt);
    let traj = sim::run(&model, &scenario)?;
    let window_refs = sim::window_references(&model, &scenario, &traj)?;
    let refs = match manifest.reference {
        ReferenceArg::Window => window_refs.clone(),
        ReferenceArg::Initial => vec![window_refs[0].clone(); window_refs.len()],
    };
    let v = sim::windowed_lyapunov(&model, &scenario, &traj, &refs)?;

    let path = out.join("trajectory.csv");
    let mut f = create(&path)?;
    write_trajectory_csv(&mut f, &model, &traj, &v).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;

    let metrics = sim::metrics(&traj, &scenario, &MetricOptions::default())?;
    let path = out.join("metrics.csv");
    let mut f = create(&path)?;
    write_metrics_csv(&mut f, &metrics).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;

    let tracking = sim::tracking(&model, &scenario, &traj, &window_refs)?;

    let (conditions, monotonicity) = if manifest.analysis {
        let reports = analysis::evaluate_trajectory(&model, &scenario, &traj, &refs)?;
        let path = out.join("conditions.csv");
        let mut f = create(&path)?;
        analysis::write_conditions_csv(&mut f, &reports).map_err(io_err(&path))?;
        f.flush().map_err(io_err(&path))?;
        let mono = analysis::lyapunov_monotonicity(&scenario, &traj, &v, &reports, &MONOTONICITY_PREMISE, 1e-6, 1e-12);
        let path = out.join("lyapunov.csv");
        let mut f = create(&path)?;
        (|| -> std::io::Result<()> {
            writeln!(f, "window,t_start,t_end,conditions_hold,worst_increase,monotone")?;
            for (w, m) in mono.iter().enumerate() {
                writeln!(
                    f,
                    "{w},{},{},{},{},{}",
                    fmt17(m.t_start),
                    fmt17(m.t_end),
                    m.conditions_hold,
                    fmt17(m.worst_increase),
                    m.monotone
                )?;
            }
            f.flush()
        })()
        .map_err(io_err(&path))?;
        (Some(reports), Some(mono))
    } else {
        (None, None)
    };

    let op_gaps = if manifest.compare_op {
        let points: Vec<_> = window_refs
            .iter()
            .zip(scenario.demand_levels())
            .map(|(p, d)| Ok((p.clone(), equilibrium::kkt_residual(&scenario.problem(&model, d, None), p)?)))
            .collect::<Result<_>>()?;
        Some(op_gaps(&model, &scenario, &points)?)
    } else {
        None
    };

    if manifest.plots {
        write_plots(&model, &scenario, &traj, &out.join("plots"))?;
    }
    Ok(RunSummary {
        out: out.clone(),
        metrics,
        tracking,
        conditions,
        monotonicity,
        op_gaps,
        max_dual_clip: traj.max_dual_clip,
    })
}

fn write_plots(model: &NetworkModel, scenario: &Scenario, traj: &Trajectory, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let t: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let ids: Vec<u32> = model.nodes().iter().map(|n| n.id).collect();
    let series = |label: String, f: &dyn Fn(&sim::Sample) -> f64| Series { label, x: t.clone(), y: traj.samples.iter().map(f).collect() };
    let freq = LinePlot {
        title: "Frequency".into(),
        x_label: "time (s)".into(),
        y_label: "frequency (Hz)".into(),
        series: (0..model.n_nodes())
            .map(|i| series(format!("node {}", ids[i]), &|s| F_BASE_HZ * (1.0 + s.omega[i])))
            .collect(),
        step: false,
    };
    freq.write(dir, "frequency")?;
    let volt = LinePlot {
        title: "Voltage magnitude".into(),
        x_label: "time (s)".into(),
        y_label: "voltage (p.u.)".into(),
        series: (0..model.n_nodes()).map(|i| series(format!("node {}", ids[i]), &|s| s.u[i])).collect(),
        step: false,
    };
    volt.write(dir, "voltage")?;
    let gen = LinePlot {
        title: "Active power generation".into(),
        x_label: "time (s)".into(),
        y_label: "p_g (p.u.)".into(),
        series: (0..model.n_dispatch()).map(|i| series(format!("node {}", ids[i]), &|s| s.ctrl.p_g[i])).collect(),
        step: false,
    };
    gen.write(dir, "generation")?;

    let levels = scenario.demand_levels();
    let mut edges = scenario.window_edges();
    edges.pop();
    let stair = |label: String, f: &dyn Fn(&equilibrium::Demands) -> f64| {
        let mut x: Vec<f64> = edges.clone();
        let mut y: Vec<f64> = levels.iter().map(f).collect();
        x.push(scenario.horizon);
        y.push(*y.last().expect("at least one level"));
        Series { label, x, y }
    };
    let off = model.load_offset();
    let mut series = Vec::new();
    for k in off..model.n_nodes() {
        series.push(stair(format!("p_l {}", ids[k]), &|d| d.p_l[k]));
    }
    for k in off..model.n_nodes() {
        series.push(stair(format!("q_l {}", ids[k]), &|d| d.q_l[k]));
    }
    LinePlot {
        title: "Load demand".into(),
        x_label: "time (s)".into(),
        y_label: "demand (p.u.)".into(),
        series,
        step: true,
    }
    .write(dir, "demand")
}

fn print_summary(s: &RunSummary) {
    println!("output: {}", s.out.display());
    println!(
        "{:>3} {:>8} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10} {:>8} {:>8} {:>9} {:>9}",
        "win", "t_start", "t_end", "peak_hz", "disp_hz", "dU", "settle_s", "ss_omega", "ss_Umin", "ss_Umax", "sharing", "gap_opt"
    );
    for (w, (m, tr)) in s.metrics.iter().zip(&s.tracking).enumerate() {
        let settle = m.settling_time.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        println!(
            "{w:>3} {:>8.1} {:>8.1} {:>10.4} {:>10.4} {:>9.5} {:>9} {:>10.2e} {:>8.5} {:>8.5} {:>9.2e} {:>9.2e}",
            m.t_start,
            m.t_end,
            m.peak_omega_hz,
            m.peak_omega_dispatch_hz,
            m.voltage_excursion,
            settle,
            m.steady_omega,
            m.steady_u_min,
            m.steady_u_max,
            m.sharing_residual,
            tr.state_gap
        );
    }
    println!("largest dual clip after a step: {:.3e}", s.max_dual_clip);
    if let Some(reps) = &s.conditions {
        println!("condition                  violations   min residual   max residual");
        for r in reps {
            println!("{:<26} {:>10}   {:>12.4e}   {:>12.4e}", r.id.as_str(), r.violations(), r.min(), r.max());
        }
    }
    if let Some(mono) = &s.monotonicity {
        for (w, m) in mono.iter().enumerate() {
            println!(
                "lyapunov window {w}: conditions {}, worst relative increase {:.3e}, {}",
                if m.conditions_hold { "hold" } else { "fail" },
                m.worst_increase,
                if m.monotone { "non-increasing" } else { "increasing" }
            );
        }
    }
    if let Some(g) = &s.op_gaps {
        print_gaps(g);
    }
}

pub fn cmd_check(model: &NetworkModel, scenario: &Scenario, opts: &CheckOptions) -> Result<bool> {
    let results = invariants::run_all(model, scenario, opts)?;
    println!("{:<22} {:>12} {:>12}  {:<6} detail", "invariant", "value", "tolerance", "status");
    for r in &results {
        println!(
            "{:<22} {:>12.4e} {:>12.4e}  {:<6} {}",
            r.name,
            r.value,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    Ok(results.iter().all(|r| r.pass))
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

/// Parses `args` and executes the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(a) => run_command(a),
        Command::Oracle(a) => single(&a.inputs).and_then(|(m, s)| cmd_oracle(&m, &s, &a.out, a.compare_op)).map_or_else(|e| report(&e), |_| 0),
        Command::Check(a) => {
            let mut opts = CheckOptions { seed: a.seed, halving_horizon: a.halving_horizon, ..CheckOptions::default() };
            if a.quick {
                opts.profiles = 100;
                opts.costates = 10;
                opts.passivity_samples = 100;
                opts.stationarity_horizon = 10.0;
            }
            match single(&a.inputs).and_then(|(m, s)| cmd_check(&m, &s, &opts)) {
                Ok(true) => 0,
                Ok(false) => 1,
                Err(e) => report(&e),
            }
        }
    }
}

fn overrides(a: &InputArgs) -> Overrides {
    Overrides { psi: a.psi, dt: a.dt, record: a.record, horizon: a.horizon }
}

fn single(a: &InputArgs) -> Result<(NetworkModel, Scenario)> {
    if a.scenario.len() > 1 {
        return Err(Error::Precondition("this command takes a single --scenario".into()));
    }
    RunManifest {
        config: a.config.clone(),
        scenario: a.scenario.first().cloned(),
        overrides: overrides(a),
        ..RunManifest::bundled("out")
    }
    .load()
}

fn run_command(a: RunArgs) -> i32 {
    if a.jobs == 0 {
        return report(&Error::Precondition("--jobs must be at least 1".into()));
    }
    let scenarios: Vec<Option<PathBuf>> =
        if a.inputs.scenario.is_empty() { vec![None] } else { a.inputs.scenario.iter().cloned().map(Some).collect() };
    let many = scenarios.len() > 1;
    let manifests: Vec<RunManifest> = scenarios
        .into_iter()
        .map(|sc| {
            let out = match (&sc, many) {
                (Some(p), true) => a.out.join(p.file_stem().unwrap_or_default()),
                _ => a.out.clone(),
            };
            RunManifest {
                config: a.inputs.config.clone(),
                scenario: sc,
                out,
                overrides: overrides(&a.inputs),
                analysis: a.analysis,
                compare_op: a.compare_op,
                reference: a.reference,
                plots: !a.no_plots,
            }
        })
        .collect();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::Precondition(format!("thread pool: {e}"))),
    };
    let results: Vec<Result<RunSummary>> = pool.install(|| manifests.par_iter().map(cmd_run).collect());
    let mut code = 0;
    for r in &results {
        match r {
            Ok(s) => print_summary(s),
            Err(e) => {
                let c = report(e);
                if code == 0 {
                    code = c;
                }
            }
        }
    }
    code
}
