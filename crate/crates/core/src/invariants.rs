//! Numerical invariant suite behind the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis;
use crate::controller::project;
use crate::equilibrium::{self, SolveOptions};
use crate::error::Result;
use crate::netmodel::NetworkModel;
use crate::plant::{self, PlantState};
use crate::powerflow::{self, VoltagePhaseProfile};
use crate::sim::{self, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantResult {
    pub name: &'static str,
    /// Measured figure; compared against `tol` in the direction given by the check.
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
    pub detail: String,
}

impl InvariantResult {
    fn at_most(name: &'static str, value: f64, tol: f64, detail: impl Into<String>) -> Self {
        Self { name, value, tol, pass: value <= tol, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub seed: u64,
    pub profiles: usize,
    pub costates: usize,
    pub passivity_samples: usize,
    pub stationarity_horizon: f64,
    /// Horizon of the step-halving comparison; `None` uses the scenario's.
    pub halving_horizon: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            profiles: 1000,
            costates: 100,
            passivity_samples: 1000,
            stationarity_horizon: 100.0,
            halving_horizon: None,
        }
    }
}

fn random_profile(model: &NetworkModel, rng: &mut ChaCha8Rng) -> VoltagePhaseProfile {
    VoltagePhaseProfile {
        u: (0..model.n_nodes()).map(|_| rng.random_range(0.9..1.1)).collect(),
        theta_diff: (0..model.n_lines()).map(|_| rng.random_range(-0.3..0.3)).collect(),
    }
}

fn random_state(model: &NetworkModel, rng: &mut ChaCha8Rng) -> (PlantState, Vec<f64>) {
    let mut r = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let state = PlantState {
        theta_diff: r(-0.3, 0.3, model.n_lines()),
        l_g: r(-1.0, 1.0, model.n_gen()),
        l_i: r(-1.0, 1.0, model.n_inv()),
        u_g: r(0.9, 1.1, model.n_gen()),
        omega_l: r(-0.1, 0.1, model.n_load()),
        u_l: r(0.9, 1.1, model.n_load()),
    };
    (state, r(0.9, 1.1, model.n_inv()))
}

/// Largest relative gap between the summed injections and the total losses.
pub fn flow_identity(model: &NetworkModel, samples: usize, seed: u64) -> Result<InvariantResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let prof = random_profile(model, &mut rng);
        let p = powerflow::active_flow(model, &prof)?;
        let phi = powerflow::loss_total(model, &prof)?;
        let sum: f64 = p.iter().sum();
        let scale = p.iter().map(|v| v.abs()).sum::<f64>().max(phi.abs()).max(1.0);
        worst = worst.max((sum - phi).abs() / scale);
    }
    Ok(InvariantResult::at_most("flow_identity", worst, 1e-12, format!("{samples} random profiles")))
}

/// Central finite differences of the energy function against the co-state,
/// inverter-voltage partials included.
pub fn costate_fd(model: &NetworkModel, samples: usize, seed: u64) -> Result<InvariantResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let (state, u_i) = random_state(model, &mut rng);
        let mut grad = plant::costate(model, &state, &u_i)?.to_vec();
        grad.extend(plant::hamiltonian_grad_inverter_voltage(model, &state, &u_i));
        let mut x = state.to_vec();
        x.extend_from_slice(&u_i);
        let eval = |x: &[f64]| -> Result<f64> {
            let (s, u) = split_state(model, x);
            plant::hamiltonian(model, &s, &u)
        };
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(1.0));
        }
    }
    Ok(InvariantResult::at_most("costate_fd", worst, 1e-6, format!("{samples} random states")))
}

fn split_state(model: &NetworkModel, x: &[f64]) -> (PlantState, Vec<f64>) {
    let mut off = 0;
    let mut take = |n: usize| {
        let v = x[off..off + n].to_vec();
        off += n;
        v
    };
    let state = PlantState {
        theta_diff: take(model.n_lines()),
        l_g: take(model.n_gen()),
        l_i: take(model.n_inv()),
        u_g: take(model.n_gen()),
        omega_l: take(model.n_load()),
        u_l: take(model.n_load()),
    };
    (state, take(model.n_inv()))
}

/// Every sign and boundary case of the dual projection.
pub fn projection_table() -> InvariantResult {
    let cases: [(f64, f64, f64); 9] = [
        (1.0, 0.0, 1.0),
        (-1.0, 0.0, 0.0),
        (0.0, 0.0, 0.0),
        (1.0, 0.5, 1.0),
        (-1.0, 0.5, -1.0),
        (0.0, 0.5, 0.0),
        (-1e-300, 0.0, 0.0),
        (-2.0, 1e-300, -2.0),
        (3.0, 1e-300, 3.0),
    ];
    let bad = cases.iter().filter(|&&(x, mu, want)| project(x, mu) != want).count();
    InvariantResult::at_most("projection_table", bad as f64, 0.0, format!("{} cases", cases.len()))
}

/// KKT residuals and OP versus OP♯ cost gap at every demand level.
pub fn oracle_levels(model: &NetworkModel, scenario: &Scenario) -> Result<Vec<InvariantResult>> {
    let opts = SolveOptions::default();
    let mut hint = scenario.initial_u_g.clone();
    let (mut kkt, mut gap) = (0.0_f64, 0.0_f64);
    let levels = scenario.demand_levels();
    for d in &levels {
        let prob = scenario.problem(model, d.clone(), hint.clone());
        let point = equilibrium::solve_op_sharp(&prob, &opts)?;
        kkt = kkt.max(equilibrium::kkt_residual(&prob, &point)?.max());
        let op = equilibrium::solve_op(&prob, &opts)?;
        gap = gap.max((op.cost - point.cost).abs() / point.cost.abs().max(1e-12));
        hint = Some(point.plant.u_g.clone());
    }
    let detail = format!("{} demand levels", levels.len());
    Ok(vec![
        InvariantResult::at_most("oracle_kkt_residual", kkt, 1e-8, detail.clone()),
        InvariantResult::at_most("op_equivalence", gap, 1e-6, detail),
    ])
}

/// Simulates from the initial equilibrium with no events and reports the
/// largest departure of any state from its starting value.
pub fn stationarity(model: &NetworkModel, scenario: &Scenario, horizon: f64) -> Result<InvariantResult> {
    let sc = Scenario { events: Vec::new(), horizon, record: scenario.record.max(1.0).min(horizon), ..scenario.clone() };
    let (plant0, ctrl0, _) = sim::initial_state(model, &sc)?;
    let traj = sim::run_from(model, &sc, &plant0, &ctrl0)?;
    let lay = sim::StateLayout::new(model);
    let x0 = lay.pack(&plant0, &ctrl0);
    let mut drift = 0.0_f64;
    for s in &traj.samples {
        let x = lay.pack(&s.plant, &s.ctrl);
        drift = x.iter().zip(&x0).fold(drift, |m, (a, b)| m.max((a - b).abs()));
        drift = s.plant.u_l.iter().zip(&plant0.u_l).fold(drift, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(InvariantResult::at_most("stationarity_drift", drift, 1e-7, format!("{horizon} s from equilibrium")))
}

/// Terminal-state gap between runs at `dt` and `dt / 2`, plus dual
/// nonnegativity along both trajectories.
pub fn step_halving(model: &NetworkModel, scenario: &Scenario, horizon: Option<f64>) -> Result<Vec<InvariantResult>> {
    let mut sc = scenario.clone();
    if let Some(h) = horizon {
        sc.horizon = h.min(scenario.horizon);
        sc.events.retain(|e| e.t < sc.horizon);
    }
    sc.record = sc.horizon;
    let mut half = sc.clone();
    half.dt = 0.5 * sc.dt;
    let (a, b) = rayon::join(|| sim::run(model, &sc), || sim::run(model, &half));
    let (a, b) = (a?, b?);
    let lay = sim::StateLayout::new(model);
    let end = |t: &sim::Trajectory| {
        let s = t.samples.last().expect("nonempty trajectory");
        let mut x = lay.pack(&s.plant, &s.ctrl);
        x.extend_from_slice(&s.plant.u_l);
        x
    };
    let gap = end(&a).iter().zip(end(&b)).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let min_dual = a.samples.iter().chain(&b.samples).map(|s| s.ctrl.min_dual()).fold(f64::INFINITY, f64::min);
    Ok(vec![
        InvariantResult::at_most(
            "step_halving",
            gap,
            1e-6,
            format!("h = {} vs {} over {} s", sc.dt, half.dt, sc.horizon),
        ),
        InvariantResult {
            name: "dual_nonnegativity",
            value: min_dual,
            tol: -1e-12,
            pass: min_dual >= -1e-12,
            detail: format!("largest clip {:.3e}", a.max_dual_clip.max(b.max_dual_clip)),
        },
    ])
}

/// Plant and frequency-controller residuals on the lossless version of the
/// network, sampled around its equilibrium at the initial demands.
pub fn lossless_passivity(model: &NetworkModel, scenario: &Scenario, samples: usize, seed: u64) -> Result<InvariantResult> {
    let lossless = model.lossless();
    let prob = scenario.problem(&lossless, scenario.initial.clone(), scenario.initial_u_g.clone());
    let star = equilibrium::solve_op_sharp(&prob, &SolveOptions::default())?;
    let zero = vec![0.0; lossless.n_nodes()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let eps = 0.05;
        let mut jitter = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x + rng.random_range(-eps..eps)).collect() };
        let state = PlantState {
            theta_diff: jitter(&star.plant.theta_diff),
            l_g: jitter(&star.plant.l_g),
            l_i: jitter(&star.plant.l_i),
            u_g: jitter(&star.plant.u_g),
            omega_l: jitter(&star.plant.omega_l),
            u_l: jitter(&star.plant.u_l),
        };
        let u_i = jitter(&star.u_i);
        let p_g = jitter(&star.p_g);
        let lambda = jitter(&star.lambda);
        let r_p = analysis::plant_passivity_residual(&lossless, &state, &u_i, &star.plant, &star.u_i)?;
        let r_f = analysis::freq_controller_passivity_residual(
            &scenario.cost,
            &p_g,
            &lambda,
            &zero,
            &star.p_g,
            &star.lambda,
            &zero,
        )?;
        worst = worst.min(r_p.min(r_f));
    }
    Ok(InvariantResult {
        name: "lossless_passivity",
        value: worst,
        tol: -analysis::BOUNDARY_TOL,
        pass: worst >= -analysis::BOUNDARY_TOL,
        detail: format!("{samples} samples around the lossless equilibrium"),
    })
}

/// The whole suite, in a fixed order.
pub fn run_all(model: &NetworkModel, scenario: &Scenario, opts: &CheckOptions) -> Result<Vec<InvariantResult>> {
    scenario.validate(model)?;
    let mut out = vec![
        flow_identity(model, opts.profiles, opts.seed)?,
        costate_fd(model, opts.costates, opts.seed)?,
        projection_table(),
    ];
    out.extend(oracle_levels(model, scenario)?);
    out.push(lossless_passivity(model, scenario, opts.passivity_samples, opts.seed)?);
    out.push(stationarity(model, scenario, opts.stationarity_horizon)?);
    out.extend(step_halving(model, scenario, opts.halving_horizon)?);
    Ok(out)
}

