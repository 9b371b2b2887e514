//! Passivity and stability conditions evaluated along states and trajectories.
//!
//! Sign conventions of the residuals:
//!
//! | condition                    | satisfied when |
//! |------------------------------|----------------|
//! | `plant_passivity`            | `r >= 0`       |
//! | `freq_passivity`             | `r >= 0`       |
//! | `voltage_stability`          | `r < 0`        |
//! | `lossless_voltage_stability` | `r < 0`        |
//!
//! Values within [`BOUNDARY_TOL`] of zero are reported as boundary points;
//! they do not count as violations.

use std::io::Write;

use rayon::prelude::*;

use crate::cli::fmt17;
use crate::controller::{self, Bounds, ControllerGains, ControllerState, CostSpec};
use crate::equilibrium::KktPoint;
use crate::error::{check_len, Error, Result};
use crate::netmodel::NetworkModel;
use crate::plant::{self, PlantState};
use crate::powerflow::{self, PsiVariant, VoltagePhaseProfile};
use crate::sim::{self, Scenario, Trajectory};

pub const BOUNDARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionId {
    PlantPassivity,
    FreqPassivity,
    VoltageStability,
    LosslessVoltageStability,
}

impl ConditionId {
    pub const ALL: [ConditionId; 4] = [
        ConditionId::PlantPassivity,
        ConditionId::FreqPassivity,
        ConditionId::VoltageStability,
        ConditionId::LosslessVoltageStability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionId::PlantPassivity => "plant_passivity",
            ConditionId::FreqPassivity => "freq_passivity",
            ConditionId::VoltageStability => "voltage_stability",
            ConditionId::LosslessVoltageStability => "lossless_voltage_stability",
        }
    }

    fn nonnegative(self) -> bool {
        matches!(self, ConditionId::PlantPassivity | ConditionId::FreqPassivity)
    }

    pub fn status(self, residual: f64) -> Status {
        if !residual.is_finite() {
            Status::Violated
        } else if residual.abs() <= BOUNDARY_TOL {
            Status::Boundary
        } else if (residual > 0.0) == self.nonnegative() {
            Status::Satisfied
        } else {
            Status::Violated
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Satisfied,
    Boundary,
    Violated,
}

impl Status {
    pub fn ok(self) -> bool {
        self != Status::Violated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub id: ConditionId,
    /// `(t, residual)` per evaluation point.
    pub points: Vec<(f64, f64)>,
}

impl ConditionReport {
    pub fn statuses(&self) -> impl Iterator<Item = Status> + '_ {
        self.points.iter().map(|&(_, r)| self.id.status(r))
    }
    pub fn min(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn all_ok(&self) -> bool {
        self.statuses().all(Status::ok)
    }
    pub fn violations(&self) -> usize {
        self.statuses().filter(|s| !s.ok()).count()
    }
}

/// Dissipation map `R_p z_p + r_p` of the plant, block by block.
fn dissipation(model: &NetworkModel, state: &PlantState, u_i: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = plant::costate(model, state, u_i)?;
    let prof = state.profile(u_i);
    let phi = powerflow::loss_vector(model, &prof)?;
    let (rho_g, rho_l) = powerflow::rho_vector(model, &prof)?;
    let (ng, ni) = (model.n_gen(), model.n_inv());
    let off_l = model.load_offset();
    let mut r = vec![0.0; model.n_lines()];
    for k in 0..ng {
        r.push(model.node(k).damping() * z.l_g[k] + phi[k]);
    }
    for k in 0..ni {
        let i = ng + k;
        r.push(model.node(i).damping() * z.l_i[k] + phi[i]);
    }
    for k in 0..ng {
        r.push(model.generator(k).voltage_resistance() * z.u_g[k] + rho_g[k]);
    }
    for k in 0..model.n_load() {
        let i = off_l + k;
        r.push(model.node(i).damping() * z.omega_l[k] + phi[i]);
    }
    for k in 0..model.n_load() {
        r.push(state.u_l[k] * z.u_l[k] + rho_l[k]);
    }
    Ok((z.to_vec(), r))
}

/// `(z_p - z_p*)ᵀ [R(x_p) - R(x_p*)]` with `R(x) = R_p z_p + r_p`.
pub fn plant_passivity_residual(
    model: &NetworkModel,
    state: &PlantState,
    u_i: &[f64],
    reference: &PlantState,
    ref_u_i: &[f64],
) -> Result<f64> {
    let (z, r) = dissipation(model, state, u_i)?;
    let (zs, rs) = dissipation(model, reference, ref_u_i)?;
    Ok(z.iter().zip(&zs).zip(r.iter().zip(&rs)).map(|((a, b), (c, d))| (a - b) * (c - d)).sum())
}

/// `(p - p*)ᵀ(∇C(p) - ∇C(p*)) - (λ - λ*)ᵀ(φ - φ*)`.
#[allow(clippy::too_many_arguments)]
pub fn freq_controller_passivity_residual(
    cost: &CostSpec,
    p_g: &[f64],
    lambda: &[f64],
    phi: &[f64],
    ref_p_g: &[f64],
    ref_lambda: &[f64],
    ref_phi: &[f64],
) -> Result<f64> {
    check_len("p_g*", p_g.len(), ref_p_g.len())?;
    check_len("lambda", lambda.len(), phi.len())?;
    check_len("lambda*", lambda.len(), ref_lambda.len())?;
    check_len("phi*", lambda.len(), ref_phi.len())?;
    let (_, g) = controller::cost_and_gradient(cost, p_g)?;
    let (_, gs) = controller::cost_and_gradient(cost, ref_p_g)?;
    let convex: f64 = (0..p_g.len()).map(|k| (p_g[k] - ref_p_g[k]) * (g[k] - gs[k])).sum();
    let cross: f64 = (0..lambda.len()).map(|i| (lambda[i] - ref_lambda[i]) * (phi[i] - ref_phi[i])).sum();
    Ok(convex - cross)
}

/// `(∇Ψ)ᵀ(μ_G- - μ_G+)` and `(∇φ)ᵀλ`, both per inverter.
fn inverter_couplings(
    model: &NetworkModel,
    prof: &VoltagePhaseProfile,
    variant: PsiVariant,
    mu_minus: &[f64],
    mu_plus: &[f64],
    lambda: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dpsi = powerflow::psi_grad_inverters(model, prof, variant);
    let dphi = powerflow::loss_grad_inverters(model, prof);
    let ni = model.n_inv();
    let psi_term = (0..ni)
        .map(|k| (0..model.n_gen()).map(|g| dpsi[g][k] * (mu_minus[g] - mu_plus[g])).sum())
        .collect();
    let phi_term = (0..ni).map(|k| dphi.iter().zip(lambda).map(|(row, l)| row[k] * l).sum()).collect();
    (psi_term, phi_term)
}

/// Inverter-voltage stability condition, inner-product reading:
///
/// ```text
/// r = (∇H̃_p(Ũ_I))ᵀ U̇_I
///   - Ũ_Iᵀ[(∇Ψ)ᵀ(μ_G- - μ_G+) - (∇Ψ*)ᵀ(μ_G-* - μ_G+*)]
///   + Ũ_Iᵀ[(∇φ)ᵀλ - (∇φ*)ᵀλ*]
/// ```
#[allow(clippy::too_many_arguments)]
pub fn prop5_condition_residual(
    model: &NetworkModel,
    gains: &ControllerGains,
    bounds: &Bounds,
    variant: PsiVariant,
    state: &PlantState,
    ctrl: &ControllerState,
    reference: &KktPoint,
) -> Result<f64> {
    state.check(model)?;
    ctrl.check(model)?;
    let prof = state.profile(&ctrl.u_i);
    let ref_prof = reference.profile();
    let dh = plant::hamiltonian_grad_inverter_voltage(model, state, &ctrl.u_i);
    let dh_ref = plant::hamiltonian_grad_inverter_voltage(model, &reference.plant, &reference.u_i);
    let rate = controller::volt_controller_rhs(model, gains, bounds, variant, ctrl, &prof, &ctrl.lambda)?.u_i;
    let (psi, phi) = inverter_couplings(model, &prof, variant, &ctrl.mu_g_minus, &ctrl.mu_g_plus, &ctrl.lambda);
    let (psi_s, phi_s) =
        inverter_couplings(model, &ref_prof, variant, &reference.mu_g_minus, &reference.mu_g_plus, &reference.lambda);
    let mut r = 0.0;
    for k in 0..model.n_inv() {
        let du = ctrl.u_i[k] - reference.u_i[k];
        r += (dh[k] - dh_ref[k]) * rate[k];
        r -= du * (psi[k] - psi_s[k]);
        r += du * (phi[k] - phi_s[k]);
    }
    Ok(r)
}

/// `Σ_{i∈I} (μ_I-,i - μ_I+,i)(Σ_j B_ij U_j cos ϑ_ij - Σ_j B_ij U_j* cos ϑ_ij*)`.
pub fn corollary6_residual(
    model: &NetworkModel,
    state: &PlantState,
    u_i: &[f64],
    reference: &PlantState,
    ref_u_i: &[f64],
    mu_i_minus: &[f64],
    mu_i_plus: &[f64],
) -> Result<f64> {
    check_len("mu_I-", model.n_inv(), mu_i_minus.len())?;
    check_len("mu_I+", model.n_inv(), mu_i_plus.len())?;
    // ∂H/∂U_I = -Σ_j B_ij U_j cos ϑ_ij
    let now = plant::hamiltonian_grad_inverter_voltage(model, state, u_i);
    let star = plant::hamiltonian_grad_inverter_voltage(model, reference, ref_u_i);
    Ok((0..model.n_inv()).map(|k| (mu_i_minus[k] - mu_i_plus[k]) * (star[k] - now[k])).sum())
}

/// Evaluates every condition at every sample, each window against its own
/// reference equilibrium.
pub fn evaluate_trajectory(
    model: &NetworkModel,
    scenario: &Scenario,
    traj: &Trajectory,
    refs: &[KktPoint],
) -> Result<Vec<ConditionReport>> {
    let edges = scenario.window_edges();
    if refs.len() + 1 != edges.len() {
        return Err(Error::Dimension { what: "window references", expected: edges.len() - 1, got: refs.len() });
    }
    let variant = scenario.psi_variant();
    let ref_phi: Vec<Vec<f64>> = refs
        .iter()
        .map(|r| powerflow::loss_vector(model, &r.profile()))
        .collect::<Result<_>>()?;
    let rows: Vec<[f64; 4]> = traj
        .samples
        .par_iter()
        .map(|s| -> Result<[f64; 4]> {
            let w = sim::window_index(&edges, s.t);
            let r = &refs[w];
            let phi = powerflow::loss_vector(model, &s.plant.profile(&s.ctrl.u_i))?;
            Ok([
                plant_passivity_residual(model, &s.plant, &s.ctrl.u_i, &r.plant, &r.u_i)?,
                freq_controller_passivity_residual(
                    &scenario.cost,
                    &s.ctrl.p_g,
                    &s.ctrl.lambda,
                    &phi,
                    &r.p_g,
                    &r.lambda,
                    &ref_phi[w],
                )?,
                prop5_condition_residual(model, &scenario.gains, &scenario.bounds, variant, &s.plant, &s.ctrl, r)?,
                corollary6_residual(
                    model,
                    &s.plant,
                    &s.ctrl.u_i,
                    &r.plant,
                    &r.u_i,
                    &s.ctrl.mu_i_minus,
                    &s.ctrl.mu_i_plus,
                )?,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(ConditionId::ALL
        .iter()
        .enumerate()
        .map(|(c, &id)| ConditionReport {
            id,
            points: traj.samples.iter().zip(&rows).map(|(s, row)| (s.t, row[c])).collect(),
        })
        .collect())
}

/// Rows `condition_id,t,residual,satisfied`.
pub fn write_conditions_csv<W: Write>(mut out: W, reports: &[ConditionReport]) -> std::io::Result<()> {
    writeln!(out, "condition_id,t,residual,satisfied")?;
    for rep in reports {
        for &(t, r) in &rep.points {
            writeln!(out, "{},{},{},{}", rep.id.as_str(), fmt17(t), fmt17(r), rep.id.status(r).ok())?;
        }
    }
    Ok(())
}

/// Outcome of the Lyapunov monotonicity check on one window.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityWindow {
    pub t_start: f64,
    pub t_end: f64,
    /// All condition residuals satisfied (or on the boundary) over the window.
    pub conditions_hold: bool,
    /// Largest relative increase `(V[k+1] - V[k]) / max(|V[k]|, floor)`.
    pub worst_increase: f64,
    pub monotone: bool,
}

/// Checks that the Lyapunov series does not increase by more than
/// `rel_tol · |V|` between consecutive samples of each window. Samples at
/// window starts are excluded from the pair preceding them since the
/// reference changes there. Only the conditions in `premise` are consulted.
pub fn lyapunov_monotonicity(
    scenario: &Scenario,
    traj: &Trajectory,
    series: &[f64],
    reports: &[ConditionReport],
    premise: &[ConditionId],
    rel_tol: f64,
    abs_floor: f64,
) -> Vec<MonotonicityWindow> {
    let edges = scenario.window_edges();
    let mut out = Vec::with_capacity(edges.len() - 1);
    for w in 0..edges.len() - 1 {
        let idx: Vec<usize> = (0..traj.samples.len())
            .filter(|&k| sim::window_index(&edges, traj.samples[k].t) == w)
            .collect();
        let conditions_hold = reports
            .iter()
            .filter(|r| premise.contains(&r.id))
            .all(|r| idx.iter().all(|&k| r.id.status(r.points[k].1).ok()));
        let mut worst = f64::NEG_INFINITY;
        for pair in idx.windows(2) {
            let (a, b) = (series[pair[0]], series[pair[1]]);
            worst = worst.max((b - a) / a.abs().max(abs_floor));
        }
        out.push(MonotonicityWindow {
            t_start: edges[w],
            t_end: edges[w + 1],
            conditions_hold,
            worst_increase: worst,
            monotone: worst <= rel_tol,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{consistent_equilibrium, DispatchProblem, SolveOptions};
    use crate::netmodel::ieee12;
    use crate::sim::{load_scenario, IEEE12_SCENARIO};

    fn setup(model: &NetworkModel, hat: bool) -> (Scenario, PlantState, ControllerState, KktPoint) {
        let mut s = load_scenario(IEEE12_SCENARIO, model).unwrap();
        s.hat = hat;
        let prob: DispatchProblem = s.problem(model, s.initial.clone(), None);
        let (p, c, k) = consistent_equilibrium(&prob, &s.gains, &SolveOptions::default()).unwrap();
        (s, p, c, k)
    }

    #[test]
    fn residuals_vanish_at_reference() {
        let m = ieee12();
        let (s, p, c, k) = setup(&m, false);
        assert_eq!(plant_passivity_residual(&m, &p, &c.u_i, &k.plant, &k.u_i).unwrap(), 0.0);
        let phi = powerflow::loss_vector(&m, &k.profile()).unwrap();
        assert_eq!(freq_controller_passivity_residual(&s.cost, &c.p_g, &c.lambda, &phi, &k.p_g, &k.lambda, &phi).unwrap(), 0.0);
        let r = prop5_condition_residual(&m, &s.gains, &s.bounds, s.psi_variant(), &p, &c, &k).unwrap();
        assert!(r.abs() < 1e-12, "{r}");
        assert_eq!(ConditionId::VoltageStability.status(r), Status::Boundary);
        let r = corollary6_residual(&m, &p, &c.u_i, &k.plant, &k.u_i, &c.mu_i_minus, &c.mu_i_plus).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn quadratic_cost_expansion() {
        let cost = CostSpec::new(vec![1.0, 2.0]).unwrap();
        let r = freq_controller_passivity_residual(
            &cost,
            &[1.0, 1.0],
            &[0.5, 0.2, 0.1],
            &[0.1, 0.0, 0.3],
            &[0.0, 2.0],
            &[0.0, 0.2, 0.0],
            &[0.0, 0.0, 0.1],
        )
        .unwrap();
        // Σ Δp²/w - Δλ·Δφ = 1 + 0.5 - (0.05 + 0.02)
        assert!((r - 1.43).abs() < 1e-14, "{r}");
    }

    #[test]
    fn zero_inverter_duals_zero_lossless_sum() {
        let m = ieee12();
        let (_, mut p, c, k) = setup(&m, false);
        p.theta_diff[3] += 0.1;
        let r = corollary6_residual(&m, &p, &c.u_i, &k.plant, &k.u_i, &[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn lossless_hat_reduces_to_dual_sum() {
        let m = ieee12().lossless();
        let (s, mut p, mut c, k) = setup(&m, true);
        p.theta_diff[5] += 0.03;
        p.u_g[1] += 0.01;
        c.u_i[2] += 0.005;
        c.mu_i_minus = vec![0.2, 0.0, 0.1, 0.0];
        c.mu_i_plus = vec![0.0, 0.3, 0.0, 0.0];
        c.mu_g_minus[0] = 0.4;
        let lhs = prop5_condition_residual(&m, &s.gains, &s.bounds, s.psi_variant(), &p, &c, &k).unwrap();
        let sum = corollary6_residual(&m, &p, &c.u_i, &k.plant, &k.u_i, &c.mu_i_minus, &c.mu_i_plus).unwrap();
        assert!((lhs + sum / s.gains.tau_u_i).abs() < 1e-12 * (1.0 + sum.abs()), "{lhs} vs {}", -sum / s.gains.tau_u_i);
    }
}
