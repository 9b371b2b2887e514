//! Microgrid plant: swing dynamics at generator and inverter nodes, transient
//! voltage dynamics at generators, and algebraic power balance at loads.
//!
//! Dynamic states are `(ϑ, L_G, L_I, U_G)`; `(ω_L, U_L)` are algebraic and
//! closed by [`solve_algebraic`]. The energy function is
//!
//! ```text
//! H = ½ Σ_G (L²/M + U²/X) + ½ Σ_I L²/M - ½ Σ_{G∪L} B_ii U²
//!     - Σ_lines B_ij U_i U_j cos ϑ_ij + ½ Σ_L ω²
//! ```
//!
//! with `X = X_d - X'_d`. Inverter voltages appear only through the line
//! coupling terms.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::netmodel::NetworkModel;
use crate::powerflow::{self, VoltagePhaseProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub theta_diff: Vec<f64>,
    pub l_g: Vec<f64>,
    pub l_i: Vec<f64>,
    pub u_g: Vec<f64>,
    pub omega_l: Vec<f64>,
    pub u_l: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantInput {
    pub p_gen: Vec<f64>,
    pub p_inv: Vec<f64>,
    pub u_f: Vec<f64>,
    pub u_i: Vec<f64>,
    /// Active demand at every node.
    pub p_l: Vec<f64>,
    /// Reactive demand at every node.
    pub q_l: Vec<f64>,
}

/// Time derivatives of the dynamic plant states.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantDerivative {
    pub theta_diff: Vec<f64>,
    pub l_g: Vec<f64>,
    pub l_i: Vec<f64>,
    pub u_g: Vec<f64>,
}

impl PlantDerivative {
    pub fn max_abs(&self) -> f64 {
        [&self.theta_diff, &self.l_g, &self.l_i, &self.u_g]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Gradient of the energy function, block by block.
#[derive(Debug, Clone, PartialEq)]
pub struct Costate {
    pub theta_diff: Vec<f64>,
    pub l_g: Vec<f64>,
    pub l_i: Vec<f64>,
    pub u_g: Vec<f64>,
    pub omega_l: Vec<f64>,
    pub u_l: Vec<f64>,
}

impl Costate {
    /// Blocks concatenated in state order.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.theta_diff, &self.l_g, &self.l_i, &self.u_g, &self.omega_l, &self.u_l]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }
}

impl PlantState {
    /// Flat, unloaded state with all voltages at 1 p.u.
    pub fn flat(model: &NetworkModel) -> Self {
        Self {
            theta_diff: vec![0.0; model.n_lines()],
            l_g: vec![0.0; model.n_gen()],
            l_i: vec![0.0; model.n_inv()],
            u_g: vec![1.0; model.n_gen()],
            omega_l: vec![0.0; model.n_load()],
            u_l: vec![1.0; model.n_load()],
        }
    }

    pub fn check(&self, model: &NetworkModel) -> Result<()> {
        check_len("theta_diff", model.n_lines(), self.theta_diff.len())?;
        check_len("L_G", model.n_gen(), self.l_g.len())?;
        check_len("L_I", model.n_inv(), self.l_i.len())?;
        check_len("U_G", model.n_gen(), self.u_g.len())?;
        check_len("omega_L", model.n_load(), self.omega_l.len())?;
        check_len("U_L", model.n_load(), self.u_l.len())
    }

    /// All state blocks concatenated in the order `ϑ, L_G, L_I, U_G, ω_L, U_L`.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.theta_diff, &self.l_g, &self.l_i, &self.u_g, &self.omega_l, &self.u_l]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    /// Voltage magnitudes at all nodes, inverters taken from `u_i`.
    pub fn voltages(&self, u_i: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.u_g.len() + u_i.len() + self.u_l.len());
        u.extend_from_slice(&self.u_g);
        u.extend_from_slice(u_i);
        u.extend_from_slice(&self.u_l);
        u
    }

    pub fn profile(&self, u_i: &[f64]) -> VoltagePhaseProfile {
        VoltagePhaseProfile { u: self.voltages(u_i), theta_diff: self.theta_diff.clone() }
    }

    /// Frequency deviation at every node (`L/M` at generators and inverters,
    /// the algebraic `ω_L` at loads).
    pub fn frequencies(&self, model: &NetworkModel) -> Vec<f64> {
        let mut w = Vec::with_capacity(model.n_nodes());
        let m = model.dispatch_inertia();
        w.extend(self.l_g.iter().chain(&self.l_i).zip(&m).map(|(l, m)| l / m));
        w.extend_from_slice(&self.omega_l);
        w
    }
}

impl PlantInput {
    pub fn check(&self, model: &NetworkModel) -> Result<()> {
        check_len("p_G", model.n_gen(), self.p_gen.len())?;
        check_len("p_I", model.n_inv(), self.p_inv.len())?;
        check_len("U_f", model.n_gen(), self.u_f.len())?;
        check_len("U_I", model.n_inv(), self.u_i.len())?;
        check_len("p_l", model.n_nodes(), self.p_l.len())?;
        check_len("q_l", model.n_nodes(), self.q_l.len())
    }
}

pub fn hamiltonian(model: &NetworkModel, state: &PlantState, u_i: &[f64]) -> Result<f64> {
    state.check(model)?;
    check_len("U_I", model.n_inv(), u_i.len())?;
    let u = state.voltages(u_i);
    let mut h = 0.0;
    for k in 0..model.n_gen() {
        let g = model.generator(k);
        h += 0.5 * (state.l_g[k] * state.l_g[k] / g.inertia + state.u_g[k] * state.u_g[k] / g.reactance_gap());
        h -= 0.5 * g.b_self * u[k] * u[k];
    }
    let m = model.dispatch_inertia();
    for (k, l) in state.l_i.iter().enumerate() {
        h += 0.5 * l * l / m[model.n_gen() + k];
    }
    let off = model.load_offset();
    for k in 0..model.n_load() {
        h -= 0.5 * model.node(off + k).b_self() * u[off + k] * u[off + k];
        h += 0.5 * state.omega_l[k] * state.omega_l[k];
    }
    for (e, line) in model.lines().iter().enumerate() {
        h -= line.b * u[line.from] * u[line.to] * state.theta_diff[e].cos();
    }
    Ok(h)
}

/// `Σ_j B_ij U_j cos ϑ_ij` for node `i`.
fn b_cos_sum(model: &NetworkModel, theta_diff: &[f64], u: &[f64], i: usize) -> f64 {
    model
        .neighbors(i)
        .iter()
        .map(|nb| model.lines()[nb.edge].b * u[nb.node] * theta_diff[nb.edge].cos())
        .sum()
}

pub fn costate(model: &NetworkModel, state: &PlantState, u_i: &[f64]) -> Result<Costate> {
    state.check(model)?;
    check_len("U_I", model.n_inv(), u_i.len())?;
    let u = state.voltages(u_i);
    let th = &state.theta_diff;
    let m = model.dispatch_inertia();
    let theta_diff = model
        .lines()
        .iter()
        .enumerate()
        .map(|(e, l)| l.b * u[l.from] * u[l.to] * th[e].sin())
        .collect();
    let l_g = state.l_g.iter().zip(&m).map(|(l, m)| l / m).collect();
    let l_i = state.l_i.iter().zip(&m[model.n_gen()..]).map(|(l, m)| l / m).collect();
    let u_g = (0..model.n_gen())
        .map(|k| {
            let g = model.generator(k);
            u[k] / g.reactance_gap() - g.b_self * u[k] - b_cos_sum(model, th, &u, k)
        })
        .collect();
    let off = model.load_offset();
    let u_l = (0..model.n_load())
        .map(|k| -model.node(off + k).b_self() * u[off + k] - b_cos_sum(model, th, &u, off + k))
        .collect();
    Ok(Costate { theta_diff, l_g, l_i, u_g, omega_l: state.omega_l.clone(), u_l })
}

/// Partial derivative of the energy function with respect to the inverter
/// voltages, `-Σ_j B_kj U_j cos ϑ_kj`.
pub fn hamiltonian_grad_inverter_voltage(model: &NetworkModel, state: &PlantState, u_i: &[f64]) -> Vec<f64> {
    let u = state.voltages(u_i);
    let off = model.inv_offset();
    (0..model.n_inv()).map(|k| -b_cos_sum(model, &state.theta_diff, &u, off + k)).collect()
}

pub fn dynamic_residual(model: &NetworkModel, state: &PlantState, input: &PlantInput) -> Result<PlantDerivative> {
    state.check(model)?;
    input.check(model)?;
    let prof = state.profile(&input.u_i);
    if let Some(k) = state.u_g.iter().position(|&u| u == 0.0) {
        return Err(Error::Precondition(format!("generator {} has zero voltage", model.node(k).id)));
    }
    let p = powerflow::active_flow(model, &prof)?;
    let q = powerflow::reactive_flow(model, &prof)?;
    let omega = state.frequencies(model);
    let theta_diff = model.lines().iter().map(|l| omega[l.from] - omega[l.to]).collect();
    let swing = |i: usize, pg: f64| -model.node(i).damping() * omega[i] + pg - input.p_l[i] - p[i];
    let l_g = (0..model.n_gen()).map(|k| swing(k, input.p_gen[k])).collect();
    let off = model.inv_offset();
    let l_i = (0..model.n_inv()).map(|k| swing(off + k, input.p_inv[k])).collect();
    let u_g = (0..model.n_gen())
        .map(|k| {
            let g = model.generator(k);
            let uk = state.u_g[k];
            (input.u_f[k] - uk - g.reactance_gap() * q[k] / uk) / g.tau_u
        })
        .collect();
    Ok(PlantDerivative { theta_diff, l_g, l_i, u_g })
}

/// Load balance residuals: the active entries `-A ω - p_l - p` followed by the
/// reactive entries `-q_l - q`, one pair per load node.
pub fn algebraic_residual(model: &NetworkModel, state: &PlantState, input: &PlantInput) -> Result<Vec<f64>> {
    state.check(model)?;
    input.check(model)?;
    let prof = state.profile(&input.u_i);
    let p = powerflow::active_flow(model, &prof)?;
    let q = powerflow::reactive_flow(model, &prof)?;
    let off = model.load_offset();
    let nl = model.n_load();
    let mut r = Vec::with_capacity(2 * nl);
    for k in 0..nl {
        r.push(-model.node(off + k).damping() * state.omega_l[k] - input.p_l[off + k] - p[off + k]);
    }
    for k in 0..nl {
        r.push(-input.q_l[off + k] - q[off + k]);
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraicSolution {
    pub omega_l: Vec<f64>,
    pub u_l: Vec<f64>,
    pub iterations: usize,
}

/// Reactive balance at the loads and its Jacobian with respect to `U_L`.
fn load_reactive(model: &NetworkModel, theta_diff: &[f64], u: &[f64], q_l: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let off = model.load_offset();
    let nl = model.n_load();
    let mut r = DVector::zeros(nl);
    let mut jac = DMatrix::zeros(nl, nl);
    for k in 0..nl {
        let i = off + k;
        let ui = u[i];
        let bii = model.node(i).b_self();
        let (mut bc, mut gs) = (0.0, 0.0);
        for nb in model.neighbors(i) {
            let line = &model.lines()[nb.edge];
            let (s, c) = (nb.sign * theta_diff[nb.edge]).sin_cos();
            let uj = u[nb.node];
            bc += line.b * uj * c;
            gs += line.g * uj * s;
            if nb.node >= off {
                // d(-q_i)/dU_j for a neighboring load
                jac[(k, nb.node - off)] -= ui * (line.g * s - line.b * c);
            }
        }
        let q = -bii * ui * ui - ui * bc + ui * gs;
        r[k] = -q_l[i] - q;
        jac[(k, k)] -= -2.0 * bii * ui - bc + gs;
    }
    (r, jac)
}

/// Closes the load equations for given dynamic states: Newton on the reactive
/// balance for `U_L`, after which the active balance gives `ω_L` directly.
pub fn solve_algebraic(
    model: &NetworkModel,
    partial: &PlantState,
    input: &PlantInput,
    guess_u_l: &[f64],
    opts: NewtonOptions,
) -> Result<AlgebraicSolution> {
    check_len("U_L guess", model.n_load(), guess_u_l.len())?;
    check_len("theta_diff", model.n_lines(), partial.theta_diff.len())?;
    if let Some(k) = guess_u_l.iter().position(|&u| !(u > 0.0)) {
        return Err(Error::Precondition(format!(
            "load voltage guess at node {} must be positive",
            model.node(model.load_offset() + k).id
        )));
    }
    let off = model.load_offset();
    let mut u = Vec::with_capacity(model.n_nodes());
    u.extend_from_slice(&partial.u_g);
    u.extend_from_slice(&input.u_i);
    u.extend_from_slice(guess_u_l);

    let mut iterations = 0;
    loop {
        let (r, jac) = load_reactive(model, &partial.theta_diff, &u, &input.q_l);
        let res = r.amax();
        if !res.is_finite() {
            return Err(Error::solver("load voltage iteration diverged", res));
        }
        if res < opts.tol {
            break;
        }
        if iterations == opts.max_iter {
            return Err(Error::solver(format!("load voltages not converged after {iterations} iterations"), res));
        }
        let step = jac.lu().solve(&(-r)).ok_or_else(|| Error::solver("singular load Jacobian (voltage collapse)", res))?;
        for k in 0..model.n_load() {
            u[off + k] += step[k];
        }
        iterations += 1;
    }

    let prof = VoltagePhaseProfile { u, theta_diff: partial.theta_diff.clone() };
    let omega_l = load_frequencies(model, &prof, &input.p_l);
    Ok(AlgebraicSolution { omega_l, u_l: prof.u[off..].to_vec(), iterations })
}

/// `ω_L = -(p_l + p) / A` at each load.
pub fn load_frequencies(model: &NetworkModel, prof: &VoltagePhaseProfile, p_l: &[f64]) -> Vec<f64> {
    let off = model.load_offset();
    (0..model.n_load())
        .map(|k| {
            let i = off + k;
            let mut p = model.node(i).g_self() * prof.u[i] * prof.u[i];
            for nb in model.neighbors(i) {
                let line = &model.lines()[nb.edge];
                let (s, c) = (nb.sign * prof.theta_diff[nb.edge]).sin_cos();
                p += prof.u[i] * prof.u[nb.node] * (line.b * s + line.g * c);
            }
            -(p_l[i] + p) / model.node(i).damping()
        })
        .collect()
}

/// Bregman shift of the energy function about a reference point, with the
/// inverter voltages treated as part of the state:
/// `H(x) - (x - x*)ᵀ∇H(x*) - H(x*)`.
pub fn shifted_hamiltonian(
    model: &NetworkModel,
    state: &PlantState,
    u_i: &[f64],
    ref_state: &PlantState,
    ref_u_i: &[f64],
) -> Result<f64> {
    let h = hamiltonian(model, state, u_i)?;
    let h_ref = hamiltonian(model, ref_state, ref_u_i)?;
    let z_ref = costate(model, ref_state, ref_u_i)?.to_vec();
    let zu_ref = hamiltonian_grad_inverter_voltage(model, ref_state, ref_u_i);
    let dx: f64 = state.to_vec().iter().zip(ref_state.to_vec()).zip(&z_ref).map(|((x, r), z)| (x - r) * z).sum();
    let du: f64 = u_i.iter().zip(ref_u_i).zip(&zu_ref).map(|((x, r), z)| (x - r) * z).sum();
    Ok(h - dx - du - h_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{ieee12, CommSpec, GeneratorParams, LineSpec, Node, NodeParams};

    fn single_gen() -> NetworkModel {
        NetworkModel::new(
            vec![Node {
                id: 1,
                params: NodeParams::Generator(GeneratorParams {
                    damping: 1.0,
                    inertia: 2.0,
                    x_d: 0.2,
                    x_d_prime: 0.05,
                    tau_u: 5.0,
                    g_self: 0.0,
                    b_self: -1.0,
                }),
            }],
            Vec::<LineSpec>::new(),
            CommSpec::SameAsPhysical,
        )
        .unwrap()
    }

    fn zero_input(model: &NetworkModel) -> PlantInput {
        PlantInput {
            p_gen: vec![0.0; model.n_gen()],
            p_inv: vec![0.0; model.n_inv()],
            u_f: vec![1.0; model.n_gen()],
            u_i: vec![1.0; model.n_inv()],
            p_l: vec![0.0; model.n_nodes()],
            q_l: vec![0.0; model.n_nodes()],
        }
    }

    #[test]
    fn zero_state_has_zero_energy() {
        let m = ieee12();
        let mut s = PlantState::flat(&m);
        s.u_g.iter_mut().for_each(|u| *u = 0.0);
        s.u_l.iter_mut().for_each(|u| *u = 0.0);
        assert_eq!(hamiltonian(&m, &s, &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn kinetic_only_single_generator() {
        let m = single_gen();
        let s = PlantState { theta_diff: vec![], l_g: vec![2.0], l_i: vec![], u_g: vec![0.0], omega_l: vec![], u_l: vec![] };
        assert_eq!(hamiltonian(&m, &s, &[]).unwrap(), 1.0);
        let z = costate(&m, &s, &[]).unwrap();
        assert_eq!(z.l_g, vec![1.0]);
    }

    #[test]
    fn generator_voltage_at_rest_without_reactive_flow() {
        // q = -B_ii U² so a single generator is at rest when U_f = U - X B_ii U
        let m = single_gen();
        let s = PlantState { theta_diff: vec![], l_g: vec![0.0], l_i: vec![], u_g: vec![1.0], omega_l: vec![], u_l: vec![] };
        let mut input = zero_input(&m);
        input.u_f = vec![1.0 + 0.15];
        let d = dynamic_residual(&m, &s, &input).unwrap();
        assert!(d.u_g[0].abs() < 1e-15);
    }

    #[test]
    fn balanced_injection_holds_momentum() {
        let m = ieee12();
        let mut s = PlantState::flat(&m);
        s.theta_diff.iter_mut().enumerate().for_each(|(e, t)| *t = 0.01 * e as f64);
        let mut input = zero_input(&m);
        let p = powerflow::active_flow(&m, &s.profile(&input.u_i)).unwrap();
        input.p_gen = p[..4].to_vec();
        input.p_inv = p[4..8].to_vec();
        let d = dynamic_residual(&m, &s, &input).unwrap();
        assert!(d.l_g.iter().chain(&d.l_i).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn algebraic_residual_linear_in_omega() {
        let m = ieee12();
        let s = PlantState::flat(&m);
        let input = zero_input(&m);
        let r0 = algebraic_residual(&m, &s, &input).unwrap();
        let mut s2 = s.clone();
        s2.omega_l[1] += 0.25;
        let r1 = algebraic_residual(&m, &s2, &input).unwrap();
        let a = m.node(m.load_offset() + 1).damping();
        assert!((r1[1] - r0[1] + a * 0.25).abs() < 1e-14);
    }

    #[test]
    fn solve_algebraic_converges_and_is_idempotent() {
        let m = ieee12();
        let s = PlantState::flat(&m);
        let mut input = zero_input(&m);
        input.p_l[9] = 0.3;
        input.q_l[10] = 0.2;
        let sol = solve_algebraic(&m, &s, &input, &[1.0; 4], NewtonOptions::default()).unwrap();
        assert!(sol.iterations > 0 && sol.iterations <= 10);
        let mut s2 = s.clone();
        s2.u_l = sol.u_l.clone();
        s2.omega_l = sol.omega_l.clone();
        let r = algebraic_residual(&m, &s2, &input).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
        let again = solve_algebraic(&m, &s2, &input, &sol.u_l, NewtonOptions::default()).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn solve_algebraic_rejects_zero_guess() {
        let m = ieee12();
        let err = solve_algebraic(&m, &PlantState::flat(&m), &zero_input(&m), &[1.0, 0.0, 1.0, 1.0], NewtonOptions::default());
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn shifted_hamiltonian_quadratic_block() {
        let m = ieee12();
        let r = PlantState::flat(&m);
        let mut s = r.clone();
        s.l_g[2] = 0.7;
        s.l_g[2] += 0.0;
        let mut rr = r.clone();
        rr.l_g[2] = 0.2;
        let v = shifted_hamiltonian(&m, &s, &[1.0; 4], &rr, &[1.0; 4]).unwrap();
        let expect = 0.5 * 0.5 * 0.5 / m.dispatch_inertia()[2];
        assert!((v - expect).abs() < 1e-13);
        assert_eq!(shifted_hamiltonian(&m, &rr, &[1.0; 4], &rr, &[1.0; 4]).unwrap(), 0.0);
    }
}
