//! AC power-flow maps and the quantities derived from them.
//!
//! Line parameters use the table convention (`B_ij > 0`, `G_ij < 0` for a
//! resistive-inductive line), so the nodal flows read
//!
//! ```text
//! p_i =  Σ_j B_ij U_i U_j sin ϑ_ij + G_ii U_i² + Σ_j G_ij U_i U_j cos ϑ_ij
//! q_i = -Σ_j B_ij U_i U_j cos ϑ_ij - B_ii U_i² + Σ_j G_ij U_i U_j sin ϑ_ij
//! ```
//!
//! The self-susceptance enters `q` with a minus sign: `B_ii` is stored as the
//! (negative) diagonal of the susceptance matrix, so a flat, unloaded profile
//! carries no reactive flow.

use crate::error::{check_len, Result};
use crate::netmodel::{NetworkModel, NodeKind};

/// Voltage magnitudes per node and angle differences per physical edge.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltagePhaseProfile {
    pub u: Vec<f64>,
    /// `theta_from - theta_to` for each line, in line order.
    pub theta_diff: Vec<f64>,
}

impl VoltagePhaseProfile {
    pub fn flat(model: &NetworkModel) -> Self {
        Self { u: vec![1.0; model.n_nodes()], theta_diff: vec![0.0; model.n_lines()] }
    }

    /// Builds the edge angle differences from absolute nodal angles.
    pub fn from_angles(model: &NetworkModel, u: Vec<f64>, theta: &[f64]) -> Self {
        let theta_diff = model.lines().iter().map(|l| theta[l.from] - theta[l.to]).collect();
        Self { u, theta_diff }
    }

    fn check(&self, model: &NetworkModel) -> Result<()> {
        check_len("voltage profile", model.n_nodes(), self.u.len())?;
        check_len("angle differences", model.n_lines(), self.theta_diff.len())
    }
}

/// How the excitation bounds treat inverter voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiVariant {
    /// Use live inverter voltages.
    Exact,
    /// Substitute a fixed inverter voltage estimate (typically the midpoint
    /// of the inverter voltage band).
    Hat { estimate: f64 },
}

/// Per-neighbor sums `Σ_j U_j cos ϑ_ij` weighted by `B_ij` and `G_ij`, and the
/// same with `sin`. Returned as `(b_cos, b_sin, g_cos, g_sin)`.
fn neighbor_sums(model: &NetworkModel, p: &VoltagePhaseProfile, i: usize) -> (f64, f64, f64, f64) {
    let mut acc = (0.0, 0.0, 0.0, 0.0);
    for nb in model.neighbors(i) {
        let line = &model.lines()[nb.edge];
        let th = nb.sign * p.theta_diff[nb.edge];
        let (s, c) = th.sin_cos();
        let uj = p.u[nb.node];
        acc.0 += line.b * uj * c;
        acc.1 += line.b * uj * s;
        acc.2 += line.g * uj * c;
        acc.3 += line.g * uj * s;
    }
    acc
}

pub fn active_flow(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Result<Vec<f64>> {
    profile.check(model)?;
    Ok((0..model.n_nodes())
        .map(|i| {
            let (_, b_sin, g_cos, _) = neighbor_sums(model, profile, i);
            let ui = profile.u[i];
            ui * b_sin + model.node(i).g_self() * ui * ui + ui * g_cos
        })
        .collect())
}

pub fn reactive_flow(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Result<Vec<f64>> {
    profile.check(model)?;
    Ok((0..model.n_nodes())
        .map(|i| {
            let (b_cos, _, _, g_sin) = neighbor_sums(model, profile, i);
            let ui = profile.u[i];
            -ui * b_cos - model.node(i).b_self() * ui * ui + ui * g_sin
        })
        .collect())
}

/// Resistive part of the active flow, `φ_i = G_ii U_i² + Σ_j G_ij U_i U_j cos ϑ_ij`.
pub fn loss_vector(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Result<Vec<f64>> {
    profile.check(model)?;
    Ok((0..model.n_nodes())
        .map(|i| {
            let (_, _, g_cos, _) = neighbor_sums(model, profile, i);
            let ui = profile.u[i];
            model.node(i).g_self() * ui * ui + ui * g_cos
        })
        .collect())
}

/// Total transmission losses `Φ = 1ᵀφ`.
pub fn loss_total(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Result<f64> {
    Ok(loss_vector(model, profile)?.iter().sum())
}

/// Resistive reactive terms that appear as dissipation in the voltage and
/// load equations, returned as `(ϱ_G, ϱ_L)`:
///
/// ```text
/// ϱ_G,i = R_g,i Σ_j G_ij U_j sin ϑ_ij      R_g = (X_d - X'_d) / τ_U
/// ϱ_L,i =       Σ_j G_ij U_i U_j sin ϑ_ij
/// ```
///
/// The generator entry carries no `U_i` factor because the voltage equation
/// divides the reactive flow by `U_i`.
pub fn rho_vector(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Result<(Vec<f64>, Vec<f64>)> {
    profile.check(model)?;
    let rho_g = (0..model.n_gen())
        .map(|i| {
            let (_, _, _, g_sin) = neighbor_sums(model, profile, i);
            model.generator(i).voltage_resistance() * g_sin
        })
        .collect();
    let rho_l = (model.load_offset()..model.n_nodes())
        .map(|i| {
            let (_, _, _, g_sin) = neighbor_sums(model, profile, i);
            profile.u[i] * g_sin
        })
        .collect();
    Ok((rho_g, rho_l))
}

fn neighbor_voltage(model: &NetworkModel, profile: &VoltagePhaseProfile, j: usize, variant: PsiVariant) -> f64 {
    match variant {
        PsiVariant::Hat { estimate } if model.node(j).kind() == NodeKind::Inverter => estimate,
        _ => profile.u[j],
    }
}

/// Steady-state excitation voltage required to hold each generator's internal
/// voltage at `u_g`, given the neighbor voltages and angles in `profile`:
///
/// ```text
/// Ψ_i(u) = u (1 - B_ii X_i) + X_i Σ_j U_j (G_ij sin ϑ_ij - B_ij cos ϑ_ij)
/// ```
///
/// with `X_i = X_d,i - X'_d,i`. The map is affine and strictly increasing in
/// `u` because `B_ii < 0`.
pub fn psi_map(model: &NetworkModel, profile: &VoltagePhaseProfile, u_g: &[f64]) -> Result<Vec<f64>> {
    psi_variant_map(model, profile, u_g, PsiVariant::Exact)
}

/// [`psi_map`] with every inverter neighbor voltage replaced by `estimate`.
pub fn psi_hat_map(model: &NetworkModel, profile: &VoltagePhaseProfile, u_g: &[f64], estimate: f64) -> Result<Vec<f64>> {
    psi_variant_map(model, profile, u_g, PsiVariant::Hat { estimate })
}

pub fn psi_variant_map(model: &NetworkModel, profile: &VoltagePhaseProfile, u_g: &[f64], variant: PsiVariant) -> Result<Vec<f64>> {
    profile.check(model)?;
    check_len("generator voltages", model.n_gen(), u_g.len())?;
    Ok((0..model.n_gen())
        .map(|i| {
            let gen = model.generator(i);
            let x = gen.reactance_gap();
            let coupling: f64 = model
                .neighbors(i)
                .iter()
                .map(|nb| {
                    let line = &model.lines()[nb.edge];
                    let (s, c) = (nb.sign * profile.theta_diff[nb.edge]).sin_cos();
                    neighbor_voltage(model, profile, nb.node, variant) * (line.g * s - line.b * c)
                })
                .sum();
            u_g[i] * psi_slope(model, i) + x * coupling
        })
        .collect())
}

/// `∂Ψ_i/∂u = 1 - B_ii (X_d - X'_d)`.
pub fn psi_slope(model: &NetworkModel, gen: usize) -> f64 {
    let g = model.generator(gen);
    1.0 - g.b_self * g.reactance_gap()
}

/// Jacobian of the excitation bound vector with respect to inverter
/// voltages, `n_G × n_I` in row-major order. Identically zero for
/// [`PsiVariant::Hat`].
pub fn psi_grad_inverters(model: &NetworkModel, profile: &VoltagePhaseProfile, variant: PsiVariant) -> Vec<Vec<f64>> {
    let mut jac = vec![vec![0.0; model.n_inv()]; model.n_gen()];
    if matches!(variant, PsiVariant::Hat { .. }) {
        return jac;
    }
    let off = model.inv_offset();
    for (i, row) in jac.iter_mut().enumerate() {
        let x = model.generator(i).reactance_gap();
        for nb in model.neighbors(i) {
            if model.node(nb.node).kind() != NodeKind::Inverter {
                continue;
            }
            let line = &model.lines()[nb.edge];
            let (s, c) = (nb.sign * profile.theta_diff[nb.edge]).sin_cos();
            row[nb.node - off] += x * (line.g * s - line.b * c);
        }
    }
    jac
}

/// Jacobian of the loss vector `φ` with respect to inverter voltages,
/// `n × n_I` in row-major order.
pub fn loss_grad_inverters(model: &NetworkModel, profile: &VoltagePhaseProfile) -> Vec<Vec<f64>> {
    let n = model.n_nodes();
    let off = model.inv_offset();
    let mut jac = vec![vec![0.0; model.n_inv()]; n];
    for k in 0..model.n_inv() {
        let node = off + k;
        let uk = profile.u[node];
        let mut own = 2.0 * model.node(node).g_self() * uk;
        for nb in model.neighbors(node) {
            let line = &model.lines()[nb.edge];
            let c = (nb.sign * profile.theta_diff[nb.edge]).cos();
            own += line.g * profile.u[nb.node] * c;
            jac[nb.node][k] += line.g * profile.u[nb.node] * c;
        }
        jac[node][k] += own;
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{
        ieee12, CommSpec, GeneratorParams, InverterParams, LineSpec, LoadParams, Node, NodeParams,
    };
    use std::f64::consts::PI;

    fn gen(id: u32, g_self: f64, b_self: f64, x: f64) -> Node {
        Node {
            id,
            params: NodeParams::Generator(GeneratorParams {
                damping: 1.0,
                inertia: 1.0,
                x_d: x + 0.05,
                x_d_prime: 0.05,
                tau_u: 1.0,
                g_self,
                b_self,
            }),
        }
    }

    fn load(id: u32, b_self: f64) -> Node {
        Node { id, params: NodeParams::Load(LoadParams { damping: 1.0, g_self: 0.0, b_self }) }
    }

    fn inv(id: u32) -> Node {
        Node { id, params: NodeParams::Inverter(InverterParams { damping: 1.0, inertia: 1.0, g_self: 0.0, b_self: -1.0 }) }
    }

    fn two_node(g: f64, b: f64) -> NetworkModel {
        NetworkModel::new(
            vec![gen(1, 0.0, -1.0, 1.0), load(2, -1.0)],
            vec![LineSpec { from: 1, to: 2, g, b }],
            CommSpec::SameAsPhysical,
        )
        .unwrap()
    }

    #[test]
    fn active_flow_two_node() {
        let m = two_node(0.0, 1.0);
        let p = active_flow(&m, &VoltagePhaseProfile { u: vec![1.0, 1.0], theta_diff: vec![PI / 6.0] }).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn flat_lossless_has_no_active_flow() {
        let m = two_node(0.0, 1.0);
        let p = active_flow(&m, &VoltagePhaseProfile::flat(&m)).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn reactive_flow_two_node_balanced() {
        let m = two_node(0.0, 1.0);
        let q = reactive_flow(&m, &VoltagePhaseProfile::flat(&m)).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1e-15), "{q:?}");
    }

    #[test]
    fn reactive_flow_isolated_node() {
        let m = NetworkModel::new(vec![load(1, -1.0)], vec![], CommSpec::SameAsPhysical).unwrap();
        let q = reactive_flow(&m, &VoltagePhaseProfile { u: vec![1.0], theta_diff: vec![] }).unwrap();
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn single_node_loss() {
        let m = NetworkModel::new(vec![gen(1, 2.0, -1.0, 0.1)], vec![], CommSpec::SameAsPhysical).unwrap();
        let prof = VoltagePhaseProfile { u: vec![1.0], theta_diff: vec![] };
        assert_eq!(loss_vector(&m, &prof).unwrap(), vec![2.0]);
        assert_eq!(loss_total(&m, &prof).unwrap(), 2.0);
    }

    #[test]
    fn rho_two_node() {
        // R_g = X / tau_U = 0.01
        let m = two_node(-1.0, 1.0);
        let prof = VoltagePhaseProfile { u: vec![1.0, 1.0], theta_diff: vec![PI / 2.0] };
        let (rg, rl) = rho_vector(&m, &prof).unwrap();
        let x = m.generator(0).voltage_resistance();
        assert!((rg[0] + x).abs() < 1e-15);
        assert!((rl[0] - 1.0).abs() < 1e-15);
        let m2 = NetworkModel::new(
            vec![
                Node {
                    id: 1,
                    params: NodeParams::Generator(GeneratorParams {
                        damping: 1.0,
                        inertia: 1.0,
                        x_d: 0.06,
                        x_d_prime: 0.05,
                        tau_u: 1.0,
                        g_self: 0.0,
                        b_self: -1.0,
                    }),
                },
                load(2, -1.0),
            ],
            vec![LineSpec { from: 1, to: 2, g: -1.0, b: 1.0 }],
            CommSpec::SameAsPhysical,
        )
        .unwrap();
        let (rg, _) = rho_vector(&m2, &prof).unwrap();
        assert!((rg[0] + 0.01).abs() < 1e-12);
    }

    #[test]
    fn psi_example_one_neighbor() {
        let m = NetworkModel::new(
            vec![gen(1, 0.0, 0.0 - 1e-300, 1.0), load(2, -1.0)],
            vec![LineSpec { from: 1, to: 2, g: 0.0, b: 1.0 }],
            CommSpec::SameAsPhysical,
        )
        .unwrap();
        let prof = VoltagePhaseProfile::flat(&m);
        let psi = psi_map(&m, &prof, &[1.0]).unwrap();
        assert!(psi[0].abs() < 1e-12);
        let psi = psi_map(&m, &prof, &[1.5]).unwrap();
        assert!((psi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psi_isolated_is_affine_identity() {
        let m = NetworkModel::new(vec![gen(1, 0.0, -1e-300, 0.3)], vec![], CommSpec::SameAsPhysical).unwrap();
        let prof = VoltagePhaseProfile { u: vec![1.0], theta_diff: vec![] };
        for u in [0.5, 1.0, 1.3] {
            assert!((psi_map(&m, &prof, &[u]).unwrap()[0] - u).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_slope_ieee12_node1() {
        let m = ieee12();
        let expected = 1.0 + 6.0567 * (0.15 - 0.055);
        assert!((psi_slope(&m, 0) - expected).abs() < 1e-12);
        let prof = VoltagePhaseProfile::flat(&m);
        let a = psi_map(&m, &prof, &[1.0; 4]).unwrap();
        let b = psi_map(&m, &prof, &[1.1; 4]).unwrap();
        assert!(((b[0] - a[0]) / 0.1 - expected).abs() < 1e-9);
    }

    #[test]
    fn psi_hat_ignores_inverter_voltages() {
        let m = ieee12();
        let mut prof = VoltagePhaseProfile::flat(&m);
        prof.theta_diff.iter_mut().enumerate().for_each(|(e, t)| *t = 0.01 * e as f64);
        let base = psi_hat_map(&m, &prof, &[1.0; 4], 1.0).unwrap();
        for k in 4..8 {
            prof.u[k] += 0.03;
        }
        assert_eq!(base, psi_hat_map(&m, &prof, &[1.0; 4], 1.0).unwrap());
        assert_ne!(base, psi_map(&m, &prof, &[1.0; 4]).unwrap());
        // with inverters at the estimate both maps agree
        for k in 4..8 {
            prof.u[k] = 1.0;
        }
        let exact = psi_map(&m, &prof, &[1.0; 4]).unwrap();
        for (a, b) in base.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn psi_hat_without_inverter_neighbors_matches_exact() {
        let m = two_node(-0.3, 1.0);
        let prof = VoltagePhaseProfile { u: vec![1.0, 0.97], theta_diff: vec![0.1] };
        assert_eq!(psi_map(&m, &prof, &[1.0]).unwrap(), psi_hat_map(&m, &prof, &[1.0], 1.0).unwrap());
    }

    fn fd_check(m: &NetworkModel, prof: &VoltagePhaseProfile) {
        let h = 1e-6;
        let jp = psi_grad_inverters(m, prof, PsiVariant::Exact);
        let jl = loss_grad_inverters(m, prof);
        let off = m.inv_offset();
        let ug: Vec<f64> = prof.u[..m.n_gen()].to_vec();
        for k in 0..m.n_inv() {
            let mut a = prof.clone();
            let mut b = prof.clone();
            a.u[off + k] += h;
            b.u[off + k] -= h;
            let pa = psi_map(m, &a, &ug).unwrap();
            let pb = psi_map(m, &b, &ug).unwrap();
            for i in 0..m.n_gen() {
                assert!(((pa[i] - pb[i]) / (2.0 * h) - jp[i][k]).abs() < 1e-7);
            }
            let la = loss_vector(m, &a).unwrap();
            let lb = loss_vector(m, &b).unwrap();
            for i in 0..m.n_nodes() {
                assert!(((la[i] - lb[i]) / (2.0 * h) - jl[i][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn inverter_gradients_match_finite_differences() {
        let m = ieee12();
        let mut prof = VoltagePhaseProfile::flat(&m);
        for (i, u) in prof.u.iter_mut().enumerate() {
            *u = 0.97 + 0.005 * i as f64;
        }
        for (e, t) in prof.theta_diff.iter_mut().enumerate() {
            *t = 0.02 * (e as f64 - 6.0);
        }
        fd_check(&m, &prof);
        let m = NetworkModel::new(
            vec![gen(1, 0.5, -2.0, 0.1), inv(2), load(3, -1.0)],
            vec![LineSpec { from: 2, to: 1, g: -0.4, b: 1.0 }, LineSpec { from: 2, to: 3, g: -0.2, b: 1.0 }],
            CommSpec::SameAsPhysical,
        )
        .unwrap();
        fd_check(&m, &VoltagePhaseProfile { u: vec![1.01, 0.99, 0.98], theta_diff: vec![0.2, -0.1] });
    }
}
