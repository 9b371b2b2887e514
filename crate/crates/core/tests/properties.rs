mod common;

use microgrid::analysis;
use microgrid::controller::{self, project, project_dual, CostSpec};
use microgrid::equilibrium::{self, SolveOptions};
use microgrid::netmodel::NetworkModel;
use microgrid::plant::{self, PlantState};
use microgrid::powerflow::{self, PsiVariant, VoltagePhaseProfile};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn model_from(seed: u64, n: usize) -> (NetworkModel, ChaCha8Rng) {
    let mut rng = common::rng(seed);
    let m = common::random_network(&mut rng, n);
    (m, rng)
}

fn vec_in(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_profile(m: &NetworkModel, rng: &mut ChaCha8Rng) -> VoltagePhaseProfile {
    VoltagePhaseProfile { u: vec_in(rng, m.n_nodes(), 0.9, 1.1), theta_diff: vec_in(rng, m.n_lines(), -0.4, 0.4) }
}

fn random_state(m: &NetworkModel, rng: &mut ChaCha8Rng) -> (PlantState, Vec<f64>) {
    let s = PlantState {
        theta_diff: vec_in(rng, m.n_lines(), -0.4, 0.4),
        l_g: vec_in(rng, m.n_gen(), -1.0, 1.0),
        l_i: vec_in(rng, m.n_inv(), -1.0, 1.0),
        u_g: vec_in(rng, m.n_gen(), 0.9, 1.1),
        omega_l: vec_in(rng, m.n_load(), -0.1, 0.1),
        u_l: vec_in(rng, m.n_load(), 0.9, 1.1),
    };
    let u_i = vec_in(rng, m.n_inv(), 0.9, 1.1);
    (s, u_i)
}

fn jitter(v: &[f64], rng: &mut ChaCha8Rng, eps: f64) -> Vec<f64> {
    v.iter().map(|x| x + rng.random_range(-eps..eps)).collect()
}

fn flat(s: &PlantState, u_i: &[f64]) -> Vec<f64> {
    let mut x = s.to_vec();
    x.extend_from_slice(u_i);
    x
}

fn unflat(m: &NetworkModel, x: &[f64]) -> (PlantState, Vec<f64>) {
    let mut it = x.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let s = PlantState {
        theta_diff: take(m.n_lines()),
        l_g: take(m.n_gen()),
        l_i: take(m.n_inv()),
        u_g: take(m.n_gen()),
        omega_l: take(m.n_load()),
        u_l: take(m.n_load()),
    };
    let u_i = take(m.n_inv());
    (s, u_i)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injections_sum_to_losses(seed in any::<u64>(), n in 4usize..10) {
        let (m, mut rng) = model_from(seed, n);
        let prof = random_profile(&m, &mut rng);
        let p = powerflow::active_flow(&m, &prof).unwrap();
        let phi = powerflow::loss_total(&m, &prof).unwrap();
        let scale = p.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!((p.iter().sum::<f64>() - phi).abs() <= 1e-12 * scale);
    }

    #[test]
    fn lossless_network_has_no_losses(seed in any::<u64>(), n in 4usize..10) {
        let (m, mut rng) = model_from(seed, n);
        let ll = m.lossless();
        let prof = random_profile(&ll, &mut rng);
        prop_assert!(powerflow::loss_total(&ll, &prof).unwrap().abs() < 1e-14);
    }

    #[test]
    fn costate_matches_finite_differences(seed in any::<u64>(), n in 4usize..9) {
        let (m, mut rng) = model_from(seed, n);
        let (s, u_i) = random_state(&m, &mut rng);
        let mut grad = plant::costate(&m, &s, &u_i).unwrap().to_vec();
        grad.extend(plant::hamiltonian_grad_inverter_voltage(&m, &s, &u_i));
        let x = flat(&s, &u_i);
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let (sp, up) = unflat(&m, &xp);
            let (sm, um) = unflat(&m, &xm);
            let fd = (plant::hamiltonian(&m, &sp, &up).unwrap() - plant::hamiltonian(&m, &sm, &um).unwrap()) / (2.0 * h);
            prop_assert!((fd - grad[k]).abs() <= 1e-6 * grad[k].abs().max(1.0), "entry {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn projection_keeps_duals_nonnegative(x in -10.0f64..10.0, mu in prop_oneof![Just(0.0), 0.0f64..5.0]) {
        let y = project(x, mu);
        prop_assert!(y == x || y == 0.0);
        if mu == 0.0 {
            prop_assert!(y >= 0.0);
        } else {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn project_dual_rejects_negative_duals(x in -1.0f64..1.0, mu in -5.0f64..-1e-9) {
        prop_assert!(project_dual(&[x], &[mu]).is_err());
    }

    #[test]
    fn psi_hat_ignores_inverter_voltages(seed in any::<u64>(), n in 4usize..10, est in 0.9f64..1.1) {
        let (m, mut rng) = model_from(seed, n);
        let prof = random_profile(&m, &mut rng);
        let u_g = vec_in(&mut rng, m.n_gen(), 0.9, 1.1);
        let base = powerflow::psi_hat_map(&m, &prof, &u_g, est).unwrap();
        let mut other = prof.clone();
        for k in 0..m.n_inv() {
            other.u[m.inv_offset() + k] = rng.random_range(0.5..1.5);
        }
        let moved = powerflow::psi_hat_map(&m, &other, &u_g, est).unwrap();
        prop_assert_eq!(base, moved);
        let grad = powerflow::psi_grad_inverters(&m, &prof, PsiVariant::Hat { estimate: est });
        prop_assert!(grad.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn lossless_plant_is_monotone(seed in any::<u64>(), n in 4usize..9) {
        let (m, mut rng) = model_from(seed, n);
        let ll = m.lossless();
        let (a, ua) = random_state(&ll, &mut rng);
        let (b, ub) = random_state(&ll, &mut rng);
        let r = analysis::plant_passivity_residual(&ll, &a, &ua, &b, &ub).unwrap();
        prop_assert!(r >= -analysis::BOUNDARY_TOL, "residual {r}");
    }

    #[test]
    fn lossless_frequency_controller_is_monotone(seed in any::<u64>(), nd in 1usize..6) {
        let mut rng = common::rng(seed);
        let cost = CostSpec::new(vec_in(&mut rng, nd, 0.5, 3.0)).unwrap();
        let zero = vec![0.0; nd + 2];
        let (p, ps) = (vec_in(&mut rng, nd, -1.0, 1.0), vec_in(&mut rng, nd, -1.0, 1.0));
        let (l, ls) = (vec_in(&mut rng, nd + 2, -1.0, 1.0), vec_in(&mut rng, nd + 2, -1.0, 1.0));
        let r = analysis::freq_controller_passivity_residual(&cost, &p, &l, &zero, &ps, &ls, &zero).unwrap();
        prop_assert!(r >= -analysis::BOUNDARY_TOL, "residual {r}");
    }

    #[test]
    fn residuals_vanish_at_the_reference(seed in any::<u64>(), n in 4usize..9) {
        let (m, mut rng) = model_from(seed, n);
        let (s, u_i) = random_state(&m, &mut rng);
        prop_assert_eq!(analysis::plant_passivity_residual(&m, &s, &u_i, &s, &u_i).unwrap(), 0.0);
        let mu = vec_in(&mut rng, m.n_inv(), 0.0, 1.0);
        prop_assert_eq!(analysis::corollary6_residual(&m, &s, &u_i, &s, &u_i, &mu, &mu).unwrap(), 0.0);
        prop_assert_eq!(plant::shifted_hamiltonian(&m, &s, &u_i, &s, &u_i).unwrap(), 0.0);
    }

    #[test]
    fn water_fill_matches_bisection(
        weights in prop::collection::vec(0.5f64..3.0, 1..8),
        frac in 0.05f64..0.95,
        capped in any::<bool>(),
    ) {
        let nd = weights.len();
        let p_max = if capped { Some(0.6) } else { None };
        let total = frac * 0.6 * nd as f64;
        let (p, c) = equilibrium::water_fill(&weights, total, p_max).unwrap();
        // Independent oracle: bisection on the marginal cost.
        let served = |c: f64| -> f64 { weights.iter().map(|w| (c * w).min(p_max.unwrap_or(f64::INFINITY))).sum() };
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if served(mid) < total { lo = mid } else { hi = mid }
        }
        let c_ref = 0.5 * (lo + hi);
        prop_assert!((p.iter().sum::<f64>() - total).abs() < 1e-12);
        for (k, w) in weights.iter().enumerate() {
            let expect = (c_ref * w).min(p_max.unwrap_or(f64::INFINITY));
            prop_assert!((p[k] - expect).abs() < 1e-9, "unit {k}: {} vs {expect}", p[k]);
        }
        if p.iter().any(|&v| p_max.is_none_or(|pm| v < pm - 1e-12)) {
            prop_assert!((c - c_ref).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dispatch_balances_demand_and_losses(seed in any::<u64>(), n in 4usize..8) {
        let (m, mut rng) = model_from(seed, n);
        let prob = common::random_problem(&mut rng, &m);
        let sol = equilibrium::solve_op(&prob, &SolveOptions::default()).unwrap();
        let demand: f64 = prob.demands.p_l.iter().sum();
        prop_assert!((sol.p_g.iter().sum::<f64>() - demand - sol.losses).abs() < 1e-8);
        // Water-fill structure: every uncapped unit sits at price times weight.
        let cap = prob.bounds.p_max.unwrap_or(f64::INFINITY);
        for (k, w) in prob.cost.weights.iter().enumerate() {
            let expect = (sol.price * w).min(cap);
            prop_assert!((sol.p_g[k] - expect).abs() < 1e-8, "unit {k}: {} vs {expect}", sol.p_g[k]);
        }
        prop_assert!(sol.u_i.iter().all(|&u| (prob.bounds.u_i_min - 1e-9..=prob.bounds.u_i_max + 1e-9).contains(&u)));
    }

    #[test]
    fn both_oracles_agree(seed in any::<u64>(), n in 4usize..8) {
        let (m, mut rng) = model_from(seed, n);
        let prob = common::random_problem(&mut rng, &m);
        let opts = SolveOptions::default();
        let sharp = equilibrium::solve_op_sharp(&prob, &opts).unwrap();
        let op = equilibrium::solve_op(&prob, &opts).unwrap();
        prop_assert!((sharp.cost - op.cost).abs() <= 1e-6 * sharp.cost.abs().max(1e-12));
        let kkt = equilibrium::kkt_residual(&prob, &sharp).unwrap();
        prop_assert!(kkt.max() < 1e-8, "kkt {}", kkt.max());
        for d in [&sharp.mu_g_minus, &sharp.mu_g_plus, &sharp.mu_i_minus, &sharp.mu_i_plus] {
            prop_assert!(d.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn shifted_energy_is_positive_near_equilibrium(seed in any::<u64>(), n in 4usize..8) {
        let (m, mut rng) = model_from(seed, n);
        let prob = common::random_problem(&mut rng, &m);
        let star = equilibrium::solve_op_sharp(&prob, &SolveOptions::default()).unwrap();
        let r = &star.plant;
        let s = PlantState {
            theta_diff: jitter(&r.theta_diff, &mut rng, 0.02),
            l_g: jitter(&r.l_g, &mut rng, 0.02),
            l_i: jitter(&r.l_i, &mut rng, 0.02),
            u_g: jitter(&r.u_g, &mut rng, 0.02),
            omega_l: jitter(&r.omega_l, &mut rng, 0.02),
            u_l: jitter(&r.u_l, &mut rng, 0.02),
        };
        let h = plant::shifted_hamiltonian(&m, &s, &star.u_i, r, &star.u_i).unwrap();
        prop_assert!(h > 0.0, "shifted energy {h}");
    }
}

#[test]
fn frequency_controller_rest_point_at_equilibrium() {
    let mut rng = common::rng(11);
    let m = common::random_network(&mut rng, 6);
    let prob = common::random_problem(&mut rng, &m);
    let star = equilibrium::solve_op_sharp(&prob, &SolveOptions::default()).unwrap();
    let ctrl = star.controller_state();
    let phi = powerflow::loss_vector(&m, &star.profile()).unwrap();
    let gains = controller::ControllerGains::default();
    let d = controller::freq_controller_rhs(
        &m,
        &prob.cost,
        &gains,
        &prob.bounds,
        &ctrl,
        &vec![0.0; m.n_dispatch()],
        &phi,
        &prob.demands.p_l,
    )
    .unwrap();
    let worst = d.p_g.iter().chain(&d.lambda).chain(&d.nu).chain(&d.mu_p_plus).fold(0.0_f64, |a, v| a.max(v.abs()));
    assert!(worst < 1e-8, "controller drift {worst}");
}
