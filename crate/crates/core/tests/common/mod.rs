#![allow(dead_code)]

use microgrid::controller::{Bounds, CostSpec};
use microgrid::equilibrium::{Demands, DispatchProblem};
use microgrid::netmodel::{
    CommSpec, GeneratorParams, InverterParams, LineSpec, LoadParams, NetworkModel, Node, NodeParams,
};
use microgrid::powerflow::PsiVariant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Connected network with `n` nodes: one or two generators, one or two
/// inverters, the rest loads. Lines form a random tree plus a few chords.
pub fn random_network(rng: &mut ChaCha8Rng, n: usize) -> NetworkModel {
    assert!(n >= 4);
    let ng = rng.random_range(1..=2);
    let ni = rng.random_range(1..=2);
    let mut pairs: Vec<(usize, usize)> = (1..n).map(|k| (rng.random_range(0..k), k)).collect();
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let (a, b) = (a.min(b), a.max(b));
        if a != b && !pairs.iter().any(|&(x, y)| (x.min(y), x.max(y)) == (a, b)) {
            pairs.push((a, b));
        }
    }
    let mut g_sum = vec![0.0; n];
    let mut b_sum = vec![0.0; n];
    let lines: Vec<LineSpec> = pairs
        .iter()
        .map(|&(a, b)| {
            let g = rng.random_range(0.1..0.5);
            let bb = rng.random_range(2.0..6.0);
            g_sum[a] += g;
            g_sum[b] += g;
            b_sum[a] += bb;
            b_sum[b] += bb;
            LineSpec { from: a as u32 + 1, to: b as u32 + 1, g: -g, b: bb }
        })
        .collect();
    let nodes = (0..n)
        .map(|i| {
            let g_self = g_sum[i] + rng.random_range(0.0..0.01);
            let b_self = -b_sum[i] - rng.random_range(0.0..0.1);
            let damping = rng.random_range(1.0..2.0);
            let params = if i < ng {
                let x_d_prime = rng.random_range(0.04..0.06);
                NodeParams::Generator(GeneratorParams {
                    damping,
                    inertia: rng.random_range(15.0..30.0),
                    x_d: x_d_prime + rng.random_range(0.1..0.15),
                    x_d_prime,
                    tau_u: rng.random_range(6.0..8.0),
                    g_self,
                    b_self,
                })
            } else if i < ng + ni {
                NodeParams::Inverter(InverterParams { damping, inertia: rng.random_range(3.0..6.0), g_self, b_self })
            } else {
                NodeParams::Load(LoadParams { damping, g_self, b_self })
            };
            Node { id: i as u32 + 1, params }
        })
        .collect();
    NetworkModel::new(nodes, lines, CommSpec::SameAsPhysical).expect("random network is valid")
}

/// Dispatch problem on `model` with random demands and a cap that may bind.
pub fn random_problem<'a>(rng: &mut ChaCha8Rng, model: &'a NetworkModel) -> DispatchProblem<'a> {
    let n = model.n_nodes();
    let nd = model.n_dispatch();
    // Loads get smaller demands so radial load chains stay clear of voltage collapse.
    let p_l: Vec<f64> = (0..n).map(|i| rng.random_range(0.0..if i < nd { 0.15 } else { 0.08 })).collect();
    let q_l: Vec<f64> = (0..n).map(|i| if i >= nd { rng.random_range(-0.1..0.1) } else { 0.0 }).collect();
    let total: f64 = p_l.iter().sum();
    let weights: Vec<f64> = (0..nd).map(|_| rng.random_range(1.0..2.0)).collect();
    // Feasible whenever losses stay below 15% of demand plus 0.03 per unit.
    let p_max = if rng.random_bool(0.5) { Some(1.15 * total / nd as f64 + 0.03) } else { None };
    DispatchProblem {
        network: model,
        cost: CostSpec::new(weights).unwrap(),
        bounds: Bounds { u_g_min: 0.95, u_g_max: 1.05, u_i_min: 0.95, u_i_max: 1.05, p_max },
        demands: Demands { p_l, q_l },
        psi: PsiVariant::Exact,
        u_g_hint: None,
    }
}
