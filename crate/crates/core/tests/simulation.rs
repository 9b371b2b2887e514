use microgrid::netmodel::ieee12;
use microgrid::sim::{self, Scenario, IEEE12_SCENARIO};

fn first_step(horizon: f64) -> (microgrid::netmodel::NetworkModel, Scenario) {
    let model = ieee12();
    let mut s = sim::load_scenario(IEEE12_SCENARIO, &model).unwrap();
    s.events.retain(|e| e.t < horizon);
    s.horizon = horizon;
    s.dt = 0.002;
    s.record = 1.0;
    (model, s)
}

#[test]
fn duals_stay_nonnegative_through_a_step() {
    let (model, s) = first_step(450.0);
    let traj = sim::run(&model, &s).unwrap();
    let min = traj.samples.iter().map(|x| x.ctrl.min_dual()).fold(f64::INFINITY, f64::min);
    assert!(min >= 0.0, "min dual {min}");
}

#[test]
fn starts_at_rest_and_recovers_frequency() {
    let (model, s) = first_step(450.0);
    let traj = sim::run(&model, &s).unwrap();
    let first = &traj.samples[0];
    assert!(first.omega.iter().all(|w| w.abs() < 1e-9));
    let last = traj.samples.last().unwrap();
    assert!(last.omega.iter().all(|w| w.abs() < 1e-4), "{:?}", last.omega);
    // Balance: dispatch covers demand plus losses once settled.
    let demand: f64 = s.initial.p_l.iter().sum::<f64>() + 0.1;
    let gen: f64 = last.ctrl.p_g.iter().sum();
    assert!((gen - demand - last.phi).abs() < 1e-3, "gen {gen} demand {demand} losses {}", last.phi);
}
