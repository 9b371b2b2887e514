//! Closed-loop simulation over a schedule of demand steps.
//!
//! Dynamic states of plant and controller are integrated with classic RK4 at a
//! fixed step. The load equations are closed by Newton at every stage, warm
//! started from the previous stage. Integration restarts at each demand step
//! so the demand vector changes exactly at the event time.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::controller::{Bounds, ControllerGains, ControllerState, CostSpec};
use crate::equilibrium::{self, Demands, DispatchProblem, KktPoint, SolveOptions};
use crate::error::{check_len, Error, Result};
use crate::netmodel::{NetworkModel, NodeKind};
use crate::plant::{self, NewtonOptions, PlantState};
use crate::powerflow::PsiVariant;

/// Frequency base for converting per-unit deviations to Hz.
pub const F_BASE_HZ: f64 = 50.0;

/// Voltage below which a run is aborted.
pub const VOLTAGE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Active,
    Reactive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    /// Canonical node index.
    pub node: usize,
    pub quantity: Quantity,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial: Demands,
    /// Preferred initial generator voltages for the starting equilibrium.
    pub initial_u_g: Option<Vec<f64>>,
    pub events: Vec<Event>,
    pub horizon: f64,
    pub dt: f64,
    pub record: f64,
    pub gains: ControllerGains,
    pub cost: CostSpec,
    pub bounds: Bounds,
    pub hat: bool,
}

impl Scenario {
    pub fn psi_variant(&self) -> PsiVariant {
        self.bounds.psi_variant(self.hat)
    }

    pub fn validate(&self, model: &NetworkModel) -> Result<()> {
        check_len("initial p_l", model.n_nodes(), self.initial.p_l.len())?;
        check_len("initial q_l", model.n_nodes(), self.initial.q_l.len())?;
        check_len("cost weights", model.n_dispatch(), self.cost.weights.len())?;
        self.gains.validate()?;
        self.bounds.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invariant("step size must be positive"));
        }
        if !(self.record >= self.dt) {
            return Err(Error::invariant("record interval must be at least the step size"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invariant("horizon must be positive"));
        }
        let mut last = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if !(e.t > last && e.t < self.horizon) {
                return Err(Error::invariant(format!(
                    "event {k} at t = {}: times must be strictly increasing and inside (0, horizon)",
                    e.t
                )));
            }
            if e.node >= model.n_nodes() {
                return Err(Error::invariant(format!("event {k}: node index out of range")));
            }
            last = e.t;
        }
        Ok(())
    }

    /// Demand levels: the initial one followed by the level after each event.
    pub fn demand_levels(&self) -> Vec<Demands> {
        let mut d = self.initial.clone();
        let mut out = vec![d.clone()];
        for e in &self.events {
            apply_event(&mut d, e);
            out.push(d.clone());
        }
        out
    }

    /// Window boundaries `[0, t_1, ..., t_k, horizon]`.
    pub fn window_edges(&self) -> Vec<f64> {
        let mut w = vec![0.0];
        w.extend(self.events.iter().map(|e| e.t));
        w.push(self.horizon);
        w
    }

    pub fn problem<'a>(&self, model: &'a NetworkModel, demands: Demands, u_g_hint: Option<Vec<f64>>) -> DispatchProblem<'a> {
        DispatchProblem {
            network: model,
            cost: self.cost.clone(),
            bounds: self.bounds,
            demands,
            psi: self.psi_variant(),
            u_g_hint,
        }
    }
}

fn apply_event(d: &mut Demands, e: &Event) {
    match e.quantity {
        Quantity::Active => d.p_l[e.node] += e.delta,
        Quantity::Reactive => d.q_l[e.node] += e.delta,
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    horizon: f64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_record")]
    record: f64,
    #[serde(default = "default_psi")]
    psi: String,
    limits: LimitsFile,
    cost: CostFile,
    #[serde(default)]
    gains: Option<ControllerGains>,
    #[serde(default)]
    initial: InitialFile,
    #[serde(default, rename = "event")]
    events: Vec<EventFile>,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_record() -> f64 {
    0.1
}
fn default_psi() -> String {
    "exact".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LimitsFile {
    u_g: [f64; 2],
    u_i: [f64; 2],
    p_max: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    weights: Vec<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    #[serde(default)]
    p_l: BTreeMap<String, f64>,
    #[serde(default)]
    q_l: BTreeMap<String, f64>,
    u_g: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EventFile {
    t: f64,
    node: u32,
    quantity: String,
    delta: f64,
}

/// Parses a scenario description against a network.
///
/// ```text
/// horizon = 1800.0
/// dt = 0.001              # optional, seconds
/// record = 0.1            # optional, seconds
/// psi = "exact"           # or "hat"
///
/// [limits]
/// u_g = [0.98, 1.02]
/// u_i = [0.98, 1.02]
/// p_max = 0.6             # optional
///
/// [cost]
/// weights = [1.0, 1.1]    # one per generator/inverter, canonical order
///
/// [gains]                 # optional, all eight time constants
///
/// [initial]
/// u_g = [1.0, 1.0]        # optional generator voltage preference
/// p_l = { "9" = 0.3 }     # keyed by node id
/// q_l = { "10" = 0.1 }
///
/// [[event]]
/// t = 250.0
/// node = 9
/// quantity = "active"     # or "reactive"
/// delta = 0.1
/// ```
pub fn load_scenario(text: &str, model: &NetworkModel) -> Result<Scenario> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse {
        location: e
            .span()
            .map(|s| format!("line {}", text[..s.start.min(text.len())].matches('\n').count() + 1))
            .unwrap_or_else(|| "scenario".into()),
        message: e.message().to_string(),
    })?;
    let node_index = |key: &str, loc: &str| -> Result<usize> {
        let id: u32 = key.parse().map_err(|_| Error::parse(loc, format!("bad node id {key:?}")))?;
        model.index_of(id).ok_or_else(|| Error::parse(loc, format!("unknown node {id}")))
    };
    let n = model.n_nodes();
    let mut initial = Demands::zeros(n);
    for (k, v) in &f.initial.p_l {
        initial.p_l[node_index(k, "initial.p_l")?] = *v;
    }
    for (k, v) in &f.initial.q_l {
        initial.q_l[node_index(k, "initial.q_l")?] = *v;
    }
    let mut events = Vec::with_capacity(f.events.len());
    for (k, e) in f.events.iter().enumerate() {
        let loc = format!("event[{k}]");
        let quantity = match e.quantity.as_str() {
            "active" => Quantity::Active,
            "reactive" => Quantity::Reactive,
            other => return Err(Error::parse(&loc, format!("unknown quantity {other:?}"))),
        };
        events.push(Event { t: e.t, node: node_index(&e.node.to_string(), &loc)?, quantity, delta: e.delta });
    }
    let hat = match f.psi.as_str() {
        "exact" => false,
        "hat" => true,
        other => return Err(Error::parse("psi", format!("expected \"exact\" or \"hat\", got {other:?}"))),
    };
    let s = Scenario {
        initial,
        initial_u_g: f.initial.u_g,
        events,
        horizon: f.horizon,
        dt: f.dt,
        record: f.record,
        gains: f.gains.unwrap_or_default(),
        cost: CostSpec::new(f.cost.weights)?,
        bounds: Bounds {
            u_g_min: f.limits.u_g[0],
            u_g_max: f.limits.u_g[1],
            u_i_min: f.limits.u_i[0],
            u_i_max: f.limits.u_i[1],
            p_max: f.limits.p_max,
        },
        hat,
    };
    if let Some(u) = &s.initial_u_g {
        check_len("initial u_g", model.n_gen(), u.len())?;
    }
    s.validate(model)?;
    Ok(s)
}

/// Bundled load-step scenario for the 12-node network.
pub const IEEE12_SCENARIO: &str = include_str!("../data/ieee12_scenario.toml");

/// Offsets of each block in the flat integration vector.
#[derive(Debug, Clone, Copy)]
pub struct StateLayout {
    pub m: usize,
    pub ng: usize,
    pub ni: usize,
    pub nd: usize,
    pub n: usize,
    pub mc: usize,
}

impl StateLayout {
    pub fn new(model: &NetworkModel) -> Self {
        Self {
            m: model.n_lines(),
            ng: model.n_gen(),
            ni: model.n_inv(),
            nd: model.n_dispatch(),
            n: model.n_nodes(),
            mc: model.n_comm(),
        }
    }
    pub fn theta(&self) -> usize {
        0
    }
    pub fn l_g(&self) -> usize {
        self.m
    }
    pub fn l_i(&self) -> usize {
        self.l_g() + self.ng
    }
    pub fn u_g(&self) -> usize {
        self.l_i() + self.ni
    }
    pub fn p_g(&self) -> usize {
        self.u_g() + self.ng
    }
    pub fn lambda(&self) -> usize {
        self.p_g() + self.nd
    }
    pub fn nu(&self) -> usize {
        self.lambda() + self.n
    }
    pub fn mu_g_minus(&self) -> usize {
        self.nu() + self.mc
    }
    pub fn mu_g_plus(&self) -> usize {
        self.mu_g_minus() + self.ng
    }
    pub fn u_f(&self) -> usize {
        self.mu_g_plus() + self.ng
    }
    pub fn mu_i_minus(&self) -> usize {
        self.u_f() + self.ng
    }
    pub fn mu_i_plus(&self) -> usize {
        self.mu_i_minus() + self.ni
    }
    pub fn u_i(&self) -> usize {
        self.mu_i_plus() + self.ni
    }
    pub fn mu_p(&self) -> usize {
        self.u_i() + self.ni
    }
    pub fn len(&self) -> usize {
        self.mu_p() + self.nd
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index ranges holding projected duals.
    pub fn dual_ranges(&self) -> [std::ops::Range<usize>; 5] {
        [
            self.mu_g_minus()..self.mu_g_minus() + self.ng,
            self.mu_g_plus()..self.mu_g_plus() + self.ng,
            self.mu_i_minus()..self.mu_i_minus() + self.ni,
            self.mu_i_plus()..self.mu_i_plus() + self.ni,
            self.mu_p()..self.mu_p() + self.nd,
        ]
    }

    pub fn pack(&self, p: &PlantState, c: &ControllerState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for block in [
            &p.theta_diff,
            &p.l_g,
            &p.l_i,
            &p.u_g,
            &c.p_g,
            &c.lambda,
            &c.nu,
            &c.mu_g_minus,
            &c.mu_g_plus,
            &c.u_f,
            &c.mu_i_minus,
            &c.mu_i_plus,
            &c.u_i,
            &c.mu_p_plus,
        ] {
            x.extend_from_slice(block);
        }
        x
    }

    /// Splits a flat vector; the algebraic load states are supplied separately.
    pub fn unpack(&self, x: &[f64], omega_l: &[f64], u_l: &[f64]) -> (PlantState, ControllerState) {
        let s = |a: usize, len: usize| x[a..a + len].to_vec();
        (
            PlantState {
                theta_diff: s(self.theta(), self.m),
                l_g: s(self.l_g(), self.ng),
                l_i: s(self.l_i(), self.ni),
                u_g: s(self.u_g(), self.ng),
                omega_l: omega_l.to_vec(),
                u_l: u_l.to_vec(),
            },
            ControllerState {
                p_g: s(self.p_g(), self.nd),
                lambda: s(self.lambda(), self.n),
                nu: s(self.nu(), self.mc),
                mu_g_minus: s(self.mu_g_minus(), self.ng),
                mu_g_plus: s(self.mu_g_plus(), self.ng),
                u_f: s(self.u_f(), self.ng),
                mu_i_minus: s(self.mu_i_minus(), self.ni),
                mu_i_plus: s(self.mu_i_plus(), self.ni),
                u_i: s(self.u_i(), self.ni),
                mu_p_plus: s(self.mu_p(), self.nd),
            },
        )
    }
}

/// Precomputed per-node data for the fused right-hand side.
struct NodeData {
    damping: Vec<f64>,
    inertia: Vec<f64>,
    g_self: Vec<f64>,
    b_self: Vec<f64>,
    x_gap: Vec<f64>,
    tau_u: Vec<f64>,
    psi_slope: Vec<f64>,
    is_inverter: Vec<bool>,
}

/// Closed-loop vector field with scratch buffers. Evaluates the same
/// equations as the `plant` and `controller` modules, sharing trigonometric
/// terms across them.
pub struct ClosedLoop<'a> {
    model: &'a NetworkModel,
    lay: StateLayout,
    gains: ControllerGains,
    cost: CostSpec,
    bounds: Bounds,
    variant: PsiVariant,
    nd: NodeData,
    newton: NewtonOptions,
    // scratch
    sin: Vec<f64>,
    cos: Vec<f64>,
    u: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    phi: Vec<f64>,
    omega: Vec<f64>,
    /// Load voltages from the most recent evaluation.
    pub u_l: Vec<f64>,
    /// Newton iterations spent in the most recent evaluation.
    pub last_newton: usize,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(model: &'a NetworkModel, scenario: &Scenario) -> Self {
        let n = model.n_nodes();
        let nodes = model.nodes();
        let nd = NodeData {
            damping: nodes.iter().map(|x| x.damping()).collect(),
            inertia: nodes.iter().map(|x| x.inertia().unwrap_or(0.0)).collect(),
            g_self: nodes.iter().map(|x| x.g_self()).collect(),
            b_self: nodes.iter().map(|x| x.b_self()).collect(),
            x_gap: (0..model.n_gen()).map(|k| model.generator(k).reactance_gap()).collect(),
            tau_u: (0..model.n_gen()).map(|k| model.generator(k).tau_u).collect(),
            psi_slope: (0..model.n_gen()).map(|k| crate::powerflow::psi_slope(model, k)).collect(),
            is_inverter: nodes.iter().map(|x| x.kind() == NodeKind::Inverter).collect(),
        };
        Self {
            model,
            lay: StateLayout::new(model),
            gains: scenario.gains,
            cost: scenario.cost.clone(),
            bounds: scenario.bounds,
            variant: scenario.psi_variant(),
            nd,
            newton: NewtonOptions::default(),
            sin: vec![0.0; model.n_lines()],
            cos: vec![0.0; model.n_lines()],
            u: vec![1.0; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
            phi: vec![0.0; n],
            omega: vec![0.0; n],
            u_l: vec![1.0; model.n_load()],
            last_newton: 0,
        }
    }

    pub fn layout(&self) -> StateLayout {
        self.lay
    }

    /// Frequencies at all nodes from the most recent evaluation.
    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Voltages at all nodes from the most recent evaluation.
    pub fn voltages(&self) -> &[f64] {
        &self.u
    }

    pub fn losses(&self) -> &[f64] {
        &self.phi
    }

    fn solve_loads(&mut self, q_l: &[f64]) -> Result<()> {
        let m = self.model;
        let off = m.load_offset();
        let nl = m.n_load();
        let mut it = 0;
        loop {
            // reactive residual and Jacobian at the loads
            let mut r = nalgebra::DVector::<f64>::zeros(nl);
            let mut jac = nalgebra::DMatrix::<f64>::zeros(nl, nl);
            for k in 0..nl {
                let i = off + k;
                let ui = self.u[i];
                let (mut bc, mut gs) = (0.0, 0.0);
                for nb in m.neighbors(i) {
                    let line = &m.lines()[nb.edge];
                    let (s, c) = (nb.sign * self.sin[nb.edge], self.cos[nb.edge]);
                    let uj = self.u[nb.node];
                    bc += line.b * uj * c;
                    gs += line.g * uj * s;
                    if nb.node >= off {
                        jac[(k, nb.node - off)] -= ui * (line.g * s - line.b * c);
                    }
                }
                let bii = self.nd.b_self[i];
                r[k] = -q_l[i] - (-bii * ui * ui - ui * bc + ui * gs);
                jac[(k, k)] -= -2.0 * bii * ui - bc + gs;
            }
            let res = r.amax();
            if !res.is_finite() {
                return Err(Error::solver("load voltage iteration diverged", res));
            }
            if res < self.newton.tol {
                break;
            }
            if it == self.newton.max_iter {
                return Err(Error::solver("load voltages not converged", res));
            }
            let step = jac.lu().solve(&(-r)).ok_or_else(|| Error::solver("singular load Jacobian (voltage collapse)", res))?;
            for k in 0..nl {
                self.u[off + k] += step[k];
            }
            it += 1;
        }
        self.last_newton = it;
        for k in 0..nl {
            self.u_l[k] = self.u[off + k];
        }
        Ok(())
    }

    /// Evaluates `dx = f(x)` for the given demands. Load voltages are warm
    /// started from the previous call.
    pub fn rhs(&mut self, x: &[f64], demands: &Demands, dx: &mut [f64]) -> Result<()> {
        let m = self.model;
        let lay = self.lay;
        let (ng, ni, n) = (lay.ng, lay.ni, lay.n);
        let off_i = m.inv_offset();
        let off_l = m.load_offset();
        for e in 0..lay.m {
            let (s, c) = x[lay.theta() + e].sin_cos();
            self.sin[e] = s;
            self.cos[e] = c;
        }
        self.u[..ng].copy_from_slice(&x[lay.u_g()..lay.u_g() + ng]);
        self.u[off_i..off_i + ni].copy_from_slice(&x[lay.u_i()..lay.u_i() + ni]);
        self.u[off_l..].copy_from_slice(&self.u_l);
        self.solve_loads(&demands.q_l)?;

        // flows
        for i in 0..n {
            let ui = self.u[i];
            self.p[i] = self.nd.g_self[i] * ui * ui;
            self.q[i] = -self.nd.b_self[i] * ui * ui;
            self.phi[i] = self.p[i];
        }
        for (e, line) in m.lines().iter().enumerate() {
            let (i, j) = (line.from, line.to);
            let uu = self.u[i] * self.u[j];
            let (s, c) = (self.sin[e], self.cos[e]);
            let gc = line.g * uu * c;
            self.phi[i] += gc;
            self.phi[j] += gc;
            self.p[i] += line.b * uu * s + gc;
            self.p[j] += -line.b * uu * s + gc;
            self.q[i] += -line.b * uu * c + line.g * uu * s;
            self.q[j] += -line.b * uu * c - line.g * uu * s;
        }
        for i in 0..lay.nd {
            self.omega[i] = x[lay.l_g() + i] / self.nd.inertia[i];
        }
        for i in off_l..n {
            self.omega[i] = -(demands.p_l[i] + self.p[i]) / self.nd.damping[i];
        }

        // plant
        for (e, line) in m.lines().iter().enumerate() {
            dx[lay.theta() + e] = self.omega[line.from] - self.omega[line.to];
        }
        for i in 0..lay.nd {
            let pg = x[lay.p_g() + i];
            dx[lay.l_g() + i] = -self.nd.damping[i] * self.omega[i] + pg - demands.p_l[i] - self.p[i];
        }
        for k in 0..ng {
            let uk = self.u[k];
            dx[lay.u_g() + k] = (x[lay.u_f() + k] - uk - self.nd.x_gap[k] * self.q[k] / uk) / self.nd.tau_u[k];
        }

        // frequency controller
        let g = &self.gains;
        let capped = self.bounds.p_max;
        for k in 0..lay.nd {
            let mut v = -x[lay.p_g() + k] / self.cost.weights[k] + x[lay.lambda() + k] - self.omega[k];
            if capped.is_some() {
                v -= x[lay.mu_p() + k];
            }
            dx[lay.p_g() + k] = v / g.tau_g;
            dx[lay.mu_p() + k] = match capped {
                Some(pm) => crate::controller::project(x[lay.p_g() + k] - pm, x[lay.mu_p() + k]) / g.tau_mu_p,
                None => 0.0,
            };
        }
        for i in 0..n {
            let inj = if i < lay.nd { x[lay.p_g() + i] } else { 0.0 };
            dx[lay.lambda() + i] = demands.p_l[i] + self.phi[i] - inj;
        }
        for (e, &(i, j)) in m.comm_edges().iter().enumerate() {
            let nu = x[lay.nu() + e];
            dx[lay.lambda() + i] += nu;
            dx[lay.lambda() + j] -= nu;
            dx[lay.nu() + e] = -(x[lay.lambda() + i] - x[lay.lambda() + j]) / g.tau_nu;
        }
        for i in 0..n {
            dx[lay.lambda() + i] /= g.tau_lambda;
        }

        // voltage controller
        let est = match self.variant {
            PsiVariant::Hat { estimate } => Some(estimate),
            PsiVariant::Exact => None,
        };
        for k in 0..ng {
            let mut coupling = 0.0;
            for nb in m.neighbors(k) {
                let line = &m.lines()[nb.edge];
                let uj = match est {
                    Some(e) if self.nd.is_inverter[nb.node] => e,
                    _ => self.u[nb.node],
                };
                coupling += uj * (line.g * nb.sign * self.sin[nb.edge] - line.b * self.cos[nb.edge]);
            }
            let base = self.nd.x_gap[k] * coupling;
            let lo = self.bounds.u_g_min * self.nd.psi_slope[k] + base;
            let hi = self.bounds.u_g_max * self.nd.psi_slope[k] + base;
            let uf = x[lay.u_f() + k];
            let (mm, mp) = (x[lay.mu_g_minus() + k], x[lay.mu_g_plus() + k]);
            dx[lay.mu_g_minus() + k] = crate::controller::project(lo - uf, mm) / g.tau_mu_g;
            dx[lay.mu_g_plus() + k] = crate::controller::project(uf - hi, mp) / g.tau_mu_g;
            dx[lay.u_f() + k] = (mm - mp) / g.tau_u_g;
        }
        for k in 0..ni {
            let node = off_i + k;
            let uk = self.u[node];
            let (mm, mp) = (x[lay.mu_i_minus() + k], x[lay.mu_i_plus() + k]);
            dx[lay.mu_i_minus() + k] = crate::controller::project(self.bounds.u_i_min - uk, mm) / g.tau_mu_i;
            dx[lay.mu_i_plus() + k] = crate::controller::project(uk - self.bounds.u_i_max, mp) / g.tau_mu_i;
            let lk = x[lay.lambda() + node];
            let mut v = mm - mp - 2.0 * self.nd.g_self[node] * uk * lk;
            for nb in m.neighbors(node) {
                let line = &m.lines()[nb.edge];
                let c = self.cos[nb.edge];
                let uj = self.u[nb.node];
                v -= line.g * uj * c * (lk + x[lay.lambda() + nb.node]);
                if est.is_none() && nb.node < ng {
                    // generator neighbor: -(∂Ψ_g/∂U_k)(μ_G- - μ_G+)
                    let s_gk = -nb.sign * self.sin[nb.edge];
                    let dpsi = self.nd.x_gap[nb.node] * (line.g * s_gk - line.b * c);
                    v -= dpsi * (x[lay.mu_g_minus() + nb.node] - x[lay.mu_g_plus() + nb.node]);
                }
            }
            dx[lay.u_i() + k] = v / g.tau_u_i;
        }
        Ok(())
    }

    /// Load frequencies for the state of the most recent evaluation.
    pub fn omega_l(&self) -> Vec<f64> {
        self.omega[self.model.load_offset()..].to_vec()
    }
}

/// One recorded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub plant: PlantState,
    pub ctrl: ControllerState,
    /// Frequency deviation at every node (p.u.).
    pub omega: Vec<f64>,
    /// Voltage magnitude at every node (p.u.).
    pub u: Vec<f64>,
    /// Total losses.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Largest magnitude by which a dual entry was clipped back to zero after
    /// an integration step.
    pub max_dual_clip: f64,
    pub steps: usize,
}

impl Trajectory {
    /// Index of the last sample with `t <= time`.
    pub fn index_at(&self, time: f64) -> usize {
        match self.samples.binary_search_by(|s| s.t.partial_cmp(&time).unwrap()) {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1),
        }
    }
}

/// Starting closed-loop state: the oracle optimum at the initial demands.
pub fn initial_state(model: &NetworkModel, scenario: &Scenario) -> Result<(PlantState, ControllerState, KktPoint)> {
    let prob = scenario.problem(model, scenario.initial.clone(), scenario.initial_u_g.clone());
    equilibrium::consistent_equilibrium(&prob, &scenario.gains, &SolveOptions::default())
}

pub fn run(model: &NetworkModel, scenario: &Scenario) -> Result<Trajectory> {
    let (plant0, ctrl0, _) = initial_state(model, scenario)?;
    run_from(model, scenario, &plant0, &ctrl0)
}

/// Integrates from an arbitrary closed-loop state.
pub fn run_from(model: &NetworkModel, scenario: &Scenario, plant0: &PlantState, ctrl0: &ControllerState) -> Result<Trajectory> {
    scenario.validate(model)?;
    plant0.check(model)?;
    ctrl0.check(model)?;
    let mut cl = ClosedLoop::new(model, scenario);
    let lay = cl.layout();
    let mut x = lay.pack(plant0, ctrl0);
    cl.u_l = plant0.u_l.clone();
    let nx = x.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    let mut xs = vec![0.0; nx];
    let mut demands = scenario.initial.clone();
    let mut samples = Vec::with_capacity((scenario.horizon / scenario.record).round() as usize + 1);
    let mut max_clip = 0.0_f64;
    let mut steps = 0usize;

    let n_rec = (scenario.horizon / scenario.record).round() as usize;
    let rec_time = |k: usize| (k as f64 * scenario.record).min(scenario.horizon);
    let mut next_event = 0usize;
    let mut t = 0.0;

    let record = |cl: &mut ClosedLoop, x: &[f64], t: f64, demands: &Demands, samples: &mut Vec<Sample>, scratch: &mut [f64]| -> Result<()> {
        cl.rhs(x, demands, scratch).map_err(|e| abort(t, e))?;
        let (plant, ctrl) = lay.unpack(x, &cl.omega_l(), &cl.u_l);
        samples.push(Sample {
            t,
            plant,
            ctrl,
            omega: cl.omega().to_vec(),
            u: cl.voltages().to_vec(),
            phi: cl.losses().iter().sum(),
        });
        Ok(())
    };

    record(&mut cl, &x, 0.0, &demands, &mut samples, &mut k1)?;
    for rk in 1..=n_rec {
        let t_rec = rec_time(rk);
        // advance to t_rec, stopping at events inside (t, t_rec]
        loop {
            let ev_t = scenario.events.get(next_event).map(|e| e.t);
            let target = match ev_t {
                Some(te) if te < t_rec - 1e-9 => te,
                _ => t_rec,
            };
            let span = target - t;
            if span > 1e-12 {
                let nsteps = ((span / scenario.dt) - 1e-9).ceil().max(1.0) as usize;
                let h = span / nsteps as f64;
                for s in 0..nsteps {
                    let ts = t + s as f64 * h;
                    rk4_step(&mut cl, &mut x, &demands, h, &mut xs, [&mut k1, &mut k2, &mut k3, &mut k4]).map_err(|e| abort(ts, e))?;
                    for r in lay.dual_ranges() {
                        for v in &mut x[r] {
                            if *v < 0.0 {
                                max_clip = max_clip.max(-*v);
                                *v = 0.0;
                            }
                        }
                    }
                    check_state(model, &lay, &x, &cl, ts + h)?;
                    steps += 1;
                }
            }
            t = target;
            // apply any event that lands exactly here
            while let Some(e) = scenario.events.get(next_event) {
                if (e.t - t).abs() < 1e-9 {
                    apply_event(&mut demands, e);
                    next_event += 1;
                } else {
                    break;
                }
            }
            if target == t_rec {
                break;
            }
        }
        record(&mut cl, &x, t_rec, &demands, &mut samples, &mut k1)?;
    }
    Ok(Trajectory { samples, max_dual_clip: max_clip, steps })
}

fn abort(t: f64, e: Error) -> Error {
    match e {
        Error::SimAbort { .. } => e,
        other => Error::SimAbort { t, message: other.to_string() },
    }
}

fn check_state(model: &NetworkModel, lay: &StateLayout, x: &[f64], cl: &ClosedLoop, t: f64) -> Result<()> {
    if let Some(k) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::SimAbort { t, message: format!("non-finite state entry {k}") });
    }
    let ug = &x[lay.u_g()..lay.u_g() + lay.ng];
    let ui = &x[lay.u_i()..lay.u_i() + lay.ni];
    for (k, &u) in ug.iter().chain(ui).chain(&cl.u_l).enumerate() {
        if u < VOLTAGE_FLOOR {
            let node = if k < lay.ng {
                k
            } else if k < lay.ng + lay.ni {
                model.inv_offset() + k - lay.ng
            } else {
                model.load_offset() + k - lay.ng - lay.ni
            };
            return Err(Error::SimAbort {
                t,
                message: format!("voltage at node {} fell below {VOLTAGE_FLOOR} p.u.", model.node(node).id),
            });
        }
    }
    Ok(())
}

fn rk4_step(
    cl: &mut ClosedLoop,
    x: &mut [f64],
    d: &Demands,
    h: f64,
    xs: &mut [f64],
    k: [&mut Vec<f64>; 4],
) -> Result<()> {
    let [k1, k2, k3, k4] = k;
    let u_l0 = cl.u_l.clone();
    cl.rhs(x, d, k1)?;
    for i in 0..x.len() {
        xs[i] = x[i] + 0.5 * h * k1[i];
    }
    cl.rhs(xs, d, k2)?;
    for i in 0..x.len() {
        xs[i] = x[i] + 0.5 * h * k2[i];
    }
    cl.rhs(xs, d, k3)?;
    for i in 0..x.len() {
        xs[i] = x[i] + h * k3[i];
    }
    cl.rhs(xs, d, k4)?;
    for i in 0..x.len() {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    // the end-of-step load voltages are re-solved at the next evaluation,
    // warm started from the last stage
    let _ = u_l0;
    Ok(())
}

/// Shifted storage of the whole loop about a reference equilibrium: the plant
/// Bregman shift (inverter voltages included) plus the quadratic controller
/// storage `½ Σ τ (x - x*)²` over every controller state.
pub fn lyapunov_value(
    model: &NetworkModel,
    gains: &ControllerGains,
    plant_state: &PlantState,
    ctrl: &ControllerState,
    reference: &KktPoint,
) -> Result<f64> {
    let hp = plant::shifted_hamiltonian(model, plant_state, &ctrl.u_i, &reference.plant, &reference.u_i)?;
    let quad = |tau: f64, a: &[f64], b: &[f64]| -> f64 { 0.5 * tau * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() };
    let g = gains;
    let r = reference;
    let h1 = quad(g.tau_g, &ctrl.p_g, &r.p_g) + quad(g.tau_lambda, &ctrl.lambda, &r.lambda) + quad(g.tau_nu, &ctrl.nu, &r.nu);
    let v2 = quad(g.tau_mu_g, &ctrl.mu_g_minus, &r.mu_g_minus)
        + quad(g.tau_mu_g, &ctrl.mu_g_plus, &r.mu_g_plus)
        + quad(g.tau_u_g, &ctrl.u_f, &r.u_f)
        + quad(g.tau_mu_i, &ctrl.mu_i_minus, &r.mu_i_minus)
        + quad(g.tau_mu_i, &ctrl.mu_i_plus, &r.mu_i_plus)
        + quad(g.tau_u_i, &ctrl.u_i, &r.u_i)
        + quad(g.tau_mu_p, &ctrl.mu_p_plus, &r.mu_p_plus);
    Ok(hp + h1 + v2)
}

/// Lyapunov value at every sample against a single reference.
pub fn lyapunov_series(model: &NetworkModel, gains: &ControllerGains, traj: &Trajectory, reference: &KktPoint) -> Result<Vec<f64>> {
    traj.samples.iter().map(|s| lyapunov_value(model, gains, &s.plant, &s.ctrl, reference)).collect()
}

/// Post-step references for every window: the oracle optimum at the window's
/// demand level, with generator voltages taken from the window's last sample.
pub fn window_references(model: &NetworkModel, scenario: &Scenario, traj: &Trajectory) -> Result<Vec<KktPoint>> {
    let edges = scenario.window_edges();
    scenario
        .demand_levels()
        .into_iter()
        .enumerate()
        .map(|(w, d)| {
            let end = traj.index_at(edges[w + 1] - 0.5 * scenario.record);
            let hint = traj.samples[end].plant.u_g.clone();
            equilibrium::solve_op_sharp(&scenario.problem(model, d, Some(hint)), &SolveOptions::default())
        })
        .collect()
}

/// Window containing time `t`, given the edges from [`Scenario::window_edges`].
/// Samples at an event time belong to the window that starts there.
pub fn window_index(edges: &[f64], t: f64) -> usize {
    edges[1..edges.len() - 1].iter().take_while(|&&e| t >= e - 1e-9).count()
}

/// Lyapunov series with each window measured against its own reference.
pub fn windowed_lyapunov(
    model: &NetworkModel,
    scenario: &Scenario,
    traj: &Trajectory,
    refs: &[KktPoint],
) -> Result<Vec<f64>> {
    let edges = scenario.window_edges();
    traj.samples
        .iter()
        .map(|s| {
            let w = window_index(&edges, s.t);
            lyapunov_value(model, &scenario.gains, &s.plant, &s.ctrl, &refs[w])
        })
        .collect()
}

/// Gap between a window's last sample and the oracle optimum of its demand level.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWindow {
    pub t_end: f64,
    /// Max-norm distance over `p_g`, `λ`, `U_f` and `U_I`.
    pub state_gap: f64,
    /// Largest KKT residual entry at the sample.
    pub kkt_residual: f64,
    pub kkt_worst: &'static str,
}

pub fn tracking(model: &NetworkModel, scenario: &Scenario, traj: &Trajectory, refs: &[KktPoint]) -> Result<Vec<TrackingWindow>> {
    let edges = scenario.window_edges();
    check_len("window references", edges.len() - 1, refs.len())?;
    scenario
        .demand_levels()
        .into_iter()
        .enumerate()
        .map(|(w, d)| {
            let s = &traj.samples[traj.index_at(edges[w + 1] - 0.5 * scenario.record)];
            let r = &refs[w];
            let gap = [(&s.ctrl.p_g, &r.p_g), (&s.ctrl.lambda, &r.lambda), (&s.ctrl.u_f, &r.u_f), (&s.ctrl.u_i, &r.u_i)]
                .iter()
                .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
                .fold(0.0_f64, f64::max);
            let point = KktPoint::from_closed_loop(model, &s.plant, &s.ctrl, &scenario.cost)?;
            let report = equilibrium::kkt_residual(&scenario.problem(model, d, None), &point)?;
            let (name, worst) = report.entries.iter().fold(("", 0.0_f64), |acc, &(n, v)| if v > acc.1 { (n, v) } else { acc });
            Ok(TrackingWindow { t_end: s.t, state_gap: gap, kkt_residual: worst, kkt_worst: name })
        })
        .collect()
}

/// Per-window summary figures.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    pub t_start: f64,
    pub t_end: f64,
    /// Peak frequency deviation over the window, Hz.
    pub peak_omega_hz: f64,
    /// Same, restricted to generator and inverter nodes.
    pub peak_omega_dispatch_hz: f64,
    /// Largest voltage excursion outside the band spanned by the previous and
    /// the current steady values, p.u.
    pub voltage_excursion: f64,
    /// Same, restricted to generator and inverter nodes.
    pub voltage_excursion_dispatch: f64,
    /// Time after window start from which `max|ω|` stays below the threshold.
    pub settling_time: Option<f64>,
    /// Largest `max|ω|` over the steady part of the window, p.u.
    pub steady_omega: f64,
    pub steady_u_min: f64,
    pub steady_u_max: f64,
    /// Largest spread of `p_i / w_i` over uncapped units in the steady part.
    pub sharing_residual: f64,
    /// Largest dispatch in the steady part.
    pub steady_p_max: f64,
    /// Largest dispatch anywhere in the window.
    pub peak_p: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricOptions {
    /// Fraction of each window treated as steady state (its tail).
    pub steady_fraction: f64,
    pub settle_threshold: f64,
    /// Units within this distance of the cap count as capped.
    pub cap_margin: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { steady_fraction: 0.1, settle_threshold: 1e-5, cap_margin: 1e-3 }
    }
}

pub fn metrics(traj: &Trajectory, scenario: &Scenario, opts: &MetricOptions) -> Result<Vec<WindowMetrics>> {
    let edges = scenario.window_edges();
    let last_t = traj.samples.last().map(|s| s.t).unwrap_or(0.0);
    if last_t + 1e-9 < scenario.horizon {
        return Err(Error::Precondition("trajectory does not cover the scenario horizon".into()));
    }
    let n = traj.samples[0].u.len();
    let nd = traj.samples[0].ctrl.p_g.len();
    let mut prev_ss: Vec<f64> = traj.samples[0].u.clone();
    let mut out = Vec::with_capacity(edges.len() - 1);
    for w in 0..edges.len() - 1 {
        let (t0, t1) = (edges[w], edges[w + 1]);
        let i0 = traj.index_at(t0);
        // last sample strictly before the next event (right-continuous records)
        let i1 = if w + 2 == edges.len() { traj.samples.len() - 1 } else { traj.index_at(t1 - 1e-9) };
        let i1 = if traj.samples[i1].t >= t1 - 1e-9 && i1 > i0 { i1 - 1 } else { i1 };
        let ts = t1 - opts.steady_fraction * (t1 - t0);
        let win = &traj.samples[i0..=i1];
        let cur_ss = &traj.samples[i1].u;
        let maxw = |s: &Sample| s.omega.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let maxw_d = |s: &Sample| s.omega[..nd].iter().fold(0.0_f64, |m, v| m.max(v.abs()));

        let peak_omega_hz = win.iter().map(maxw).fold(0.0, f64::max) * F_BASE_HZ;
        let peak_omega_dispatch_hz = win.iter().map(maxw_d).fold(0.0, f64::max) * F_BASE_HZ;
        let mut excursion = 0.0_f64;
        let mut excursion_d = 0.0_f64;
        for s in win {
            for i in 0..n {
                let lo = prev_ss[i].min(cur_ss[i]);
                let hi = prev_ss[i].max(cur_ss[i]);
                let e = (lo - s.u[i]).max(s.u[i] - hi);
                excursion = excursion.max(e);
                if i < nd {
                    excursion_d = excursion_d.max(e);
                }
            }
        }
        let mut settle = None;
        for (k, s) in win.iter().enumerate().rev() {
            if maxw(s) >= opts.settle_threshold {
                settle = win.get(k + 1).map(|x| x.t - t0);
                break;
            }
            if k == 0 {
                settle = Some(0.0);
            }
        }
        let steady: Vec<&Sample> = win.iter().filter(|s| s.t >= ts - 1e-9).collect();
        let steady_omega = steady.iter().map(|s| maxw(s)).fold(0.0, f64::max);
        let steady_u_min = steady.iter().flat_map(|s| s.u.iter().copied()).fold(f64::INFINITY, f64::min);
        let steady_u_max = steady.iter().flat_map(|s| s.u.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        let cap = scenario.bounds.p_max.unwrap_or(f64::INFINITY);
        let mut sharing = 0.0_f64;
        for s in &steady {
            let ratios: Vec<f64> = s
                .ctrl
                .p_g
                .iter()
                .zip(&scenario.cost.weights)
                .filter(|(p, _)| **p < cap - opts.cap_margin)
                .map(|(p, w)| p / w)
                .collect();
            if let (Some(lo), Some(hi)) = (
                ratios.iter().copied().reduce(f64::min),
                ratios.iter().copied().reduce(f64::max),
            ) {
                sharing = sharing.max(hi - lo);
            }
        }
        let steady_p_max = steady.iter().flat_map(|s| s.ctrl.p_g.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        let peak_p = win.iter().flat_map(|s| s.ctrl.p_g.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        out.push(WindowMetrics {
            t_start: t0,
            t_end: t1,
            peak_omega_hz,
            peak_omega_dispatch_hz,
            voltage_excursion: excursion,
            voltage_excursion_dispatch: excursion_d,
            settling_time: settle,
            steady_omega,
            steady_u_min,
            steady_u_max,
            sharing_residual: sharing,
            steady_p_max,
            peak_p,
        });
        prev_ss = cur_ss.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller;
    use crate::netmodel::ieee12;
    use crate::plant::PlantInput;
    use crate::powerflow;

    fn scenario() -> Scenario {
        load_scenario(IEEE12_SCENARIO, &ieee12()).unwrap()
    }

    #[test]
    fn bundled_scenario_parses() {
        let s = scenario();
        assert_eq!(s.events.len(), 8);
        assert_eq!(s.demand_levels().len(), 9);
        assert!((s.events[2].t - 650.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unordered_events() {
        let m = ieee12();
        let text = IEEE12_SCENARIO.replacen("t = 250.0", "t = 2500.0", 1);
        let err = load_scenario(&text, &m).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)), "{err}");
    }

    #[test]
    fn fused_rhs_matches_module_functions() {
        let m = ieee12();
        let s = scenario();
        for hat in [false, true] {
            let mut s = s.clone();
            s.hat = hat;
            let mut cl = ClosedLoop::new(&m, &s);
            let lay = cl.layout();
            let mut plant = PlantState::flat(&m);
            for (e, t) in plant.theta_diff.iter_mut().enumerate() {
                *t = 0.013 * (e as f64 - 5.0);
            }
            plant.l_g = vec![0.3, -0.2, 0.1, 0.05];
            plant.l_i = vec![0.01, -0.02, 0.03, 0.0];
            plant.u_g = vec![1.01, 0.99, 1.0, 1.02];
            let mut c = ControllerState::zeros(&m);
            c.p_g = (0..8).map(|k| 0.1 + 0.02 * k as f64).collect();
            c.lambda = (0..12).map(|k| 0.2 + 0.01 * k as f64).collect();
            c.nu = (0..14).map(|k| 0.05 * (k as f64).cos()).collect();
            c.mu_g_minus = vec![0.0, 0.1, 0.0, 0.2];
            c.mu_g_plus = vec![0.05, 0.0, 0.0, 0.0];
            c.u_f = vec![1.05, 1.0, 1.02, 0.98];
            c.mu_i_minus = vec![0.0, 0.3, 0.0, 0.0];
            c.mu_i_plus = vec![0.1, 0.0, 0.0, 0.0];
            c.u_i = vec![0.98, 0.99, 1.0, 1.015];
            c.mu_p_plus = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.1];
            let mut d = s.initial.clone();
            d.p_l[9] += 0.1;
            d.q_l[10] += 0.1;
            let x = lay.pack(&plant, &c);
            let mut dx = vec![0.0; x.len()];
            cl.rhs(&x, &d, &mut dx).unwrap();

            let input = PlantInput {
                p_gen: c.p_g[..4].to_vec(),
                p_inv: c.p_g[4..].to_vec(),
                u_f: c.u_f.clone(),
                u_i: c.u_i.clone(),
                p_l: d.p_l.clone(),
                q_l: d.q_l.clone(),
            };
            let alg = plant::solve_algebraic(&m, &plant, &input, &[1.0; 4], NewtonOptions::default()).unwrap();
            let mut full = plant.clone();
            full.u_l = alg.u_l;
            full.omega_l = alg.omega_l;
            let pd = plant::dynamic_residual(&m, &full, &input).unwrap();
            let prof = full.profile(&c.u_i);
            let phi = powerflow::loss_vector(&m, &prof).unwrap();
            let omega = full.frequencies(&m);
            let fd = controller::freq_controller_rhs(&m, &s.cost, &s.gains, &s.bounds, &c, &omega[..8], &phi, &d.p_l).unwrap();
            let vd = controller::volt_controller_rhs(&m, &s.gains, &s.bounds, s.psi_variant(), &c, &prof, &c.lambda).unwrap();
            let reference = [
                pd.theta_diff, pd.l_g, pd.l_i, pd.u_g, fd.p_g, fd.lambda, fd.nu, vd.mu_g_minus, vd.mu_g_plus, vd.u_f,
                vd.mu_i_minus, vd.mu_i_plus, vd.u_i, fd.mu_p_plus,
            ]
            .concat();
            for (k, (a, b)) in dx.iter().zip(&reference).enumerate() {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "hat={hat} entry {k}: {a} vs {b}");
            }
        }
    }
}
