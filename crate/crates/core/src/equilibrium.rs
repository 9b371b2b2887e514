//! Steady-state oracle.
//!
//! [`solve_op_sharp`] solves the distributed dispatch problem through its KKT
//! system, closed with the plant steady state at zero frequency deviation.
//! [`solve_op`] reaches the same optimum by a different route (aggregate
//! balance, closed-form dispatch, power flow with distributed slack) and
//! serves as a cross-check. [`consistent_equilibrium`] lifts a KKT point to a
//! full closed-loop state.
//!
//! The excitation commands are not pinned down by the KKT conditions: any
//! `U_f` inside the excitation bounds is optimal, and with it any generator
//! voltage inside its band. The oracle therefore takes a generator-voltage
//! hint and returns the optimum whose generator voltages equal the hint,
//! clamped to the admissible set.

use nalgebra::{DMatrix, DVector};

use crate::controller::{self, Bounds, ControllerGains, ControllerState, CostSpec};
use crate::error::{check_len, Error, Result};
use crate::netmodel::{incidence_matrix, Graph, NetworkModel};
use crate::plant::{self, PlantInput, PlantState};
use crate::powerflow::{self, PsiVariant, VoltagePhaseProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct Demands {
    pub p_l: Vec<f64>,
    pub q_l: Vec<f64>,
}

impl Demands {
    pub fn zeros(n: usize) -> Self {
        Self { p_l: vec![0.0; n], q_l: vec![0.0; n] }
    }
}

#[derive(Debug, Clone)]
pub struct DispatchProblem<'a> {
    pub network: &'a NetworkModel,
    pub cost: CostSpec,
    pub bounds: Bounds,
    pub demands: Demands,
    pub psi: PsiVariant,
    /// Preferred generator voltages; defaults to the middle of the band.
    pub u_g_hint: Option<Vec<f64>>,
}

impl DispatchProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        let m = self.network;
        self.bounds.validate()?;
        check_len("cost weights", m.n_dispatch(), self.cost.weights.len())?;
        check_len("p_l", m.n_nodes(), self.demands.p_l.len())?;
        check_len("q_l", m.n_nodes(), self.demands.q_l.len())?;
        if self.demands.p_l.iter().chain(&self.demands.q_l).any(|v| !v.is_finite()) {
            return Err(Error::invariant("demands must be finite"));
        }
        if let Some(h) = &self.u_g_hint {
            check_len("U_G hint", m.n_gen(), h.len())?;
        }
        Ok(())
    }

    fn hint(&self) -> Vec<f64> {
        let b = &self.bounds;
        match &self.u_g_hint {
            Some(h) => h.iter().map(|u| u.clamp(b.u_g_min, b.u_g_max)).collect(),
            None => vec![0.5 * (b.u_g_min + b.u_g_max); self.network.n_gen()],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping of the outer fixed point in [`solve_op`].
    pub damping: f64,
    pub max_outer: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 100, damping: 0.5, max_outer: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub p_g: Vec<f64>,
    pub u_f: Vec<f64>,
    pub u_i: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu_g_minus: Vec<f64>,
    pub mu_g_plus: Vec<f64>,
    pub mu_i_minus: Vec<f64>,
    pub mu_i_plus: Vec<f64>,
    pub mu_p_plus: Vec<f64>,
    /// Steady plant state (zero momenta and load frequencies).
    pub plant: PlantState,
    /// Absolute angles with the first node as reference.
    pub theta: Vec<f64>,
    pub cost: f64,
    pub newton_iterations: usize,
}

impl KktPoint {
    pub fn controller_state(&self) -> ControllerState {
        ControllerState {
            p_g: self.p_g.clone(),
            lambda: self.lambda.clone(),
            nu: self.nu.clone(),
            mu_g_minus: self.mu_g_minus.clone(),
            mu_g_plus: self.mu_g_plus.clone(),
            u_f: self.u_f.clone(),
            mu_i_minus: self.mu_i_minus.clone(),
            mu_i_plus: self.mu_i_plus.clone(),
            u_i: self.u_i.clone(),
            mu_p_plus: self.mu_p_plus.clone(),
        }
    }

    pub fn profile(&self) -> VoltagePhaseProfile {
        self.plant.profile(&self.u_i)
    }

    /// Reads a closed-loop state as a candidate KKT point. Absolute angles are
    /// recovered along a spanning tree rooted at the first node.
    pub fn from_closed_loop(model: &NetworkModel, plant: &PlantState, ctrl: &ControllerState, cost: &CostSpec) -> Result<Self> {
        plant.check(model)?;
        ctrl.check(model)?;
        let n = model.n_nodes();
        let mut theta = vec![f64::NAN; n];
        theta[0] = 0.0;
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            for nb in model.neighbors(i) {
                if theta[nb.node].is_nan() {
                    theta[nb.node] = theta[i] - nb.sign * plant.theta_diff[nb.edge];
                    stack.push(nb.node);
                }
            }
        }
        let (c, _) = controller::cost_and_gradient(cost, &ctrl.p_g)?;
        Ok(Self {
            p_g: ctrl.p_g.clone(),
            u_f: ctrl.u_f.clone(),
            u_i: ctrl.u_i.clone(),
            nu: ctrl.nu.clone(),
            lambda: ctrl.lambda.clone(),
            mu_g_minus: ctrl.mu_g_minus.clone(),
            mu_g_plus: ctrl.mu_g_plus.clone(),
            mu_i_minus: ctrl.mu_i_minus.clone(),
            mu_i_plus: ctrl.mu_i_plus.clone(),
            mu_p_plus: ctrl.mu_p_plus.clone(),
            plant: plant.clone(),
            theta,
            cost: c,
            newton_iterations: 0,
        })
    }
}

/// Damped Newton with a forward-difference Jacobian.
pub(crate) fn newton_fd<F>(mut f: F, x0: Vec<f64>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut r = f(&x);
    let norm = |r: &[f64]| r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut res = norm(&r);
    for iter in 0..max_iter {
        if !res.is_finite() {
            return Err(Error::solver("non-finite residual", res));
        }
        log::trace!("newton iteration {iter}: residual {res:e}");
        if res < tol {
            return Ok((x, iter));
        }
        let mut jac = DMatrix::zeros(r.len(), n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let rp = f(&xp);
            for i in 0..r.len() {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rhs = -DVector::from_column_slice(&r);
        let step = jac.lu().solve(&rhs).ok_or_else(|| Error::solver("singular Jacobian", res))?;
        let mut alpha = 1.0;
        loop {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            let rn = f(&xn);
            let resn = norm(&rn);
            if resn.is_finite() && (resn < res || alpha < 1e-6) {
                x = xn;
                r = rn;
                res = resn;
                break;
            }
            alpha *= 0.5;
        }
    }
    if res < tol {
        Ok((x, max_iter))
    } else {
        Err(Error::solver(format!("Newton did not converge in {max_iter} iterations"), res))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Active {
    Free,
    Lower,
    Upper,
}

struct Layout {
    n: usize,
    nl: usize,
    nd: usize,
    ni: usize,
    ng: usize,
}

impl Layout {
    fn new(m: &NetworkModel) -> Self {
        Self { n: m.n_nodes(), nl: m.n_load(), nd: m.n_dispatch(), ni: m.n_inv(), ng: m.n_gen() }
    }
    fn u_l(&self) -> usize {
        self.n - 1
    }
    fn p(&self) -> usize {
        self.u_l() + self.nl
    }
    fn lambda(&self) -> usize {
        self.p() + self.nd
    }
    fn u_i(&self) -> usize {
        self.lambda() + self.n
    }
    fn u_g(&self) -> usize {
        self.u_i() + self.ni
    }
    fn len(&self) -> usize {
        self.u_g() + self.ng
    }
}

fn angles(x: &[f64], n: usize) -> Vec<f64> {
    let mut th = Vec::with_capacity(n);
    th.push(0.0);
    th.extend_from_slice(&x[..n - 1]);
    th
}

/// Communication Laplacian `D_c D_cᵀ`.
fn comm_laplacian(m: &NetworkModel) -> DMatrix<f64> {
    let d = incidence_matrix(m, Graph::Communication);
    &d * d.transpose()
}

/// The KKT system of the distributed dispatch problem for a fixed active set,
/// closed with the plant steady state.
fn sharp_residual(
    prob: &DispatchProblem,
    lay: &Layout,
    lap: &DMatrix<f64>,
    hint_psi_target: &dyn Fn(&VoltagePhaseProfile) -> Vec<f64>,
    p_set: &[bool],
    u_set: &[Active],
    x: &[f64],
) -> Vec<f64> {
    let m = prob.network;
    let b = &prob.bounds;
    let d = &prob.demands;
    let th = angles(x, lay.n);
    let mut u = Vec::with_capacity(lay.n);
    u.extend_from_slice(&x[lay.u_g()..lay.u_g() + lay.ng]);
    u.extend_from_slice(&x[lay.u_i()..lay.u_i() + lay.ni]);
    u.extend_from_slice(&x[lay.u_l()..lay.u_l() + lay.nl]);
    let prof = VoltagePhaseProfile::from_angles(m, u, &th);
    let p = powerflow::active_flow(m, &prof).expect("sized");
    let q = powerflow::reactive_flow(m, &prof).expect("sized");
    let pg = &x[lay.p()..lay.p() + lay.nd];
    let lam = &x[lay.lambda()..lay.lambda() + lay.n];

    let mut r = Vec::with_capacity(lay.len());
    for i in 0..lay.n {
        let inj = if i < lay.nd { pg[i] } else { 0.0 };
        r.push(inj - d.p_l[i] - p[i]);
    }
    for k in 0..lay.nl {
        let i = m.load_offset() + k;
        r.push(-d.q_l[i] - q[i]);
    }
    for k in 0..lay.nd {
        if p_set[k] {
            r.push(pg[k] - b.p_max.expect("cap active only with p_max"));
        } else {
            r.push(-pg[k] / prob.cost.weights[k] + lam[k]);
        }
    }
    for i in 0..lay.n - 1 {
        r.push((0..lay.n).map(|j| lap[(i, j)] * lam[j]).sum());
    }
    let dphi = powerflow::loss_grad_inverters(m, &prof);
    for k in 0..lay.ni {
        let uk = x[lay.u_i() + k];
        match u_set[k] {
            Active::Lower => r.push(uk - b.u_i_min),
            Active::Upper => r.push(uk - b.u_i_max),
            Active::Free => r.push((0..lay.n).map(|i| dphi[i][k] * lam[i]).sum()),
        }
    }
    let psi = powerflow::psi_map(m, &prof, &x[lay.u_g()..lay.u_g() + lay.ng]).expect("sized");
    let target = hint_psi_target(&prof);
    for k in 0..lay.ng {
        r.push(psi[k] - target[k]);
    }
    r
}

fn initial_guess(prob: &DispatchProblem, lay: &Layout, hint: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; lay.len()];
    let total: f64 = prob.demands.p_l.iter().sum();
    let wsum: f64 = prob.cost.weights.iter().sum();
    let c = total / wsum;
    for k in 0..lay.nl {
        x[lay.u_l() + k] = 1.0;
    }
    for k in 0..lay.nd {
        x[lay.p() + k] = c * prob.cost.weights[k];
    }
    for i in 0..lay.n {
        x[lay.lambda() + i] = c;
    }
    for k in 0..lay.ni {
        x[lay.u_i() + k] = prob.bounds.inverter_midpoint();
    }
    x[lay.u_g()..lay.u_g() + lay.ng].copy_from_slice(hint);
    x
}

/// Solves the distributed dispatch problem to a KKT point.
///
/// Inequality constraints (dispatch cap, inverter voltage band) are handled by
/// a primal active set: start with every inverter at its lower voltage bound
/// and no cap active, add the most violated
/// constraint (lowest index on ties), drop constraints whose multiplier has
/// the wrong sign, and re-solve until the point is primal and dual feasible.
pub fn solve_op_sharp(prob: &DispatchProblem, opts: &SolveOptions) -> Result<KktPoint> {
    prob.validate()?;
    let m = prob.network;
    let lay = Layout::new(m);
    let lap = comm_laplacian(m);
    let b = prob.bounds;
    let hint = prob.hint();
    if let Some(pmax) = b.p_max {
        let demand: f64 = prob.demands.p_l.iter().sum();
        if demand >= pmax * lay.nd as f64 {
            return Err(Error::solver("demand exceeds total dispatch capacity", demand - pmax * lay.nd as f64));
        }
    }

    let target = |prof: &VoltagePhaseProfile| -> Vec<f64> {
        let psi_hint = powerflow::psi_map(m, prof, &hint).expect("sized");
        let (lo, hi) = b.excitation_bounds(m, prof, prob.psi).expect("sized");
        (0..lay.ng).map(|k| psi_hint[k].clamp(lo[k], hi[k])).collect()
    };

    let mut p_set = vec![false; lay.nd];
    // Start from the lower voltage band: a feasible, well-conditioned point
    // from which wrongly pinned inverters are released by the sign test.
    let mut u_set = vec![Active::Lower; lay.ni];
    let mut x = initial_guess(prob, &lay, &hint);
    let mut total_iters = 0;
    let max_rounds = 4 * (lay.nd + lay.ni) + 4;
    for _round in 0..max_rounds {
        let (sol, iters) = newton_fd(
            |x| sharp_residual(prob, &lay, &lap, &target, &p_set, &u_set, x),
            x.clone(),
            opts.tol,
            opts.max_iter,
        )?;
        total_iters += iters;
        x = sol;
        let point = assemble_sharp(prob, &lay, &x, &p_set, &u_set, total_iters)?;
        log::trace!("active set: caps {p_set:?}, inverter bounds {u_set:?}; p = {:?}, U_I = {:?}", point.p_g, point.u_i);

        // Dual feasibility of the current active set.
        let mut dropped = false;
        for k in 0..lay.nd {
            if p_set[k] && point.mu_p_plus[k] < -1e-12 {
                p_set[k] = false;
                dropped = true;
            }
        }
        for k in 0..lay.ni {
            let bad = match u_set[k] {
                Active::Lower => point.mu_i_minus[k] < -1e-12,
                Active::Upper => point.mu_i_plus[k] < -1e-12,
                Active::Free => false,
            };
            if bad {
                u_set[k] = Active::Free;
                dropped = true;
            }
        }
        if dropped {
            continue;
        }

        // Primal feasibility: add the most violated constraint. Voltage
        // bounds go first since they shift the losses every unit must cover.
        let mut worst: Option<(f64, usize)> = None;
        let viol_tol = 1e-12;
        for k in 0..lay.ni {
            let uk = point.u_i[k];
            let v = (b.u_i_min - uk).max(uk - b.u_i_max);
            if u_set[k] == Active::Free && v > viol_tol && worst.is_none_or(|(w, _)| v > w) {
                worst = Some((v, lay.nd + k));
            }
        }
        if let (None, Some(pmax)) = (worst, b.p_max) {
            for k in 0..lay.nd {
                let v = point.p_g[k] - pmax;
                if !p_set[k] && v > viol_tol && worst.is_none_or(|(w, _)| v > w) {
                    worst = Some((v, k));
                }
            }
        }
        match worst {
            None => return Ok(point),
            Some((_, idx)) if idx < lay.nd => p_set[idx] = true,
            Some((_, idx)) => {
                let k = idx - lay.nd;
                u_set[k] = if point.u_i[k] < b.u_i_min { Active::Lower } else { Active::Upper };
            }
        }
    }
    Err(Error::solver("active set did not settle", f64::NAN))
}

fn assemble_sharp(
    prob: &DispatchProblem,
    lay: &Layout,
    x: &[f64],
    p_set: &[bool],
    u_set: &[Active],
    iterations: usize,
) -> Result<KktPoint> {
    let m = prob.network;
    let theta = angles(x, lay.n);
    let u_g = x[lay.u_g()..lay.u_g() + lay.ng].to_vec();
    let u_i = x[lay.u_i()..lay.u_i() + lay.ni].to_vec();
    let u_l = x[lay.u_l()..lay.u_l() + lay.nl].to_vec();
    let p_g = x[lay.p()..lay.p() + lay.nd].to_vec();
    let lambda = x[lay.lambda()..lay.lambda() + lay.n].to_vec();
    let mut u = u_g.clone();
    u.extend_from_slice(&u_i);
    u.extend_from_slice(&u_l);
    let prof = VoltagePhaseProfile::from_angles(m, u, &theta);

    let mu_p_plus = (0..lay.nd)
        .map(|k| if p_set[k] { lambda[k] - p_g[k] / prob.cost.weights[k] } else { 0.0 })
        .collect();
    let dphi = powerflow::loss_grad_inverters(m, &prof);
    let mut mu_i_minus = vec![0.0; lay.ni];
    let mut mu_i_plus = vec![0.0; lay.ni];
    for k in 0..lay.ni {
        let g: f64 = (0..lay.n).map(|i| dphi[i][k] * lambda[i]).sum();
        match u_set[k] {
            Active::Lower => mu_i_minus[k] = g,
            Active::Upper => mu_i_plus[k] = -g,
            Active::Free => {}
        }
    }
    let u_f = powerflow::psi_map(m, &prof, &u_g)?;
    let phi = powerflow::loss_vector(m, &prof)?;
    let mut rhs: Vec<f64> = (0..lay.n).map(|i| -prob.demands.p_l[i] - phi[i]).collect();
    for k in 0..lay.nd {
        rhs[k] += p_g[k];
    }
    let nu = min_norm_edge_flows(m, &rhs)?;
    let cost = controller::cost_and_gradient(&prob.cost, &p_g)?.0;
    let plant = PlantState {
        theta_diff: prof.theta_diff.clone(),
        l_g: vec![0.0; lay.ng],
        l_i: vec![0.0; lay.ni],
        u_g,
        omega_l: vec![0.0; lay.nl],
        u_l,
    };
    Ok(KktPoint {
        p_g,
        u_f,
        u_i,
        nu,
        lambda,
        mu_g_minus: vec![0.0; lay.ng],
        mu_g_plus: vec![0.0; lay.ng],
        mu_i_minus,
        mu_i_plus,
        mu_p_plus,
        plant,
        theta,
        cost,
        newton_iterations: iterations,
    })
}

/// Minimum-norm `ν` with `D_c ν = rhs`, computed as `D_cᵀ y` where `y`
/// solves the Laplacian system grounded at the first node.
pub fn min_norm_edge_flows(m: &NetworkModel, rhs: &[f64]) -> Result<Vec<f64>> {
    check_len("balance right-hand side", m.n_nodes(), rhs.len())?;
    let d = incidence_matrix(m, Graph::Communication);
    let b = DVector::from_column_slice(rhs);
    let n = m.n_nodes();
    let lap = &d * d.transpose();
    let mut y = DVector::<f64>::zeros(n);
    if n > 1 {
        let reduced = lap.view((1, 1), (n - 1, n - 1)).into_owned();
        let sol = reduced
            .lu()
            .solve(&b.rows(1, n - 1).into_owned())
            .ok_or_else(|| Error::solver("communication Laplacian is singular", f64::NAN))?;
        y.rows_mut(1, n - 1).copy_from(&sol);
    }
    let nu = d.transpose() * y;
    let res = (&d * &nu - &b).amax();
    if res > 1e-9 * (1.0 + b.amax()) {
        return Err(Error::solver("balance right-hand side not in the range of D_c", res));
    }
    Ok(nu.iter().copied().collect())
}

/// Result of the aggregate-balance route.
#[derive(Debug, Clone, PartialEq)]
pub struct OpSolution {
    pub p_g: Vec<f64>,
    pub u_g: Vec<f64>,
    pub u_i: Vec<f64>,
    pub price: f64,
    pub losses: f64,
    pub cost: f64,
    pub outer_iterations: usize,
}

/// Dispatch minimizing the quadratic cost with `Σ p = total` and `p ≤ p_max`.
/// Returns the dispatch and the common marginal cost.
pub fn water_fill(weights: &[f64], total: f64, p_max: Option<f64>) -> Result<(Vec<f64>, f64)> {
    let n = weights.len();
    let mut capped = vec![false; n];
    if let Some(pm) = p_max {
        if total > pm * n as f64 {
            return Err(Error::solver("demand exceeds total dispatch capacity", total - pm * n as f64));
        }
    }
    loop {
        let fixed: f64 = capped.iter().filter(|&&c| c).count() as f64 * p_max.unwrap_or(0.0);
        let wsum: f64 = weights.iter().zip(&capped).filter(|(_, &c)| !c).map(|(w, _)| w).sum();
        let c = (total - fixed) / wsum;
        let mut changed = false;
        if let Some(pm) = p_max {
            for k in 0..n {
                if !capped[k] && c * weights[k] > pm {
                    capped[k] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            let p = (0..n).map(|k| if capped[k] { p_max.unwrap() } else { c * weights[k] }).collect();
            return Ok((p, c));
        }
    }
}

/// Solves the original dispatch problem with the single aggregate balance
/// `Φ = Σ p_g - Σ p_l` and box constraints on generator voltages.
///
/// Outer damped fixed point over the losses: closed-form dispatch for the
/// current losses, then a power flow in which any mismatch is taken up by a
/// slack distributed in proportion to the cost weights of the uncapped units.
/// The power flow also carries the inverter voltages, each either at a bound
/// or at a stationary point of the losses.
pub fn solve_op(prob: &DispatchProblem, opts: &SolveOptions) -> Result<OpSolution> {
    prob.validate()?;
    let m = prob.network;
    let (n, nl, nd, ni) = (m.n_nodes(), m.n_load(), m.n_dispatch(), m.n_inv());
    let b = prob.bounds;
    let u_g = prob.hint();
    let demand: f64 = prob.demands.p_l.iter().sum();
    let mut losses = 0.0;
    // unknowns: angles (n-1), U_L, slack, U_I
    let (l_ul, l_s, l_ui) = (n - 1, n - 1 + nl, n + nl);
    let mut x = vec![0.0; n + nl + ni];
    x[l_ul..l_s].iter_mut().for_each(|v| *v = 1.0);
    x[l_ui..].iter_mut().for_each(|v| *v = b.u_i_min);
    // Same start as the distributed solver: every inverter on its lower bound.
    let mut pinned: Vec<Option<f64>> = vec![Some(b.u_i_min); ni];

    let build = |x: &[f64]| {
        let th = angles(x, n);
        let mut u = u_g.clone();
        u.extend_from_slice(&x[l_ui..]);
        u.extend_from_slice(&x[l_ul..l_s]);
        VoltagePhaseProfile::from_angles(m, u, &th)
    };
    // Half the partial derivative of the total losses in each inverter voltage.
    let loss_slope = |prof: &VoltagePhaseProfile, k: usize| -> f64 {
        let node = m.inv_offset() + k;
        m.node(node).g_self() * prof.u[node]
            + m.neighbors(node)
                .iter()
                .map(|nb| m.lines()[nb.edge].g * prof.u[nb.node] * (nb.sign * prof.theta_diff[nb.edge]).cos())
                .sum::<f64>()
    };

    let mut last = f64::NAN;
    for outer in 0..opts.max_outer {
        let (p, price) = water_fill(&prob.cost.weights, demand + losses, b.p_max)?;
        let free: Vec<f64> = (0..nd)
            .map(|k| if b.p_max.is_some_and(|pm| p[k] >= pm) { 0.0 } else { prob.cost.weights[k] })
            .collect();
        let f = |x: &[f64]| {
            let prof = build(x);
            let pf = powerflow::active_flow(m, &prof).expect("sized");
            let qf = powerflow::reactive_flow(m, &prof).expect("sized");
            let s = x[l_s];
            let mut r = Vec::with_capacity(x.len());
            for i in 0..n {
                let inj = if i < nd { p[i] + s * free[i] } else { 0.0 };
                r.push(inj - prob.demands.p_l[i] - pf[i]);
            }
            for k in 0..nl {
                let i = m.load_offset() + k;
                r.push(-prob.demands.q_l[i] - qf[i]);
            }
            for (k, pin) in pinned.iter().enumerate() {
                r.push(match pin {
                    Some(v) => x[l_ui + k] - v,
                    None => loss_slope(&prof, k),
                });
            }
            r
        };
        let (sol, _) = newton_fd(f, x.clone(), opts.tol, opts.max_iter)?;
        x = sol;
        let prof = build(&x);
        let new_losses = powerflow::loss_total(m, &prof)?;

        // Inverter voltage bounds: pin violators, release pinned voltages whose
        // loss slope points into the band. A nonpositive price reverses the
        // preferred direction.
        let sign = if price >= 0.0 { 1.0 } else { -1.0 };
        let mut changed = false;
        for k in 0..ni {
            let u = x[l_ui + k];
            match pinned[k] {
                None if u < b.u_i_min - opts.tol => {
                    pinned[k] = Some(b.u_i_min);
                    changed = true;
                }
                None if u > b.u_i_max + opts.tol => {
                    pinned[k] = Some(b.u_i_max);
                    changed = true;
                }
                Some(v) => {
                    let g = sign * loss_slope(&prof, k);
                    if (v == b.u_i_min && g < 0.0) || (v == b.u_i_max && g > 0.0) {
                        pinned[k] = None;
                        changed = true;
                    }
                }
                None if price < 0.0 => {
                    pinned[k] = Some(if u - b.u_i_min > b.u_i_max - u { b.u_i_min } else { b.u_i_max });
                    changed = true;
                }
                None => {}
            }
        }

        let d_loss = new_losses - losses;
        let slack = x[l_s].abs();
        log::trace!("outer {outer}: losses {new_losses:e} (change {d_loss:e}), slack {slack:e}, pinned {pinned:?}, price {price}");
        if !changed && d_loss.abs() < opts.tol && slack < opts.tol {
            let p_final: Vec<f64> = (0..nd).map(|k| p[k] + x[l_s] * free[k]).collect();
            let cost = controller::cost_and_gradient(&prob.cost, &p_final)?.0;
            return Ok(OpSolution {
                p_g: p_final,
                u_g,
                u_i: x[l_ui..].to_vec(),
                price,
                losses: new_losses,
                cost,
                outer_iterations: outer + 1,
            });
        }
        if changed {
            for (k, pin) in pinned.iter().enumerate() {
                if let Some(v) = pin {
                    x[l_ui + k] = *v;
                }
            }
        }
        losses += opts.damping * d_loss;
        last = d_loss.abs().max(slack);
    }
    Err(Error::solver("outer fixed point did not converge", last))
}

/// Named residuals of the KKT conditions plus the plant steady state.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub entries: Vec<(&'static str, f64)>,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, (_, v)| m.max(*v))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

fn amax(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Evaluates every KKT condition at `point`. Each entry is a max-norm; a value
/// of zero means the condition holds exactly.
pub fn kkt_residual(prob: &DispatchProblem, point: &KktPoint) -> Result<KktReport> {
    let m = prob.network;
    let b = &prob.bounds;
    let (n, nd, ng, ni) = (m.n_nodes(), m.n_dispatch(), m.n_gen(), m.n_inv());
    let prof = point.profile();
    let phi = powerflow::loss_vector(m, &prof)?;
    let (_, grad) = controller::cost_and_gradient(&prob.cost, &point.p_g)?;

    let stationarity_p = amax((0..nd).map(|k| grad[k] - point.lambda[k] + point.mu_p_plus[k]));
    let mut bal: Vec<f64> = (0..n).map(|i| prob.demands.p_l[i] + phi[i]).collect();
    for k in 0..nd {
        bal[k] -= point.p_g[k];
    }
    for (e, &(i, j)) in m.comm_edges().iter().enumerate() {
        bal[i] += point.nu[e];
        bal[j] -= point.nu[e];
    }
    let balance = amax(bal);
    let consensus = amax(m.comm_edges().iter().map(|&(i, j)| point.lambda[i] - point.lambda[j]));
    let stationarity_uf = amax((0..ng).map(|k| point.mu_g_minus[k] - point.mu_g_plus[k]));

    let dpsi = powerflow::psi_grad_inverters(m, &prof, prob.psi);
    let dphi = powerflow::loss_grad_inverters(m, &prof);
    let stationarity_ui = amax((0..ni).map(|k| {
        let mut v = -point.mu_i_minus[k] + point.mu_i_plus[k];
        for g in 0..ng {
            v += dpsi[g][k] * (point.mu_g_minus[g] - point.mu_g_plus[g]);
        }
        for i in 0..n {
            v += dphi[i][k] * point.lambda[i];
        }
        v
    }));

    let (psi_lo, psi_hi) = b.excitation_bounds(m, &prof, prob.psi)?;
    let mut feas = Vec::new();
    for k in 0..ng {
        feas.push((psi_lo[k] - point.u_f[k]).max(0.0));
        feas.push((point.u_f[k] - psi_hi[k]).max(0.0));
    }
    for k in 0..ni {
        feas.push((b.u_i_min - point.u_i[k]).max(0.0));
        feas.push((point.u_i[k] - b.u_i_max).max(0.0));
    }
    if let Some(pm) = b.p_max {
        feas.extend(point.p_g.iter().map(|p| (p - pm).max(0.0)));
    }
    let primal_feasibility = amax(feas);

    let mut comp = Vec::new();
    for k in 0..ng {
        comp.push(point.mu_g_minus[k] * (psi_lo[k] - point.u_f[k]));
        comp.push(point.mu_g_plus[k] * (point.u_f[k] - psi_hi[k]));
    }
    for k in 0..ni {
        comp.push(point.mu_i_minus[k] * (b.u_i_min - point.u_i[k]));
        comp.push(point.mu_i_plus[k] * (point.u_i[k] - b.u_i_max));
    }
    let pm = b.p_max.unwrap_or(f64::INFINITY);
    for k in 0..nd {
        let slack = if pm.is_finite() { point.p_g[k] - pm } else { 0.0 };
        comp.push(point.mu_p_plus[k] * slack);
    }
    let complementarity = amax(comp);

    let dual_sign = amax(
        point
            .mu_g_minus
            .iter()
            .chain(&point.mu_g_plus)
            .chain(&point.mu_i_minus)
            .chain(&point.mu_i_plus)
            .chain(&point.mu_p_plus)
            .map(|&v| v.min(0.0)),
    );

    let input = PlantInput {
        p_gen: point.p_g[..ng].to_vec(),
        p_inv: point.p_g[ng..].to_vec(),
        u_f: point.u_f.clone(),
        u_i: point.u_i.clone(),
        p_l: prob.demands.p_l.clone(),
        q_l: prob.demands.q_l.clone(),
    };
    let dyn_r = plant::dynamic_residual(m, &point.plant, &input)?;
    let alg_r = plant::algebraic_residual(m, &point.plant, &input)?;
    let plant_steady_state = dyn_r.max_abs().max(amax(alg_r));

    Ok(KktReport {
        entries: vec![
            ("stationarity_p", stationarity_p),
            ("balance", balance),
            ("consensus", consensus),
            ("stationarity_uf", stationarity_uf),
            ("stationarity_ui", stationarity_ui),
            ("primal_feasibility", primal_feasibility),
            ("complementarity", complementarity),
            ("dual_sign", dual_sign),
            ("plant_steady_state", plant_steady_state),
        ],
    })
}

/// Full closed-loop state at the oracle optimum: zero frequency deviation,
/// steady plant, controller at rest.
pub fn consistent_equilibrium(
    prob: &DispatchProblem,
    gains: &ControllerGains,
    opts: &SolveOptions,
) -> Result<(PlantState, ControllerState, KktPoint)> {
    gains.validate()?;
    let point = solve_op_sharp(prob, opts)?;
    Ok((point.plant.clone(), point.controller_state(), point))
}
