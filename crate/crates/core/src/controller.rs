//! Distributed primal-dual gradient controller.
//!
//! The frequency block drives the dispatch `p_g`, the nodal prices `λ` and the
//! edge variables `ν` on the communication graph. The voltage block keeps the
//! excitation commands `U_f` within the excitation bounds and the inverter
//! voltages `U_I` within their band, using projected duals `μ`. An optional
//! upper limit on `p_g` is handled by a further projected dual `μ_p`.

use crate::error::{check_len, Error, Result};
use crate::netmodel::NetworkModel;
use crate::powerflow::{self, PsiVariant, VoltagePhaseProfile};

/// `⟨x⟩⁺_μ`: passes `x` through unless the dual sits at zero and `x` would
/// push it negative.
#[inline]
pub fn project(x: f64, mu: f64) -> f64 {
    if mu > 0.0 || x >= 0.0 {
        x
    } else {
        0.0
    }
}

/// Componentwise [`project`]. Every `mu` must be nonnegative.
pub fn project_dual(x: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    check_len("dual vector", x.len(), mu.len())?;
    if let Some(k) = mu.iter().position(|&m| !(m >= 0.0)) {
        return Err(Error::Precondition(format!("dual entry {k} is negative ({})", mu[k])));
    }
    Ok(x.iter().zip(mu).map(|(&x, &m)| project(x, m)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Dispatch at generators then inverters.
    pub p_g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu_g_minus: Vec<f64>,
    pub mu_g_plus: Vec<f64>,
    pub u_f: Vec<f64>,
    pub mu_i_minus: Vec<f64>,
    pub mu_i_plus: Vec<f64>,
    pub u_i: Vec<f64>,
    pub mu_p_plus: Vec<f64>,
}

impl ControllerState {
    pub fn zeros(model: &NetworkModel) -> Self {
        let (ng, ni, nd) = (model.n_gen(), model.n_inv(), model.n_dispatch());
        Self {
            p_g: vec![0.0; nd],
            lambda: vec![0.0; model.n_nodes()],
            nu: vec![0.0; model.n_comm()],
            mu_g_minus: vec![0.0; ng],
            mu_g_plus: vec![0.0; ng],
            u_f: vec![0.0; ng],
            mu_i_minus: vec![0.0; ni],
            mu_i_plus: vec![0.0; ni],
            u_i: vec![0.0; ni],
            mu_p_plus: vec![0.0; nd],
        }
    }

    pub fn check(&self, model: &NetworkModel) -> Result<()> {
        let (ng, ni, nd) = (model.n_gen(), model.n_inv(), model.n_dispatch());
        check_len("p_g", nd, self.p_g.len())?;
        check_len("lambda", model.n_nodes(), self.lambda.len())?;
        check_len("nu", model.n_comm(), self.nu.len())?;
        check_len("mu_G-", ng, self.mu_g_minus.len())?;
        check_len("mu_G+", ng, self.mu_g_plus.len())?;
        check_len("U_f", ng, self.u_f.len())?;
        check_len("mu_I-", ni, self.mu_i_minus.len())?;
        check_len("mu_I+", ni, self.mu_i_plus.len())?;
        check_len("U_I", ni, self.u_i.len())?;
        check_len("mu_p+", nd, self.mu_p_plus.len())
    }

    /// Smallest dual entry across all projected duals.
    pub fn min_dual(&self) -> f64 {
        self.duals().fold(f64::INFINITY, f64::min)
    }

    fn duals(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu_g_minus
            .iter()
            .chain(&self.mu_g_plus)
            .chain(&self.mu_i_minus)
            .chain(&self.mu_i_plus)
            .chain(&self.mu_p_plus)
            .copied()
    }
}

/// Time constants of each controller block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub tau_g: f64,
    pub tau_lambda: f64,
    pub tau_nu: f64,
    pub tau_mu_g: f64,
    pub tau_u_g: f64,
    pub tau_mu_i: f64,
    pub tau_u_i: f64,
    pub tau_mu_p: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            tau_g: 0.1,
            tau_lambda: 0.1,
            tau_nu: 0.1,
            tau_mu_g: 0.01,
            tau_u_g: 0.01,
            tau_mu_i: 0.1,
            tau_u_i: 10.0,
            tau_mu_p: 0.1,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("tau_g", self.tau_g),
            ("tau_lambda", self.tau_lambda),
            ("tau_nu", self.tau_nu),
            ("tau_mu_g", self.tau_mu_g),
            ("tau_u_g", self.tau_u_g),
            ("tau_mu_i", self.tau_mu_i),
            ("tau_u_i", self.tau_u_i),
            ("tau_mu_p", self.tau_mu_p),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invariant(format!("gain {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Quadratic generation cost `C(p) = ½ Σ p_i² / w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub weights: Vec<f64>,
}

impl CostSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(k) = weights.iter().position(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::invariant(format!("cost weight {k} must be positive")));
        }
        Ok(Self { weights })
    }

    /// Weights `1, 1.1, 1.2, ...` over the dispatchable nodes.
    pub fn linear_ramp(n: usize) -> Self {
        Self { weights: (0..n).map(|k| 1.0 + 0.1 * k as f64).collect() }
    }
}

pub fn cost_and_gradient(cost: &CostSpec, p_g: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("p_g", cost.weights.len(), p_g.len())?;
    let c = p_g.iter().zip(&cost.weights).map(|(p, w)| 0.5 * p * p / w).sum();
    let g = p_g.iter().zip(&cost.weights).map(|(p, w)| p / w).collect();
    Ok((c, g))
}

/// Operating limits shared by the controller and the steady-state oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub u_g_min: f64,
    pub u_g_max: f64,
    pub u_i_min: f64,
    pub u_i_max: f64,
    /// Upper limit on every `p_g`, if any.
    pub p_max: Option<f64>,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_g_min < self.u_g_max) || !(self.u_i_min < self.u_i_max) {
            return Err(Error::invariant("voltage bounds must satisfy lower < upper"));
        }
        if !(self.u_g_min > 0.0 && self.u_i_min > 0.0) {
            return Err(Error::invariant("voltage bounds must be positive"));
        }
        if let Some(p) = self.p_max {
            if !p.is_finite() {
                return Err(Error::invariant("p_max must be finite"));
            }
        }
        Ok(())
    }

    pub fn inverter_midpoint(&self) -> f64 {
        0.5 * (self.u_i_min + self.u_i_max)
    }

    pub fn psi_variant(&self, hat: bool) -> PsiVariant {
        if hat {
            PsiVariant::Hat { estimate: self.inverter_midpoint() }
        } else {
            PsiVariant::Exact
        }
    }

    /// Excitation bounds `(Ψ(U̲_G), Ψ(Ū_G))` at the given profile.
    pub fn excitation_bounds(
        &self,
        model: &NetworkModel,
        profile: &VoltagePhaseProfile,
        variant: PsiVariant,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let lo = powerflow::psi_variant_map(model, profile, &vec![self.u_g_min; model.n_gen()], variant)?;
        let hi = powerflow::psi_variant_map(model, profile, &vec![self.u_g_max; model.n_gen()], variant)?;
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqDerivative {
    pub p_g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu_p_plus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltDerivative {
    pub mu_g_minus: Vec<f64>,
    pub mu_g_plus: Vec<f64>,
    pub u_f: Vec<f64>,
    pub mu_i_minus: Vec<f64>,
    pub mu_i_plus: Vec<f64>,
    pub u_i: Vec<f64>,
}

/// Frequency block:
///
/// ```text
/// τ_g ṗ_g  = -∇C(p_g) + λ_g - ω_g - μ_p
/// τ_λ λ̇    = D_c ν - Î_gᵀ p_g + p_l + φ
/// τ_ν ν̇    = -D_cᵀ λ
/// τ_μp μ̇_p = ⟨p_g - p̄⟩⁺_μp
/// ```
///
/// `omega_g` holds frequencies at the dispatchable nodes. Without a `p_max`
/// the `μ_p` terms vanish.
#[allow(clippy::too_many_arguments)]
pub fn freq_controller_rhs(
    model: &NetworkModel,
    cost: &CostSpec,
    gains: &ControllerGains,
    bounds: &Bounds,
    ctrl: &ControllerState,
    omega_g: &[f64],
    phi: &[f64],
    p_l: &[f64],
) -> Result<FreqDerivative> {
    let nd = model.n_dispatch();
    let n = model.n_nodes();
    check_len("omega_g", nd, omega_g.len())?;
    check_len("phi", n, phi.len())?;
    check_len("p_l", n, p_l.len())?;
    check_len("p_g", nd, ctrl.p_g.len())?;
    check_len("lambda", n, ctrl.lambda.len())?;
    check_len("nu", model.n_comm(), ctrl.nu.len())?;
    check_len("cost weights", nd, cost.weights.len())?;

    let capped = bounds.p_max.is_some();
    let p_g = (0..nd)
        .map(|k| {
            let mut v = -ctrl.p_g[k] / cost.weights[k] + ctrl.lambda[k] - omega_g[k];
            if capped {
                v -= ctrl.mu_p_plus[k];
            }
            v / gains.tau_g
        })
        .collect();

    let mut lambda: Vec<f64> = (0..n).map(|i| p_l[i] + phi[i]).collect();
    for (k, p) in ctrl.p_g.iter().enumerate() {
        lambda[k] -= p;
    }
    let mut nu = Vec::with_capacity(model.n_comm());
    for (e, &(i, j)) in model.comm_edges().iter().enumerate() {
        lambda[i] += ctrl.nu[e];
        lambda[j] -= ctrl.nu[e];
        nu.push(-(ctrl.lambda[i] - ctrl.lambda[j]) / gains.tau_nu);
    }
    lambda.iter_mut().for_each(|v| *v /= gains.tau_lambda);

    let mu_p_plus = match bounds.p_max {
        Some(pmax) => (0..nd).map(|k| project(ctrl.p_g[k] - pmax, ctrl.mu_p_plus[k]) / gains.tau_mu_p).collect(),
        None => vec![0.0; nd],
    };
    Ok(FreqDerivative { p_g, lambda, nu, mu_p_plus })
}

/// Voltage block:
///
/// ```text
/// τ μ̇_G-  = ⟨Ψ̲ - U_f⟩⁺          τ μ̇_I-  = ⟨U̲_I - U_I⟩⁺
/// τ μ̇_G+  = ⟨U_f - Ψ̄⟩⁺          τ μ̇_I+  = ⟨U_I - Ū_I⟩⁺
/// τ U̇_f   = μ_G- - μ_G+
/// τ U̇_I   = -(∇_UI Ψ)ᵀ(μ_G- - μ_G+) - (∇_UI φ)ᵀ λ + μ_I- - μ_I+
/// ```
///
/// The excitation bounds and both Jacobians are evaluated at `profile`.
#[allow(clippy::too_many_arguments)]
pub fn volt_controller_rhs(
    model: &NetworkModel,
    gains: &ControllerGains,
    bounds: &Bounds,
    variant: PsiVariant,
    ctrl: &ControllerState,
    profile: &VoltagePhaseProfile,
    lambda: &[f64],
) -> Result<VoltDerivative> {
    let (ng, ni) = (model.n_gen(), model.n_inv());
    check_len("lambda", model.n_nodes(), lambda.len())?;
    check_len("U_f", ng, ctrl.u_f.len())?;
    check_len("U_I", ni, ctrl.u_i.len())?;
    let (psi_lo, psi_hi) = bounds.excitation_bounds(model, profile, variant)?;

    let mu_g_minus = (0..ng).map(|k| project(psi_lo[k] - ctrl.u_f[k], ctrl.mu_g_minus[k]) / gains.tau_mu_g).collect();
    let mu_g_plus = (0..ng).map(|k| project(ctrl.u_f[k] - psi_hi[k], ctrl.mu_g_plus[k]) / gains.tau_mu_g).collect();
    let u_f = (0..ng).map(|k| (ctrl.mu_g_minus[k] - ctrl.mu_g_plus[k]) / gains.tau_u_g).collect();
    let mu_i_minus = (0..ni).map(|k| project(bounds.u_i_min - ctrl.u_i[k], ctrl.mu_i_minus[k]) / gains.tau_mu_i).collect();
    let mu_i_plus = (0..ni).map(|k| project(ctrl.u_i[k] - bounds.u_i_max, ctrl.mu_i_plus[k]) / gains.tau_mu_i).collect();

    let dpsi = powerflow::psi_grad_inverters(model, profile, variant);
    let dphi = powerflow::loss_grad_inverters(model, profile);
    let u_i = (0..ni)
        .map(|k| {
            let mut v = ctrl.mu_i_minus[k] - ctrl.mu_i_plus[k];
            for g in 0..ng {
                v -= dpsi[g][k] * (ctrl.mu_g_minus[g] - ctrl.mu_g_plus[g]);
            }
            for (i, row) in dphi.iter().enumerate() {
                v -= row[k] * lambda[i];
            }
            v / gains.tau_u_i
        })
        .collect();
    Ok(VoltDerivative { mu_g_minus, mu_g_plus, u_f, mu_i_minus, mu_i_plus, u_i })
}
