//! Optimal-control analysis of the reduced two-ODE system: hypothesis
//! checks, Hamiltonian and adjoint, switching functions, forward shooting
//! over the three-arc second phase, the instantaneous Dirac optimum, and
//! the two one-population toy problems.

use serde::{Deserialize, Serialize};

use crate::asymptotics::{equilibrium, EquilibriumReport};
use crate::error::{Error, Result};
use crate::grid::PhenotypeGrid;
use crate::ide_sim::REFERENCE_MASS_H;
use crate::model::{DosePair, ModelParams, Population};
use crate::numerics::{bisect, golden_min};
use crate::ode_reduce::{check_decreasing, rk4_step, AtomRates};
use crate::strategies::{boundary_u1_on_h, boundary_u1_on_hc, ArcKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub p_h: f64,
    pub p_c: f64,
    pub eta_1: f64,
    pub eta_2: f64,
    pub p0: f64,
}

impl AdjointState {
    pub fn new(p_h: f64, p_c: f64) -> Self {
        Self {
            p_h,
            p_c,
            eta_1: 0.0,
            eta_2: 0.0,
            p0: -1.0,
        }
    }

    /// Transversality at the final time: `p_H = 0`, `p_C = p0 = -1`.
    pub fn terminal() -> Self {
        Self::new(0.0, -1.0)
    }

    pub fn with_multipliers(mut self, eta_1: f64, eta_2: f64) -> Self {
        self.eta_1 = eta_1;
        self.eta_2 = eta_2;
        self
    }
}

/// Rates frozen at the concentration phenotypes together with the healthy
/// reference total `ρ_H⁰` of the floor constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedSystem {
    pub atoms: AtomRates,
    pub rho_h0: f64,
}

impl ReducedSystem {
    pub fn new(atoms: AtomRates, rho_h0: f64) -> Self {
        Self { atoms, rho_h0 }
    }

    pub fn hamiltonian(&self, rho_h: f64, rho_c: f64, adj: &AdjointState, dose: DosePair) -> f64 {
        let a = &self.atoms;
        adj.p_h * a.growth_h(rho_h, rho_c, dose) * rho_h
            + adj.p_c * a.growth_c(rho_h, rho_c, dose) * rho_c
            + adj.eta_1 * (a.theta_h * self.rho_h0 - rho_h)
            + adj.eta_2 * (rho_c - a.gamma() * rho_h)
    }

    /// `(dp_H/dt, dp_C/dt) = -∂H/∂(ρ_H, ρ_C)`.
    pub fn adjoint_rhs(&self, rho_h: f64, rho_c: f64, adj: &AdjointState, dose: DosePair) -> (f64, f64) {
        let a = &self.atoms;
        let g = a.gamma();
        let rh = a.growth_h(rho_h, rho_c, dose);
        let rc = a.growth_c(rho_h, rho_c, dose);
        (
            -adj.p_h * (-a.a_hh * a.d_h * rho_h + rh) + a.a_ch * a.d_c * adj.p_c * rho_c + adj.eta_1 + g * adj.eta_2,
            -adj.p_c * (-a.a_cc * a.d_c * rho_c + rc) + a.a_hc * a.d_h * adj.p_h * rho_h - adj.eta_2,
        )
    }

    pub fn switching_controls(&self, rho_h: f64, rho_c: f64, adj: &AdjointState) -> SwitchingControls {
        switching_controls(&self.atoms, rho_h, rho_c, adj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingControls {
    pub phi_1: f64,
    pub u1_star: f64,
    /// `|φ1|` below the singular tolerance: `u1_star` is not determined by the sign.
    pub singular: bool,
    pub u2_star: f64,
    /// `[c2, c1, c0]` of `P(u) = c2 u² + c1 u + c0`, whose sign is opposite
    /// to that of `ψ'(u)`.
    pub p_coeffs: [f64; 3],
}

/// `ψ(u2) = r_H p_H ρ_H/(1+α_H u2) + r_C p_C ρ_C/(1+α_C u2)`.
pub fn psi(atoms: &AtomRates, rho_h: f64, rho_c: f64, adj: &AdjointState, u2: f64) -> f64 {
    atoms.r_h * adj.p_h * rho_h / (1.0 + atoms.alpha_h * u2) + atoms.r_c * adj.p_c * rho_c / (1.0 + atoms.alpha_c * u2)
}

pub fn p_coefficients(atoms: &AtomRates, rho_h: f64, rho_c: f64, adj: &AdjointState) -> [f64; 3] {
    let (ah, ac) = (atoms.alpha_h, atoms.alpha_c);
    let a = atoms.r_h * adj.p_h * rho_h;
    let b = atoms.r_c * adj.p_c * rho_c;
    [ah * ac * (ac * a + ah * b), 2.0 * ah * ac * (a + b), ah * a + ac * b]
}

fn real_roots(c: [f64; 3]) -> Vec<f64> {
    let [a, b, c0] = c;
    if a.abs() < 1e-300 {
        return if b.abs() < 1e-300 { vec![] } else { vec![-c0 / b] };
    }
    let disc = b * b - 4.0 * a * c0;
    if disc < 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    // numerically stable pair
    let q = -0.5 * (b + b.signum() * sq);
    let mut r = vec![q / a];
    if q != 0.0 {
        r.push(c0 / q);
    }
    r
}

pub fn switching_controls(atoms: &AtomRates, rho_h: f64, rho_c: f64, adj: &AdjointState) -> SwitchingControls {
    let phi_1 = atoms.mu_h * adj.p_h * rho_h + atoms.mu_c * adj.p_c * rho_c;
    let scale = (atoms.mu_h * adj.p_h * rho_h).abs() + (atoms.mu_c * adj.p_c * rho_c).abs();
    let singular = phi_1.abs() <= 1e-8 * scale.max(f64::MIN_POSITIVE);
    let u1_star = if phi_1 < 0.0 { atoms.u1_max } else { 0.0 };
    let p_coeffs = p_coefficients(atoms, rho_h, rho_c, adj);
    let mut cands = vec![0.0, atoms.u2_max];
    cands.extend(
        real_roots(p_coeffs)
            .into_iter()
            .filter(|r| *r > 0.0 && *r < atoms.u2_max),
    );
    let u2_star = cands
        .into_iter()
        .map(|u| (u, psi(atoms, rho_h, rho_c, adj, u)))
        .fold((0.0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
        .0;
    SwitchingControls {
        phi_1,
        u1_star,
        singular,
        u2_star,
        p_coeffs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisStatus {
    Pass,
    Fail,
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub status: HypothesisStatus,
    pub detail: String,
}

impl HypothesisCheck {
    /// `lhs < rhs`.
    fn less(id: &str, lhs: f64, rhs: f64, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            lhs,
            rhs,
            status: if lhs < rhs {
                HypothesisStatus::Pass
            } else {
                HypothesisStatus::Fail
            },
            detail: detail.into(),
        }
    }

    fn inapplicable(id: &str, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            lhs: f64::NAN,
            rhs: f64::NAN,
            status: HypothesisStatus::Inapplicable,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub u_bar: DosePair,
    pub x_h_inf: f64,
    pub x_c_inf: f64,
    pub rho_h0: f64,
    pub gamma: f64,
    pub r_d: f64,
    pub d_b: f64,
    pub checks: Vec<HypothesisCheck>,
}

impl HypothesisReport {
    /// Every check passed; inapplicable checks count as not passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == HypothesisStatus::Pass)
    }

    pub fn get(&self, id: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn failures(&self) -> Vec<&HypothesisCheck> {
        self.checks
            .iter()
            .filter(|c| c.status != HypothesisStatus::Pass)
            .collect()
    }
}

/// All structural hypotheses at the concentration phenotypes of `ū`, with
/// `ρ_H⁰` set to the healthy equilibrium total of `ū`.
pub fn check_hypotheses(params: &ModelParams, u_bar: DosePair) -> Result<HypothesisReport> {
    check_hypotheses_with(params, u_bar, None)
}

pub fn check_hypotheses_with(params: &ModelParams, u_bar: DosePair, rho_h0: Option<f64>) -> Result<HypothesisReport> {
    let mut checks = Vec::new();
    let alpha = HypothesisCheck::less(
        "alpha_order",
        params.alpha_h,
        params.alpha_c,
        "cytostatic sensitivity of healthy cells below that of cancer cells",
    );
    let alpha_ok = alpha.status == HypothesisStatus::Pass;
    checks.push(alpha);

    let eq = equilibrium(params, u_bar)?;
    let a = AtomRates::at_equilibrium(params, &eq);
    let rho_h0 = rho_h0.unwrap_or(eq.rho_h_inf);
    let gamma = a.gamma();
    let r_d = (a.r_c * a.mu_h - a.r_h * a.mu_c) + (a.a_hh * a.d_h * a.mu_c - a.mu_h * a.a_ch * a.d_c) * a.theta_h * rho_h0;
    let d_b = a.a_cc * a.mu_h * a.d_c - a.a_hc * a.mu_c * a.d_h;
    let mut report = HypothesisReport {
        u_bar,
        x_h_inf: eq.x_h_inf,
        x_c_inf: eq.x_c_inf,
        rho_h0,
        gamma,
        r_d,
        d_b,
        checks,
    };
    if !alpha_ok {
        return Ok(report);
    }
    let checks = &mut report.checks;

    let singles = (eq.singleton_h as u8 + eq.singleton_c as u8) as f64;
    checks.push(HypothesisCheck {
        id: "one_dirac".into(),
        lhs: singles,
        rhs: 2.0,
        status: if eq.singleton_h && eq.singleton_c {
            HypothesisStatus::Pass
        } else {
            HypothesisStatus::Fail
        },
        detail: "both limit argmax sets are singletons".into(),
    });

    let cur = check_decreasing(params, u_bar)?;
    checks.push(HypothesisCheck {
        id: "curability".into(),
        lhs: cur.first_failure.map_or(f64::INFINITY, |f| f.0),
        rhs: cur.horizon,
        status: if cur.passed() {
            HypothesisStatus::Pass
        } else {
            HypothesisStatus::Fail
        },
        detail: "maximal doses from equilibrium decrease both totals and the cancer ratio (lhs: first failure time)".into(),
    });

    let p1 = a.mu_c * a.a_hh * a.d_h - a.mu_h * a.a_ch * a.d_c;
    let p2 = a.a_cc * a.mu_h * a.d_c - a.a_hc * a.mu_c * a.d_h;
    if a.mu_c <= 0.0 {
        checks.push(HypothesisCheck::inapplicable("ratio_bound", "cancer cytotoxic sensitivity vanishes"));
    } else if p1 <= 0.0 || p2 <= 0.0 {
        checks.push(HypothesisCheck::inapplicable(
            "ratio_bound",
            format!("sign preconditions fail: {p1:.6e} and {p2:.6e} must be positive"),
        ));
    } else {
        checks.push(HypothesisCheck::less(
            "ratio_bound",
            gamma,
            a.mu_h / a.mu_c * p1 / p2,
            "gamma below the ratio of competition-weighted sensitivities",
        ));
    }

    checks.push(HypothesisCheck {
        id: "no_full_resistance".into(),
        lhs: a.mu_h.min(a.mu_c),
        rhs: 0.0,
        status: if a.mu_h > 0.0 && a.mu_c > 0.0 {
            HypothesisStatus::Pass
        } else {
            HypothesisStatus::Fail
        },
        detail: format!("mu_H = {:.6e}, mu_C = {:.6e} must be positive", a.mu_h, a.mu_c),
    });

    let l1 = a.alpha_h * a.mu_c * a.r_h;
    let r1 = a.alpha_c * a.mu_h * a.r_c;
    let l2 = a.alpha_h * a.mu_h * a.r_c;
    let r2 = a.alpha_c * a.mu_c * a.r_h;
    checks.push(HypothesisCheck {
        id: "cytostatic_selectivity".into(),
        lhs: (l1 - r1).max(l2 - r2),
        rhs: 0.0,
        status: if l1 < r1 && l2 < r2 {
            HypothesisStatus::Pass
        } else {
            HypothesisStatus::Fail
        },
        detail: format!("{l1:.6e} < {r1:.6e} and {l2:.6e} < {r2:.6e}"),
    });

    let u = a.u2_max;
    let q = (a.alpha_c * a.r_h * a.mu_c - a.alpha_h * a.r_c * a.mu_h) * u * u
        + 2.0 * (a.r_h * a.mu_c - a.r_c * a.mu_h) * u
        + (a.alpha_h * a.r_h * a.mu_c - a.alpha_c * a.r_c * a.mu_h) / (a.alpha_h * a.alpha_c);
    checks.push(HypothesisCheck::less(
        "cytostatic_quadratic",
        q,
        0.0,
        "quadratic in u2_max making maximal cytostatic dose optimal",
    ));

    if a.mu_h > 0.0 {
        let mut vals = Vec::new();
        for v in [0.0, a.u2_max] {
            for rho_c in [0.0, gamma * a.theta_h * rho_h0] {
                vals.push(boundary_u1_on_h(&a, v, rho_c, rho_h0)?.raw);
            }
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        checks.push(HypothesisCheck {
            id: "admissible_feedback".into(),
            lhs: lo,
            rhs: hi,
            status: if lo > 0.0 && hi < a.u1_max {
                HypothesisStatus::Pass
            } else {
                HypothesisStatus::Fail
            },
            detail: format!("floor feedback range [{lo:.6e}, {hi:.6e}] must lie inside (0, u1_max)"),
        });
    } else {
        checks.push(HypothesisCheck::inapplicable("admissible_feedback", "healthy cytotoxic sensitivity vanishes"));
    }

    checks.push(HypothesisCheck::less("r_d_positive", 0.0, r_d, "logistic growth coefficient on the floor arc"));
    checks.push(HypothesisCheck::less("d_b_positive", 0.0, d_b, "logistic damping coefficient on the floor arc"));
    if d_b > 0.0 {
        checks.push(HypothesisCheck::less(
            "floor_regrowth",
            gamma * a.theta_h * rho_h0,
            r_d / d_b,
            "without cytostatic drug the floor feedback cannot stop cancer growth",
        ));
    } else {
        checks.push(HypothesisCheck::inapplicable("floor_regrowth", "d_b is not positive"));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// Healthy reference total of the floor constraint.
    pub rho_h0: f64,
    /// Starting totals; defaults to the equilibrium of `ū`.
    pub start: Option<(f64, f64)>,
    pub dt: f64,
    /// Samples of the first-arc duration before golden refinement.
    pub tau_samples: usize,
    pub saturation_tol: f64,
    /// Refuse to synthesize when the hypotheses fail.
    pub require_hypotheses: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            rho_h0: REFERENCE_MASS_H,
            start: None,
            dt: 1e-3,
            tau_samples: 41,
            saturation_tol: 1e-3,
            require_hypotheses: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcSpan {
    pub kind: ArcKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointCheck {
    pub p_h: Vec<f64>,
    pub p_c: Vec<f64>,
    pub phi_1: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    /// Floor multiplier reconstructed on the floor arc (zero elsewhere).
    pub eta_1: Vec<f64>,
    /// `φ1 < 0` on every interior point of the maximal-dose arc.
    pub mtd_phi_negative: bool,
    /// Relative variation of `H` along the maximal-dose arc.
    pub hamiltonian_variation: f64,
    /// `(time, p_H jump)` at the floor junction and at the final time.
    pub jumps: Vec<(f64, f64)>,
    pub p_c_negative_on_floor: bool,
}

impl AdjointCheck {
    pub fn sign_consistent(&self) -> bool {
        self.mtd_phi_negative && self.p_c_negative_on_floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoSynthesis {
    pub u_bar: DosePair,
    pub t2: f64,
    pub start: (f64, f64),
    pub tau1: f64,
    pub arcs: Vec<ArcSpan>,
    pub times: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
    pub doses: Vec<DosePair>,
    pub modes: Vec<ArcKind>,
    pub final_rho_c: f64,
    pub hypotheses_passed: bool,
    pub adjoint: AdjointCheck,
}

struct ArcRun {
    times: Vec<f64>,
    rho_h: Vec<f64>,
    rho_c: Vec<f64>,
    doses: Vec<DosePair>,
    modes: Vec<ArcKind>,
}

fn hc_dose(a: &AtomRates, u2: f64, rho_h: f64) -> DosePair {
    let u1 = boundary_u1_on_hc(a, u2, rho_h).map(|b| b.u1).unwrap_or(0.0);
    DosePair::new(u1, u2)
}

fn floor_dose(sys: &ReducedSystem, rho_c: f64) -> DosePair {
    let a = &sys.atoms;
    let u1 = boundary_u1_on_h(a, a.u2_max, rho_c, sys.rho_h0).map(|b| b.u1).unwrap_or(0.0);
    DosePair::new(u1, a.u2_max)
}

/// Forward run of the arc family: constraint-ratio arc for `tau1`, maximal
/// doses until the healthy floor is hit (crossing located by secant), then
/// the floor arc with maximal cytostatic dose.
fn run_arcs(sys: &ReducedSystem, u2_hc: f64, start: (f64, f64), tau1: f64, t2: f64, dt: f64, tol: f64) -> Result<ArcRun> {
    let a = &sys.atoms;
    let floor = a.theta_h * sys.rho_h0;
    let gamma = a.gamma();
    let mut out = ArcRun {
        times: vec![0.0],
        rho_h: vec![start.0],
        rho_c: vec![start.1],
        doses: Vec::new(),
        modes: Vec::new(),
    };
    let mut rho = start;
    let mut t = 0.0;
    let mut mode = if tau1 > 0.0 { ArcKind::HcBoundary } else { ArcKind::FreeMtd };
    while t < t2 - 1e-12 {
        if mode == ArcKind::HcBoundary && t >= tau1 - 1e-12 {
            mode = ArcKind::FreeMtd;
        }
        if mode == ArcKind::FreeMtd && rho.0 <= floor * (1.0 + 1e-12) {
            mode = ArcKind::HBoundary;
        }
        let mut h = dt.min(t2 - t);
        if mode == ArcKind::HcBoundary {
            h = h.min(tau1 - t);
        }
        let dose_fn = |m: ArcKind, rh: f64, rc: f64| match m {
            ArcKind::HcBoundary => hc_dose(a, u2_hc, rh),
            ArcKind::HBoundary => floor_dose(sys, rc),
            _ => a.mtd(),
        };
        let mut next = rk4_step(a, rho, h, &mut |rh, rc| dose_fn(mode, rh, rc));
        if mode == ArcKind::FreeMtd && next.0 < floor {
            // shorten the step to land on the floor
            let s = h * (rho.0 - floor) / (rho.0 - next.0);
            if s > 1e-12 {
                h = s;
                next = rk4_step(a, rho, h, &mut |rh, rc| dose_fn(mode, rh, rc));
            } else {
                mode = ArcKind::HBoundary;
                next = rk4_step(a, rho, h, &mut |rh, rc| dose_fn(mode, rh, rc));
            }
        }
        out.doses.push(dose_fn(mode, rho.0, rho.1));
        out.modes.push(mode);
        rho = next;
        t += h;
        if !(rho.0.is_finite() && rho.1.is_finite()) {
            return Err(Error::NonFinite {
                t,
                x: a.x_c,
                population: Population::Cancer.label(),
            });
        }
        if mode == ArcKind::HBoundary && rho.1 >= gamma * rho.0 * (1.0 - tol) {
            return Err(Error::Infeasible(format!(
                "both constraints saturate at t = {t:.6}"
            )));
        }
        out.times.push(t);
        out.rho_h.push(rho.0);
        out.rho_c.push(rho.1);
    }
    let last_mode = *out.modes.last().unwrap_or(&mode);
    let last_dose = match last_mode {
        ArcKind::HcBoundary => hc_dose(a, u2_hc, rho.0),
        ArcKind::HBoundary => floor_dose(sys, rho.1),
        _ => a.mtd(),
    };
    out.doses.push(last_dose);
    out.modes.push(last_mode);
    Ok(out)
}

fn spans(times: &[f64], modes: &[ArcKind]) -> Vec<ArcSpan> {
    let mut out: Vec<ArcSpan> = Vec::new();
    for k in 0..modes.len().saturating_sub(1) {
        match out.last_mut() {
            Some(s) if s.kind == modes[k] => s.end = times[k + 1],
            _ => out.push(ArcSpan {
                kind: modes[k],
                start: times[k],
                end: times[k + 1],
            }),
        }
    }
    out
}

/// Cubic Hermite midpoint of a state from endpoint values and slopes.
fn hermite_mid(y0: f64, y1: f64, f0: f64, f1: f64, h: f64) -> f64 {
    0.5 * (y0 + y1) + h / 8.0 * (f0 - f1)
}

fn backward_check(sys: &ReducedSystem, run: &ArcRun) -> AdjointCheck {
    let a = &sys.atoms;
    let n = run.times.len();
    let mut p_h = vec![0.0; n];
    let mut p_c = vec![0.0; n];
    let mut eta_1 = vec![0.0; n];
    let mut jumps = Vec::new();
    let on_floor = |k: usize| run.modes[k.min(n - 1)] == ArcKind::HBoundary;
    // φ1 = 0 on the floor arc fixes p_H from p_C
    let floor_p_h = |p_c: f64, rh: f64, rc: f64| -a.mu_c * p_c * rc / (a.mu_h * rh);

    let terminal = AdjointState::terminal();
    p_c[n - 1] = terminal.p_c;
    p_h[n - 1] = if on_floor(n - 2) {
        let v = floor_p_h(terminal.p_c, run.rho_h[n - 1], run.rho_c[n - 1]);
        jumps.push((run.times[n - 1], terminal.p_h - v));
        v
    } else {
        terminal.p_h
    };
    for k in (0..n - 1).rev() {
        let h = run.times[k + 1] - run.times[k];
        let dose = run.doses[k];
        let mode = run.modes[k];
        let (rh0, rc0, rh1, rc1) = (run.rho_h[k], run.rho_c[k], run.rho_h[k + 1], run.rho_c[k + 1]);
        let f0 = a.rhs(rh0, rc0, if mode == ArcKind::HBoundary { floor_dose(sys, rc0) } else { dose });
        let f1 = a.rhs(rh1, rc1, if mode == ArcKind::HBoundary { floor_dose(sys, rc1) } else { dose });
        let mid = (hermite_mid(rh0, rh1, f0.0, f1.0, h), hermite_mid(rc0, rc1, f0.1, f1.1, h));
        let states = [(rh1, rc1), mid, (rh0, rc0)];
        let dose_at = |s: (f64, f64)| match mode {
            ArcKind::HBoundary => floor_dose(sys, s.1),
            ArcKind::HcBoundary => hc_dose(a, dose.u2, s.0),
            _ => dose,
        };
        if mode == ArcKind::HBoundary {
            let rate = |pc: f64, s: (f64, f64)| {
                let ph = floor_p_h(pc, s.0, s.1);
                sys.adjoint_rhs(s.0, s.1, &AdjointState::new(ph, pc), dose_at(s)).1
            };
            let pc = p_c[k + 1];
            let k1 = rate(pc, states[0]);
            let k2 = rate(pc - 0.5 * h * k1, states[1]);
            let k3 = rate(pc - 0.5 * h * k2, states[1]);
            let k4 = rate(pc - h * k3, states[2]);
            p_c[k] = pc - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            p_h[k] = floor_p_h(p_c[k], rh0, rc0);
            let dph = (p_h[k + 1] - p_h[k]) / h;
            let free = sys.adjoint_rhs(rh0, rc0, &AdjointState::new(p_h[k], p_c[k]), dose_at((rh0, rc0))).0;
            eta_1[k] = dph - free;
        } else {
            if k + 1 < n - 1 && on_floor(k + 1) {
                // entering the floor arc: continuity of p_H is assumed, the
                // mismatch with the free-arc value is the junction jump
                jumps.push((run.times[k + 1], 0.0));
            }
            let rate = |p: (f64, f64), s: (f64, f64)| sys.adjoint_rhs(s.0, s.1, &AdjointState::new(p.0, p.1), dose_at(s));
            let p = (p_h[k + 1], p_c[k + 1]);
            let k1 = rate(p, states[0]);
            let k2 = rate((p.0 - 0.5 * h * k1.0, p.1 - 0.5 * h * k1.1), states[1]);
            let k3 = rate((p.0 - 0.5 * h * k2.0, p.1 - 0.5 * h * k2.1), states[1]);
            let k4 = rate((p.0 - h * k3.0, p.1 - h * k3.1), states[2]);
            p_h[k] = p.0 - h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            p_c[k] = p.1 - h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
    }
    let mut phi_1 = Vec::with_capacity(n);
    let mut ham = Vec::with_capacity(n);
    for k in 0..n {
        let adj = AdjointState::new(p_h[k], p_c[k]);
        phi_1.push(a.mu_h * p_h[k] * run.rho_h[k] + a.mu_c * p_c[k] * run.rho_c[k]);
        ham.push(sys.hamiltonian(run.rho_h[k], run.rho_c[k], &adj, run.doses[k]));
    }
    let mtd_idx: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&k| run.modes[k] == ArcKind::FreeMtd && run.modes[k - 1] == ArcKind::FreeMtd && run.modes[k + 1] == ArcKind::FreeMtd)
        .collect();
    let mtd_phi_negative = mtd_idx.iter().all(|&k| phi_1[k] < 0.0);
    let hamiltonian_variation = if mtd_idx.is_empty() {
        0.0
    } else {
        let hs: Vec<f64> = mtd_idx.iter().map(|&k| ham[k]).collect();
        let lo = hs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = hs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale > 0.0 {
            (hi - lo) / scale
        } else {
            0.0
        }
    };
    let p_c_negative_on_floor = (0..n - 1).filter(|&k| on_floor(k)).all(|k| p_c[k] < 0.0);
    AdjointCheck {
        p_h,
        p_c,
        phi_1,
        hamiltonian: ham,
        eta_1,
        mtd_phi_negative,
        hamiltonian_variation,
        jumps,
        p_c_negative_on_floor,
    }
}

/// Forward shooting over the three-arc family on `[0, T2]`, starting from the
/// equilibrium of `ū` (or `opts.start`), with the first-arc duration chosen
/// to minimize `ρ_C(T2)`, followed by a backward adjoint check.
pub fn synthesize_second_phase(
    params: &ModelParams,
    u_bar: DosePair,
    t2: f64,
    opts: &SynthesisOptions,
) -> Result<PhaseTwoSynthesis> {
    if !(t2 > 0.0) {
        return Err(Error::InvalidInput(format!("second-phase horizon must be positive, got {t2}")));
    }
    let eq: EquilibriumReport = equilibrium(params, u_bar)?;
    let hyp = check_hypotheses_with(params, u_bar, Some(opts.rho_h0))?;
    if opts.require_hypotheses && !hyp.passed() {
        let ids: Vec<&str> = hyp.failures().iter().map(|c| c.id.as_str()).collect();
        return Err(Error::Infeasible(format!("hypotheses fail: {}", ids.join(", "))));
    }
    let sys = ReducedSystem::new(AtomRates::at_equilibrium(params, &eq), opts.rho_h0);
    let start = opts.start.unwrap_or((eq.rho_h_inf, eq.rho_c_inf));
    let g1 = start.0 / (start.0 + start.1);
    if g1 < params.theta_hc - opts.saturation_tol {
        return Err(Error::Infeasible(format!(
            "start violates the healthy-share constraint: {g1:.6} < {}",
            params.theta_hc
        )));
    }
    if start.0 < params.theta_h * opts.rho_h0 * (1.0 - 1e-12) {
        return Err(Error::Infeasible(format!(
            "start violates the healthy floor: {:.6} < {:.6}",
            start.0,
            params.theta_h * opts.rho_h0
        )));
    }
    let saturated = (g1 - params.theta_hc).abs() <= opts.saturation_tol;
    let run_for = |tau: f64| run_arcs(&sys, u_bar.u2, start, tau, t2, opts.dt, opts.saturation_tol);

    let tau1 = if saturated {
        let m = opts.tau_samples.max(2);
        let mut best = (0.0, run_for(0.0)?.rho_c.last().copied().unwrap());
        let h = t2 / (m - 1) as f64;
        for j in 1..m {
            let tau = h * j as f64;
            if let Ok(r) = run_for(tau) {
                let v = *r.rho_c.last().unwrap();
                if v < best.1 {
                    best = (tau, v);
                }
            }
        }
        let lo = (best.0 - h).max(0.0);
        let hi = (best.0 + h).min(t2);
        let (tau, v) = golden_min(
            |tau| run_for(tau).map(|r| *r.rho_c.last().unwrap()).unwrap_or(f64::INFINITY),
            lo,
            hi,
            1e-6 * t2.max(1.0),
        );
        if v < best.1 {
            tau
        } else {
            best.0
        }
    } else {
        0.0
    };
    let run = run_for(tau1)?;
    let adjoint = backward_check(&sys, &run);
    Ok(PhaseTwoSynthesis {
        u_bar,
        t2,
        start,
        tau1,
        arcs: spans(&run.times, &run.modes),
        final_rho_c: *run.rho_c.last().unwrap(),
        times: run.times,
        rho_h: run.rho_h,
        rho_c: run.rho_c,
        doses: run.doses,
        modes: run.modes,
        hypotheses_passed: hyp.passed(),
        adjoint,
    })
}

/// Gradient of `ρ_C(T)` with respect to piecewise-constant doses on the
/// reduced system, by backward integration of the adjoint with
/// `p(T) = (0, 1)`. `doses[k]` acts on `[times[k], times[k+1])`. Returns
/// `(ρ_C(T), ∂/∂u1[k], ∂/∂u2[k])`.
pub fn reduced_control_gradient(
    atoms: &AtomRates,
    init: (f64, f64),
    times: &[f64],
    doses: &[DosePair],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = times.len();
    if n < 2 || doses.len() + 1 < n {
        return Err(Error::InvalidInput("need at least one step with a dose".into()));
    }
    let sys = ReducedSystem::new(*atoms, 0.0);
    let mut states = vec![init; n];
    for k in 0..n - 1 {
        let h = times[k + 1] - times[k];
        states[k + 1] = rk4_step(atoms, states[k], h, &mut |_, _| doses[k]);
    }
    let mut g1 = vec![0.0; n - 1];
    let mut g2 = vec![0.0; n - 1];
    let mut p = (0.0, 1.0);
    let dh_du = |s: (f64, f64), q: (f64, f64), u: DosePair| {
        (
            -(atoms.mu_h * q.0 * s.0 + atoms.mu_c * q.1 * s.1),
            -atoms.alpha_h * atoms.r_h * q.0 * s.0 / (1.0 + atoms.alpha_h * u.u2).powi(2)
                - atoms.alpha_c * atoms.r_c * q.1 * s.1 / (1.0 + atoms.alpha_c * u.u2).powi(2),
        )
    };
    for k in (0..n - 1).rev() {
        let h = times[k + 1] - times[k];
        let u = doses[k];
        let (s0, s1) = (states[k], states[k + 1]);
        let f0 = atoms.rhs(s0.0, s0.1, u);
        let f1 = atoms.rhs(s1.0, s1.1, u);
        let mid = (hermite_mid(s0.0, s1.0, f0.0, f1.0, h), hermite_mid(s0.1, s1.1, f0.1, f1.1, h));
        let rate = |q: (f64, f64), s: (f64, f64)| sys.adjoint_rhs(s.0, s.1, &AdjointState::new(q.0, q.1), u);
        let k1 = rate(p, s1);
        let k2 = rate((p.0 - 0.5 * h * k1.0, p.1 - 0.5 * h * k1.1), mid);
        let k3 = rate((p.0 - 0.5 * h * k2.0, p.1 - 0.5 * h * k2.1), mid);
        let k4 = rate((p.0 - h * k3.0, p.1 - h * k3.1), s0);
        let p0 = (
            p.0 - h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            p.1 - h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        );
        // Simpson on the step with the adjoint midpoint from Hermite data
        let r0 = rate(p0, s0);
        let pm = (hermite_mid(p0.0, p.0, r0.0, k1.0, h), hermite_mid(p0.1, p.1, r0.1, k1.1, h));
        let a0 = dh_du(s0, p0, u);
        let am = dh_du(mid, pm, u);
        let a1 = dh_du(s1, p, u);
        g1[k] = h / 6.0 * (a0.0 + 4.0 * am.0 + a1.0);
        g2[k] = h / 6.0 * (a0.1 + 4.0 * am.1 + a1.1);
        p = p0;
    }
    Ok((states[n - 1].1, g1, g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiracOptimum {
    pub x_c: f64,
    /// Nearest grid node to `x_c`.
    pub node: usize,
    /// Grid node with the smallest sampled value.
    pub grid_node: usize,
    pub value: f64,
    /// Another grid-local minimum lies within the tie tolerance.
    pub tie: bool,
    pub dose: DosePair,
}

/// Minimizer of `x ↦ R_C(x, ρ_C⁰, ρ_H⁰, u_max)`, which together with maximal
/// doses minimizes the initial decay rate of the cancer total over unit-mass
/// initial distributions.
pub fn dirac_optimality(params: &ModelParams, grid: &PhenotypeGrid, rho_c0: f64, rho_h0: f64) -> Result<DiracOptimum> {
    if !(rho_c0 > 0.0 && rho_h0 >= 0.0) {
        return Err(Error::Domain("initial totals must be positive".into()));
    }
    let mtd = params.mtd();
    let rates = params.rates(Population::Cancer);
    let g = |x: f64| rates.growth(x, rho_c0, rho_h0, mtd);
    let xs = grid.nodes();
    let vals: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v < vals[best] {
            best = i;
        }
    }
    let n = xs.len();
    let local_minima: Vec<usize> = (0..n)
        .filter(|&i| (i == 0 || vals[i] <= vals[i - 1]) && (i + 1 == n || vals[i] <= vals[i + 1]))
        .collect();
    let tol = 1e-10 * vals[best].abs().max(1.0);
    let tie = local_minima
        .iter()
        .any(|&i| i.abs_diff(best) > 1 && vals[i] - vals[best] <= tol);
    let lo = xs[best.saturating_sub(1)];
    let hi = xs[(best + 1).min(n - 1)];
    let (mut x_c, mut value) = golden_min(g, lo, hi, 1e-12);
    if vals[best] < value {
        x_c = xs[best];
        value = vals[best];
    }
    Ok(DiracOptimum {
        x_c,
        node: grid.nearest(x_c),
        grid_node: best,
        value,
        tie,
        dose: mtd,
    })
}

/// Flow of `ρ' = (a - d ρ) ρ` over time `h`, exact.
pub fn logistic_flow(a: f64, d: f64, rho0: f64, h: f64) -> f64 {
    let e = (a * h).exp();
    rho0 * e / (1.0 + d * rho0 * growth_integral(a, h))
}

/// `∫_0^h e^{a s} ds`.
fn growth_integral(a: f64, h: f64) -> f64 {
    let z = a * h;
    if z.abs() < 1e-5 {
        h * (1.0 + z / 2.0 + z * z / 6.0)
    } else {
        z.exp_m1() / a
    }
}

/// `∂/∂a ∫_0^h e^{a s} ds = ∫_0^h s e^{a s} ds`.
fn growth_integral_da(a: f64, h: f64) -> f64 {
    let z = a * h;
    if z.abs() < 1e-4 {
        h * h * (0.5 + z / 3.0 + z * z / 8.0)
    } else {
        (h * z.exp() - growth_integral(a, h)) / a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticToy {
    pub r: f64,
    pub d: f64,
    pub mu: f64,
    pub rho0: f64,
    pub t_end: f64,
}

impl LogisticToy {
    pub fn new(r: f64, d: f64, mu: f64, rho0: f64, t_end: f64) -> Result<Self> {
        if !(r > 0.0 && d > 0.0 && mu >= 0.0 && rho0 > 0.0 && t_end > 0.0) {
            return Err(Error::Domain(
                "toy problem needs r, d, rho0, T > 0 and mu >= 0".into(),
            ));
        }
        Ok(Self { r, d, mu, rho0, t_end })
    }

    pub fn free(&self, t: f64) -> f64 {
        logistic_flow(self.r, self.d, self.rho0, t)
    }

    /// `ρ(T)` under a dose that is constant on each of `n = u.len()` equal cells.
    pub fn evaluate(&self, u: &[f64]) -> f64 {
        let h = self.t_end / u.len() as f64;
        u.iter()
            .fold(self.rho0, |rho, &v| logistic_flow(self.r - self.mu * v, self.d, rho, h))
    }

    /// `ρ(T)` and its gradient with respect to every cell value.
    pub fn evaluate_with_gradient(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let n = u.len();
        let h = self.t_end / n as f64;
        let mut rho = Vec::with_capacity(n + 1);
        rho.push(self.rho0);
        for &v in u {
            let last = *rho.last().unwrap();
            rho.push(logistic_flow(self.r - self.mu * v, self.d, last, h));
        }
        let mut grad = vec![0.0; n];
        let mut lambda = 1.0;
        for k in (0..n).rev() {
            let a = self.r - self.mu * u[k];
            let e = (a * h).exp();
            let s = growth_integral(a, h);
            let sa = growth_integral_da(a, h);
            let den = 1.0 + self.d * rho[k] * s;
            let d_rho0 = e / (den * den);
            let d_a = rho[k] * (h * e * den - e * self.d * rho[k] * sa) / (den * den);
            grad[k] = lambda * d_a * (-self.mu);
            lambda *= d_rho0;
        }
        (rho[n], grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyC1 {
    pub free_value: f64,
    pub inf_value: f64,
    /// `(ε, ρ(T))` for the dose `budget/ε` on `[T-ε, T]`.
    pub epsilon_family: Vec<(f64, f64)>,
}

pub const TOY_EPSILONS: [f64; 3] = [0.1, 0.01, 0.001];

/// Logistic population under an `L¹` dose budget: the infimum
/// `ρ_free(T) exp(-μ B)` and the values of the approximating impulses.
pub fn toy_c1(r: f64, d: f64, mu: f64, rho0: f64, t_end: f64, budget: f64) -> Result<ToyC1> {
    let toy = LogisticToy::new(r, d, mu, rho0, t_end)?;
    if !(budget > 0.0) {
        return Err(Error::Domain("budget must be positive".into()));
    }
    let free_value = toy.free(t_end);
    let epsilon_family = TOY_EPSILONS
        .iter()
        .filter(|&&e| e < t_end)
        .map(|&e| {
            let before = toy.free(t_end - e);
            (e, logistic_flow(r - mu * budget / e, d, before, e))
        })
        .collect();
    Ok(ToyC1 {
        free_value,
        inf_value: free_value * (-mu * budget).exp(),
        epsilon_family,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyC2 {
    pub t1: f64,
    pub u_max: f64,
    pub value: f64,
    /// The budget covers the whole horizon: maximal dose throughout.
    pub saturated: bool,
    pub note: Option<String>,
}

impl ToyC2 {
    pub fn dose_at(&self, t: f64) -> f64 {
        if t >= self.t1 {
            self.u_max
        } else {
            0.0
        }
    }
}

/// Logistic population under an `L¹` budget and an `L^∞` bound: no dose
/// before `T1 = T - B/u_max`, maximal dose after.
pub fn toy_c2(r: f64, d: f64, mu: f64, rho0: f64, t_end: f64, budget: f64, u_max: f64) -> Result<ToyC2> {
    let toy = LogisticToy::new(r, d, mu, rho0, t_end)?;
    if !(budget > 0.0 && u_max > 0.0) {
        return Err(Error::Domain("budget and dose bound must be positive".into()));
    }
    let (t1, saturated, note) = if u_max * t_end > budget {
        (t_end - budget / u_max, false, None)
    } else {
        (
            0.0,
            true,
            Some("budget covers the horizon at maximal dose; dosing throughout".to_string()),
        )
    };
    let before = toy.free(t1);
    let value = logistic_flow(r - mu * u_max, d, before, t_end - t1);
    Ok(ToyC2 {
        t1,
        u_max,
        value,
        saturated,
        note,
    })
}

/// Euclidean projection onto `{0 ≤ u ≤ u_max, h Σ u ≤ budget}`.
pub fn project_budget_box(v: &[f64], h: f64, u_max: f64, budget: f64) -> Vec<f64> {
    let clip = |lam: f64| -> Vec<f64> { v.iter().map(|x| (x - lam * h).clamp(0.0, u_max)).collect() };
    let used = |u: &[f64]| h * u.iter().sum::<f64>();
    let u0 = clip(0.0);
    if used(&u0) <= budget {
        return u0;
    }
    let hi_lam = v.iter().copied().fold(0.0, f64::max) / h + 1.0;
    let lam = bisect(|l| used(&clip(l)) - budget, 0.0, hi_lam, 1e-14 * hi_lam.max(1.0)).unwrap_or(hi_lam);
    clip(lam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGradientResult {
    pub u: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Start of the first cell dosed above half the bound.
    pub switch_time: f64,
}

/// Projected gradient over `n` piecewise-constant cells for the bounded and
/// budgeted toy, with Armijo backtracking along the projection arc.
pub fn toy_c2_projected_gradient(
    r: f64,
    d: f64,
    mu: f64,
    rho0: f64,
    t_end: f64,
    budget: f64,
    u_max: f64,
    n: usize,
    max_iter: usize,
) -> Result<ToyGradientResult> {
    let toy = LogisticToy::new(r, d, mu, rho0, t_end)?;
    if n == 0 {
        return Err(Error::InvalidInput("need at least one cell".into()));
    }
    let h = t_end / n as f64;
    let mut u = project_budget_box(&vec![budget / t_end; n], h, u_max, budget);
    let (mut val, mut grad) = toy.evaluate_with_gradient(&u);
    let mut step = 1.0 / grad.iter().map(|g| g.abs()).fold(1e-300, f64::max) * u_max;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let cand = project_budget_box(&trial, h, u_max, budget);
            let dec: f64 = grad.iter().zip(&cand).zip(&u).map(|((g, c), x)| g * (c - x)).sum();
            let cv = toy.evaluate(&cand);
            if cv <= val + 1e-4 * dec {
                let moved = cand.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                u = cand;
                let (v2, g2) = toy.evaluate_with_gradient(&u);
                val = v2;
                grad = g2;
                accepted = moved > 1e-13 * u_max;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let switch_time = u
        .iter()
        .position(|&x| x > 0.5 * u_max)
        .map_or(t_end, |k| k as f64 * h);
    Ok(ToyGradientResult {
        u,
        value: val,
        iterations,
        switch_time,
    })
}
