//! Two-ODE system obtained when both densities are concentrated at fixed
//! phenotypes `(x_H, x_C)`:
//!
//! ```text
//! ρ_H' = R_H(x_H, ρ_H, ρ_C, u) ρ_H,   ρ_C' = R_C(x_C, ρ_C, ρ_H, u) ρ_C
//! ```
//!
//! plus the gap between this reduction and the full simulation, and the
//! curability check for maximal doses started at equilibrium.

use serde::{Deserialize, Serialize};

use crate::asymptotics::{equilibrium, EquilibriumReport};
use crate::error::{Error, Result};
use crate::grid::{Density, PhenotypeGrid};
use crate::ide_sim::{self, step_times, ControlSchedule, SimOptions};
use crate::model::{DosePair, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeState {
    pub rho_h: f64,
    pub rho_c: f64,
    pub x_h: f64,
    pub x_c: f64,
}

/// Rate function values frozen at the two atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomRates {
    pub x_h: f64,
    pub x_c: f64,
    pub r_h: f64,
    pub r_c: f64,
    pub d_h: f64,
    pub d_c: f64,
    pub mu_h: f64,
    pub mu_c: f64,
    pub alpha_h: f64,
    pub alpha_c: f64,
    pub a_hh: f64,
    pub a_hc: f64,
    pub a_ch: f64,
    pub a_cc: f64,
    pub u1_max: f64,
    pub u2_max: f64,
    pub theta_hc: f64,
    pub theta_h: f64,
}

impl AtomRates {
    pub fn new(params: &ModelParams, x_h: f64, x_c: f64) -> Self {
        Self {
            x_h,
            x_c,
            r_h: params.r_h.eval(x_h),
            r_c: params.r_c.eval(x_c),
            d_h: params.d_h.eval(x_h),
            d_c: params.d_c.eval(x_c),
            mu_h: params.mu_h.eval(x_h),
            mu_c: params.mu_c.eval(x_c),
            alpha_h: params.alpha_h,
            alpha_c: params.alpha_c,
            a_hh: params.a_hh,
            a_hc: params.a_hc,
            a_ch: params.a_ch,
            a_cc: params.a_cc,
            u1_max: params.u1_max,
            u2_max: params.u2_max,
            theta_hc: params.theta_hc,
            theta_h: params.theta_h,
        }
    }

    pub fn at_equilibrium(params: &ModelParams, report: &EquilibriumReport) -> Self {
        Self::new(params, report.x_h_inf, report.x_c_inf)
    }

    pub fn gamma(&self) -> f64 {
        (1.0 - self.theta_hc) / self.theta_hc
    }

    pub fn mtd(&self) -> DosePair {
        DosePair::new(self.u1_max, self.u2_max)
    }

    #[inline]
    pub fn growth_h(&self, rho_h: f64, rho_c: f64, u: DosePair) -> f64 {
        self.r_h / (1.0 + self.alpha_h * u.u2) - self.d_h * (self.a_hh * rho_h + self.a_hc * rho_c) - u.u1 * self.mu_h
    }

    #[inline]
    pub fn growth_c(&self, rho_h: f64, rho_c: f64, u: DosePair) -> f64 {
        self.r_c / (1.0 + self.alpha_c * u.u2) - self.d_c * (self.a_ch * rho_h + self.a_cc * rho_c) - u.u1 * self.mu_c
    }

    #[inline]
    pub fn rhs(&self, rho_h: f64, rho_c: f64, u: DosePair) -> (f64, f64) {
        (
            self.growth_h(rho_h, rho_c, u) * rho_h,
            self.growth_c(rho_h, rho_c, u) * rho_c,
        )
    }
}

/// One classical RK4 step with the dose chosen by `control` at every stage.
#[inline]
pub fn rk4_step(
    atoms: &AtomRates,
    rho: (f64, f64),
    h: f64,
    control: &mut impl FnMut(f64, f64) -> DosePair,
) -> (f64, f64) {
    let f = |a: f64, b: f64, ctl: &mut dyn FnMut(f64, f64) -> DosePair| {
        let u = ctl(a, b);
        atoms.rhs(a, b, u)
    };
    let k1 = f(rho.0, rho.1, control);
    let k2 = f(rho.0 + 0.5 * h * k1.0, rho.1 + 0.5 * h * k1.1, control);
    let k3 = f(rho.0 + 0.5 * h * k2.0, rho.1 + 0.5 * h * k2.1, control);
    let k4 = f(rho.0 + h * k3.0, rho.1 + h * k3.1, control);
    (
        rho.0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        rho.1 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub x_h: f64,
    pub x_c: f64,
    pub times: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
    /// Dose at the start of each step (last entry repeats).
    pub doses: Vec<DosePair>,
}

impl OdeTrajectory {
    pub fn final_state(&self) -> (f64, f64) {
        (*self.rho_h.last().unwrap(), *self.rho_c.last().unwrap())
    }
}

fn check_state(t: f64, rho: (f64, f64), atoms: &AtomRates) -> Result<()> {
    if rho.0.is_finite() && rho.1.is_finite() {
        Ok(())
    } else {
        let (x, population) = if rho.0.is_finite() {
            (atoms.x_c, "C")
        } else {
            (atoms.x_h, "H")
        };
        Err(Error::NonFinite { t, x, population })
    }
}

/// RK4 integration under a piecewise-constant schedule; steps are split at
/// the schedule breakpoints.
pub fn simulate_ode(
    params: &ModelParams,
    x_h: f64,
    x_c: f64,
    init: OdeState,
    schedule: &ControlSchedule,
    t_end: f64,
    dt: f64,
) -> Result<OdeTrajectory> {
    if !(init.rho_h >= 0.0 && init.rho_c >= 0.0) {
        return Err(Error::Domain("negative initial totals".into()));
    }
    if !(t_end > 0.0 && dt > 0.0) {
        return Err(Error::InvalidInput("horizon and step must be positive".into()));
    }
    let atoms = AtomRates::new(params, x_h, x_c);
    let times = step_times(t_end, dt, schedule.breakpoints());
    simulate_atoms(&atoms, (init.rho_h, init.rho_c), &times, |t, _, _| schedule.dose_at(t))
}

/// RK4 over the given step times with a feedback `control(t_step, ρ_H, ρ_C)`,
/// where `t_step` is the start of the current step.
pub fn simulate_atoms(
    atoms: &AtomRates,
    init: (f64, f64),
    times: &[f64],
    mut control: impl FnMut(f64, f64, f64) -> DosePair,
) -> Result<OdeTrajectory> {
    let n = times.len();
    let mut rho = init;
    let mut out = OdeTrajectory {
        x_h: atoms.x_h,
        x_c: atoms.x_c,
        times: times.to_vec(),
        rho_h: Vec::with_capacity(n),
        rho_c: Vec::with_capacity(n),
        doses: Vec::with_capacity(n),
    };
    for k in 0..n {
        out.rho_h.push(rho.0);
        out.rho_c.push(rho.1);
        let t = times[k];
        out.doses.push(control(t, rho.0, rho.1));
        if k + 1 < n {
            let h = times[k + 1] - t;
            rho = rk4_step(atoms, rho, h, &mut |a, b| control(t, a, b));
            check_state(times[k + 1], rho, atoms)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionGap {
    pub gap: f64,
    pub t_gap: f64,
    pub times: Vec<f64>,
    pub ide_rho_h: Vec<f64>,
    pub ide_rho_c: Vec<f64>,
    pub ode_rho_h: Vec<f64>,
    pub ode_rho_c: Vec<f64>,
}

/// Continues from the given densities under `schedule2` for `t2`, both as the
/// full system and as the ODE at `(x_h, x_c)` seeded with the same totals.
pub fn reduction_gap_from(
    params: &ModelParams,
    n_h: &Density,
    n_c: &Density,
    x_h: f64,
    x_c: f64,
    schedule2: &ControlSchedule,
    t2: f64,
    opts: &SimOptions,
) -> Result<ReductionGap> {
    let rho0 = (n_h.total_mass(), n_c.total_mass());
    if t2 <= 0.0 {
        return Ok(ReductionGap {
            gap: 0.0,
            t_gap: 0.0,
            times: vec![0.0],
            ide_rho_h: vec![rho0.0],
            ide_rho_c: vec![rho0.1],
            ode_rho_h: vec![rho0.0],
            ode_rho_c: vec![rho0.1],
        });
    }
    let ide = ide_sim::simulate_with(params, n_h, n_c, schedule2, t2, &opts.snapshots(1))?;
    let atoms = AtomRates::new(params, x_h, x_c);
    let ode = simulate_atoms(&atoms, rho0, &ide.times, |t, _, _| schedule2.dose_at(t))?;
    let mut gap = 0.0;
    let mut t_gap = 0.0;
    for k in 0..ide.len() {
        let g = (ide.rho_h[k] - ode.rho_h[k])
            .abs()
            .max((ide.rho_c[k] - ode.rho_c[k]).abs());
        if g > gap {
            gap = g;
            t_gap = ide.times[k];
        }
    }
    Ok(ReductionGap {
        gap,
        t_gap,
        times: ide.times,
        ide_rho_h: ide.rho_h,
        ide_rho_c: ide.rho_c,
        ode_rho_h: ode.rho_h,
        ode_rho_c: ode.rho_c,
    })
}

/// Runs the full system from the reference initial data for `t1` under `ū`,
/// then compares it on `[t1, t1 + t2]` with the ODE at the limit phenotypes
/// of `ū`. Times in the result are relative to `t1`.
pub fn reduction_gap(
    params: &ModelParams,
    grid: std::sync::Arc<PhenotypeGrid>,
    u_bar: DosePair,
    t1: f64,
    schedule2: &ControlSchedule,
    t2: f64,
    opts: &SimOptions,
) -> Result<ReductionGap> {
    let (h0, c0) = ide_sim::reference_initial(grid);
    let burn = ide_sim::simulate_with(
        params,
        &h0,
        &c0,
        &ControlSchedule::constant(u_bar),
        t1,
        &opts.snapshots(1),
    )?;
    let report = equilibrium(params, u_bar)?;
    reduction_gap_from(
        params,
        &burn.final_h,
        &burn.final_c,
        report.x_h_inf,
        report.x_c_inf,
        schedule2,
        t2,
        opts,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTriple {
    pub d_rho_h: f64,
    pub d_rho_c: f64,
    /// `d(ρ_C/ρ_H)/dt`; `None` when `ρ_H = 0`.
    pub d_ratio: Option<f64>,
}

impl SignTriple {
    pub fn all_negative(&self) -> bool {
        self.d_rho_h < 0.0 && self.d_rho_c < 0.0 && self.d_ratio.is_some_and(|r| r < 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignCondition {
    HealthyDecreasing,
    CancerDecreasing,
    RatioDecreasing,
    RatioUndefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurabilityReport {
    pub u_bar: DosePair,
    pub rho_h_inf: f64,
    pub rho_c_inf: f64,
    pub at_start: SignTriple,
    pub horizon: f64,
    /// First time along the maximal-dose trajectory where a sign fails.
    pub first_failure: Option<(f64, SignCondition)>,
}

impl CurabilityReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

pub fn sign_triple(atoms: &AtomRates, rho_h: f64, rho_c: f64, u: DosePair) -> SignTriple {
    let gh = atoms.growth_h(rho_h, rho_c, u);
    let gc = atoms.growth_c(rho_h, rho_c, u);
    SignTriple {
        d_rho_h: gh * rho_h,
        d_rho_c: gc * rho_c,
        d_ratio: (rho_h > 0.0).then(|| rho_c / rho_h * (gc - gh)),
    }
}

fn first_failed(s: &SignTriple) -> Option<SignCondition> {
    if !(s.d_rho_h < 0.0) {
        Some(SignCondition::HealthyDecreasing)
    } else if !(s.d_rho_c < 0.0) {
        Some(SignCondition::CancerDecreasing)
    } else {
        match s.d_ratio {
            None => Some(SignCondition::RatioUndefined),
            Some(r) if !(r < 0.0) => Some(SignCondition::RatioDecreasing),
            _ => None,
        }
    }
}

pub const CURABILITY_HORIZON: f64 = 10.0;

/// Signs of `ρ_H'`, `ρ_C'` and `(ρ_C/ρ_H)'` under maximal doses, at the
/// equilibrium of `ū` and along the ODE trajectory started there.
pub fn check_decreasing(params: &ModelParams, u_bar: DosePair) -> Result<CurabilityReport> {
    check_decreasing_over(params, u_bar, CURABILITY_HORIZON, 1e-3)
}

pub fn check_decreasing_over(params: &ModelParams, u_bar: DosePair, horizon: f64, dt: f64) -> Result<CurabilityReport> {
    let report = equilibrium(params, u_bar)?;
    let atoms = AtomRates::at_equilibrium(params, &report);
    let mtd = params.mtd();
    let at_start = sign_triple(&atoms, report.rho_h_inf, report.rho_c_inf, mtd);
    let mut first_failure = first_failed(&at_start).map(|c| (0.0, c));
    if first_failure.is_none() {
        let times = step_times(horizon, dt, &[]);
        let traj = simulate_atoms(&atoms, (report.rho_h_inf, report.rho_c_inf), &times, |_, _, _| mtd)?;
        for k in 1..traj.times.len() {
            // once a population is numerically gone the signs carry no information
            if traj.rho_c[k] < 1e-300 || traj.rho_h[k] < 1e-300 {
                break;
            }
            let s = sign_triple(&atoms, traj.rho_h[k], traj.rho_c[k], mtd);
            if let Some(c) = first_failed(&s) {
                first_failure = Some((traj.times[k], c));
                break;
            }
        }
    }
    Ok(CurabilityReport {
        u_bar,
        rho_h_inf: report.rho_h_inf,
        rho_c_inf: report.rho_c_inf,
        at_start,
        horizon,
        first_failure,
    })
}
