//! Treatment strategies: constant and maximal doses, the two-phase strategy
//! (long constant phase, then boundary/maximal/boundary arcs), and the two
//! quasi-periodic drug-holiday policies.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::equilibrium;
use crate::error::{Error, Result};
use crate::grid::{Density, PhenotypeGrid};
use crate::ide_sim::{
    self, healthy_fraction, ControlSchedule, Decision, Observation, Policy, SimOptions, Trajectory,
    DEFAULT_HYSTERESIS,
};
use crate::model::{DosePair, ModelParams};
use crate::ode_reduce::{check_decreasing, AtomRates};

pub fn constant_schedule(dose: DosePair) -> ControlSchedule {
    ControlSchedule::constant(dose)
}

pub fn mtd_schedule(params: &ModelParams, t_end: f64) -> Result<ControlSchedule> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {t_end}")));
    }
    Ok(ControlSchedule::constant(params.mtd()))
}

/// Feedback control value with its admissibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryU1 {
    /// Unclipped solution of the defining relation.
    pub raw: f64,
    /// `raw` clipped into `[0, u1_max]`.
    pub u1: f64,
    pub clipped: bool,
    /// `0 < raw < u1_max`.
    pub admissible: bool,
}

impl BoundaryU1 {
    fn new(raw: f64, u1_max: f64) -> Self {
        let u1 = raw.clamp(0.0, u1_max);
        Self {
            raw,
            u1,
            clipped: u1 != raw,
            admissible: raw > 0.0 && raw < u1_max,
        }
    }
}

/// Cytotoxic dose keeping `ρ_H' = 0` at `ρ_H = θ_H ρ_H(0)` on the atoms:
/// `(r_H/(1+α_H v) - d_H (a_HH θ_H ρ_H(0) + a_HC ρ_C)) / μ_H`.
pub fn boundary_u1_on_h(atoms: &AtomRates, v: f64, rho_c: f64, rho_h0: f64) -> Result<BoundaryU1> {
    if !(atoms.mu_h > 0.0) {
        return Err(Error::Singular(format!(
            "healthy cytotoxic sensitivity vanishes at x = {}",
            atoms.x_h
        )));
    }
    let raw = (atoms.r_h / (1.0 + atoms.alpha_h * v)
        - atoms.d_h * (atoms.a_hh * atoms.theta_h * rho_h0 + atoms.a_hc * rho_c))
        / atoms.mu_h;
    Ok(BoundaryU1::new(raw, atoms.u1_max))
}

/// Cytotoxic dose making `R_H = R_C` at `ρ_C = γ ρ_H`, given `u2`.
pub fn boundary_u1_on_hc(atoms: &AtomRates, u2: f64, rho_h: f64) -> Result<BoundaryU1> {
    let dmu = atoms.mu_c - atoms.mu_h;
    if dmu.abs() < 1e-14 {
        return Err(Error::Singular(
            "equal cytotoxic sensitivities at the atoms".into(),
        ));
    }
    let g = atoms.gamma();
    let fit_c = atoms.r_c / (1.0 + atoms.alpha_c * u2) - atoms.d_c * (atoms.a_ch + atoms.a_cc * g) * rho_h;
    let fit_h = atoms.r_h / (1.0 + atoms.alpha_h * u2) - atoms.d_h * (atoms.a_hh + atoms.a_hc * g) * rho_h;
    Ok(BoundaryU1::new((fit_c - fit_h) / dmu, atoms.u1_max))
}

/// Density-level analogue of [`boundary_u1_on_h`]: the `u1` for which
/// `∫ R_H n_H = 0` when the healthy total equals `θ_H ρ_H(0)`.
pub fn density_boundary_u1_on_h(obs: &Observation<'_>, v: f64) -> Option<f64> {
    let p = obs.params;
    let target = p.theta_h * obs.rho_h0;
    let intensity = p.a_hh * target + p.a_hc * obs.rho_c;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&x, w), n) in obs.grid.nodes().iter().zip(obs.grid.weights()).zip(obs.n_h) {
        num += w * n * (p.r_h.eval(x) / (1.0 + p.alpha_h * v) - p.d_h.eval(x) * intensity);
        den += w * n * p.mu_h.eval(x);
    }
    (den > 0.0).then(|| num / den)
}

/// Density-level `u1` keeping `ρ_C - γ ρ_H` stationary for the given `u2`.
pub fn density_boundary_u1_on_hc(obs: &Observation<'_>, u2: f64) -> Option<f64> {
    let p = obs.params;
    let g = p.gamma();
    let ih = p.a_hh * obs.rho_h + p.a_hc * obs.rho_c;
    let ic = p.a_ch * obs.rho_h + p.a_cc * obs.rho_c;
    let (mut num, mut den) = (0.0, 0.0);
    let nodes = obs.grid.nodes();
    let w = obs.grid.weights();
    for i in 0..nodes.len() {
        let x = nodes[i];
        let fc = p.r_c.eval(x) / (1.0 + p.alpha_c * u2) - p.d_c.eval(x) * ic;
        let fh = p.r_h.eval(x) / (1.0 + p.alpha_h * u2) - p.d_h.eval(x) * ih;
        num += w[i] * (fc * obs.n_c[i] - g * fh * obs.n_h[i]);
        den += w[i] * (p.mu_c.eval(x) * obs.n_c[i] - g * p.mu_h.eval(x) * obs.n_h[i]);
    }
    (den.abs() > 0.0).then(|| num / den)
}

/// `d/dt ln(ρ_C/ρ_H)` under the given dose, from the densities.
fn log_ratio_rate(obs: &Observation<'_>, dose: DosePair) -> f64 {
    let p = obs.params;
    let ih = p.a_hh * obs.rho_h + p.a_hc * obs.rho_c;
    let ic = p.a_ch * obs.rho_h + p.a_cc * obs.rho_c;
    let (mut gh, mut gc) = (0.0, 0.0);
    let nodes = obs.grid.nodes();
    let w = obs.grid.weights();
    for i in 0..nodes.len() {
        let x = nodes[i];
        let rh = p.r_h.eval(x) / (1.0 + p.alpha_h * dose.u2) - p.d_h.eval(x) * ih - dose.u1 * p.mu_h.eval(x);
        let rc = p.r_c.eval(x) / (1.0 + p.alpha_c * dose.u2) - p.d_c.eval(x) * ic - dose.u1 * p.mu_c.eval(x);
        gh += w[i] * rh * obs.n_h[i];
        gc += w[i] * rc * obs.n_c[i];
    }
    gc / obs.rho_c - gh / obs.rho_h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcKind {
    PhaseOne,
    Holiday,
    HcBoundary,
    FreeMtd,
    HBoundary,
}

impl ArcKind {
    pub fn label(self) -> &'static str {
        match self {
            ArcKind::PhaseOne => "phase_one",
            ArcKind::Holiday => "holiday",
            ArcKind::HcBoundary => "hc_boundary",
            ArcKind::FreeMtd => "mtd",
            ArcKind::HBoundary => "h_boundary",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [
            ArcKind::PhaseOne,
            ArcKind::Holiday,
            ArcKind::HcBoundary,
            ArcKind::FreeMtd,
            ArcKind::HBoundary,
        ]
        .into_iter()
        .find(|k| k.label() == s)
    }
}

/// Drug holiday at `ū` while `ρ_H/(ρ_H+ρ_C) ≥ θ_HC`, then maximal doses while
/// `ρ_H > θ_H ρ_H(0)`, and back.
#[derive(Debug, Clone)]
pub struct QuasiPeriodic1 {
    pub holiday: DosePair,
    pub hysteresis: f64,
    on_mtd: bool,
}

pub fn quasi_periodic_policy_1(_params: &ModelParams) -> QuasiPeriodic1 {
    QuasiPeriodic1 {
        holiday: DosePair::new(0.0, 0.5),
        hysteresis: DEFAULT_HYSTERESIS,
        on_mtd: false,
    }
}

impl QuasiPeriodic1 {
    pub fn with_holiday(mut self, dose: DosePair) -> Self {
        self.holiday = dose;
        self
    }
}

impl Policy for QuasiPeriodic1 {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let p = obs.params;
        let h = self.hysteresis;
        if self.on_mtd {
            if obs.g2() <= p.theta_h * (1.0 + h) {
                self.on_mtd = false;
            }
        } else if obs.g1() <= p.theta_hc * (1.0 + h) {
            self.on_mtd = true;
        }
        if self.on_mtd {
            Decision {
                dose: p.mtd(),
                mode: ArcKind::FreeMtd.label(),
            }
        } else {
            Decision {
                dose: self.holiday,
                mode: ArcKind::Holiday.label(),
            }
        }
    }

    fn name(&self) -> &str {
        "qp1"
    }

    fn hysteresis(&self) -> f64 {
        self.hysteresis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Qp2Mode {
    Holiday,
    Mtd,
    Boundary,
}

/// [`QuasiPeriodic1`] plus an arc on `ρ_H = θ_H ρ_H(0)` with maximal
/// cytostatic dose and feedback cytotoxic dose, left as soon as `ρ_C`
/// increases.
#[derive(Debug, Clone)]
pub struct QuasiPeriodic2 {
    pub holiday: DosePair,
    pub hysteresis: f64,
    mode: Qp2Mode,
}

pub fn quasi_periodic_policy_2(_params: &ModelParams) -> QuasiPeriodic2 {
    QuasiPeriodic2 {
        holiday: DosePair::new(0.0, 0.5),
        hysteresis: DEFAULT_HYSTERESIS,
        mode: Qp2Mode::Holiday,
    }
}

impl Policy for QuasiPeriodic2 {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let p = obs.params;
        let h = self.hysteresis;
        match self.mode {
            Qp2Mode::Holiday => {
                if obs.g1() <= p.theta_hc * (1.0 + h) {
                    self.mode = Qp2Mode::Mtd;
                }
            }
            Qp2Mode::Mtd => {
                if obs.g2() <= p.theta_h * (1.0 + h) {
                    self.mode = Qp2Mode::Boundary;
                }
            }
            Qp2Mode::Boundary => {
                if obs.prev_rho_c.is_some_and(|prev| obs.rho_c > prev) {
                    self.mode = Qp2Mode::Holiday;
                }
            }
        }
        // a boundary arc can start and end on the same step only if ρ_C was
        // already increasing, in which case the holiday is the right answer
        if self.mode == Qp2Mode::Holiday && obs.g1() <= p.theta_hc * (1.0 + h) {
            self.mode = Qp2Mode::Mtd;
            if obs.g2() <= p.theta_h * (1.0 + h) {
                self.mode = Qp2Mode::Boundary;
            }
        }
        match self.mode {
            Qp2Mode::Holiday => Decision {
                dose: self.holiday,
                mode: ArcKind::Holiday.label(),
            },
            Qp2Mode::Mtd => Decision {
                dose: p.mtd(),
                mode: ArcKind::FreeMtd.label(),
            },
            Qp2Mode::Boundary => {
                let u1 = density_boundary_u1_on_h(obs, p.u2_max).unwrap_or(0.0);
                Decision {
                    dose: DosePair::new(u1, p.u2_max).clamp_to(p),
                    mode: ArcKind::HBoundary.label(),
                }
            }
        }
    }

    fn name(&self) -> &str {
        "qp2"
    }

    fn hysteresis(&self) -> f64 {
        self.hysteresis
    }
}

/// Constant `ū` until `switch_time`, then the second-phase arcs: along
/// `g1 = θ_HC` (only if saturated at the switch) until maximal doses shrink
/// the cancer share, maximal doses until `g2 = θ_H`, and the arc along
/// `g2 = θ_H` with maximal cytostatic dose to the end.
#[derive(Debug, Clone)]
pub struct TwoPhasePolicy {
    pub u_bar: DosePair,
    pub switch_time: f64,
    pub saturation_tol: f64,
    pub hysteresis: f64,
    mode: Option<ArcKind>,
}

impl TwoPhasePolicy {
    pub fn new(u_bar: DosePair, switch_time: f64) -> Self {
        Self {
            u_bar,
            switch_time,
            saturation_tol: 1e-3,
            hysteresis: DEFAULT_HYSTERESIS,
            mode: None,
        }
    }
}

impl Policy for TwoPhasePolicy {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        let p = obs.params;
        let h = self.hysteresis;
        // compare against the step grid with a small slack so that a switch
        // time on a step boundary is honoured exactly
        if obs.t < self.switch_time - 1e-9 * obs.dt {
            return Decision {
                dose: self.u_bar,
                mode: ArcKind::PhaseOne.label(),
            };
        }
        let mut mode = match self.mode {
            Some(m) => m,
            None => {
                if (obs.g1() - p.theta_hc).abs() <= self.saturation_tol {
                    ArcKind::HcBoundary
                } else {
                    ArcKind::FreeMtd
                }
            }
        };
        if mode == ArcKind::HcBoundary && log_ratio_rate(obs, p.mtd()) < 0.0 {
            mode = ArcKind::FreeMtd;
        }
        if mode == ArcKind::FreeMtd && obs.g2() <= p.theta_h * (1.0 + h) {
            mode = ArcKind::HBoundary;
        }
        self.mode = Some(mode);
        let dose = match mode {
            ArcKind::HcBoundary => {
                let u1 = density_boundary_u1_on_hc(obs, self.u_bar.u2).unwrap_or(0.0);
                DosePair::new(u1, self.u_bar.u2)
            }
            ArcKind::HBoundary => {
                let u1 = density_boundary_u1_on_h(obs, p.u2_max).unwrap_or(0.0);
                DosePair::new(u1, p.u2_max)
            }
            _ => p.mtd(),
        };
        Decision {
            dose: dose.clamp_to(p),
            mode: mode.label(),
        }
    }

    fn name(&self) -> &str {
        "two_phase"
    }

    fn hysteresis(&self) -> f64 {
        self.hysteresis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcSummary {
    pub kind: ArcKind,
    pub start: f64,
    pub end: f64,
    /// Entry time refined by secant interpolation of the triggering event,
    /// when the arc was entered on a threshold crossing or a sign change.
    pub refined_start: Option<f64>,
}

impl ArcSummary {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

fn secant_crossing(t0: f64, t1: f64, y0: f64, y1: f64) -> Option<f64> {
    (y0 != y1 && y0.signum() != y1.signum()).then(|| t0 + (t1 - t0) * y0 / (y0 - y1))
}

/// Splits a closed-loop trajectory into arcs by policy mode.
pub fn arc_summary(traj: &Trajectory, params: &ModelParams) -> Vec<ArcSummary> {
    let mut out: Vec<ArcSummary> = Vec::new();
    let n = traj.len();
    if n == 0 {
        return out;
    }
    let h = DEFAULT_HYSTERESIS;
    for k in 0..n.saturating_sub(1).max(1) {
        let Some(kind) = ArcKind::from_label(traj.modes[k]) else {
            continue;
        };
        match out.last_mut() {
            Some(a) if a.kind == kind => a.end = traj.times[k + 1.min(n - 1 - k)],
            _ => {
                let refined = if k > 0 {
                    let (t0, t1) = (traj.times[k - 1], traj.times[k]);
                    match kind {
                        ArcKind::FreeMtd => secant_crossing(
                            t0,
                            t1,
                            traj.g1[k - 1] - params.theta_hc * (1.0 + h),
                            traj.g1[k] - params.theta_hc * (1.0 + h),
                        ),
                        ArcKind::HBoundary => secant_crossing(
                            t0,
                            t1,
                            traj.g2[k - 1] - params.theta_h * (1.0 + h),
                            traj.g2[k] - params.theta_h * (1.0 + h),
                        ),
                        ArcKind::Holiday if k >= 2 => {
                            let d0 = traj.rho_c[k - 1] - traj.rho_c[k - 2];
                            let d1 = traj.rho_c[k] - traj.rho_c[k - 1];
                            secant_crossing(t0, t1, d0, d1)
                        }
                        _ => None,
                    }
                } else {
                    None
                };
                out.push(ArcSummary {
                    kind,
                    start: traj.times[k],
                    end: traj.times[(k + 1).min(n - 1)],
                    refined_start: refined,
                });
            }
        }
    }
    if let Some(last) = out.last_mut() {
        last.end = traj.t_end();
    }
    out
}

/// Local minima of `ρ_C` at the ends of boundary or maximal-dose treatment
/// cycles (the value when a holiday starts).
pub fn cycle_minima(traj: &Trajectory) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in 1..traj.len().saturating_sub(1) {
        let prev = traj.modes[k - 1];
        let cur = traj.modes[k];
        if cur == ArcKind::Holiday.label() && prev != cur {
            // the minimum sits within a step of the switch
            let lo = k.saturating_sub(2);
            let hi = (k + 2).min(traj.len() - 1);
            let (mut tm, mut vm) = (traj.times[lo], traj.rho_c[lo]);
            for j in lo..=hi {
                if traj.rho_c[j] < vm {
                    tm = traj.times[j];
                    vm = traj.rho_c[j];
                }
            }
            out.push((tm, vm));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoPhasePlan {
    pub u_bar: DosePair,
    pub t_end: f64,
    /// Duration of the constant phase.
    pub t1: f64,
    pub t2: f64,
    pub arcs: Vec<ArcSummary>,
    pub schedule: ControlSchedule,
    pub final_rho_c: f64,
    /// Curability signs hold at `ū`; otherwise the plan carries no guarantee.
    pub guaranteed: bool,
    /// Every phase-2 duration tried, with the resulting `ρ_C(T)`.
    pub candidates: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseOptions {
    pub sim: SimOptions,
    /// Spacing of the phase-2 durations tried.
    pub search_step: f64,
}

impl Default for TwoPhaseOptions {
    fn default() -> Self {
        Self {
            sim: SimOptions::default(),
            search_step: 0.25,
        }
    }
}

/// Builds the two-phase plan from the given initial data, choosing the phase-2
/// duration in `[0, T2_max]` that minimizes `ρ_C(T)`. Returns the plan and its
/// full trajectory.
pub fn two_phase_plan(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    u_bar: DosePair,
    t_end: f64,
    t2_max: f64,
    opts: &TwoPhaseOptions,
) -> Result<(TwoPhasePlan, Trajectory)> {
    if !(t_end > 0.0) || t2_max < 0.0 || t2_max >= t_end {
        return Err(Error::InvalidInput(format!(
            "need T > T2_max >= 0, got T = {t_end}, T2_max = {t2_max}"
        )));
    }
    let guaranteed = check_decreasing(params, u_bar).map(|r| r.passed()).unwrap_or(false);

    let candidates = if t2_max == 0.0 {
        vec![(0.0, f64::NAN)]
    } else {
        let n_steps = (t_end / opts.search_step).round().max(1.0) as usize;
        let phase1 = ide_sim::simulate_with(
            params,
            n_h0,
            n_c0,
            &ControlSchedule::constant(u_bar),
            t_end,
            &opts.sim.snapshots(n_steps),
        )?;
        let jobs: Vec<_> = phase1
            .snapshots
            .iter()
            .map(|snap| (t_end - snap.t, snap))
            .filter(|(t2, _)| *t2 <= t2_max + 1e-9 * t_end)
            .collect();
        jobs.par_iter()
            .map(|&(t2, snap)| {
                if t2 <= 0.0 {
                    return Ok((0.0, phase1.final_rho_c()));
                }
                let mut pol = TwoPhasePolicy::new(u_bar, 0.0);
                let sim = opts.sim.snapshots(1).reference_rho_h(phase1.rho_h0);
                let tr = ide_sim::simulate_closed_loop_with(params, &snap.n_h, &snap.n_c, &mut pol, t2, &sim)?;
                Ok((t2, tr.final_rho_c()))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let best = candidates
        .iter()
        .copied()
        .filter(|c| !c.1.is_nan())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|c| c.0)
        .unwrap_or(0.0);

    let mut pol = TwoPhasePolicy::new(u_bar, if best > 0.0 { t_end - best } else { f64::INFINITY });
    let traj = ide_sim::simulate_closed_loop_with(params, n_h0, n_c0, &mut pol, t_end, &opts.sim)?;
    let mut arcs = arc_summary(&traj, params);
    for a in arcs.iter_mut() {
        if a.kind == ArcKind::PhaseOne {
            a.refined_start = None;
        }
    }
    let plan = TwoPhasePlan {
        u_bar,
        t_end,
        t1: t_end - best,
        t2: best,
        arcs,
        schedule: traj.schedule.clone(),
        final_rho_c: traj.final_rho_c(),
        guaranteed,
        candidates,
    };
    Ok((plan, traj))
}

/// Two-phase plan from the reference initial data on `grid`.
pub fn two_phase_plan_default(
    params: &ModelParams,
    grid: Arc<PhenotypeGrid>,
    u_bar: DosePair,
    t_end: f64,
    t2_max: f64,
    opts: &TwoPhaseOptions,
) -> Result<(TwoPhasePlan, Trajectory)> {
    let (h, c) = ide_sim::reference_initial(grid);
    two_phase_plan(params, &h, &c, u_bar, t_end, t2_max, opts)
}

/// Dose pair on an `n1 x n2` lattice minimizing `ρ_C∞(ū)` among those whose
/// equilibrium satisfies both constraints for the given initial healthy total.
pub fn best_phase_one_doses(params: &ModelParams, rho_h0: f64, n1: usize, n2: usize) -> Result<Option<(DosePair, f64)>> {
    let mut best: Option<(DosePair, f64)> = None;
    for i in 0..n1 {
        for j in 0..n2 {
            let u = DosePair::new(
                params.u1_max * i as f64 / (n1.max(2) - 1) as f64,
                params.u2_max * j as f64 / (n2.max(2) - 1) as f64,
            );
            let r = equilibrium(params, u)?;
            let ok = healthy_fraction(r.rho_h_inf, r.rho_c_inf) >= params.theta_hc
                && r.rho_h_inf >= params.theta_h * rho_h0;
            if ok && best.is_none_or(|b| r.rho_c_inf < b.1) {
                best = Some((u, r.rho_c_inf));
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ide_sim::{simulate, simulate_closed_loop, reference_initial};
    use crate::model::{reference_params, Preset};

    fn params() -> ModelParams {
        reference_params(Preset::Modified)
    }

    fn atoms_at(u: DosePair) -> (AtomRates, crate::asymptotics::EquilibriumReport) {
        let p = params();
        let r = equilibrium(&p, u).unwrap();
        (AtomRates::at_equilibrium(&p, &r), r)
    }

    #[test]
    fn mtd_is_constant_maximal() {
        let p = params();
        let s = mtd_schedule(&p, 10.0).unwrap();
        assert_eq!(s.dose_at(3.0), DosePair::new(3.5, 7.0));
        assert_eq!(s.total_variation(), 0.0);
        assert_eq!(constant_schedule(DosePair::new(3.5, 2.0)).dose_at(9.0), DosePair::new(3.5, 2.0));
    }

    #[test]
    fn h_boundary_feedback_zeroes_healthy_growth() {
        let p = params();
        let (a, _) = atoms_at(DosePair::new(0.0, 0.5));
        for rho_c in [0.0, 0.3, 1.2, 4.0] {
            for v in [0.0, 3.0, 7.0] {
                let b = boundary_u1_on_h(&a, v, rho_c, 2.7).unwrap();
                let g = a.growth_h(p.theta_h * 2.7, rho_c, DosePair::new(b.raw, v));
                assert!(g.abs() < 1e-12, "{g}");
            }
        }
        let b = boundary_u1_on_h(&a, 0.0, 0.0, 2.7).unwrap();
        let expected = (a.r_h - a.d_h * a.a_hh * a.theta_h * 2.7) / a.mu_h;
        assert!((b.raw - expected).abs() < 1e-14);
    }

    #[test]
    fn h_boundary_feedback_admissible_at_reference() {
        let p = params();
        let (a, r) = atoms_at(DosePair::new(0.0, 0.5));
        let b = boundary_u1_on_h(&a, p.u2_max, r.rho_c_inf, r.rho_h_inf).unwrap();
        assert!(b.admissible, "{b:?}");
        assert!(b.u1 > 0.0 && b.u1 < 3.5);
    }

    #[test]
    fn h_boundary_feedback_needs_sensitivity() {
        let (mut a, _) = atoms_at(DosePair::ZERO);
        a.mu_h = 0.0;
        assert!(boundary_u1_on_h(&a, 1.0, 1.0, 2.7).is_err());
    }

    #[test]
    fn hc_boundary_feedback_equalizes_rates() {
        let (a, r) = atoms_at(DosePair::new(0.0, 0.5));
        assert!((a.gamma() - 1.5).abs() < 1e-15);
        for rho_h in [0.5, 1.0, 2.0] {
            for u2 in [0.0, 0.5, 7.0] {
                let b = boundary_u1_on_hc(&a, u2, rho_h).unwrap();
                let u = DosePair::new(b.raw, u2);
                let d = a.growth_h(rho_h, a.gamma() * rho_h, u) - a.growth_c(rho_h, a.gamma() * rho_h, u);
                assert!(d.abs() < 1e-12);
            }
        }
        let b = boundary_u1_on_hc(&a, 0.5, r.rho_h_inf).unwrap();
        assert!((0.0..=3.5).contains(&b.u1));
        assert_eq!(b.clipped, b.raw != b.u1);
    }

    #[test]
    fn hc_boundary_singular_for_equal_sensitivities() {
        let (mut a, _) = atoms_at(DosePair::ZERO);
        a.mu_c = a.mu_h;
        assert!(matches!(boundary_u1_on_hc(&a, 1.0, 1.0), Err(Error::Singular(_))));
    }

    #[test]
    fn density_feedback_reduces_to_atom_formula_at_a_dirac() {
        let p = params();
        let g = PhenotypeGrid::shared(101).unwrap();
        let k = 7;
        let h = crate::grid::dirac(g.clone(), k, 1.62).unwrap();
        let c = crate::grid::dirac(g.clone(), 20, 0.8).unwrap();
        let obs = Observation {
            t: 0.0,
            dt: 1e-3,
            rho_h: 1.62,
            rho_c: 0.8,
            rho_h0: 2.7,
            prev_rho_c: None,
            n_h: h.values(),
            n_c: c.values(),
            grid: &g,
            params: &p,
        };
        let a = AtomRates::new(&p, g.nodes()[k], g.nodes()[20]);
        let want = boundary_u1_on_h(&a, 7.0, 0.8, 2.7).unwrap().raw;
        let got = density_boundary_u1_on_h(&obs, 7.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn qp1_rules() {
        let p = params();
        let g = PhenotypeGrid::shared(11).unwrap();
        let z = vec![1.0; 11];
        let mk = |rho_h: f64, rho_c: f64| Observation {
            t: 0.0,
            dt: 1e-3,
            rho_h,
            rho_c,
            rho_h0: 2.7,
            prev_rho_c: None,
            n_h: &z,
            n_c: &z,
            grid: &g,
            params: &p,
        };
        let mut pol = quasi_periodic_policy_1(&p);
        assert_eq!(pol.decide(&mk(2.7, 0.5)).dose, DosePair::new(0.0, 0.5));
        // healthy share at the threshold: switch to maximal doses
        assert_eq!(pol.decide(&mk(2.0, 3.0)).dose, p.mtd());
        // still above the healthy floor with a safe share: stay on maximal doses
        assert_eq!(pol.decide(&mk(2.0, 1.0)).dose, p.mtd());
        // floor reached: holiday again
        assert_eq!(pol.decide(&mk(1.62, 0.5)).dose, DosePair::new(0.0, 0.5));
    }

    #[test]
    fn qp2_without_boundary_contact_matches_qp1() {
        let p = params();
        let g = PhenotypeGrid::shared(51).unwrap();
        let (h, c) = reference_initial(g);
        // short horizon: the floor is never reached
        let mut p1 = quasi_periodic_policy_1(&p);
        let mut p2 = quasi_periodic_policy_2(&p);
        let a = simulate_closed_loop(&p, &h, &c, &mut p1, 3.0, 1e-2).unwrap();
        let b = simulate_closed_loop(&p, &h, &c, &mut p2, 3.0, 1e-2).unwrap();
        assert!(a.modes.contains(&ArcKind::FreeMtd.label()));
        assert!(b.modes.iter().all(|m| *m != ArcKind::HBoundary.label()));
        assert_eq!(a.rho_c, b.rho_c);
    }

    #[test]
    fn policy_doses_stay_in_box() {
        let p = params();
        let g = PhenotypeGrid::shared(51).unwrap();
        let (h, c) = reference_initial(g);
        let mut pol = quasi_periodic_policy_2(&p);
        let tr = simulate_closed_loop(&p, &h, &c, &mut pol, 40.0, 1e-2).unwrap();
        assert!(tr.doses.iter().all(|d| d.within(&p)));
        for k in 0..tr.len() {
            if tr.modes[k] == ArcKind::HBoundary.label() {
                assert!((tr.g2[k] - p.theta_h).abs() <= 0.01, "t = {}: {}", tr.times[k], tr.g2[k]);
            }
        }
    }

    #[test]
    fn zero_second_phase_is_the_constant_strategy() {
        let p = params();
        let g = PhenotypeGrid::shared(51).unwrap();
        let (h, c) = reference_initial(g.clone());
        let u = DosePair::new(0.0, 0.5);
        let opts = TwoPhaseOptions {
            sim: SimOptions::with_dt(1e-2),
            ..Default::default()
        };
        let (plan, tr) = two_phase_plan(&p, &h, &c, u, 10.0, 0.0, &opts).unwrap();
        let plain = simulate(&p, &h, &c, &ControlSchedule::constant(u), 10.0, 1e-2).unwrap();
        assert_eq!(plan.t2, 0.0);
        assert_eq!(plan.arcs.len(), 1);
        assert!((tr.final_rho_c() - plain.final_rho_c()).abs() < 1e-12);
    }

    #[test]
    fn two_phase_arcs_follow_the_prescribed_order() {
        let p = params();
        let g = PhenotypeGrid::shared(51).unwrap();
        let opts = TwoPhaseOptions {
            sim: SimOptions::with_dt(5e-3),
            search_step: 1.0,
        };
        let (plan, tr) = two_phase_plan_default(&p, g, DosePair::new(0.0, 0.5), 30.0, 12.0, &opts).unwrap();
        let order = |k: ArcKind| match k {
            ArcKind::PhaseOne => 0,
            ArcKind::HcBoundary => 1,
            ArcKind::FreeMtd => 2,
            ArcKind::HBoundary => 3,
            ArcKind::Holiday => 9,
        };
        assert!(plan.arcs.windows(2).all(|w| order(w[0].kind) < order(w[1].kind)));
        assert!(plan.t2 <= 12.0 && plan.t2 > 0.0);
        let total: f64 = plan.arcs.iter().map(|a| a.duration()).sum();
        assert!((total - 30.0).abs() < 1e-9);
        assert!(tr.doses.iter().all(|d| d.within(&p)));
        let best = plan.candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        assert!((plan.final_rho_c - best).abs() <= 1e-9 * best.max(1e-300) + 1e-12);
    }

    #[test]
    fn phase_one_dose_search_finds_feasible_point() {
        let p = params();
        let (u, rc) = best_phase_one_doses(&p, 2.7, 8, 15).unwrap().unwrap();
        let r = equilibrium(&p, u).unwrap();
        assert_eq!(r.rho_c_inf, rc);
        assert!(healthy_fraction(r.rho_h_inf, r.rho_c_inf) >= p.theta_hc);
    }
}
