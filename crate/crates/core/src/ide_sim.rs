//! Time integration of the coupled integro-differential system
//!
//! ```text
//! ∂t n_H = R_H(x, ρ_H, ρ_C, u) n_H,   ∂t n_C = R_C(x, ρ_C, ρ_H, u) n_C
//! ```
//!
//! with the exponential (multiplicative) Euler step `n ← n exp(R dt)`. The
//! totals are frozen at the start of each step (explicit) or averaged with a
//! predicted end-of-step value (Heun). Positivity is preserved exactly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Density, PhenotypeGrid};
use crate::model::{DosePair, ModelParams, SampledRates};

/// Relative band used on threshold comparisons by closed-loop policies.
pub const DEFAULT_HYSTERESIS: f64 = 1e-3;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_SNAPSHOTS: usize = 200;

/// Piecewise-constant dose pair; `doses[i]` applies on
/// `[breakpoints[i], breakpoints[i + 1])`, the last one until forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    breakpoints: Vec<f64>,
    doses: Vec<DosePair>,
}

impl ControlSchedule {
    pub fn new(breakpoints: Vec<f64>, doses: Vec<DosePair>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != doses.len() {
            return Err(Error::InvalidInput(format!(
                "schedule needs matching nonempty breakpoints and doses ({} vs {})",
                breakpoints.len(),
                doses.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::InvalidInput("schedule must start at t = 0".into()));
        }
        if !breakpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput(
                "schedule breakpoints must be strictly increasing".into(),
            ));
        }
        if doses
            .iter()
            .any(|d| !(d.u1 >= 0.0 && d.u2 >= 0.0 && d.u1.is_finite() && d.u2.is_finite()))
        {
            return Err(Error::InvalidInput("doses must be finite and nonnegative".into()));
        }
        Ok(Self { breakpoints, doses })
    }

    pub fn constant(dose: DosePair) -> Self {
        Self {
            breakpoints: vec![0.0],
            doses: vec![dose],
        }
    }

    /// Builds a schedule from per-step doses, merging equal neighbours.
    pub fn from_steps(starts: &[f64], doses: &[DosePair]) -> Result<Self> {
        let mut b = Vec::new();
        let mut d: Vec<DosePair> = Vec::new();
        for (&t, &u) in starts.iter().zip(doses) {
            if d.last() != Some(&u) {
                b.push(t);
                d.push(u);
            }
        }
        Self::new(b, d)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn doses(&self) -> &[DosePair] {
        &self.doses
    }

    pub fn dose_at(&self, t: f64) -> DosePair {
        let i = self.breakpoints.partition_point(|&b| b <= t);
        self.doses[i.saturating_sub(1)]
    }

    pub fn total_variation(&self) -> f64 {
        self.doses
            .windows(2)
            .map(|w| (w[1].u1 - w[0].u1).abs() + (w[1].u2 - w[0].u2).abs())
            .sum()
    }

    pub fn within(&self, params: &ModelParams) -> bool {
        self.doses.iter().all(|d| d.within(params))
    }

    /// Concatenates `other` shifted to start at `t0`, dropping this schedule's
    /// pieces from `t0` on.
    pub fn then(&self, t0: f64, other: &ControlSchedule) -> Result<Self> {
        let mut b = Vec::new();
        let mut d = Vec::new();
        for (&t, &u) in self.breakpoints.iter().zip(&self.doses) {
            if t < t0 {
                b.push(t);
                d.push(u);
            }
        }
        for (&t, &u) in other.breakpoints.iter().zip(&other.doses) {
            b.push(t + t0);
            d.push(u);
        }
        Self::from_steps(&b, &d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Explicit,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub dt: f64,
    pub scheme: Scheme,
    /// Number of snapshot intervals; snapshots are taken at `j T / snapshots`.
    pub snapshots: usize,
    /// Healthy total the floor constraint refers to; defaults to the initial
    /// healthy total of the run. Needed when restarting mid-treatment.
    #[serde(default)]
    pub reference_rho_h: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            scheme: Scheme::Explicit,
            snapshots: DEFAULT_SNAPSHOTS,
            reference_rho_h: None,
        }
    }
}

impl SimOptions {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn heun(mut self) -> Self {
        self.scheme = Scheme::Heun;
        self
    }

    pub fn snapshots(mut self, n: usize) -> Self {
        self.snapshots = n;
        self
    }

    pub fn reference_rho_h(mut self, rho_h0: f64) -> Self {
        self.reference_rho_h = Some(rho_h0);
        self
    }
}

/// Exponential stepper shared by the simulator and the direct transcription.
#[derive(Debug, Clone)]
pub struct Stepper {
    grid: Arc<PhenotypeGrid>,
    rates: SampledRates,
    scheme: Scheme,
}

/// State carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub n_h: Vec<f64>,
    pub n_c: Vec<f64>,
    pub rho_h: f64,
    pub rho_c: f64,
}

impl Stepper {
    pub fn new(params: &ModelParams, grid: Arc<PhenotypeGrid>, scheme: Scheme) -> Self {
        let rates = SampledRates::new(params, &grid);
        Self {
            grid,
            rates,
            scheme,
        }
    }

    pub fn grid(&self) -> &Arc<PhenotypeGrid> {
        &self.grid
    }

    pub fn rates(&self) -> &SampledRates {
        &self.rates
    }

    pub fn init(&self, n_h: &[f64], n_c: &[f64]) -> SimState {
        SimState {
            rho_h: self.grid.integrate(n_h),
            rho_c: self.grid.integrate(n_c),
            n_h: n_h.to_vec(),
            n_c: n_c.to_vec(),
        }
    }

    /// Growth rates of both populations at the given totals, written into
    /// the two buffers.
    pub fn growth(
        &self,
        rho_h: f64,
        rho_c: f64,
        dose: DosePair,
        r_h: &mut [f64],
        r_c: &mut [f64],
    ) {
        self.rates.h.growth_into(rho_h, rho_c, dose, r_h);
        self.rates.c.growth_into(rho_c, rho_h, dose, r_c);
    }

    /// Advances `state` by `dt` under `dose`. `scratch` must hold two vectors
    /// of grid length.
    pub fn step(&self, state: &mut SimState, dose: DosePair, dt: f64, scratch: &mut [Vec<f64>; 2]) {
        let (mut rho_h, mut rho_c) = (state.rho_h, state.rho_c);
        if self.scheme == Scheme::Heun {
            let [r_h, r_c] = scratch;
            self.growth(rho_h, rho_c, dose, r_h, r_c);
            let ph: f64 = self
                .grid
                .weights()
                .iter()
                .zip(&state.n_h)
                .zip(r_h.iter())
                .map(|((w, n), r)| w * n * (r * dt).exp())
                .sum();
            let pc: f64 = self
                .grid
                .weights()
                .iter()
                .zip(&state.n_c)
                .zip(r_c.iter())
                .map(|((w, n), r)| w * n * (r * dt).exp())
                .sum();
            // growth rates are affine in the totals, so averaging the rates is
            // the same as evaluating at the averaged totals
            rho_h = 0.5 * (rho_h + ph);
            rho_c = 0.5 * (rho_c + pc);
        }
        let [r_h, r_c] = scratch;
        self.growth(rho_h, rho_c, dose, r_h, r_c);
        for (n, r) in state.n_h.iter_mut().zip(r_h.iter()) {
            *n *= (r * dt).exp();
        }
        for (n, r) in state.n_c.iter_mut().zip(r_c.iter()) {
            *n *= (r * dt).exp();
        }
        state.rho_h = self.grid.integrate(&state.n_h);
        state.rho_c = self.grid.integrate(&state.n_c);
    }

    pub fn scratch(&self) -> [Vec<f64>; 2] {
        [vec![0.0; self.grid.len()], vec![0.0; self.grid.len()]]
    }

    fn check_finite(&self, state: &SimState, t: f64) -> Result<()> {
        if state.rho_h.is_finite() && state.rho_c.is_finite() {
            return Ok(());
        }
        for (values, population) in [(&state.n_h, "H"), (&state.n_c, "C")] {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    t,
                    x: self.grid.nodes()[i],
                    population,
                });
            }
        }
        Err(Error::NonFinite {
            t,
            x: f64::NAN,
            population: "total",
        })
    }
}

/// Step start times on `[0, T]`: multiples of `dt`, plus any breakpoints, plus `T`.
pub fn step_times(t_end: f64, dt: f64, breaks: &[f64]) -> Vec<f64> {
    let ratio = t_end / dt;
    let n = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
        ratio.round() as usize
    } else {
        ratio.ceil() as usize
    };
    let tol = 1e-12 * t_end.max(1.0);
    let mut times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    times.push(t_end);
    let mut extra: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&b| b > tol && b < t_end - tol)
        .collect();
    if !extra.is_empty() {
        times.append(&mut extra);
        times.sort_by(f64::total_cmp);
        // a breakpoint replaces any grid time closer than the tolerance
        let mut merged: Vec<f64> = Vec::with_capacity(times.len());
        for t in times {
            match merged.last_mut() {
                Some(last) if t - *last <= tol => {
                    if breaks.contains(&t) {
                        *last = t;
                    }
                }
                _ => merged.push(t),
            }
        }
        if let Some(last) = merged.last_mut() {
            *last = t_end;
        }
        times = merged;
    }
    times
}

/// What a closed-loop policy sees at a step boundary.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub t: f64,
    pub dt: f64,
    pub rho_h: f64,
    pub rho_c: f64,
    pub rho_h0: f64,
    /// Cancer total at the previous step boundary.
    pub prev_rho_c: Option<f64>,
    pub n_h: &'a [f64],
    pub n_c: &'a [f64],
    pub grid: &'a PhenotypeGrid,
    pub params: &'a ModelParams,
}

impl Observation<'_> {
    pub fn g1(&self) -> f64 {
        healthy_fraction(self.rho_h, self.rho_c)
    }

    pub fn g2(&self) -> f64 {
        self.rho_h / self.rho_h0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub dose: DosePair,
    pub mode: &'static str,
}

/// A closed-loop dose rule evaluated at step boundaries.
pub trait Policy {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision;

    fn name(&self) -> &str;

    fn hysteresis(&self) -> f64 {
        DEFAULT_HYSTERESIS
    }
}

/// Policy returning a fixed dose pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub DosePair);

impl Policy for ConstantPolicy {
    fn decide(&mut self, _obs: &Observation<'_>) -> Decision {
        Decision {
            dose: self.0,
            mode: "constant",
        }
    }

    fn name(&self) -> &str {
        "constant"
    }
}

/// Open-loop schedule viewed as a policy (doses looked up by time).
#[derive(Debug, Clone)]
pub struct SchedulePolicy(pub ControlSchedule);

impl Policy for SchedulePolicy {
    fn decide(&mut self, obs: &Observation<'_>) -> Decision {
        Decision {
            dose: self.0.dose_at(obs.t),
            mode: "schedule",
        }
    }

    fn name(&self) -> &str {
        "schedule"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub n_h: Density,
    pub n_c: Density,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
    pub rho_cs: Vec<f64>,
    pub rho_cr: Vec<f64>,
    /// Dose applied from `times[k]` to `times[k + 1]`; the last entry repeats
    /// the final applied dose.
    pub doses: Vec<DosePair>,
    /// Policy mode per step (open-loop runs use "schedule").
    pub modes: Vec<&'static str>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub rho_h0: f64,
    pub snapshots: Vec<Snapshot>,
    /// Doses actually applied, as a schedule.
    pub schedule: ControlSchedule,
    pub final_h: Density,
    pub final_c: Density,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_rho_c(&self) -> f64 {
        *self.rho_c.last().unwrap()
    }

    pub fn final_rho_h(&self) -> f64 {
        *self.rho_h.last().unwrap()
    }

    /// Index of the last recorded time `<= t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    /// Linear interpolation of a recorded series at time `t`.
    pub fn interp(&self, series: &[f64], t: f64) -> f64 {
        let k = self.index_at(t);
        if k + 1 >= self.times.len() {
            return series[k];
        }
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let s = (t - t0) / (t1 - t0);
        series[k] * (1.0 - s) + series[k + 1] * s
    }

    /// Snapshot with time closest to `t`.
    pub fn snapshot_near(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    pub fn min_rho_c(&self) -> (f64, f64) {
        let mut k = 0;
        for (i, &v) in self.rho_c.iter().enumerate() {
            if v < self.rho_c[k] {
                k = i;
            }
        }
        (self.times[k], self.rho_c[k])
    }

    /// Writes the totals table: t, ρ_H, ρ_C, ρ_CS, ρ_CR, u1, u2, g1, g2. Every
    /// `stride`-th row is written, plus the last.
    pub fn write_totals_csv<W: std::io::Write>(&self, mut out: W, stride: usize) -> std::io::Result<()> {
        writeln!(out, "t,rho_H,rho_C,rho_CS,rho_CR,u1,u2,g1,g2")?;
        let stride = stride.max(1);
        let n = self.len();
        for k in (0..n).filter(|k| k % stride == 0 || *k == n - 1) {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{},{},{}",
                self.times[k],
                self.rho_h[k],
                self.rho_c[k],
                self.rho_cs[k],
                self.rho_cr[k],
                self.doses[k].u1,
                self.doses[k].u2,
                self.g1[k],
                self.g2[k]
            )?;
        }
        Ok(())
    }
}

#[inline]
pub fn healthy_fraction(rho_h: f64, rho_c: f64) -> f64 {
    let s = rho_h + rho_c;
    if s > 0.0 {
        rho_h / s
    } else {
        1.0
    }
}

enum DoseSource<'a> {
    Schedule(&'a ControlSchedule),
    Policy(&'a mut dyn Policy),
}

fn check_inputs(n_h0: &Density, n_c0: &Density, t_end: f64, dt: f64) -> Result<()> {
    if n_h0.grid() != n_c0.grid() {
        return Err(Error::InvalidInput(
            "initial densities live on different grids".into(),
        ));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {t_end}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {dt}")));
    }
    Ok(())
}

/// Open-loop simulation with the default explicit scheme.
pub fn simulate(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    schedule: &ControlSchedule,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    simulate_with(params, n_h0, n_c0, schedule, t_end, &SimOptions::with_dt(dt))
}

pub fn simulate_with(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    schedule: &ControlSchedule,
    t_end: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    if !schedule.within(params) {
        return Err(Error::Domain("schedule doses outside the admissible box".into()));
    }
    run(params, n_h0, n_c0, DoseSource::Schedule(schedule), t_end, opts)
}

/// Closed-loop simulation with the default explicit scheme.
pub fn simulate_closed_loop(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    policy: &mut dyn Policy,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    simulate_closed_loop_with(params, n_h0, n_c0, policy, t_end, &SimOptions::with_dt(dt))
}

pub fn simulate_closed_loop_with(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    policy: &mut dyn Policy,
    t_end: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    run(params, n_h0, n_c0, DoseSource::Policy(policy), t_end, opts)
}

fn run(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    mut source: DoseSource<'_>,
    t_end: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    check_inputs(n_h0, n_c0, t_end, opts.dt)?;
    let grid = n_h0.grid().clone();
    let stepper = Stepper::new(params, grid.clone(), opts.scheme);
    let times = match &source {
        DoseSource::Schedule(s) => step_times(t_end, opts.dt, s.breakpoints()),
        DoseSource::Policy(_) => step_times(t_end, opts.dt, &[]),
    };
    let n = times.len();
    let mut state = stepper.init(n_h0.values(), n_c0.values());
    let rho_h0 = opts.reference_rho_h.unwrap_or(state.rho_h);
    let mut scratch = stepper.scratch();

    let mut rho_h = Vec::with_capacity(n);
    let mut rho_c = Vec::with_capacity(n);
    let mut rho_cs = Vec::with_capacity(n);
    let mut rho_cr = Vec::with_capacity(n);
    let mut doses = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);

    let n_snap = opts.snapshots.max(1);
    let mut snapshots = Vec::with_capacity(n_snap + 1);
    let mut next_epoch = 0usize;
    let snap_tol = 1e-9 * opts.dt;

    let nodes = grid.nodes();
    let weights = grid.weights();
    let mut prev_rho_c = None;

    for k in 0..n {
        let t = times[k];
        rho_h.push(state.rho_h);
        rho_c.push(state.rho_c);
        let rcr: f64 = weights
            .iter()
            .zip(nodes)
            .zip(&state.n_c)
            .map(|((w, x), v)| w * x * v)
            .sum();
        rho_cr.push(rcr);
        rho_cs.push(state.rho_c - rcr);

        while next_epoch <= n_snap && t >= t_end * next_epoch as f64 / n_snap as f64 - snap_tol {
            if snapshots.last().map(|s: &Snapshot| s.t) != Some(t) {
                snapshots.push(Snapshot {
                    t,
                    n_h: Density::from_raw(grid.clone(), state.n_h.clone()),
                    n_c: Density::from_raw(grid.clone(), state.n_c.clone()),
                });
            }
            next_epoch += 1;
        }

        let decision = match &mut source {
            DoseSource::Schedule(s) => Decision {
                dose: s.dose_at(t),
                mode: "schedule",
            },
            DoseSource::Policy(p) => {
                let obs = Observation {
                    t,
                    dt: opts.dt,
                    rho_h: state.rho_h,
                    rho_c: state.rho_c,
                    rho_h0,
                    prev_rho_c,
                    n_h: &state.n_h,
                    n_c: &state.n_c,
                    grid: &grid,
                    params,
                };
                let mut d = p.decide(&obs);
                d.dose = d.dose.clamp_to(params);
                d
            }
        };
        doses.push(decision.dose);
        modes.push(decision.mode);
        prev_rho_c = Some(state.rho_c);

        if k + 1 < n {
            let h = times[k + 1] - t;
            stepper.step(&mut state, decision.dose, h, &mut scratch);
            stepper.check_finite(&state, times[k + 1])?;
        }
    }

    let g1 = rho_h
        .iter()
        .zip(&rho_c)
        .map(|(&h, &c)| healthy_fraction(h, c))
        .collect();
    let g2 = rho_h.iter().map(|&h| h / rho_h0).collect();
    let schedule = ControlSchedule::from_steps(&times[..n - 1], &doses[..n - 1])?;
    if let Some(last) = doses.last_mut() {
        *last = doses_at_end(&schedule);
    }
    Ok(Trajectory {
        times,
        rho_h,
        rho_c,
        rho_cs,
        rho_cr,
        doses,
        modes,
        g1,
        g2,
        rho_h0,
        snapshots,
        schedule,
        final_h: Density::from_raw(grid.clone(), state.n_h),
        final_c: Density::from_raw(grid, state.n_c),
    })
}

fn doses_at_end(schedule: &ControlSchedule) -> DosePair {
    *schedule.doses().last().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// `ρ_H/(ρ_H + ρ_C) ≥ θ_HC`.
    HealthyFraction,
    /// `ρ_H ≥ θ_H ρ_H(0)`.
    HealthyFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    /// Crossing time, linearly interpolated between recorded steps.
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub min_g1_margin: f64,
    pub t_min_g1: f64,
    pub min_g2_margin: f64,
    pub t_min_g2: f64,
    pub first_violation: Option<Violation>,
}

impl ConstraintReport {
    pub fn feasible(&self, tol: f64) -> bool {
        self.min_g1_margin >= -tol && self.min_g2_margin >= -tol
    }
}

fn first_crossing(times: &[f64], g: &[f64], theta: f64) -> Option<f64> {
    let k = g.iter().position(|&v| v < theta)?;
    if k == 0 {
        return Some(times[0]);
    }
    let (g0, g1) = (g[k - 1], g[k]);
    let s = (g0 - theta) / (g0 - g1);
    Some(times[k - 1] + s * (times[k] - times[k - 1]))
}

pub fn constraint_report(traj: &Trajectory, params: &ModelParams) -> ConstraintReport {
    let argmin = |g: &[f64]| {
        let mut k = 0;
        for (i, &v) in g.iter().enumerate() {
            if v < g[k] {
                k = i;
            }
        }
        k
    };
    let k1 = argmin(&traj.g1);
    let k2 = argmin(&traj.g2);
    let v1 = first_crossing(&traj.times, &traj.g1, params.theta_hc).map(|t| Violation {
        constraint: Constraint::HealthyFraction,
        t,
    });
    let v2 = first_crossing(&traj.times, &traj.g2, params.theta_h).map(|t| Violation {
        constraint: Constraint::HealthyFloor,
        t,
    });
    let first_violation = match (v1, v2) {
        (Some(a), Some(b)) => Some(if b.t < a.t { b } else { a }),
        (a, b) => a.or(b),
    };
    ConstraintReport {
        min_g1_margin: traj.g1[k1] - params.theta_hc,
        t_min_g1: traj.times[k1],
        min_g2_margin: traj.g2[k2] - params.theta_h,
        t_min_g2: traj.times[k2],
        first_violation,
    }
}

pub const REFERENCE_MASS_H: f64 = 2.7;
pub const REFERENCE_MASS_C: f64 = 0.5;

/// The reference initial data: Gaussians centred at 0.5 with width 0.1 and
/// totals 2.7 (healthy) and 0.5 (cancer).
pub fn reference_initial(grid: Arc<PhenotypeGrid>) -> (Density, Density) {
    let h = crate::grid::gaussian_init(grid.clone(), 0.5, 0.1, REFERENCE_MASS_H).expect("valid gaussian");
    let c = crate::grid::gaussian_init(grid, 0.5, 0.1, REFERENCE_MASS_C).expect("valid gaussian");
    (h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gaussian_init, PhenotypeGrid};
    use crate::model::{reference_params, Monotonicity, Preset, RateFn, RateShape};

    fn grid(n: usize) -> Arc<PhenotypeGrid> {
        PhenotypeGrid::shared(n).unwrap()
    }

    #[test]
    fn zero_cancer_stays_zero() {
        let p = reference_params(Preset::Modified);
        let g = grid(51);
        let h = gaussian_init(g.clone(), 0.5, 0.1, 2.7).unwrap();
        let c = Density::zeros(g);
        let s = ControlSchedule::new(
            vec![0.0, 1.0],
            vec![DosePair::new(3.5, 7.0), DosePair::ZERO],
        )
        .unwrap();
        let tr = simulate(&p, &h, &c, &s, 3.0, 1e-2).unwrap();
        assert!(tr.rho_c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_lookup_and_variation() {
        let s = ControlSchedule::new(
            vec![0.0, 1.0, 2.5],
            vec![
                DosePair::new(0.0, 0.5),
                DosePair::new(3.5, 7.0),
                DosePair::new(1.0, 7.0),
            ],
        )
        .unwrap();
        assert_eq!(s.dose_at(0.0), DosePair::new(0.0, 0.5));
        assert_eq!(s.dose_at(0.999), DosePair::new(0.0, 0.5));
        assert_eq!(s.dose_at(1.0), DosePair::new(3.5, 7.0));
        assert_eq!(s.dose_at(100.0), DosePair::new(1.0, 7.0));
        assert!((s.total_variation() - (3.5 + 6.5 + 2.5)).abs() < 1e-14);
        assert_eq!(ControlSchedule::constant(DosePair::new(3.5, 7.0)).total_variation(), 0.0);
        assert!(ControlSchedule::new(vec![0.0, 0.0], vec![DosePair::ZERO; 2]).is_err());
        assert!(ControlSchedule::new(vec![0.5], vec![DosePair::ZERO]).is_err());
    }

    #[test]
    fn step_times_include_breakpoints() {
        let t = step_times(1.0, 0.3, &[0.5]);
        assert_eq!(t.len(), 6);
        assert_eq!(t[0], 0.0);
        assert!(t.contains(&0.5));
        assert_eq!(*t.last().unwrap(), 1.0);
        let t = step_times(1.0, 0.25, &[]);
        assert_eq!(t, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let t = step_times(200.0, 1e-3, &[]);
        assert_eq!(t.len(), 200_001);
    }

    #[test]
    fn breakpoints_split_steps() {
        let p = reference_params(Preset::Modified);
        let g = grid(31);
        let (h, c) = reference_initial(g);
        let s = ControlSchedule::new(
            vec![0.0, 0.05],
            vec![DosePair::ZERO, DosePair::new(3.5, 7.0)],
        )
        .unwrap();
        let tr = simulate(&p, &h, &c, &s, 0.2, 0.1).unwrap();
        assert_eq!(tr.times, vec![0.0, 0.05, 0.1, 0.2]);
        assert_eq!(tr.doses[0], DosePair::ZERO);
        assert_eq!(tr.doses[1], DosePair::new(3.5, 7.0));
        assert_eq!(tr.schedule.breakpoints(), &[0.0, 0.05]);
    }

    #[test]
    fn constant_policy_matches_open_loop() {
        let p = reference_params(Preset::Modified);
        let (h, c) = reference_initial(grid(101));
        let open = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 2.0, 1e-3).unwrap();
        let mut pol = ConstantPolicy(DosePair::ZERO);
        let closed = simulate_closed_loop(&p, &h, &c, &mut pol, 2.0, 1e-3).unwrap();
        assert_eq!(open.times, closed.times);
        for k in 0..open.len() {
            assert!((open.rho_c[k] - closed.rho_c[k]).abs() <= 1e-14);
            assert!((open.rho_h[k] - closed.rho_h[k]).abs() <= 1e-14);
        }
    }

    #[test]
    fn out_of_box_schedule_rejected() {
        let p = reference_params(Preset::Modified);
        let (h, c) = reference_initial(grid(21));
        let s = ControlSchedule::constant(DosePair::new(5.0, 0.0));
        assert!(matches!(simulate(&p, &h, &c, &s, 1.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn overflow_is_reported_with_location() {
        let mut p = reference_params(Preset::Modified);
        p.d_c = RateFn::constant(0.0);
        p.r_c = RateFn::new(
            RateShape::Constant { value: 400.0 },
            Monotonicity::Nonincreasing,
        );
        let (h, c) = reference_initial(grid(21));
        let err = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 10.0, 0.5)
            .unwrap_err();
        match err {
            Error::NonFinite { t, population, .. } => {
                assert_eq!(population, "C");
                assert!(t > 0.0 && t <= 10.0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    fn logistic(a: f64, d: f64, rho0: f64, t: f64) -> f64 {
        let e = (a * t).exp();
        a * rho0 * e / (a + d * rho0 * (e - 1.0))
    }

    #[test]
    fn explicit_scheme_is_first_order_on_logistic() {
        let mut p = reference_params(Preset::Modified);
        p.r_c = RateFn::constant(1.2);
        p.d_c = RateFn::constant(0.8);
        p.mu_c = RateFn::constant(0.3);
        let g = grid(21);
        let h = Density::zeros(g.clone());
        let c = Density::constant(g, 0.4).unwrap();
        let dose = DosePair::new(1.0, 0.5);
        let a = 1.2 / 1.5 - 0.3;
        let exact = logistic(a, 0.8, 0.4, 5.0);
        let err = |dt: f64| {
            let tr = simulate(&p, &h, &c, &ControlSchedule::constant(dose), 5.0, dt).unwrap();
            (tr.final_rho_c() - exact).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
        assert!(e2 < 1e-2);
    }

    #[test]
    fn heun_is_second_order_on_logistic() {
        let mut p = reference_params(Preset::Modified);
        p.r_c = RateFn::constant(1.5);
        p.d_c = RateFn::constant(1.0);
        let g = grid(11);
        let h = Density::zeros(g.clone());
        let c = Density::constant(g, 0.2).unwrap();
        let exact = logistic(1.5, 1.0, 0.2, 4.0);
        let err = |dt: f64| {
            let opts = SimOptions::with_dt(dt).heun();
            let tr = simulate_with(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 4.0, &opts)
                .unwrap();
            (tr.final_rho_c() - exact).abs()
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn pointwise_exponential_formula() {
        let p = reference_params(Preset::Modified);
        let g = grid(41);
        let (h, c) = reference_initial(g.clone());
        let s = ControlSchedule::new(
            vec![0.0, 0.3],
            vec![DosePair::new(1.0, 2.0), DosePair::new(3.5, 0.0)],
        )
        .unwrap();
        let tr = simulate(&p, &h, &c, &s, 1.0, 1e-3).unwrap();
        // quadrature of the stored rate series along the run
        for (i, &x) in g.nodes().iter().enumerate() {
            let mut int_h = 0.0;
            let mut int_c = 0.0;
            for k in 0..tr.len() - 1 {
                let dt = tr.times[k + 1] - tr.times[k];
                let u = tr.doses[k];
                int_h += dt * p.growth_rate_h(x, tr.rho_h[k], tr.rho_c[k], u).unwrap();
                int_c += dt * p.growth_rate_c(x, tr.rho_c[k], tr.rho_h[k], u).unwrap();
            }
            let eh = h.values()[i] * int_h.exp();
            let ec = c.values()[i] * int_c.exp();
            assert!((tr.final_h.values()[i] / eh - 1.0).abs() < 1e-6);
            assert!((tr.final_c.values()[i] / ec - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn totals_stay_below_carrying_bound_untreated() {
        let p = reference_params(Preset::Modified);
        let g = grid(101);
        let (h, c) = reference_initial(g.clone());
        let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 60.0, 1e-2).unwrap();
        let bound = |r: &RateFn, d: &RateFn, a: f64| {
            g.nodes()
                .iter()
                .map(|&x| r.eval(x) / (a * d.eval(x)))
                .fold(0.0, f64::max)
        };
        let bh = bound(&p.r_h, &p.d_h, p.a_hh);
        let bc = bound(&p.r_c, &p.d_c, p.a_cc);
        for k in 0..tr.len() {
            if tr.times[k] >= 20.0 {
                assert!(tr.rho_h[k] <= bh + 0.05);
                assert!(tr.rho_c[k] <= bc + 0.05);
            }
        }
        let rep = constraint_report(&tr, &p);
        assert!(rep.min_g2_margin >= 0.0, "{rep:?}");
    }

    #[test]
    fn snapshots_cover_the_run() {
        let p = reference_params(Preset::Modified);
        let (h, c) = reference_initial(grid(21));
        let opts = SimOptions::with_dt(0.01).snapshots(10);
        let tr = simulate_with(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 1.0, &opts)
            .unwrap();
        assert_eq!(tr.snapshots.len(), 11);
        assert_eq!(tr.snapshots[0].t, 0.0);
        assert_eq!(tr.snapshots[10].t, 1.0);
        assert!((tr.snapshots[5].t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_step_report_uses_initial_values() {
        let p = reference_params(Preset::Modified);
        let (h, c) = reference_initial(grid(21));
        let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 1e-3, 1e-3).unwrap();
        let r = constraint_report(&tr, &p);
        let g1_0 = 2.7 / 3.2;
        assert!(r.min_g1_margin <= g1_0 - 0.4 + 1e-9);
        assert!((r.min_g1_margin - (g1_0 - 0.4)).abs() < 1e-3);
        assert!(r.first_violation.is_none());
    }

    #[test]
    fn first_violation_matches_bisection() {
        let mut p = reference_params(Preset::Modified);
        p.r_c = RateFn::constant(6.0);
        let (h, c) = reference_initial(grid(51));
        let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 5.0, 1e-2).unwrap();
        let rep = constraint_report(&tr, &p);
        let v = rep.first_violation.expect("cancer overgrows");
        assert_eq!(v.constraint, Constraint::HealthyFraction);
        // bisection on the linear interpolant of the stored series
        let f = |t: f64| tr.interp(&tr.g1, t) - p.theta_hc;
        let (mut lo, mut hi) = (0.0, 5.0);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if f(mid) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((v.t - lo).abs() < 1e-9, "{} vs {lo}", v.t);
    }

    #[test]
    fn totals_csv_header() {
        let p = reference_params(Preset::Modified);
        let (h, c) = reference_initial(grid(11));
        let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 0.1, 0.01).unwrap();
        let mut buf = Vec::new();
        tr.write_totals_csv(&mut buf, 5).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,rho_H,rho_C,rho_CS,rho_CR,u1,u2,g1,g2\n"));
        assert_eq!(s.lines().count(), 1 + 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn positivity_and_bounds(u1 in 0.0f64..3.5, u2 in 0.0f64..7.0,
                                     c0 in 0.01f64..5.0, center in 0.0f64..1.0) {
                let p = reference_params(Preset::Modified);
                let g = grid(31);
                let h = gaussian_init(g.clone(), center, 0.05, 2.7).unwrap();
                let c = gaussian_init(g, 1.0 - center, 0.05, c0).unwrap();
                let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::new(u1, u2)), 3.0, 1e-2).unwrap();
                prop_assert!(tr.final_h.values().iter().all(|&v| v > 0.0));
                prop_assert!(tr.final_c.values().iter().all(|&v| v > 0.0));
                prop_assert!(tr.times.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(tr.rho_c.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
