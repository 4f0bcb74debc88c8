//! Direct transcription of the full density-level control problem: piecewise
//! constant doses on a uniform time grid, the simulator's exponential step
//! as the dynamics, path constraints on the healthy share and the healthy
//! floor, and an augmented-Lagrangian / spectral-projected-gradient solver.
//!
//! The objective minimized internally is `ln ρ_C(T)`, whose minimizers are
//! those of `ρ_C(T)` but whose scale does not collapse as the tumour shrinks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Density, PhenotypeGrid};
use crate::ide_sim::{
    self, healthy_fraction, step_times, ControlSchedule, Scheme, SimOptions, SimState, Stepper,
};
use crate::model::{DosePair, ModelParams};
use crate::pmp::project_budget_box;
use crate::strategies::{quasi_periodic_policy_1, two_phase_plan, TwoPhaseOptions};

/// Path constraints and control bounds of a transcription.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConstraints {
    pub healthy_fraction: bool,
    pub healthy_floor: bool,
    pub theta_hc: f64,
    pub theta_h: f64,
    pub u1_bounds: (f64, f64),
    pub u2_bounds: (f64, f64),
    /// Optional bound on `∫ u1 dt`.
    pub u1_budget: Option<f64>,
}

impl PathConstraints {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            healthy_fraction: true,
            healthy_floor: true,
            theta_hc: params.theta_hc,
            theta_h: params.theta_h,
            u1_bounds: (0.0, params.u1_max),
            u2_bounds: (0.0, params.u2_max),
            u1_budget: None,
        }
    }

    /// Dose bounds only.
    pub fn unconstrained(params: &ModelParams) -> Self {
        Self {
            healthy_fraction: false,
            healthy_floor: false,
            ..Self::from_params(params)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranscribedProblem {
    params: ModelParams,
    stepper: Stepper,
    n_h0: Vec<f64>,
    n_c0: Vec<f64>,
    times: Vec<f64>,
    rho_h0: f64,
    constraints: PathConstraints,
}

/// States at every time node.
#[derive(Debug, Clone)]
pub struct Forward {
    pub n_h: Vec<Vec<f64>>,
    pub n_c: Vec<Vec<f64>>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
}

pub fn transcribe(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    t_end: f64,
    nt: usize,
    constraints: PathConstraints,
) -> Result<TranscribedProblem> {
    if nt == 0 {
        return Err(Error::InvalidInput("need at least one time step".into()));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {t_end}")));
    }
    if n_h0.grid() != n_c0.grid() {
        return Err(Error::InvalidInput("initial densities live on different grids".into()));
    }
    let (l1, h1) = constraints.u1_bounds;
    let (l2, h2) = constraints.u2_bounds;
    if !(0.0 <= l1 && l1 <= h1 && h1 <= params.u1_max && 0.0 <= l2 && l2 <= h2 && h2 <= params.u2_max) {
        return Err(Error::InvalidInput("control bounds must lie inside the admissible box".into()));
    }
    if let Some(b) = constraints.u1_budget {
        if l1 != 0.0 {
            return Err(Error::InvalidInput("a dose budget needs a zero lower bound on u1".into()));
        }
        if !(b >= 0.0) {
            return Err(Error::InvalidInput(format!("budget must be nonnegative, got {b}")));
        }
    }
    let grid = n_h0.grid().clone();
    let stepper = Stepper::new(params, grid, Scheme::Explicit);
    let rho_h0 = n_h0.total_mass();
    let rho_c0 = n_c0.total_mass();
    if constraints.healthy_fraction && healthy_fraction(rho_h0, rho_c0) < constraints.theta_hc {
        return Err(Error::Infeasible(format!(
            "initial healthy share {:.6} below {}",
            healthy_fraction(rho_h0, rho_c0),
            constraints.theta_hc
        )));
    }
    Ok(TranscribedProblem {
        params: params.clone(),
        stepper,
        n_h0: n_h0.values().to_vec(),
        n_c0: n_c0.values().to_vec(),
        times: step_times(t_end, t_end / nt as f64, &[]),
        rho_h0,
        constraints,
    })
}

/// Transcription from the reference initial data on a fresh `nx`-node grid.
pub fn transcribe_reference(params: &ModelParams, t_end: f64, nt: usize, nx: usize) -> Result<TranscribedProblem> {
    let grid = PhenotypeGrid::shared(nx)?;
    let (h, c) = ide_sim::reference_initial(grid);
    transcribe(params, &h, &c, t_end, nt, PathConstraints::from_params(params))
}

impl TranscribedProblem {
    pub fn nt(&self) -> usize {
        self.times.len() - 1
    }

    pub fn nx(&self) -> usize {
        self.n_h0.len()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn grid(&self) -> &Arc<PhenotypeGrid> {
        self.stepper.grid()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn constraints(&self) -> &PathConstraints {
        &self.constraints
    }

    pub fn rho_h0(&self) -> f64 {
        self.rho_h0
    }

    pub fn initial(&self) -> (Density, Density) {
        let g = self.grid().clone();
        (
            Density::from_raw(g.clone(), self.n_h0.clone()),
            Density::from_raw(g, self.n_c0.clone()),
        )
    }

    /// Decision vector layout: `u1[0..nt]` then `u2[0..nt]`.
    pub fn dose(&self, u: &[f64], k: usize) -> DosePair {
        DosePair::new(u[k], u[self.nt() + k])
    }

    pub fn pack(&self, doses: &[DosePair]) -> Vec<f64> {
        let nt = self.nt();
        let mut u = vec![0.0; 2 * nt];
        for k in 0..nt {
            u[k] = doses[k].u1;
            u[nt + k] = doses[k].u2;
        }
        u
    }

    pub fn from_schedule(&self, s: &ControlSchedule) -> Vec<f64> {
        let doses: Vec<DosePair> = self.times[..self.nt()].iter().map(|&t| s.dose_at(t)).collect();
        let mut u = self.pack(&doses);
        self.project(&mut u);
        u
    }

    pub fn schedule(&self, u: &[f64]) -> ControlSchedule {
        let nt = self.nt();
        let doses: Vec<DosePair> = (0..nt).map(|k| self.dose(u, k)).collect();
        ControlSchedule::from_steps(&self.times[..nt], &doses).expect("increasing step times")
    }

    pub fn constant(&self, dose: DosePair) -> Vec<f64> {
        let mut u = self.pack(&vec![dose; self.nt()]);
        self.project(&mut u);
        u
    }

    pub fn project(&self, u: &mut [f64]) {
        let nt = self.nt();
        let (l1, h1) = self.constraints.u1_bounds;
        let (l2, h2) = self.constraints.u2_bounds;
        match self.constraints.u1_budget {
            Some(b) => {
                // cells have unequal length only if T is not a multiple of dt;
                // the uniform grid built here always is
                let h = self.times[1] - self.times[0];
                let p = project_budget_box(&u[..nt], h, h1, b);
                u[..nt].copy_from_slice(&p);
            }
            _ => {
                for v in &mut u[..nt] {
                    *v = v.clamp(l1, h1);
                }
            }
        }
        for v in &mut u[nt..] {
            *v = v.clamp(l2, h2);
        }
    }

    pub fn forward(&self, u: &[f64]) -> Forward {
        let nt = self.nt();
        let mut state: SimState = self.stepper.init(&self.n_h0, &self.n_c0);
        let mut scratch = self.stepper.scratch();
        let mut out = Forward {
            n_h: Vec::with_capacity(nt + 1),
            n_c: Vec::with_capacity(nt + 1),
            rho_h: Vec::with_capacity(nt + 1),
            rho_c: Vec::with_capacity(nt + 1),
        };
        for k in 0..=nt {
            out.n_h.push(state.n_h.clone());
            out.n_c.push(state.n_c.clone());
            out.rho_h.push(state.rho_h);
            out.rho_c.push(state.rho_c);
            if k < nt {
                let h = self.times[k + 1] - self.times[k];
                self.stepper.step(&mut state, self.dose(u, k), h, &mut scratch);
            }
        }
        out
    }

    /// `ρ_C(T)`.
    pub fn objective(&self, u: &[f64]) -> f64 {
        *self.forward(u).rho_c.last().unwrap()
    }

    /// Constraint margins `g1 - θ_HC` and `g2 - θ_H` at nodes `1..=nt`.
    pub fn margins(&self, fwd: &Forward) -> (Vec<f64>, Vec<f64>) {
        let c = &self.constraints;
        let g1 = fwd.rho_h[1..]
            .iter()
            .zip(&fwd.rho_c[1..])
            .map(|(&h, &cc)| healthy_fraction(h, cc) - c.theta_hc)
            .collect();
        let g2 = fwd.rho_h[1..].iter().map(|&h| h / self.rho_h0 - c.theta_h).collect();
        (g1, g2)
    }

    pub fn max_violation(&self, fwd: &Forward) -> f64 {
        let (m1, m2) = self.margins(fwd);
        let mut v: f64 = 0.0;
        if self.constraints.healthy_fraction {
            v = m1.iter().fold(v, |a, &m| a.max(-m));
        }
        if self.constraints.healthy_floor {
            v = m2.iter().fold(v, |a, &m| a.max(-m));
        }
        v.max(0.0)
    }

    /// Reverse sweep: gradient of a function of the totals whose partial
    /// derivatives with respect to `ρ_H[k]`, `ρ_C[k]` are `b_h[k]`, `b_c[k]`.
    fn reverse(&self, u: &[f64], fwd: &Forward, b_h: &[f64], b_c: &[f64]) -> Vec<f64> {
        let nt = self.nt();
        let p = &self.params;
        let rates = self.stepper.rates();
        let (th, tc) = (&rates.h, &rates.c);
        let w = self.grid().weights();
        let nx = self.nx();
        let mut grad = vec![0.0; 2 * nt];
        let mut lam_h: Vec<f64> = w.iter().map(|wi| wi * b_h[nt]).collect();
        let mut lam_c: Vec<f64> = w.iter().map(|wi| wi * b_c[nt]).collect();
        let mut r_h = vec![0.0; nx];
        let mut r_c = vec![0.0; nx];
        for k in (0..nt).rev() {
            let h = self.times[k + 1] - self.times[k];
            let dose = self.dose(u, k);
            self.stepper.growth(fwd.rho_h[k], fwd.rho_c[k], dose, &mut r_h, &mut r_c);
            let (next_h, next_c) = (&fwd.n_h[k + 1], &fwd.n_c[k + 1]);
            let (mut sd_h, mut sd_c, mut smu, mut sr_h, mut sr_c) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..nx {
                let s_h = lam_h[i] * next_h[i] * h;
                let s_c = lam_c[i] * next_c[i] * h;
                sd_h += s_h * th.d[i];
                sd_c += s_c * tc.d[i];
                smu += s_h * th.mu[i] + s_c * tc.mu[i];
                sr_h += s_h * th.r[i];
                sr_c += s_c * tc.r[i];
                lam_h[i] *= (r_h[i] * h).exp();
                lam_c[i] *= (r_c[i] * h).exp();
            }
            grad[k] = -smu;
            grad[nt + k] = -sr_h * p.alpha_h / (1.0 + p.alpha_h * dose.u2).powi(2)
                - sr_c * p.alpha_c / (1.0 + p.alpha_c * dose.u2).powi(2);
            let g_rho_h = -p.a_hh * sd_h - p.a_ch * sd_c + b_h[k];
            let g_rho_c = -p.a_hc * sd_h - p.a_cc * sd_c + b_c[k];
            for i in 0..nx {
                lam_h[i] += g_rho_h * w[i];
                lam_c[i] += g_rho_c * w[i];
            }
        }
        grad
    }

    /// `ρ_C(T)` and its exact gradient with respect to the decision vector.
    pub fn objective_gradient(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let fwd = self.forward(u);
        let nt = self.nt();
        let b_h = vec![0.0; nt + 1];
        let mut b_c = vec![0.0; nt + 1];
        b_c[nt] = 1.0;
        let g = self.reverse(u, &fwd, &b_h, &b_c);
        (fwd.rho_c[nt], g)
    }

    /// Augmented Lagrangian with `ln ρ_C(T)` as objective and PHR terms for
    /// the path constraints, optionally with a smoothed total-variation term.
    fn lagrangian(&self, u: &[f64], m: &Multipliers, tv: f64, want_grad: bool) -> (f64, Option<Vec<f64>>, Forward) {
        let fwd = self.forward(u);
        let nt = self.nt();
        let c = &self.constraints;
        let mut val = fwd.rho_c[nt].ln();
        let mut b_h = vec![0.0; nt + 1];
        let mut b_c = vec![0.0; nt + 1];
        b_c[nt] = 1.0 / fwd.rho_c[nt];
        let sigma = m.sigma;
        for k in 1..=nt {
            let (rh, rc) = (fwd.rho_h[k], fwd.rho_c[k]);
            if c.healthy_fraction {
                let s = rh + rc;
                let cv = rh / s - c.theta_hc;
                let l = m.lam1[k - 1];
                let a = (l - sigma * cv).max(0.0);
                val += (a * a - l * l) / (2.0 * sigma);
                b_h[k] += -a * rc / (s * s);
                b_c[k] += a * rh / (s * s);
            }
            if c.healthy_floor {
                let cv = rh / self.rho_h0 - c.theta_h;
                let l = m.lam2[k - 1];
                let a = (l - sigma * cv).max(0.0);
                val += (a * a - l * l) / (2.0 * sigma);
                b_h[k] += -a / self.rho_h0;
            }
        }
        let mut grad = want_grad.then(|| self.reverse(u, &fwd, &b_h, &b_c));
        if tv > 0.0 {
            const EPS: f64 = 1e-6;
            for block in [0, nt] {
                for k in 0..nt.saturating_sub(1) {
                    let d = u[block + k + 1] - u[block + k];
                    let s = (d * d + EPS * EPS).sqrt();
                    val += tv * s;
                    if let Some(g) = grad.as_mut() {
                        g[block + k + 1] += tv * d / s;
                        g[block + k] -= tv * d / s;
                    }
                }
            }
        }
        (val, grad, fwd)
    }
}

#[derive(Debug, Clone)]
struct Multipliers {
    lam1: Vec<f64>,
    lam2: Vec<f64>,
    sigma: f64,
}

const RANDOM_PIECES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Initializer {
    Constant { u1: f64, u2: f64 },
    Mtd,
    Qp1,
    TwoPhase { t2_max: f64 },
    /// Piecewise constant with `pieces` random levels.
    Random { seed: u64, pieces: usize },
    Custom { name: String, u: Vec<f64> },
}

impl Initializer {
    pub fn name(&self) -> String {
        match self {
            Initializer::Constant { u1, u2 } => format!("constant({u1},{u2})"),
            Initializer::Mtd => "mtd".into(),
            Initializer::Qp1 => "qp1".into(),
            Initializer::TwoPhase { t2_max } => format!("two_phase({t2_max})"),
            Initializer::Random { seed, .. } => format!("random({seed})"),
            Initializer::Custom { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_outer: usize,
    /// Outer iterations given to every start before only the best continues.
    pub screen_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Armijo parameter of the nonmonotone line search.
    pub armijo: f64,
    pub nonmonotone_memory: usize,
    pub step_min: f64,
    pub step_max: f64,
    /// Projected-gradient norm at which the inner loop stops.
    pub kkt_tol: f64,
    pub step_tol: f64,
    /// Relative change of `ρ_C(T)` between outer iterations below which a
    /// feasible run stops.
    pub objective_tol: f64,
    pub feasibility_tol: f64,
    pub tv_weight: f64,
    /// Threshold on `|g - θ|` marking a constraint active in the timeline.
    pub activity_tol: f64,
    pub starts: Vec<Initializer>,
    /// Extra piecewise-constant random starts, seeded `seed, seed + 1, …`.
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_outer: 25,
            screen_outer: 3,
            max_inner: 400,
            penalty_init: 100.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            armijo: 1e-4,
            nonmonotone_memory: 10,
            step_min: 1e-12,
            step_max: 1e12,
            kkt_tol: 1e-7,
            step_tol: 1e-12,
            objective_tol: 1e-5,
            feasibility_tol: 1e-4,
            tv_weight: 0.0,
            activity_tol: 2e-3,
            starts: vec![
                Initializer::Constant { u1: 0.0, u2: 0.5 },
                Initializer::Mtd,
                Initializer::Qp1,
                Initializer::TwoPhase { t2_max: 20.0 },
            ],
            random_starts: 0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("penalty_init", self.penalty_init),
            ("penalty_growth", self.penalty_growth),
            ("penalty_max", self.penalty_max),
            ("armijo", self.armijo),
            ("step_min", self.step_min),
            ("step_max", self.step_max),
            ("kkt_tol", self.kkt_tol),
            ("step_tol", self.step_tol),
            ("objective_tol", self.objective_tol),
            ("feasibility_tol", self.feasibility_tol),
            ("activity_tol", self.activity_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.nonmonotone_memory == 0 {
            return Err(Error::InvalidInput("iteration limits must be positive".into()));
        }
        if self.penalty_growth <= 1.0 {
            return Err(Error::InvalidInput("penalty_growth must exceed 1".into()));
        }
        if self.tv_weight < 0.0 {
            return Err(Error::InvalidInput("tv_weight must be nonnegative".into()));
        }
        if self.starts.is_empty() && self.random_starts == 0 {
            return Err(Error::InvalidInput("need at least one start".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityTimeline {
    pub tol: f64,
    pub g1_active: Vec<bool>,
    pub g2_active: Vec<bool>,
    pub g1_intervals: Vec<(f64, f64)>,
    pub g2_intervals: Vec<(f64, f64)>,
}

fn intervals(times: &[f64], flags: &[bool]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<f64> = None;
    for (k, &f) in flags.iter().enumerate() {
        match (f, open) {
            (true, None) => open = Some(times[k]),
            (false, Some(s)) => {
                out.push((s, times[k - 1]));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, *times.last().unwrap()));
    }
    out
}

impl ActivityTimeline {
    pub fn new(times: &[f64], g1: &[f64], g2: &[f64], theta_hc: f64, theta_h: f64, tol: f64) -> Self {
        let g1_active: Vec<bool> = g1.iter().map(|g| (g - theta_hc).abs() <= tol).collect();
        let g2_active: Vec<bool> = g2.iter().map(|g| (g - theta_h).abs() <= tol).collect();
        Self {
            tol,
            g1_intervals: intervals(times, &g1_active),
            g2_intervals: intervals(times, &g2_active),
            g1_active,
            g2_active,
        }
    }

    /// Fraction of `[0, T]` on which the constraint is active.
    pub fn active_fraction(&self, which: u8, times: &[f64]) -> f64 {
        let iv = if which == 1 { &self.g1_intervals } else { &self.g2_intervals };
        let t = *times.last().unwrap() - times[0];
        iv.iter().map(|(a, b)| b - a).sum::<f64>() / t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub name: String,
    pub initial_rho_c: f64,
    pub initial_violation: f64,
    pub rho_c_final: f64,
    pub max_violation: f64,
    pub feasible: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub u: Vec<f64>,
    pub schedule: ControlSchedule,
    pub times: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub rho_c_final: f64,
    pub max_violation: f64,
    pub feasible: bool,
    /// Sup-norm of the projected gradient of the final augmented Lagrangian.
    pub kkt_residual: f64,
    pub start: String,
    pub starts: Vec<StartSummary>,
    pub activity: ActivityTimeline,
}

impl OcpSolution {
    pub fn u1(&self) -> &[f64] {
        &self.u[..self.u.len() / 2]
    }

    pub fn u2(&self) -> &[f64] {
        &self.u[self.u.len() / 2..]
    }

    /// Length of the initial interval on which `u1 ≤ thresh`, as a fraction of `T`.
    pub fn initial_u1_off_fraction(&self, thresh: f64) -> f64 {
        let u1 = self.u1();
        let k = u1.iter().position(|&v| v > thresh).unwrap_or(u1.len());
        (self.times[k] - self.times[0]) / (*self.times.last().unwrap() - self.times[0])
    }
}

/// Initial decision vector for one initializer.
pub fn initial_point(prob: &TranscribedProblem, init: &Initializer) -> Result<Vec<f64>> {
    let nt = prob.nt();
    let p = prob.params();
    let dt = prob.t_end() / nt as f64;
    let (h0, c0) = prob.initial();
    let mut u = match init {
        Initializer::Constant { u1, u2 } => prob.constant(DosePair::new(*u1, *u2)),
        Initializer::Mtd => prob.constant(p.mtd()),
        Initializer::Qp1 => {
            let mut pol = quasi_periodic_policy_1(p);
            let tr = ide_sim::simulate_closed_loop_with(p, &h0, &c0, &mut pol, prob.t_end(), &SimOptions::with_dt(dt).snapshots(1))?;
            prob.pack(&tr.doses[..nt])
        }
        Initializer::TwoPhase { t2_max } => {
            let t2 = t2_max.min(0.5 * prob.t_end());
            let opts = TwoPhaseOptions {
                sim: SimOptions::with_dt(dt).snapshots(1),
                search_step: (0.25f64).max(dt),
            };
            let (_, tr) = two_phase_plan(p, &h0, &c0, DosePair::new(0.0, 0.5), prob.t_end(), t2, &opts)?;
            prob.pack(&tr.doses[..nt])
        }
        Initializer::Random { seed, pieces } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let m = (*pieces).max(1);
            let (b1, b2) = (prob.constraints().u1_bounds, prob.constraints().u2_bounds);
            let levels: Vec<(f64, f64)> = (0..m)
                .map(|_| (rng.gen_range(b1.0..=b1.1), rng.gen_range(b2.0..=b2.1)))
                .collect();
            let doses: Vec<DosePair> = (0..nt)
                .map(|k| {
                    let (a, b) = levels[k * m / nt];
                    DosePair::new(a, b)
                })
                .collect();
            prob.pack(&doses)
        }
        Initializer::Custom { u, .. } => {
            if u.len() != 2 * nt {
                return Err(Error::InvalidInput(format!(
                    "custom start has {} entries, expected {}",
                    u.len(),
                    2 * nt
                )));
            }
            u.clone()
        }
    };
    prob.project(&mut u);
    Ok(u)
}

fn projected_gradient_norm(prob: &TranscribedProblem, u: &[f64], g: &[f64]) -> f64 {
    let mut t: Vec<f64> = u.iter().zip(g).map(|(a, b)| a - b).collect();
    prob.project(&mut t);
    t.iter().zip(u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

struct InnerResult {
    u: Vec<f64>,
    iterations: usize,
    pg_norm: f64,
}

/// Spectral projected gradient with nonmonotone line search.
fn spg(prob: &TranscribedProblem, mut u: Vec<f64>, m: &Multipliers, cfg: &OptimizerConfig, tol: f64) -> InnerResult {
    let eval = |x: &[f64]| prob.lagrangian(x, m, cfg.tv_weight, true);
    let (mut f, g0, _) = eval(&u);
    let mut g = g0.unwrap();
    let mut hist = vec![f];
    let mut pg = projected_gradient_norm(prob, &u, &g);
    let mut lambda = if pg > 0.0 { (1.0 / pg).clamp(cfg.step_min, cfg.step_max) } else { 1.0 };
    let mut iterations = 0;
    while iterations < cfg.max_inner && pg > tol {
        iterations += 1;
        let mut trial: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - lambda * b).collect();
        prob.project(&mut trial);
        let d: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
        let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if gd >= 0.0 {
            break;
        }
        let fmax = hist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let x: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let (fx, gx, _) = eval(&x);
            if fx.is_finite() && fx <= fmax + cfg.armijo * alpha * gd {
                accepted = Some((x, fx, gx.unwrap()));
                break;
            }
            // safeguarded quadratic interpolation
            let q = -0.5 * gd * alpha * alpha / (fx - f - alpha * gd);
            alpha = if q.is_finite() && q >= 0.1 * alpha && q <= 0.9 * alpha { q } else { 0.5 * alpha };
        }
        let Some((x, fx, gx)) = accepted else {
            break;
        };
        let s: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gx.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let step = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        u = x;
        f = fx;
        g = gx;
        hist.push(f);
        if hist.len() > cfg.nonmonotone_memory {
            hist.remove(0);
        }
        lambda = if sy <= 0.0 { cfg.step_max } else { (ss / sy).clamp(cfg.step_min, cfg.step_max) };
        pg = projected_gradient_norm(prob, &u, &g);
        if step < cfg.step_tol {
            break;
        }
    }
    InnerResult {
        u,
        iterations,
        pg_norm: pg,
    }
}

struct StartOutcome {
    summary: StartSummary,
    u: Vec<f64>,
    kkt: f64,
}

fn solve_from(prob: &TranscribedProblem, u0: Vec<f64>, name: String, cfg: &OptimizerConfig) -> StartOutcome {
    let nt = prob.nt();
    let fwd0 = prob.forward(&u0);
    let initial_violation = prob.max_violation(&fwd0);
    let initial_rho_c = fwd0.rho_c[nt];
    let mut m = Multipliers {
        lam1: vec![0.0; nt],
        lam2: vec![0.0; nt],
        sigma: cfg.penalty_init,
    };
    let mut u = u0;
    let mut best_feasible: Option<(Vec<f64>, f64, f64)> = (initial_violation <= cfg.feasibility_tol).then(|| (u.clone(), initial_rho_c, 0.0));
    let mut least_infeasible = (u.clone(), initial_violation, initial_rho_c);
    let mut prev_violation = initial_violation;
    let mut prev_obj = f64::INFINITY;
    let mut inner_total = 0;
    let mut outer = 0;
    let mut kkt = f64::INFINITY;
    while outer < cfg.max_outer {
        outer += 1;
        let tol = (0.1f64.powi(outer as i32)).max(cfg.kkt_tol);
        let res = spg(prob, u, &m, cfg, tol);
        inner_total += res.iterations;
        u = res.u;
        kkt = res.pg_norm;
        let res_pg = res.pg_norm;
        let fwd = prob.forward(&u);
        let v = prob.max_violation(&fwd);
        let obj = fwd.rho_c[nt];
        if v <= cfg.feasibility_tol {
            if best_feasible.as_ref().is_none_or(|b| obj < b.1) {
                best_feasible = Some((u.clone(), obj, kkt));
            }
        } else if v < least_infeasible.1 {
            least_infeasible = (u.clone(), v, obj);
        }
        let (m1, m2) = prob.margins(&fwd);
        let c = prob.constraints();
        for k in 0..nt {
            if c.healthy_fraction {
                m.lam1[k] = (m.lam1[k] - m.sigma * m1[k]).max(0.0);
            }
            if c.healthy_floor {
                m.lam2[k] = (m.lam2[k] - m.sigma * m2[k]).max(0.0);
            }
        }
        // only meaningful once the inner solve is limited by its budget rather
        // than by the current (loose) tolerance
        let limited = res_pg > tol || tol <= cfg.kkt_tol;
        let stalled = limited && (prev_obj - obj).abs() <= cfg.objective_tol * obj.abs();
        if v <= cfg.feasibility_tol && (kkt <= cfg.kkt_tol || stalled) {
            break;
        }
        prev_obj = obj;
        if v > cfg.feasibility_tol && v > 0.25 * prev_violation {
            m.sigma = (m.sigma * cfg.penalty_growth).min(cfg.penalty_max);
        }
        prev_violation = v;
    }
    let (u, rho_c_final, max_violation, feasible) = match best_feasible {
        Some((u, obj, k)) => {
            kkt = k.min(kkt);
            let v = prob.max_violation(&prob.forward(&u));
            (u, obj, v, true)
        }
        None => (least_infeasible.0, least_infeasible.2, least_infeasible.1, false),
    };
    StartOutcome {
        summary: StartSummary {
            name,
            initial_rho_c,
            initial_violation,
            rho_c_final,
            max_violation,
            feasible,
            outer_iterations: outer,
            inner_iterations: inner_total,
        },
        u,
        kkt,
    }
}

fn best_outcome(outcomes: &[StartOutcome]) -> usize {
    let key = |o: &StartOutcome| {
        let s = &o.summary;
        (!s.feasible, if s.feasible { s.rho_c_final } else { s.max_violation })
    };
    (0..outcomes.len())
        .min_by(|&a, &b| {
            let (ka, kb) = (key(&outcomes[a]), key(&outcomes[b]));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .unwrap()
}

/// Runs every start (in parallel) for `screen_outer` outer iterations, then
/// continues the most promising one with the full budget. Returns the best
/// feasible point, or the least infeasible one with `feasible = false`.
pub fn solve_ocp_raw(prob: &TranscribedProblem, cfg: &OptimizerConfig) -> Result<OcpSolution> {
    cfg.validate()?;
    let random = (0..cfg.random_starts as u64).map(|i| Initializer::Random {
        seed: cfg.seed.wrapping_add(i),
        pieces: RANDOM_PIECES,
    });
    let inits: Vec<(String, Vec<f64>)> = cfg
        .starts
        .iter()
        .cloned()
        .chain(random)
        .map(|s| initial_point(prob, &s).map(|u| (s.name(), u)))
        .collect::<Result<_>>()?;
    let screening = inits.len() > 1 && cfg.screen_outer < cfg.max_outer;
    let first = if screening {
        OptimizerConfig {
            max_outer: cfg.screen_outer,
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    let mut outcomes: Vec<StartOutcome> = inits
        .into_par_iter()
        .map(|(name, u0)| solve_from(prob, u0, name, &first))
        .collect();
    let best = best_outcome(&outcomes);
    if screening {
        let o = &outcomes[best];
        let refined = solve_from(prob, o.u.clone(), o.summary.name.clone(), cfg);
        // refinement starts from the screened point, so it never ends worse
        let s = &mut outcomes[best];
        s.summary.rho_c_final = refined.summary.rho_c_final;
        s.summary.max_violation = refined.summary.max_violation;
        s.summary.feasible = refined.summary.feasible;
        s.summary.outer_iterations += refined.summary.outer_iterations;
        s.summary.inner_iterations += refined.summary.inner_iterations;
        s.u = refined.u;
        s.kkt = refined.kkt;
    }
    let chosen = &outcomes[best];
    let fwd = prob.forward(&chosen.u);
    let g1: Vec<f64> = fwd.rho_h.iter().zip(&fwd.rho_c).map(|(&h, &c)| healthy_fraction(h, c)).collect();
    let g2: Vec<f64> = fwd.rho_h.iter().map(|&h| h / prob.rho_h0()).collect();
    let c = prob.constraints();
    let activity = ActivityTimeline::new(prob.times(), &g1, &g2, c.theta_hc, c.theta_h, cfg.activity_tol);
    Ok(OcpSolution {
        schedule: prob.schedule(&chosen.u),
        u: chosen.u.clone(),
        times: prob.times().to_vec(),
        rho_c_final: *fwd.rho_c.last().unwrap(),
        rho_h: fwd.rho_h,
        rho_c: fwd.rho_c,
        g1,
        g2,
        max_violation: chosen.summary.max_violation,
        feasible: chosen.summary.feasible,
        kkt_residual: chosen.kkt,
        start: chosen.summary.name.clone(),
        starts: outcomes.iter().map(|o| o.summary.clone()).collect(),
        activity,
    })
}

/// As [`solve_ocp_raw`], failing when no start reaches feasibility.
pub fn solve_ocp(prob: &TranscribedProblem, cfg: &OptimizerConfig) -> Result<OcpSolution> {
    let sol = solve_ocp_raw(prob, cfg)?;
    if sol.feasible {
        Ok(sol)
    } else {
        Err(Error::Infeasible(format!(
            "no start reached feasibility; least infeasible iterate from {} violates by {:.3e} with rho_C(T) = {:.6e}",
            sol.start, sol.max_violation, sol.rho_c_final
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub t_end: f64,
    pub nt: usize,
    pub rho_c_final: f64,
    pub feasible: bool,
    pub start: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityScan {
    pub rows: Vec<ScanRow>,
    /// Consecutive pairs `(T_i, T_{i+1})` with `ρ_C(T_{i+1}) > ρ_C(T_i)(1 + noise)`.
    pub violations: Vec<(f64, f64)>,
    pub noise: f64,
}

impl MonotonicityScan {
    pub fn monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Warm start for a longer horizon: the previous solution shifted to the end,
/// preceded by its first dose.
pub fn stretch_solution(prev: &OcpSolution, prob: &TranscribedProblem) -> Vec<f64> {
    let shift = prob.t_end() - prev.times.last().unwrap();
    let doses: Vec<DosePair> = prob.times()[..prob.nt()]
        .iter()
        .map(|&t| prev.schedule.dose_at((t - shift).max(0.0)))
        .collect();
    let mut u = prob.pack(&doses);
    prob.project(&mut u);
    u
}

/// Solves on every horizon with `steps_per_unit` steps per time unit,
/// warm-starting each solve from the previous one.
pub fn monotonicity_scan(
    params: &ModelParams,
    n_h0: &Density,
    n_c0: &Density,
    t_list: &[f64],
    steps_per_unit: f64,
    cfg: &OptimizerConfig,
    noise: f64,
) -> Result<MonotonicityScan> {
    if t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("horizons must be increasing".into()));
    }
    let mut rows = Vec::new();
    let mut prev: Option<OcpSolution> = None;
    for &t in t_list {
        let nt = (t * steps_per_unit).round().max(1.0) as usize;
        let prob = transcribe(params, n_h0, n_c0, t, nt, PathConstraints::from_params(params))?;
        let mut c = cfg.clone();
        if let Some(p) = &prev {
            c.starts.push(Initializer::Custom {
                name: "warm".into(),
                u: stretch_solution(p, &prob),
            });
        }
        let sol = solve_ocp_raw(&prob, &c)?;
        rows.push(ScanRow {
            t_end: t,
            nt,
            rho_c_final: sol.rho_c_final,
            feasible: sol.feasible,
            start: sol.start.clone(),
        });
        prev = Some(sol);
    }
    let violations = rows
        .windows(2)
        .filter(|w| w[1].rho_c_final > w[0].rho_c_final * (1.0 + noise))
        .map(|w| (w[0].t_end, w[1].t_end))
        .collect();
    Ok(MonotonicityScan { rows, violations, noise })
}
