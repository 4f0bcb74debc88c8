//! Long-time limits under constant doses `ū`: limit intensities, equilibrium
//! totals and concentration sets, the Lyapunov functional along a trajectory,
//! and convergence-speed diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{concentration_metrics, PhenotypeGrid};
use crate::ide_sim::Trajectory;
use crate::model::{DosePair, ModelParams, Population};
use crate::numerics::{argmax_set, linear_fit};

const SCAN_POINTS: usize = 2001;
const ARGMAX_TOL: f64 = 1e-8;
const TIE_TOL: f64 = 1e-8;

/// `I∞` and the phenotypes where the fitness bound is attained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitIntensity {
    pub population: Population,
    pub i_inf: f64,
    /// Largest value of `(r/(1+α ū2) - ū1 μ)/d`; may be negative.
    pub max_ratio: f64,
    pub argmax: Vec<f64>,
    /// No positive fitness anywhere: the population dies out.
    pub extinct: bool,
}

impl LimitIntensity {
    pub fn singleton(&self) -> bool {
        self.argmax.len() == 1
    }

    pub fn x_inf(&self) -> f64 {
        self.argmax[0]
    }
}

fn fitness_ratio(params: &ModelParams, pop: Population, u: DosePair) -> impl Fn(f64) -> f64 + '_ {
    let rates = params.rates(pop);
    move |x| rates.fitness(x, u) / rates.d.eval(x)
}

fn check_dose(params: &ModelParams, u: DosePair) -> Result<()> {
    if u.within(params) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "dose ({}, {}) outside the admissible box",
            u.u1, u.u2
        )))
    }
}

/// `I∞ = max(0, max_x (r/(1+α ū2) - ū1 μ)/d)` with golden-section refinement
/// of every grid maximizer.
pub fn limit_intensity(params: &ModelParams, u_bar: DosePair, pop: Population) -> Result<LimitIntensity> {
    check_dose(params, u_bar)?;
    let f = fitness_ratio(params, pop, u_bar);
    let (argmax, top) = argmax_set(&f, 0.0, 1.0, SCAN_POINTS, 1e-6 * (1.0 + f(0.0).abs()), TIE_TOL, ARGMAX_TOL);
    Ok(LimitIntensity {
        population: pop,
        i_inf: top.max(0.0),
        max_ratio: top,
        argmax,
        extinct: top <= 0.0,
    })
}

/// The same quantity restricted to the nodes of a simulation grid. This is
/// the exact limit of the semi-discrete dynamics.
pub fn limit_intensity_on_grid(
    params: &ModelParams,
    u_bar: DosePair,
    pop: Population,
    grid: &PhenotypeGrid,
) -> Result<LimitIntensity> {
    check_dose(params, u_bar)?;
    let f = fitness_ratio(params, pop, u_bar);
    let vals: Vec<f64> = grid.nodes().iter().map(|&x| f(x)).collect();
    let top = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax = grid
        .nodes()
        .iter()
        .zip(&vals)
        .filter(|(_, &v)| v >= top - TIE_TOL)
        .map(|(&x, _)| x)
        .collect();
    Ok(LimitIntensity {
        population: pop,
        i_inf: top.max(0.0),
        max_ratio: top,
        argmax,
        extinct: top <= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Coexistence,
    /// The coexistence solution has ρ_C < 0; cancer is excluded.
    HealthyOnly,
    /// The coexistence solution has ρ_H < 0; healthy cells are excluded.
    CancerOnly,
    Extinction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub u_bar: DosePair,
    pub i_h_inf: f64,
    pub i_c_inf: f64,
    pub rho_h_inf: f64,
    pub rho_c_inf: f64,
    pub a_h: Vec<f64>,
    pub a_c: Vec<f64>,
    pub x_h_inf: f64,
    pub x_c_inf: f64,
    pub singleton_h: bool,
    pub singleton_c: bool,
    pub regime: Regime,
}

impl EquilibriumReport {
    pub fn rho_inf(&self, pop: Population) -> f64 {
        match pop {
            Population::Healthy => self.rho_h_inf,
            Population::Cancer => self.rho_c_inf,
        }
    }

    pub fn x_inf(&self, pop: Population) -> f64 {
        match pop {
            Population::Healthy => self.x_h_inf,
            Population::Cancer => self.x_c_inf,
        }
    }
}

/// Solves `[[a, b], [c, d]] (x, y) = (e, f)` by elimination.
pub fn solve2(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Result<(f64, f64)> {
    let det = a * d - b * c;
    if det.abs() < 1e-300 {
        return Err(Error::Singular("2x2 system".into()));
    }
    Ok(((e * d - b * f) / det, (a * f - e * c) / det))
}

fn assemble(params: &ModelParams, u_bar: DosePair, lh: LimitIntensity, lc: LimitIntensity) -> EquilibriumReport {
    let (mut rh, mut rc) = solve2(params.a_hh, params.a_hc, params.a_ch, params.a_cc, lh.i_inf, lc.i_inf)
        .expect("competition matrix is invertible under the validated ordering");
    let regime = if rh >= 0.0 && rc >= 0.0 {
        if rh == 0.0 && rc == 0.0 {
            Regime::Extinction
        } else {
            Regime::Coexistence
        }
    } else if rh < 0.0 {
        rh = 0.0;
        rc = lc.i_inf / params.a_cc;
        if rc > 0.0 {
            Regime::CancerOnly
        } else {
            Regime::Extinction
        }
    } else {
        rc = 0.0;
        rh = lh.i_inf / params.a_hh;
        if rh > 0.0 {
            Regime::HealthyOnly
        } else {
            Regime::Extinction
        }
    };
    EquilibriumReport {
        u_bar,
        i_h_inf: lh.i_inf,
        i_c_inf: lc.i_inf,
        rho_h_inf: rh,
        rho_c_inf: rc,
        x_h_inf: lh.argmax[0],
        x_c_inf: lc.argmax[0],
        singleton_h: lh.singleton(),
        singleton_c: lc.singleton(),
        a_h: lh.argmax,
        a_c: lc.argmax,
        regime,
    }
}

/// Limit totals from `a_HH ρ_H + a_HC ρ_C = I_H∞`, `a_CH ρ_H + a_CC ρ_C = I_C∞`,
/// falling back to a one-population boundary solution when a component is
/// negative.
pub fn equilibrium(params: &ModelParams, u_bar: DosePair) -> Result<EquilibriumReport> {
    let lh = limit_intensity(params, u_bar, Population::Healthy)?;
    let lc = limit_intensity(params, u_bar, Population::Cancer)?;
    Ok(assemble(params, u_bar, lh, lc))
}

/// Equilibrium of the semi-discrete system on `grid`.
pub fn equilibrium_on_grid(params: &ModelParams, u_bar: DosePair, grid: &PhenotypeGrid) -> Result<EquilibriumReport> {
    let lh = limit_intensity_on_grid(params, u_bar, Population::Healthy, grid)?;
    let lc = limit_intensity_on_grid(params, u_bar, Population::Cancer, grid)?;
    Ok(assemble(params, u_bar, lh, lc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinglePopulationLimit {
    pub population: Population,
    pub rho_inf: f64,
    pub b_set: Vec<f64>,
    /// Minimum over `[0,1]` of `r/(1+α ū2) - ū1 μ`.
    pub min_fitness: f64,
    /// Whether the drug-adjusted fitness is positive everywhere.
    pub viable: bool,
}

/// Limit of one population evolving alone.
pub fn lemma1_limit(params: &ModelParams, u_bar: DosePair, pop: Population) -> Result<SinglePopulationLimit> {
    let li = limit_intensity(params, u_bar, pop)?;
    let rates = params.rates(pop);
    let min_fitness = (0..SCAN_POINTS)
        .map(|i| rates.fitness(i as f64 / (SCAN_POINTS - 1) as f64, u_bar))
        .fold(f64::INFINITY, f64::min);
    Ok(SinglePopulationLimit {
        population: pop,
        rho_inf: li.i_inf / rates.a_self,
        b_set: li.argmax,
        min_fitness,
        viable: min_fitness > 0.0,
    })
}

/// Row of a dose-box scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub u1: f64,
    pub u2: f64,
    pub x_h_inf: f64,
    pub x_c_inf: f64,
    pub rho_h_inf: f64,
    pub rho_c_inf: f64,
    pub regime: Regime,
}

/// Equilibria over an `n1 x n2` lattice of the dose box.
pub fn dose_scan(params: &ModelParams, n1: usize, n2: usize) -> Result<Vec<ScanRow>> {
    let pts: Vec<(f64, f64)> = (0..n1)
        .flat_map(|i| {
            (0..n2).map(move |j| {
                (
                    lattice(i, n1, params.u1_max),
                    lattice(j, n2, params.u2_max),
                )
            })
        })
        .collect();
    pts.par_iter()
        .map(|&(u1, u2)| {
            let r = equilibrium(params, DosePair::new(u1, u2))?;
            Ok(ScanRow {
                u1,
                u2,
                x_h_inf: r.x_h_inf,
                x_c_inf: r.x_c_inf,
                rho_h_inf: r.rho_h_inf,
                rho_c_inf: r.rho_c_inf,
                regime: r.regime,
            })
        })
        .collect()
}

fn lattice(i: usize, n: usize, max: f64) -> f64 {
    if n <= 1 {
        0.0
    } else if i + 1 == n {
        max
    } else {
        max * i as f64 / (n - 1) as f64
    }
}

/// Weights `λ_H = 1/a_HC`, `λ_C = 1/a_CH` making the quadratic form
/// nonnegative.
pub fn lyapunov_weights(params: &ModelParams) -> (f64, f64) {
    (1.0 / params.a_hc, 1.0 / params.a_ch)
}

/// `M = [[2 λ_H a_HH, λ_H a_HC + λ_C a_CH], [·, 2 λ_C a_CC]]`.
pub fn lyapunov_matrix(params: &ModelParams) -> [[f64; 2]; 2] {
    let (lh, lc) = lyapunov_weights(params);
    let off = lh * params.a_hc + lc * params.a_ch;
    [[2.0 * lh * params.a_hh, off], [off, 2.0 * lc * params.a_cc]]
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// `-½ Xᵀ M X` with `X = (ρ_H∞ - ρ_H, ρ_C∞ - ρ_C)`.
pub fn quadratic_term(params: &ModelParams, report: &EquilibriumReport, rho_h: f64, rho_c: f64) -> f64 {
    let m = lyapunov_matrix(params);
    let x = [report.rho_h_inf - rho_h, report.rho_c_inf - rho_c];
    -0.5 * (m[0][0] * x[0] * x[0] + 2.0 * m[0][1] * x[0] * x[1] + m[1][1] * x[1] * x[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSeries {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub v_h: Vec<f64>,
    pub v_c: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_c: Vec<f64>,
    /// `∫ m_i R_i(x, ρ∞, ū) n_i dx`, the nonpositive part of `B_i`.
    pub b_tilde_h: Vec<f64>,
    pub b_tilde_c: Vec<f64>,
    /// Snapshot times where a density vanished at its atom node, so the log
    /// term is undefined (entries are NaN there).
    pub undefined_at: Vec<f64>,
}

/// Evaluates the Lyapunov functional and its pieces on every snapshot, with
/// `n_i∞ = ρ_i∞ δ` at the grid node nearest the refined argmax.
pub fn lyapunov_series(
    params: &ModelParams,
    traj: &Trajectory,
    u_bar: DosePair,
    report: &EquilibriumReport,
) -> LyapunovSeries {
    let (lam_h, lam_c) = lyapunov_weights(params);
    let mut out = LyapunovSeries {
        t: Vec::new(),
        v: Vec::new(),
        v_h: Vec::new(),
        v_c: Vec::new(),
        quadratic: Vec::new(),
        b_h: Vec::new(),
        b_c: Vec::new(),
        b_tilde_h: Vec::new(),
        b_tilde_c: Vec::new(),
        undefined_at: Vec::new(),
    };
    for snap in &traj.snapshots {
        let grid = snap.n_h.grid().clone();
        let k = traj.index_at(snap.t);
        let dose = traj.doses[k];
        let rho_h = traj.rho_h[k];
        let rho_c = traj.rho_c[k];
        let mut undefined = false;
        let mut piece = |pop: Population, values: &[f64]| -> (f64, f64, f64) {
            let rates = params.rates(pop);
            let rho_inf = report.rho_inf(pop);
            let node = grid.nearest(report.x_inf(pop));
            let w = grid.weights();
            let xs = grid.nodes();
            let (rs, ro) = match pop {
                Population::Healthy => (report.rho_h_inf, report.rho_c_inf),
                Population::Cancer => (report.rho_c_inf, report.rho_h_inf),
            };
            let m = |x: f64| 1.0 / rates.d.eval(x);
            let mut v = 0.0;
            let mut b = 0.0;
            let mut bt = 0.0;
            for i in 0..xs.len() {
                let mv = w[i] * m(xs[i]) * values[i];
                v += mv;
                b += mv * rates.growth(xs[i], rs, ro, dose);
                bt += mv * rates.growth(xs[i], rs, ro, u_bar);
            }
            let mk = m(xs[node]);
            let nk = values[node];
            if rho_inf > 0.0 {
                if nk > 0.0 {
                    v += mk * rho_inf * (1.0 / nk).ln();
                } else {
                    undefined = true;
                    v = f64::NAN;
                }
            }
            v -= mk * rho_inf;
            b -= mk * rates.growth(xs[node], rs, ro, dose) * rho_inf;
            (v, b, bt)
        };
        let (vh, bh, bth) = piece(Population::Healthy, snap.n_h.values());
        let (vc, bc, btc) = piece(Population::Cancer, snap.n_c.values());
        if undefined {
            out.undefined_at.push(snap.t);
        }
        out.t.push(snap.t);
        out.v_h.push(vh);
        out.v_c.push(vc);
        out.v.push(lam_h * vh + lam_c * vc);
        out.quadratic.push(quadratic_term(params, report, rho_h, rho_c));
        out.b_h.push(bh);
        out.b_c.push(bc);
        out.b_tilde_h.push(bth);
        out.b_tilde_c.push(btc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// Fitted exponent `p` in `residual ≈ C s(t)^p`.
    pub exponent: f64,
    pub log_constant: f64,
    /// Number of samples used.
    pub samples: usize,
    /// The residual reached the floor before the end of the window.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedDiagnostics {
    pub t: Vec<f64>,
    /// `-∫ m_H R_H(x, ρ∞, ū) n_H dx` (nonnegative by definition of `I∞`).
    pub residual_h: Vec<f64>,
    pub residual_c: Vec<f64>,
    pub mass_outside_h: Vec<f64>,
    pub mass_outside_c: Vec<f64>,
    pub total_gap_h: Vec<f64>,
    pub total_gap_c: Vec<f64>,
    /// Fits of the running envelopes against `ln t / t`.
    pub concentration_h: Option<ExponentFit>,
    pub concentration_c: Option<ExponentFit>,
    /// Fits of `|ρ_i - ρ_i∞|` envelopes against `(ln t / t)^{1/2}`.
    pub totals_h: Option<ExponentFit>,
    pub totals_c: Option<ExponentFit>,
}

pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Envelope of a series from the right: `env[k] = max_{j ≥ k} y[j]`.
pub fn suffix_max(y: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    for k in (0..out.len().saturating_sub(1)).rev() {
        out[k] = out[k].max(out[k + 1]);
    }
    out
}

/// Fits `ln env = c + p ln s(t)` on `t ∈ [t_min, t_max]`, stopping at the
/// first sample below the floor.
pub fn fit_exponent(t: &[f64], y: &[f64], t_min: f64, t_max: f64, scale: impl Fn(f64) -> f64) -> Option<ExponentFit> {
    let env = suffix_max(y);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut truncated = false;
    for (k, &tk) in t.iter().enumerate() {
        if tk < t_min || tk > t_max {
            continue;
        }
        if !(env[k] > RESIDUAL_FLOOR) {
            truncated = true;
            break;
        }
        xs.push(scale(tk).ln());
        ys.push(env[k].ln());
    }
    let (c, p) = linear_fit(&xs, &ys)?;
    Some(ExponentFit {
        exponent: p,
        log_constant: c,
        samples: xs.len(),
        truncated,
    })
}

/// Residual series on the snapshots and envelope fits over `[t_min, t_max]`.
pub fn speed_diagnostics(
    params: &ModelParams,
    traj: &Trajectory,
    report: &EquilibriumReport,
    eps_ball: f64,
    t_min: f64,
    t_max: f64,
) -> Result<SpeedDiagnostics> {
    let u_bar = report.u_bar;
    let mut d = SpeedDiagnostics {
        t: Vec::new(),
        residual_h: Vec::new(),
        residual_c: Vec::new(),
        mass_outside_h: Vec::new(),
        mass_outside_c: Vec::new(),
        total_gap_h: Vec::new(),
        total_gap_c: Vec::new(),
        concentration_h: None,
        concentration_c: None,
        totals_h: None,
        totals_c: None,
    };
    for snap in &traj.snapshots {
        let grid = snap.n_h.grid();
        let resid = |pop: Population, values: &[f64]| {
            let rates = params.rates(pop);
            let (rs, ro) = match pop {
                Population::Healthy => (report.rho_h_inf, report.rho_c_inf),
                Population::Cancer => (report.rho_c_inf, report.rho_h_inf),
            };
            -grid
                .nodes()
                .iter()
                .zip(grid.weights())
                .zip(values)
                .map(|((&x, w), v)| w * rates.growth(x, rs, ro, u_bar) / rates.d.eval(x) * v)
                .sum::<f64>()
        };
        d.t.push(snap.t);
        d.residual_h.push(resid(Population::Healthy, snap.n_h.values()));
        d.residual_c.push(resid(Population::Cancer, snap.n_c.values()));
        d.mass_outside_h
            .push(concentration_metrics(&snap.n_h, report.x_h_inf, eps_ball)?.mass_outside);
        d.mass_outside_c
            .push(concentration_metrics(&snap.n_c, report.x_c_inf, eps_ball)?.mass_outside);
        d.total_gap_h.push((snap.n_h.total_mass() - report.rho_h_inf).abs());
        d.total_gap_c.push((snap.n_c.total_mass() - report.rho_c_inf).abs());
    }
    let s = |t: f64| t.ln() / t;
    let s_half = |t: f64| (t.ln() / t).sqrt();
    let t_min = t_min.max(1.0 + 1e-9);
    d.concentration_h = fit_exponent(&d.t, &d.residual_h, t_min, t_max, s);
    d.concentration_c = fit_exponent(&d.t, &d.residual_c, t_min, t_max, s);
    d.totals_h = fit_exponent(&d.t, &d.total_gap_h, t_min, t_max, s_half);
    d.totals_c = fit_exponent(&d.t, &d.total_gap_c, t_min, t_max, s_half);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::dirac;
    use crate::ide_sim::{simulate_with, ControlSchedule, SimOptions};
    use crate::model::{reference_params, Preset, RateFn};

    fn params() -> ModelParams {
        reference_params(Preset::Modified)
    }

    /// Independent fine-grid maximization of the fitness ratio.
    fn brute_max(f: impl Fn(f64) -> f64) -> (f64, f64) {
        let n = 1_000_000;
        (0..=n)
            .map(|i| {
                let x = i as f64 / n as f64;
                (x, f(x))
            })
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }

    #[test]
    fn untreated_limit_intensities_match_brute_force() {
        let p = params();
        let (xh, ih) = brute_max(|x| (1.5 / (1.0 + x * x)) / (0.5 * (1.0 - 0.1 * x)));
        let (xc, ic) = brute_max(|x| (3.0 / (1.0 + x * x)) / (0.5 * (1.0 - 0.3 * x)));
        let lh = limit_intensity(&p, DosePair::ZERO, Population::Healthy).unwrap();
        let lc = limit_intensity(&p, DosePair::ZERO, Population::Cancer).unwrap();
        assert!((lh.i_inf - ih).abs() < 1e-10, "{} vs {ih}", lh.i_inf);
        assert!((lc.i_inf - ic).abs() < 1e-10, "{} vs {ic}", lc.i_inf);
        assert!((lh.x_inf() - xh).abs() < 1e-5);
        assert!((lc.x_inf() - xc).abs() < 1e-5);
        // frozen values from the brute-force oracle
        assert!((lh.i_inf - 3.007_556_9).abs() < 1e-6);
        assert!((lc.i_inf - 6.145_220_8).abs() < 1e-6);
        assert!((lh.x_inf() - 0.050_38).abs() < 1e-4);
        assert!((lc.x_inf() - 0.161_78).abs() < 1e-4);
        assert!(lh.singleton() && lc.singleton());
    }

    #[test]
    fn untreated_equilibrium_matches_elimination() {
        let p = params();
        let r = equilibrium(&p, DosePair::ZERO).unwrap();
        // independent elimination of ρ_H + 0.07 ρ_C = I_H, 0.01 ρ_H + ρ_C = I_C
        let (ih, ic) = (r.i_h_inf, r.i_c_inf);
        let rc = (ic - 0.01 * ih) / (1.0 - 0.07 * 0.01);
        let rh = ih - 0.07 * rc;
        assert!((r.rho_h_inf - rh).abs() < 1e-12);
        assert!((r.rho_c_inf - rc).abs() < 1e-12);
        assert!((r.rho_h_inf - 2.579_2).abs() < 1e-3);
        assert!((r.rho_c_inf - 6.119_4).abs() < 1e-3);
        assert_eq!(r.regime, Regime::Coexistence);
        // healthy-alone equilibrium sits above the initial healthy total
        assert!(r.i_h_inf / p.a_hh > 2.7);
    }

    #[test]
    fn overwhelming_cytotoxic_dose_gives_extinction() {
        let mut p = params();
        p.u1_max = 1e3;
        let l = limit_intensity(&p, DosePair::new(1e3, 0.0), Population::Healthy).unwrap();
        assert_eq!(l.i_inf, 0.0);
        assert!(l.extinct);
    }

    #[test]
    fn symmetric_populations_share_totals() {
        let mut p = params();
        p.r_c = p.r_h.clone();
        p.d_c = p.d_h.clone();
        p.mu_c = p.mu_h.clone();
        p.alpha_c = p.alpha_h;
        p.a_ch = p.a_hc;
        let r = equilibrium(&p, DosePair::new(1.0, 1.0)).unwrap();
        assert!((r.rho_h_inf - r.rho_c_inf).abs() < 1e-12);
    }

    #[test]
    fn cancer_alone_limit() {
        let p = params();
        let l = lemma1_limit(&p, DosePair::ZERO, Population::Cancer).unwrap();
        assert!((l.rho_inf - 6.145_220_8).abs() < 1e-6);
        assert_eq!(l.b_set.len(), 1);
        assert!((l.b_set[0] - 0.161_78).abs() < 1e-4);
        assert!(l.viable);
    }

    #[test]
    fn strong_treatment_selects_resistant_cancer_cells() {
        let p = params();
        let u = DosePair::new(3.5, 2.0);
        let l = lemma1_limit(&p, u, Population::Cancer).unwrap();
        let (xb, _) = brute_max(|x| {
            let mu = (0.9 / (0.49 + 0.6 * x * x) - 1.0).max(0.0);
            (3.0 / (1.0 + x * x) / 3.0 - 3.5 * mu) / (0.5 * (1.0 - 0.3 * x))
        });
        assert!((l.b_set[0] - xb).abs() < 1e-5);
        let x0 = (0.41f64 / 0.6).sqrt();
        assert!(l.b_set[0] >= x0 - 1e-6, "{}", l.b_set[0]);
        assert!(l.b_set[0] < 1.0);
    }

    #[test]
    fn intensity_decreases_with_cytostatic_dose() {
        let p = params();
        let mut prev = f64::INFINITY;
        for j in 0..=14 {
            let u = DosePair::new(0.5, 0.5 * j as f64);
            let i = limit_intensity(&p, u, Population::Cancer).unwrap().i_inf;
            assert!(i < prev);
            prev = i;
        }
    }

    #[test]
    fn fitness_residual_on_dose_lattice() {
        let p = params();
        let g = PhenotypeGrid::uniform(201).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let u = DosePair::new(3.5 * i as f64 / 4.0, 7.0 * j as f64 / 4.0);
                for pop in [Population::Healthy, Population::Cancer] {
                    let l = limit_intensity(&p, u, pop).unwrap();
                    let rates = p.rates(pop);
                    let resid = |x: f64| rates.fitness(x, u) - rates.d.eval(x) * l.i_inf;
                    for &x in g.nodes() {
                        assert!(resid(x) <= 1e-10);
                    }
                    if !l.extinct {
                        for &x in &l.argmax {
                            assert!(resid(x) >= -1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concentration_sets_ignore_cytostatic_dose_without_cytotoxic() {
        let p = params();
        let base = equilibrium(&p, DosePair::ZERO).unwrap();
        for j in 1..=10 {
            let r = equilibrium(&p, DosePair::new(0.0, 0.7 * j as f64)).unwrap();
            assert_eq!(r.a_h.len(), base.a_h.len());
            assert_eq!(r.a_c.len(), base.a_c.len());
            for (a, b) in r.a_h.iter().zip(&base.a_h) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in r.a_c.iter().zip(&base.a_c) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoupled_equilibrium_matches_single_population() {
        let mut p = params();
        p.a_hc = 0.0;
        p.a_ch = 0.0;
        for u in [DosePair::ZERO, DosePair::new(1.0, 1.0), DosePair::new(0.0, 0.5)] {
            let r = equilibrium(&p, u).unwrap();
            let h = lemma1_limit(&p, u, Population::Healthy).unwrap();
            let c = lemma1_limit(&p, u, Population::Cancer).unwrap();
            assert!((r.rho_h_inf - h.rho_inf).abs() < 1e-14);
            assert!((r.rho_c_inf - c.rho_inf).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_regime_when_cancer_is_excluded() {
        let mut p = params();
        p.u1_max = 20.0;
        // a heavy cytotoxic dose kills the cancer fitness but not the healthy one
        p.mu_h = RateFn::constant(0.0);
        p.mu_c = crate::model::mu_c_legacy();
        let r = equilibrium(&p, DosePair::new(20.0, 0.0)).unwrap();
        assert_eq!(r.rho_c_inf, 0.0);
        assert!(matches!(r.regime, Regime::Coexistence | Regime::HealthyOnly));
        assert!((r.rho_h_inf - r.i_h_inf / p.a_hh).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_matrix_determinant_formula() {
        let p = params();
        let m = lyapunov_matrix(&p);
        let expected = 4.0 * (1.0 - 0.07 * 0.01) / (0.07 * 0.01);
        assert!((det2(&m) / expected - 1.0).abs() < 1e-12);
        assert!((det2(&m) - 5_710.285_714_285_7).abs() < 1e-6);
        assert!(m[0][0] + m[1][1] > 0.0);
    }

    #[test]
    fn lyapunov_at_the_limit() {
        let p = params();
        let g = PhenotypeGrid::shared(101).unwrap();
        let r = equilibrium_on_grid(&p, DosePair::ZERO, &g).unwrap();
        let h = dirac(g.clone(), g.nearest(r.x_h_inf), r.rho_h_inf).unwrap();
        let c = dirac(g.clone(), g.nearest(r.x_c_inf), r.rho_c_inf).unwrap();
        let opts = SimOptions::with_dt(0.01).snapshots(4);
        let tr = simulate_with(&p, &h, &c, &ControlSchedule::constant(DosePair::ZERO), 1.0, &opts).unwrap();
        let s = lyapunov_series(&p, &tr, DosePair::ZERO, &r);
        for k in 0..s.t.len() {
            assert!(s.quadratic[k].abs() < 1e-20);
            assert!(s.b_h[k].abs() < 1e-12 && s.b_c[k].abs() < 1e-12);
            // only the logarithmic term of the atom survives
            let wk = g.weights()[g.nearest(r.x_h_inf)];
            let mk = 1.0 / p.d_h.eval(g.nodes()[g.nearest(r.x_h_inf)]);
            let expected = mk * r.rho_h_inf * (wk / r.rho_h_inf).ln();
            assert!((s.v_h[k] - expected).abs() < 1e-10);
        }
        assert!(s.undefined_at.is_empty());
    }

    #[test]
    fn fit_recovers_known_exponent() {
        let t: Vec<f64> = (10..=200).map(|k| k as f64).collect();
        let y: Vec<f64> = t.iter().map(|&t| 3.0 * (t.ln() / t).powf(1.3)).collect();
        let f = fit_exponent(&t, &y, 10.0, 200.0, |t| t.ln() / t).unwrap();
        assert!((f.exponent - 1.3).abs() < 1e-10);
        assert!(!f.truncated);
        let z = vec![0.0; t.len()];
        assert!(fit_exponent(&t, &z, 10.0, 200.0, |t| t.ln() / t).is_none());
    }

    #[test]
    fn converged_run_flags_the_floor() {
        let t: Vec<f64> = (10..=200).map(|k| k as f64).collect();
        let y: Vec<f64> = t.iter().map(|&t| if t < 50.0 { 1.0 / t } else { 0.0 }).collect();
        let f = fit_exponent(&t, &y, 10.0, 200.0, |t| t.ln() / t).unwrap();
        assert!(f.truncated);
        assert!(f.samples < t.len());
    }

    #[test]
    fn dose_scan_covers_box() {
        let p = params();
        let rows = dose_scan(&p, 3, 4).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[11].u1, 3.5);
        assert_eq!(rows[11].u2, 7.0);
    }
}
