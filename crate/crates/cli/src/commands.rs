//! Subcommand implementations. Every command writes into its output
//! directory and finishes with a manifest.

use std::path::Path;
use std::sync::Arc;

use phenoctl_core::asymptotics::{dose_scan, equilibrium, equilibrium_on_grid};
use phenoctl_core::grid::PhenotypeGrid;
use phenoctl_core::ide_sim::{
    constraint_report, reference_initial, simulate_closed_loop_with, simulate_with, ControlSchedule, Scheme,
    SimOptions, Trajectory,
};
use phenoctl_core::model::{mu_c_legacy, mu_c_modified, validate, DosePair, ModelParams};
use phenoctl_core::ocp_direct::{monotonicity_scan, solve_ocp_raw, transcribe_reference, OcpSolution};
use phenoctl_core::ode_reduce::reduction_gap;
use phenoctl_core::pmp::{check_hypotheses_with, synthesize_second_phase, toy_c1, toy_c2, toy_c2_projected_gradient, SynthesisOptions};
use phenoctl_core::strategies::{
    arc_summary, cycle_minima, mtd_schedule, quasi_periodic_policy_1, quasi_periodic_policy_2, two_phase_plan,
    TwoPhaseOptions,
};
use serde_json::json;

use crate::cli::{Command, OcpCommand, PhaseTwo, PmpCommand, StrategyKind, Toy};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{stride_for, OutDir};

/// Rows kept in time series outputs.
const SERIES_ROWS: usize = 2000;

pub struct Context {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub command: Vec<String>,
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub artifacts: Vec<String>,
    /// Printed to stdout.
    pub message: String,
}

impl Context {
    pub fn grid(&self) -> CliResult<Arc<PhenotypeGrid>> {
        Ok(PhenotypeGrid::shared(self.cfg.numerics.nx)?)
    }

    pub fn sim_options(&self) -> SimOptions {
        let n = &self.cfg.numerics;
        let mut o = SimOptions::with_dt(n.dt).snapshots(n.snapshots.max(1));
        o.scheme = n.scheme;
        o
    }

    fn dose(&self, u1: f64, u2: f64) -> CliResult<DosePair> {
        let d = DosePair::new(u1, u2);
        if d.within(&self.params) {
            Ok(d)
        } else {
            Err(CliError::Config(format!(
                "dose ({u1}, {u2}) outside [0, {}] x [0, {}]",
                self.params.u1_max, self.params.u2_max
            )))
        }
    }

    fn tolerances(&self) -> serde_json::Value {
        json!({ "optimizer": self.cfg.optimizer })
    }

    fn finish(&self, out: OutDir, message: String) -> CliResult<Report> {
        let artifacts = out.finish(&self.cfg, &self.params, &self.command, self.tolerances())?;
        Ok(Report { artifacts, message })
    }
}

fn json_line<T: serde::Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

pub fn dispatch(ctx: &Context, command: &Command, out_path: &Path) -> CliResult<Report> {
    let mut out = OutDir::create(out_path)?;
    let message = match command {
        Command::Simulate { dose, t_end, heun } => {
            let u = ctx.dose(dose.u1, dose.u2)?;
            let mut opts = ctx.sim_options();
            if *heun {
                opts.scheme = Scheme::Heun;
            }
            let (h, c) = reference_initial(ctx.grid()?);
            let tr = simulate_with(&ctx.params, &h, &c, &ControlSchedule::constant(u), *t_end, &opts)?;
            out.trajectory(&tr, stride_for(tr.len(), SERIES_ROWS))?;
            format!("rho_H({t_end}) = {:.6e}, rho_C({t_end}) = {:.6e}", tr.final_rho_h(), tr.final_rho_c())
        }
        Command::Asymptotics { dose, scan, n1, n2 } => {
            if *scan {
                let rows = dose_scan(&ctx.params, *n1, *n2)?;
                let text = rows.iter().map(|r| {
                    vec![
                        r.u1.to_string(),
                        r.u2.to_string(),
                        r.x_h_inf.to_string(),
                        r.x_c_inf.to_string(),
                        r.rho_h_inf.to_string(),
                        r.rho_c_inf.to_string(),
                        format!("{:?}", r.regime).to_lowercase(),
                    ]
                });
                out.csv_text(
                    "scan.csv",
                    &["u1 [dose]", "u2 [dose]", "x_H_inf [phenotype]", "x_C_inf [phenotype]", "rho_H_inf [mass]", "rho_C_inf [mass]", "regime"],
                    text,
                )?;
                format!("{} dose pairs scanned", rows.len())
            } else {
                let u = ctx.dose(dose.u1, dose.u2)?;
                let r = equilibrium(&ctx.params, u)?;
                out.json("equilibrium.json", &r)?;
                json_line(&r)?
            }
        }
        Command::Reduce { dose, t1, t2, phase2 } => {
            let u = ctx.dose(dose.u1, dose.u2)?;
            let s2 = match phase2 {
                PhaseTwo::Mtd => mtd_schedule(&ctx.params, *t2)?,
                PhaseTwo::Hold => ControlSchedule::constant(u),
            };
            let g = reduction_gap(&ctx.params, ctx.grid()?, u, *t1, &s2, *t2, &ctx.sim_options())?;
            let stride = stride_for(g.times.len(), SERIES_ROWS);
            let n = g.times.len();
            let rows = (0..n)
                .filter(|k| k % stride == 0 || *k == n - 1)
                .map(|k| vec![g.times[k], g.ide_rho_h[k], g.ide_rho_c[k], g.ode_rho_h[k], g.ode_rho_c[k]]);
            out.csv(
                "gap.csv",
                &["t [time since T1]", "ide_rho_H [mass]", "ide_rho_C [mass]", "ode_rho_H [mass]", "ode_rho_C [mass]"],
                rows,
            )?;
            out.json("gap.json", &json!({ "gap": g.gap, "t_gap": g.t_gap, "t1": t1, "t2": t2 }))?;
            format!("max gap {:.3e} at t = T1 + {:.3}", g.gap, g.t_gap)
        }
        Command::Strategy { kind, dose, t_end, t2_max } => run_strategy(ctx, &mut out, *kind, dose.u1, dose.u2, *t_end, *t2_max)?,
        Command::Pmp { command } => run_pmp(ctx, &mut out, command)?,
        Command::Ocp { command } => run_ocp(ctx, &mut out, command)?,
        Command::Figure { id, fine } => crate::figures::run_figure(ctx, &mut out, *id, *fine)?,
        Command::Validate => {
            let r = validate(&ctx.params);
            out.json("validation.json", &r)?;
            let report = ctx.finish(out, json_line(&r)?)?;
            if r.passed() {
                return Ok(report);
            }
            let ids: Vec<&str> = r.failures().map(|c| c.id.as_str()).collect();
            println!("{}", report.message);
            return Err(CliError::Config(format!("parameter checks failed: {}", ids.join(", "))));
        }
    };
    ctx.finish(out, message)
}

/// Arc summary, constraint report and density outputs of a strategy run.
pub(crate) fn write_strategy(ctx: &Context, out: &mut OutDir, tr: &Trajectory) -> CliResult<()> {
    out.trajectory(tr, stride_for(tr.len(), SERIES_ROWS))?;
    out.json("arcs.json", &arc_summary(tr, &ctx.params))?;
    out.json("constraints.json", &constraint_report(tr, &ctx.params))
}

pub(crate) fn run_strategy(
    ctx: &Context,
    out: &mut OutDir,
    kind: StrategyKind,
    u1: f64,
    u2: f64,
    t_end: f64,
    t2_max: f64,
) -> CliResult<String> {
    let p = &ctx.params;
    let (h, c) = reference_initial(ctx.grid()?);
    let opts = ctx.sim_options();
    let tr = match kind {
        StrategyKind::Constant => simulate_with(p, &h, &c, &ControlSchedule::constant(ctx.dose(u1, u2)?), t_end, &opts)?,
        StrategyKind::Mtd => simulate_with(p, &h, &c, &mtd_schedule(p, t_end)?, t_end, &opts)?,
        StrategyKind::Qp1 => simulate_closed_loop_with(p, &h, &c, &mut quasi_periodic_policy_1(p), t_end, &opts)?,
        StrategyKind::Qp2 => {
            let tr = simulate_closed_loop_with(p, &h, &c, &mut quasi_periodic_policy_2(p), t_end, &opts)?;
            let minima: Vec<Vec<f64>> = cycle_minima(&tr).into_iter().map(|(t, v)| vec![t, v]).collect();
            out.csv("cycle_minima.csv", &["t [time]", "rho_C [mass]"], minima)?;
            tr
        }
        StrategyKind::TwoPhase => {
            let u = ctx.dose(u1, u2)?;
            let tp = TwoPhaseOptions {
                sim: opts,
                ..TwoPhaseOptions::default()
            };
            let (plan, tr) = two_phase_plan(p, &h, &c, u, t_end, t2_max, &tp)?;
            out.json("plan.json", &plan)?;
            tr
        }
    };
    write_strategy(ctx, out, &tr)?;
    Ok(format!("rho_C({t_end}) = {:.6e}", tr.final_rho_c()))
}

fn run_pmp(ctx: &Context, out: &mut OutDir, command: &PmpCommand) -> CliResult<String> {
    match command {
        PmpCommand::Check { dose, rho_h0 } => {
            let u = ctx.dose(dose.u1, dose.u2)?;
            let r = check_hypotheses_with(&ctx.params, u, *rho_h0)?;
            out.json("hypotheses.json", &r)?;
            json_line(&r)
        }
        PmpCommand::Phase2 { dose, t2 } => {
            let u = ctx.dose(dose.u1, dose.u2)?;
            let opts = SynthesisOptions {
                dt: ctx.cfg.numerics.dt,
                ..SynthesisOptions::default()
            };
            let s = synthesize_second_phase(&ctx.params, u, *t2, &opts)?;
            let n = s.times.len();
            let stride = stride_for(n, SERIES_ROWS);
            let rows = (0..n).filter(|k| k % stride == 0 || *k == n - 1).map(|k| {
                vec![
                    s.times[k].to_string(),
                    s.rho_h[k].to_string(),
                    s.rho_c[k].to_string(),
                    s.doses[k].u1.to_string(),
                    s.doses[k].u2.to_string(),
                    s.modes[k].label().to_string(),
                    s.adjoint.p_h[k].to_string(),
                    s.adjoint.p_c[k].to_string(),
                    s.adjoint.phi_1[k].to_string(),
                ]
            });
            out.csv_text(
                "phase2.csv",
                &["t [time]", "rho_H [mass]", "rho_C [mass]", "u1 [dose]", "u2 [dose]", "arc", "p_H", "p_C", "phi_1"],
                rows,
            )?;
            out.json(
                "phase2.json",
                &json!({
                    "u_bar": s.u_bar,
                    "t2": s.t2,
                    "start": s.start,
                    "tau1": s.tau1,
                    "arcs": s.arcs,
                    "final_rho_c": s.final_rho_c,
                    "hypotheses_passed": s.hypotheses_passed,
                    "sign_consistent": s.adjoint.sign_consistent(),
                    "hamiltonian_variation": s.adjoint.hamiltonian_variation,
                    "jumps": s.adjoint.jumps,
                }),
            )?;
            Ok(format!("tau1 = {:.4}, rho_C(T2) = {:.6e}, {} arcs", s.tau1, s.final_rho_c, s.arcs.len()))
        }
        PmpCommand::Toy {
            which,
            r,
            d,
            mu,
            rho0,
            t_end,
            budget,
            umax,
            n,
        } => {
            let v = match which {
                Toy::C1 => serde_json::to_value(toy_c1(*r, *d, *mu, *rho0, *t_end, *budget)?)?,
                Toy::C2 => {
                    let exact = toy_c2(*r, *d, *mu, *rho0, *t_end, *budget, *umax)?;
                    let num = toy_c2_projected_gradient(*r, *d, *mu, *rho0, *t_end, *budget, *umax, *n, 2000)?;
                    json!({ "closed_form": exact, "numerical": {
                        "value": num.value, "switch_time": num.switch_time, "iterations": num.iterations
                    }})
                }
            };
            out.json("toy.json", &v)?;
            json_line(&v)
        }
    }
}

pub(crate) fn write_ocp(out: &mut OutDir, sol: &OcpSolution) -> CliResult<()> {
    let nt = sol.times.len() - 1;
    let u1 = sol.u1();
    let u2 = sol.u2();
    out.csv(
        "u_opt.csv",
        &["t [time]", "u1 [dose]", "u2 [dose]"],
        (0..nt).map(|k| vec![sol.times[k], u1[k], u2[k]]),
    )?;
    out.csv(
        "totals.csv",
        &["t [time]", "rho_H [mass]", "rho_C [mass]", "g1 [ratio]", "g2 [ratio]"],
        (0..=nt).map(|k| vec![sol.times[k], sol.rho_h[k], sol.rho_c[k], sol.g1[k], sol.g2[k]]),
    )?;
    out.json(
        "activity.json",
        &json!({
            "rho_c_final": sol.rho_c_final,
            "feasible": sol.feasible,
            "max_violation": sol.max_violation,
            "kkt_residual": sol.kkt_residual,
            "start": sol.start,
            "starts": sol.starts,
            "g1_active": sol.activity.g1_intervals,
            "g2_active": sol.activity.g2_intervals,
            "activity_tol": sol.activity.tol,
            "initial_u1_off_fraction": sol.initial_u1_off_fraction(1e-3),
        }),
    )
}

/// Solves on `[0, T]` from the reference data with `nt` steps and writes the
/// result; infeasibility is reported after the outputs are written.
pub(crate) fn solve_and_write(ctx: &Context, out: &mut OutDir, t_end: f64, nt: usize, random_starts: Option<usize>) -> CliResult<String> {
    let prob = transcribe_reference(&ctx.params, t_end, nt, ctx.cfg.numerics.nx)?;
    let mut cfg = ctx.cfg.optimizer.clone();
    if let Some(k) = random_starts {
        cfg.random_starts = k;
    }
    let sol = solve_ocp_raw(&prob, &cfg)?;
    write_ocp(out, &sol)?;
    if !sol.feasible {
        return Err(CliError::Infeasible(format!(
            "no feasible point; least infeasible iterate (from {}) violates by {:.3e}, written to {}",
            sol.start,
            sol.max_violation,
            out.path().display()
        )));
    }
    Ok(format!(
        "rho_C({t_end}) = {:.6e} (start {}, violation {:.1e}, u1 = 0 on the first {:.1}% of the horizon)",
        sol.rho_c_final,
        sol.start,
        sol.max_violation,
        100.0 * sol.initial_u1_off_fraction(1e-3)
    ))
}

fn run_ocp(ctx: &Context, out: &mut OutDir, command: &OcpCommand) -> CliResult<String> {
    match command {
        OcpCommand::Solve { t_end, nt, random_starts } => {
            let nt = nt.unwrap_or((20.0 * t_end).round().max(1.0) as usize);
            solve_and_write(ctx, out, *t_end, nt, *random_starts)
        }
        OcpCommand::Scan {
            t_list,
            steps_per_unit,
            noise,
        } => {
            let (h, c) = reference_initial(ctx.grid()?);
            let scan = monotonicity_scan(&ctx.params, &h, &c, t_list, *steps_per_unit, &ctx.cfg.optimizer, *noise)?;
            let rows = scan.rows.iter().map(|r| {
                vec![
                    r.t_end.to_string(),
                    r.nt.to_string(),
                    r.rho_c_final.to_string(),
                    r.feasible.to_string(),
                    r.start.clone(),
                ]
            });
            out.csv_text("scan.csv", &["T [time]", "nt", "rho_C(T) [mass]", "feasible", "start"], rows)?;
            out.json("scan.json", &scan)?;
            Ok(if scan.monotone() {
                format!("rho_C(T) nonincreasing over {} horizons", scan.rows.len())
            } else {
                format!("monotonicity violated between {:?}", scan.violations)
            })
        }
    }
}

/// Rate curves of the cytotoxic sensitivities.
pub(crate) fn write_mu_curves(ctx: &Context, out: &mut OutDir) -> CliResult<()> {
    let legacy = mu_c_legacy();
    let modified = mu_c_modified();
    let g = ctx.grid()?;
    let rows = g
        .nodes()
        .iter()
        .map(|&x| vec![x, legacy.eval(x), modified.eval(x), ctx.params.mu_h.eval(x)]);
    out.csv("mu_curves.csv", &["x [phenotype]", "mu_C_legacy [1/dose/time]", "mu_C_modified [1/dose/time]", "mu_H [1/dose/time]"], rows)
}

/// Equilibrium on the run grid, for diagnostics written next to figures.
pub(crate) fn grid_equilibrium(ctx: &Context, u: DosePair) -> CliResult<serde_json::Value> {
    let g = ctx.grid()?;
    Ok(serde_json::to_value(equilibrium_on_grid(&ctx.params, u, &g)?)?)
}
