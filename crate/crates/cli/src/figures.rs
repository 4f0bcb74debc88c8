//! Data behind the seven reference figures.

use phenoctl_core::ide_sim::{reference_initial, simulate_with, ControlSchedule};
use phenoctl_core::model::{DosePair, Preset};
use serde_json::json;

use crate::cli::StrategyKind;
use crate::commands::{grid_equilibrium, run_strategy, solve_and_write, write_mu_curves, Context};
use crate::error::{CliError, CliResult};
use crate::output::{stride_for, OutDir};

pub const FIGURE_IDS: [u32; 7] = [1, 2, 3, 4, 5, 6, 7];

/// Constant dose of the single-dose figures.
pub const FIGURE_DOSE: DosePair = DosePair { u1: 3.5, u2: 2.0 };

/// Parameter preset a figure is defined under; `None` keeps the run's own.
pub fn figure_preset(id: u32) -> Option<Preset> {
    match id {
        1 => Some(Preset::Legacy),
        3 => Some(Preset::Modified),
        _ => None,
    }
}

pub fn check_id(id: u32) -> CliResult<()> {
    if FIGURE_IDS.contains(&id) {
        Ok(())
    } else {
        Err(CliError::Config(format!("unknown figure {id}; expected one of 1 to 7")))
    }
}

fn constant_dose_figure(ctx: &Context, out: &mut OutDir) -> CliResult<String> {
    let t_end = 10.0;
    let (h, c) = reference_initial(ctx.grid()?);
    let tr = simulate_with(&ctx.params, &h, &c, &ControlSchedule::constant(FIGURE_DOSE), t_end, &ctx.sim_options())?;
    out.trajectory(&tr, stride_for(tr.len(), 2000))?;
    out.json("equilibrium.json", &grid_equilibrium(ctx, FIGURE_DOSE)?)?;
    let (t_min, rho_min) = tr.min_rho_c();
    Ok(format!(
        "rho_C(10) = {:.6e}, min rho_C = {:.6e} at t = {:.3}",
        tr.final_rho_c(),
        rho_min,
        t_min
    ))
}

fn ocp_figure(ctx: &Context, out: &mut OutDir, t_end: f64, fine: bool) -> CliResult<String> {
    let nt = (20.0 * t_end) as usize * if fine { 2 } else { 1 };
    out.json("figure.json", &json!({ "T": t_end, "nt": nt, "fine": fine }))?;
    solve_and_write(ctx, out, t_end, nt, None)
}

pub fn run_figure(ctx: &Context, out: &mut OutDir, id: u32, fine: bool) -> CliResult<String> {
    check_id(id)?;
    match id {
        1 | 3 => constant_dose_figure(ctx, out),
        2 => {
            write_mu_curves(ctx, out)?;
            Ok("wrote mu_curves.csv".into())
        }
        4 => ocp_figure(ctx, out, 30.0, fine),
        5 => ocp_figure(ctx, out, 60.0, fine),
        6 => run_strategy(ctx, out, StrategyKind::Qp1, 0.0, 0.0, 60.0, 0.0),
        _ => run_strategy(ctx, out, StrategyKind::Qp2, 0.0, 0.0, 100.0, 0.0),
    }
}
