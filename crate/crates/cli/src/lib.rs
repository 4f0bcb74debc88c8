//! Command-line front end: configuration, output layout and the subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod figures;
pub mod output;

use cli::{Cli, Command};
use commands::{Context, Report};
use config::{load_config, FlagOverrides, RunConfig};
use error::CliResult;

/// Resolves the configuration and runs one command. `argv` is recorded in
/// the manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> CliResult<Report> {
    let g = &cli.global;
    let base = match &g.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let flags = FlagOverrides {
        preset: g.preset.clone(),
        seed: g.seed,
        nx: g.nx,
        dt: g.dt,
        theta_hc: g.theta_hc,
        theta_h: g.theta_h,
    };
    let mut cfg = base.with_flags(&flags)?;
    cfg.check_numerics()?;
    if let Command::Figure { id, .. } = &cli.command {
        figures::check_id(*id)?;
        if let Some(p) = figures::figure_preset(*id) {
            cfg.preset = p;
            cfg.params = None;
        }
    }
    let params = match &cli.command {
        Command::Validate => cfg.raw_params(),
        _ => cfg.params()?,
    };
    let ctx = Context {
        cfg,
        params,
        command: argv,
    };
    commands::dispatch(&ctx, &cli.command, &g.out)
}
