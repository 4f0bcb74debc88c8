//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "phenoctl", version, about = "Simulate and optimize chemotherapy schedules for phenotype-structured healthy and cancer cell populations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Named parameter set (lorz2013-modified or lorz2013-legacy).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of phenotype grid nodes.
    #[arg(long, global = true)]
    pub nx: Option<usize>,
    /// Time step of the simulator.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// Lower bound on the healthy share ρ_H/(ρ_H+ρ_C).
    #[arg(long = "theta-hc", global = true)]
    pub theta_hc: Option<f64>,
    /// Lower bound on ρ_H/ρ_H(0).
    #[arg(long = "theta-h", global = true)]
    pub theta_h: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DoseArgs {
    #[arg(long, default_value_t = 0.0)]
    pub u1: f64,
    #[arg(long, default_value_t = 0.0)]
    pub u2: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Constant-dose simulation from the reference initial data.
    Simulate {
        #[command(flatten)]
        dose: DoseArgs,
        #[arg(long = "T", default_value_t = 10.0)]
        t_end: f64,
        /// Heun predictor-corrector on the totals.
        #[arg(long)]
        heun: bool,
    },
    /// Limit intensities and equilibrium totals for a constant dose.
    Asymptotics {
        #[command(flatten)]
        dose: DoseArgs,
        /// Sweep the dose box instead.
        #[arg(long)]
        scan: bool,
        #[arg(long, default_value_t = 11)]
        n1: usize,
        #[arg(long, default_value_t = 11)]
        n2: usize,
    },
    /// Compare the full system with the two-Dirac ODE after a long constant phase.
    Reduce {
        #[command(flatten)]
        dose: DoseArgs,
        #[arg(long = "T1", default_value_t = 100.0)]
        t1: f64,
        #[arg(long = "T2", default_value_t = 3.0)]
        t2: f64,
        #[arg(long, value_enum, default_value_t = PhaseTwo::Mtd)]
        phase2: PhaseTwo,
    },
    /// Run a dosing strategy.
    Strategy {
        #[arg(value_enum)]
        kind: StrategyKind,
        #[command(flatten)]
        dose: DoseArgs,
        #[arg(long = "T", default_value_t = 60.0)]
        t_end: f64,
        /// Longest second phase searched by the two-phase plan.
        #[arg(long = "t2-max", default_value_t = 20.0)]
        t2_max: f64,
    },
    /// Reduced-model maximum principle tools.
    Pmp {
        #[command(subcommand)]
        command: PmpCommand,
    },
    /// Direct transcription of the optimal control problem.
    Ocp {
        #[command(subcommand)]
        command: OcpCommand,
    },
    /// Reproduce the data behind one figure (1 to 7).
    Figure {
        id: u32,
        /// Double the time resolution of optimal-control figures.
        #[arg(long)]
        fine: bool,
    },
    /// Check the parameter set and print the report.
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseTwo {
    Mtd,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyKind {
    Constant,
    Mtd,
    Qp1,
    Qp2,
    TwoPhase,
}

#[derive(Debug, Subcommand)]
pub enum PmpCommand {
    /// Evaluate the structural hypotheses at a constant dose.
    Check {
        #[command(flatten)]
        dose: DoseArgs,
        /// Healthy reference total; defaults to ρ_H∞ of the dose.
        #[arg(long = "rho-h0")]
        rho_h0: Option<f64>,
    },
    /// Synthesize the second-phase arcs from the equilibrium of ū.
    Phase2 {
        #[command(flatten)]
        dose: DoseArgs,
        #[arg(long = "T2", default_value_t = 3.0)]
        t2: f64,
    },
    /// Scalar logistic toy problems with an L¹ dose budget.
    Toy {
        #[arg(value_enum)]
        which: Toy,
        #[arg(long, default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 1.0)]
        d: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.5)]
        rho0: f64,
        #[arg(long = "T", default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1.0)]
        budget: f64,
        #[arg(long, default_value_t = 2.0)]
        umax: f64,
        /// Cells of the numerical solution (c2).
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toy {
    C1,
    C2,
}

#[derive(Debug, Subcommand)]
pub enum OcpCommand {
    Solve {
        #[arg(long = "T", default_value_t = 60.0)]
        t_end: f64,
        /// Time steps; defaults to 20 per time unit.
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long = "random-starts")]
        random_starts: Option<usize>,
    },
    /// Solve on several horizons and check that ρ_C(T) decreases.
    Scan {
        #[arg(long = "T", value_delimiter = ',', default_values_t = [30.0, 45.0, 60.0, 80.0])]
        t_list: Vec<f64>,
        #[arg(long = "steps-per-unit", default_value_t = 20.0)]
        steps_per_unit: f64,
        /// Relative increase tolerated between consecutive horizons.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
}
