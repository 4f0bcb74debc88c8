//! Phenotype-structured healthy/cancer cell dynamics under cytotoxic and
//! cytostatic drug infusion: simulation, asymptotic analysis, reduced ODE
//! optimal control and a direct-transcription solver.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod asymptotics;
pub mod error;
pub mod grid;
pub mod ide_sim;
pub mod model;
pub mod numerics;
pub mod ocp_direct;
pub mod ode_reduce;
pub mod pmp;
pub mod strategies;

pub use error::{Error, Result};
pub use grid::{Density, PhenotypeGrid};
pub use ide_sim::{ControlSchedule, Trajectory};
pub use model::{DosePair, ModelParams, Population, Preset};
