//! Invariant checks shared by the property suite and the acceptance run.

#![allow(dead_code)]

use phenoctl_core::asymptotics::limit_intensity;
use phenoctl_core::grid::{gaussian_init, total_mass, Density, PhenotypeGrid};
use phenoctl_core::ide_sim::{simulate, ControlSchedule};
use phenoctl_core::model::{reference_params, DosePair, Population, Preset};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Check = Result<(), TestCaseError>;

pub fn positivity(u1: f64, u2: f64, c0: f64, center: f64) -> Check {
    let p = reference_params(Preset::Modified);
    let g = PhenotypeGrid::shared(31).unwrap();
    let h = gaussian_init(g.clone(), center, 0.05, 2.7).unwrap();
    let c = gaussian_init(g, 1.0 - center, 0.05, c0).unwrap();
    let tr = simulate(&p, &h, &c, &ControlSchedule::constant(DosePair::new(u1, u2)), 3.0, 1e-2)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(tr.final_h.values().iter().all(|&v| v > 0.0));
    prop_assert!(tr.final_c.values().iter().all(|&v| v > 0.0));
    prop_assert!(tr.rho_h.iter().chain(&tr.rho_c).all(|&v| v > 0.0 && v.is_finite()));
    Ok(())
}

pub fn positivity_strategy() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.0f64..=3.5, 0.0f64..=7.0, 0.01f64..5.0, 0.0f64..=1.0)
}

pub fn mass_linearity(a: f64, b: f64, vals: Vec<f64>, center: f64) -> Check {
    let g = PhenotypeGrid::shared(vals.len()).unwrap();
    let d1 = Density::new(g.clone(), vals).unwrap();
    let d2 = gaussian_init(g, center, 0.1, 1.3).unwrap();
    let lhs = total_mass(&d1.combine(a, &d2, b).unwrap());
    let rhs = a * total_mass(&d1) + b * total_mass(&d2);
    prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
    Ok(())
}

pub fn mass_linearity_strategy() -> impl Strategy<Value = (f64, f64, Vec<f64>, f64)> {
    (
        0.0f64..10.0,
        0.0f64..10.0,
        proptest::collection::vec(0.0f64..5.0, 21),
        0.0f64..1.0,
    )
}

/// Trapezoid error on `∫ A/(1 + k x²)` drops by 4 when the spacing halves.
pub fn richardson_ratio(amp: f64, k: f64, n: usize) -> Check {
    let exact = amp * k.sqrt().atan() / k.sqrt();
    let err = |m: usize| {
        let g = PhenotypeGrid::uniform(m).unwrap();
        g.integrate_fn(|x| amp / (1.0 + k * x * x)) - exact
    };
    let ratio = err(n) / err(2 * n - 1);
    prop_assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    Ok(())
}

pub fn richardson_strategy() -> impl Strategy<Value = (f64, f64, usize)> {
    (0.5f64..5.0, 0.2f64..3.0, 41usize..121)
}

/// `r/(1+α u2) - u1 μ - d I∞ ≤ 0` at every sample, with equality on the argmax
/// set, for the 5×5 lattice on the dose box.
pub fn equilibrium_residual_lattice(x: f64) -> Check {
    let p = reference_params(Preset::Modified);
    for i in 0..5 {
        for j in 0..5 {
            let u = DosePair::new(p.u1_max * i as f64 / 4.0, p.u2_max * j as f64 / 4.0);
            for pop in [Population::Healthy, Population::Cancer] {
                let l = limit_intensity(&p, u, pop).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let rates = p.rates(pop);
                let resid = |x: f64| rates.fitness(x, u) - rates.d.eval(x) * l.i_inf;
                prop_assert!(resid(x) <= 1e-10, "{pop:?} at {u:?}, x = {x}: {}", resid(x));
                if !l.extinct {
                    for &a in &l.argmax {
                        prop_assert!(resid(a).abs() <= 1e-10);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Without the cytotoxic drug the concentration sets do not move with `u2`.
pub fn argmax_dose_independence(u2: f64) -> Check {
    let p = reference_params(Preset::Modified);
    for pop in [Population::Healthy, Population::Cancer] {
        let base = limit_intensity(&p, DosePair::ZERO, pop).unwrap();
        let l = limit_intensity(&p, DosePair::new(0.0, u2), pop).unwrap();
        prop_assert_eq!(l.argmax.len(), base.argmax.len());
        for (a, b) in l.argmax.iter().zip(&base.argmax) {
            prop_assert!((a - b).abs() < 1e-6, "{pop:?}: {a} vs {b}");
        }
    }
    Ok(())
}
