mod support;

use proptest::prelude::*;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn densities_stay_positive((u1, u2, c0, center) in positivity_strategy()) {
        positivity(u1, u2, c0, center)?;
    }

    #[test]
    fn total_mass_is_linear((a, b, vals, center) in mass_linearity_strategy()) {
        mass_linearity(a, b, vals, center)?;
    }

    #[test]
    fn trapezoid_is_second_order((amp, k, n) in richardson_strategy()) {
        richardson_ratio(amp, k, n)?;
    }

    #[test]
    fn fitness_never_exceeds_limit_intensity(x in 0.0f64..=1.0) {
        equilibrium_residual_lattice(x)?;
    }

    #[test]
    fn cytostatic_dose_keeps_concentration_points(u2 in 0.0f64..=7.0) {
        argmax_dose_independence(u2)?;
    }
}
