//! Model data: phenotype-dependent rate functions, couplings, dose bounds and
//! constraint thresholds, together with the pointwise net growth rates
//!
//! ```text
//! R_H(x) = r_H(x)/(1 + α_H u2) - d_H(x) (a_HH ρ_H + a_HC ρ_C) - u1 μ_H(x)
//! R_C(x) = r_C(x)/(1 + α_C u2) - d_C(x) (a_CH ρ_H + a_CC ρ_C) - u1 μ_C(x)
//! ```
//!
//! Time and cell counts are dimensionless throughout. Rates are per unit time,
//! competition weights per cell per unit time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PhenotypeGrid;

/// Closed-form shape of a rate function on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateShape {
    Constant {
        value: f64,
    },
    /// `scale / (offset + coeff x²) - shift`, floored at zero when `clip` is set.
    InverseQuadratic {
        scale: f64,
        offset: f64,
        coeff: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        clip: bool,
    },
    /// `scale (1 - slope x)`.
    Linear { scale: f64, slope: f64 },
    /// Piecewise-linear interpolation through `(x, y)`; `x` strictly increasing
    /// and covering `[0, 1]`.
    Table { x: Vec<f64>, y: Vec<f64> },
}

impl RateShape {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            RateShape::Constant { value } => value,
            RateShape::InverseQuadratic {
                scale,
                offset,
                coeff,
                shift,
                clip,
            } => {
                let v = scale / (offset + coeff * x * x) - shift;
                if clip {
                    v.max(0.0)
                } else {
                    v
                }
            }
            RateShape::Linear { scale, slope } => scale * (1.0 - slope * x),
            RateShape::Table { x: ref xs, ref y } => interp(xs, y, x),
        }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => ys[0],
        n => {
            if x <= xs[0] {
                return ys[0];
            }
            if x >= xs[n - 1] {
                return ys[n - 1];
            }
            let i = xs.partition_point(|&xi| xi <= x).clamp(1, n - 1);
            let (x0, x1) = (xs[i - 1], xs[i]);
            let s = (x - x0) / (x1 - x0);
            ys[i - 1] * (1.0 - s) + ys[i] * s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    Decreasing,
    Nonincreasing,
    #[default]
    None,
}

/// A nonnegative rate function of the phenotype with a declared monotonicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFn {
    pub shape: RateShape,
    #[serde(default)]
    pub monotonicity: Monotonicity,
}

impl RateFn {
    pub fn new(shape: RateShape, monotonicity: Monotonicity) -> Self {
        Self {
            shape,
            monotonicity,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(RateShape::Constant { value }, Monotonicity::Nonincreasing)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.shape.eval(x)
    }

    pub fn sample(&self, grid: &PhenotypeGrid) -> Vec<f64> {
        grid.nodes().iter().map(|&x| self.eval(x)).collect()
    }
}

/// Which of the two cell populations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Population {
    #[serde(rename = "H")]
    Healthy,
    #[serde(rename = "C")]
    Cancer,
}

impl Population {
    pub fn label(self) -> &'static str {
        match self {
            Population::Healthy => "H",
            Population::Cancer => "C",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Population::Healthy => Population::Cancer,
            Population::Cancer => Population::Healthy,
        }
    }
}

/// Cytotoxic (`u1`) and cytostatic (`u2`) infusion rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DosePair {
    pub u1: f64,
    pub u2: f64,
}

impl DosePair {
    pub const ZERO: DosePair = DosePair { u1: 0.0, u2: 0.0 };

    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn clamp_to(self, params: &ModelParams) -> Self {
        Self {
            u1: self.u1.clamp(0.0, params.u1_max),
            u2: self.u2.clamp(0.0, params.u2_max),
        }
    }

    pub fn within(&self, params: &ModelParams) -> bool {
        (0.0..=params.u1_max).contains(&self.u1) && (0.0..=params.u2_max).contains(&self.u2)
    }
}

/// Named built-in parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Cytotoxic sensitivity of cancer cells vanishing near full resistance.
    #[serde(rename = "lorz2013-modified")]
    Modified,
    /// Original, everywhere-positive cytotoxic sensitivity of cancer cells.
    #[serde(rename = "lorz2013-legacy")]
    Legacy,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Modified, Preset::Legacy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Modified => "lorz2013-modified",
            Preset::Legacy => "lorz2013-legacy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown preset '{name}'")))
    }

    pub fn params(self) -> ModelParams {
        reference_params(self)
    }
}

/// Everything that defines the dynamics and the admissible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(rename = "r_H")]
    pub r_h: RateFn,
    #[serde(rename = "r_C")]
    pub r_c: RateFn,
    #[serde(rename = "d_H")]
    pub d_h: RateFn,
    #[serde(rename = "d_C")]
    pub d_c: RateFn,
    #[serde(rename = "mu_H")]
    pub mu_h: RateFn,
    #[serde(rename = "mu_C")]
    pub mu_c: RateFn,
    #[serde(rename = "alpha_H")]
    pub alpha_h: f64,
    #[serde(rename = "alpha_C")]
    pub alpha_c: f64,
    #[serde(rename = "a_HH")]
    pub a_hh: f64,
    #[serde(rename = "a_HC")]
    pub a_hc: f64,
    #[serde(rename = "a_CH")]
    pub a_ch: f64,
    #[serde(rename = "a_CC")]
    pub a_cc: f64,
    pub u1_max: f64,
    pub u2_max: f64,
    #[serde(rename = "theta_HC")]
    pub theta_hc: f64,
    #[serde(rename = "theta_H")]
    pub theta_h: f64,
}

/// Borrowed view of the data of one population.
#[derive(Debug, Clone, Copy)]
pub struct PopulationRates<'a> {
    pub r: &'a RateFn,
    pub d: &'a RateFn,
    pub mu: &'a RateFn,
    pub alpha: f64,
    /// Weight of the own total in the competition intensity.
    pub a_self: f64,
    /// Weight of the other population's total.
    pub a_other: f64,
}

impl PopulationRates<'_> {
    /// Drug-adjusted fitness without competition, `r/(1+α u2) - u1 μ`.
    #[inline]
    pub fn fitness(&self, x: f64, dose: DosePair) -> f64 {
        self.r.eval(x) / (1.0 + self.alpha * dose.u2) - dose.u1 * self.mu.eval(x)
    }

    #[inline]
    pub fn intensity(&self, rho_self: f64, rho_other: f64) -> f64 {
        self.a_self * rho_self + self.a_other * rho_other
    }

    #[inline]
    pub fn growth(&self, x: f64, rho_self: f64, rho_other: f64, dose: DosePair) -> f64 {
        self.fitness(x, dose) - self.d.eval(x) * self.intensity(rho_self, rho_other)
    }
}

impl ModelParams {
    pub fn rates(&self, pop: Population) -> PopulationRates<'_> {
        match pop {
            Population::Healthy => PopulationRates {
                r: &self.r_h,
                d: &self.d_h,
                mu: &self.mu_h,
                alpha: self.alpha_h,
                a_self: self.a_hh,
                a_other: self.a_hc,
            },
            Population::Cancer => PopulationRates {
                r: &self.r_c,
                d: &self.d_c,
                mu: &self.mu_c,
                alpha: self.alpha_c,
                a_self: self.a_cc,
                a_other: self.a_ch,
            },
        }
    }

    pub fn mtd(&self) -> DosePair {
        DosePair::new(self.u1_max, self.u2_max)
    }

    /// `γ = (1 - θ_HC)/θ_HC`, the largest admissible ratio ρ_C/ρ_H.
    pub fn gamma(&self) -> f64 {
        (1.0 - self.theta_hc) / self.theta_hc
    }

    fn check_args(&self, x: f64, rho_a: f64, rho_b: f64, dose: DosePair) -> Result<()> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("phenotype {x} outside [0, 1]")));
        }
        if !(rho_a >= 0.0 && rho_b >= 0.0) {
            return Err(Error::Domain(format!(
                "negative cell totals ({rho_a}, {rho_b})"
            )));
        }
        if !dose.within(self) {
            return Err(Error::Domain(format!(
                "dose ({}, {}) outside [0, {}] x [0, {}]",
                dose.u1, dose.u2, self.u1_max, self.u2_max
            )));
        }
        Ok(())
    }

    /// Net growth rate of healthy cells of phenotype `x`.
    pub fn growth_rate_h(&self, x: f64, rho_h: f64, rho_c: f64, dose: DosePair) -> Result<f64> {
        self.check_args(x, rho_h, rho_c, dose)?;
        Ok(self.rates(Population::Healthy).growth(x, rho_h, rho_c, dose))
    }

    /// Net growth rate of cancer cells of phenotype `x`. Note the argument
    /// order: own total first.
    pub fn growth_rate_c(&self, x: f64, rho_c: f64, rho_h: f64, dose: DosePair) -> Result<f64> {
        self.check_args(x, rho_c, rho_h, dose)?;
        Ok(self.rates(Population::Cancer).growth(x, rho_c, rho_h, dose))
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// One population's rate functions sampled on a grid, ready for quadrature
/// and stepping.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    pub mu: Vec<f64>,
    pub alpha: f64,
    pub a_self: f64,
    pub a_other: f64,
}

impl PopulationTable {
    pub fn sample(rates: PopulationRates<'_>, grid: &PhenotypeGrid) -> Self {
        Self {
            r: rates.r.sample(grid),
            d: rates.d.sample(grid),
            mu: rates.mu.sample(grid),
            alpha: rates.alpha,
            a_self: rates.a_self,
            a_other: rates.a_other,
        }
    }

    /// Writes `R(x_i)` for all nodes into `out`.
    #[inline]
    pub fn growth_into(&self, rho_self: f64, rho_other: f64, dose: DosePair, out: &mut [f64]) {
        let div = 1.0 / (1.0 + self.alpha * dose.u2);
        let intensity = self.a_self * rho_self + self.a_other * rho_other;
        for (((o, r), d), mu) in out.iter_mut().zip(&self.r).zip(&self.d).zip(&self.mu) {
            *o = r * div - d * intensity - dose.u1 * mu;
        }
    }
}

/// Both populations sampled on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRates {
    pub h: PopulationTable,
    pub c: PopulationTable,
}

impl SampledRates {
    pub fn new(params: &ModelParams, grid: &PhenotypeGrid) -> Self {
        Self {
            h: PopulationTable::sample(params.rates(Population::Healthy), grid),
            c: PopulationTable::sample(params.rates(Population::Cancer), grid),
        }
    }

    pub fn get(&self, pop: Population) -> &PopulationTable {
        match pop {
            Population::Healthy => &self.h,
            Population::Cancer => &self.c,
        }
    }
}

/// Healthy and cancer cytotoxic sensitivities.
pub fn mu_h_default() -> RateFn {
    RateFn::new(
        RateShape::InverseQuadratic {
            scale: 0.2,
            offset: 0.49,
            coeff: 1.0,
            shift: 0.0,
            clip: false,
        },
        Monotonicity::Decreasing,
    )
}

pub fn mu_c_legacy() -> RateFn {
    RateFn::new(
        RateShape::InverseQuadratic {
            scale: 0.4,
            offset: 0.49,
            coeff: 1.0,
            shift: 0.0,
            clip: false,
        },
        Monotonicity::Decreasing,
    )
}

pub fn mu_c_modified() -> RateFn {
    RateFn::new(
        RateShape::InverseQuadratic {
            scale: 0.9,
            offset: 0.49,
            coeff: 0.6,
            shift: 1.0,
            clip: true,
        },
        Monotonicity::Nonincreasing,
    )
}

/// The reference dataset, with the requested cancer cytotoxic sensitivity.
pub fn reference_params(preset: Preset) -> ModelParams {
    let inv_quad = |scale: f64| {
        RateFn::new(
            RateShape::InverseQuadratic {
                scale,
                offset: 1.0,
                coeff: 1.0,
                shift: 0.0,
                clip: false,
            },
            Monotonicity::Decreasing,
        )
    };
    let linear = |slope: f64| {
        RateFn::new(
            RateShape::Linear { scale: 0.5, slope },
            Monotonicity::Decreasing,
        )
    };
    ModelParams {
        r_h: inv_quad(1.5),
        r_c: inv_quad(3.0),
        d_h: linear(0.1),
        d_c: linear(0.3),
        mu_h: mu_h_default(),
        mu_c: match preset {
            Preset::Modified => mu_c_modified(),
            Preset::Legacy => mu_c_legacy(),
        },
        alpha_h: 0.01,
        alpha_c: 1.0,
        a_hh: 1.0,
        a_hc: 0.07,
        a_ch: 0.01,
        a_cc: 1.0,
        u1_max: 3.5,
        u2_max: 7.0,
        theta_hc: 0.4,
        theta_h: 0.6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, id: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(ValidationCheck {
            id: id.into(),
            passed,
            detail: detail.into(),
        });
    }
}

const VALIDATION_NODES: usize = 1001;
/// Difference quotients above this are treated as a Lipschitz failure.
const LIPSCHITZ_BOUND: f64 = 1e4;

/// Checks the structural assumptions on the data. Never fails; every check is
/// reported.
pub fn validate(params: &ModelParams) -> ValidationReport {
    let mut report = ValidationReport::default();

    report.push(
        "alpha_order",
        params.alpha_h > 0.0 && params.alpha_h < params.alpha_c,
        format!("alpha_H = {} < alpha_C = {}", params.alpha_h, params.alpha_c),
    );
    report.push(
        "competition",
        0.0 < params.a_hc
            && params.a_hc < params.a_hh
            && 0.0 < params.a_ch
            && params.a_ch < params.a_cc,
        format!(
            "0 < a_HC = {} < a_HH = {}, 0 < a_CH = {} < a_CC = {}",
            params.a_hc, params.a_hh, params.a_ch, params.a_cc
        ),
    );
    report.push(
        "dose_bounds",
        params.u1_max > 0.0 && params.u2_max > 0.0,
        format!("u1_max = {}, u2_max = {}", params.u1_max, params.u2_max),
    );
    report.push(
        "thresholds",
        (0.0 < params.theta_hc && params.theta_hc < 1.0)
            && (0.0 < params.theta_h && params.theta_h < 1.0),
        format!(
            "theta_HC = {}, theta_H = {}",
            params.theta_hc, params.theta_h
        ),
    );

    let h = 1.0 / (VALIDATION_NODES - 1) as f64;
    let xs: Vec<f64> = (0..VALIDATION_NODES).map(|i| i as f64 * h).collect();
    let named = [
        ("r_H", &params.r_h, true),
        ("r_C", &params.r_c, true),
        ("d_H", &params.d_h, true),
        ("d_C", &params.d_c, true),
        ("mu_H", &params.mu_h, false),
        ("mu_C", &params.mu_c, false),
    ];
    for (name, f, strictly_positive) in named {
        let ys: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
        let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let ok = if strictly_positive {
            min > 0.0
        } else {
            min >= 0.0
        };
        report.push(
            format!("{name}_sign"),
            ok && ys.iter().all(|y| y.is_finite()),
            format!("min over grid = {min:.6e}"),
        );

        let mono_ok = match f.monotonicity {
            Monotonicity::Decreasing => ys.windows(2).all(|w| w[0] > w[1]),
            Monotonicity::Nonincreasing => ys.windows(2).all(|w| w[0] >= w[1]),
            Monotonicity::None => true,
        };
        report.push(
            format!("{name}_monotone"),
            mono_ok,
            format!("declared {:?}", f.monotonicity),
        );

        let lip = ys
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / h)
            .fold(0.0, f64::max);
        report.push(
            format!("{name}_lipschitz"),
            lip.is_finite() && lip < LIPSCHITZ_BOUND,
            format!("max difference quotient = {lip:.4}"),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modified() -> ModelParams {
        reference_params(Preset::Modified)
    }

    #[test]
    fn growth_at_origin_without_competition_or_drugs() {
        let p = modified();
        assert_eq!(p.growth_rate_h(0.0, 0.0, 0.0, DosePair::ZERO).unwrap(), 1.5);
        assert_eq!(p.growth_rate_c(0.0, 0.0, 0.0, DosePair::ZERO).unwrap(), 3.0);
    }

    #[test]
    fn growth_reduces_to_proliferation_when_empty_and_untreated() {
        let p = modified();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            assert_eq!(
                p.growth_rate_h(x, 0.0, 0.0, DosePair::ZERO).unwrap(),
                p.r_h.eval(x)
            );
            assert_eq!(
                p.growth_rate_c(x, 0.0, 0.0, DosePair::ZERO).unwrap(),
                p.r_c.eval(x)
            );
        }
    }

    #[test]
    fn growth_matches_term_by_term_evaluation() {
        let p = modified();
        // healthy, x = 0.5, rho = (2.7, 0.5), u = (3.5, 2)
        let x: f64 = 0.5;
        let r = 1.5 / (1.0 + x * x);
        let d = 0.5 * (1.0 - 0.1 * x);
        let mu = 0.2 / (0.49 + x * x);
        let expected = r / (1.0 + 0.01 * 2.0) - d * (1.0 * 2.7 + 0.07 * 0.5) - 3.5 * mu;
        let got = p
            .growth_rate_h(0.5, 2.7, 0.5, DosePair::new(3.5, 2.0))
            .unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");

        // cancer, x = 0.5, rho = (1, 1), u = (1, 1)
        let r = 3.0 / (1.0 + x * x);
        let d = 0.5 * (1.0 - 0.3 * x);
        let mu = (0.9 / (0.49 + 0.6 * x * x) - 1.0).max(0.0);
        let expected = r / 2.0 - d * (0.01 + 1.0) - mu;
        let got = p
            .growth_rate_c(0.5, 1.0, 1.0, DosePair::new(1.0, 1.0))
            .unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn cytotoxic_dose_is_inert_on_fully_resistant_cancer_cells() {
        let p = modified();
        for u1 in [0.0, 1.0, 3.5] {
            let g = p
                .growth_rate_c(1.0, 0.0, 0.0, DosePair::new(u1, 0.0))
                .unwrap();
            assert!((g - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sensitivity_presets() {
        let m = mu_c_modified();
        assert!((m.eval(0.0) - (0.9 / 0.49 - 1.0)).abs() < 1e-15);
        assert!((m.eval(0.0) - 0.836_734_693_877_551).abs() < 1e-12);
        assert_eq!(m.eval(1.0), 0.0);
        let l = mu_c_legacy();
        assert!((l.eval(0.0) - 0.816_326_530_612_244_9).abs() < 1e-12);
    }

    #[test]
    fn modified_sensitivity_vanishes_beyond_root() {
        let x0 = (0.41f64 / 0.6).sqrt();
        assert!((x0 - 0.8266).abs() < 1e-4);
        let m = mu_c_modified();
        let grid = PhenotypeGrid::uniform(201).unwrap();
        for &x in grid.nodes() {
            if x >= x0 {
                assert_eq!(m.eval(x), 0.0, "x = {x}");
            } else {
                assert!(m.eval(x) > 0.0, "x = {x}");
            }
        }
    }

    #[test]
    fn domain_errors() {
        let p = modified();
        assert!(p.growth_rate_h(1.2, 0.0, 0.0, DosePair::ZERO).is_err());
        assert!(p.growth_rate_h(0.5, -1.0, 0.0, DosePair::ZERO).is_err());
        assert!(p
            .growth_rate_c(0.5, 0.0, 0.0, DosePair::new(4.0, 0.0))
            .is_err());
    }

    #[test]
    fn reference_dataset_validates() {
        for preset in Preset::ALL {
            let report = preset.params().validate();
            assert!(
                report.passed(),
                "{:?}",
                report.failures().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn validation_flags_broken_orderings() {
        let mut p = modified();
        p.alpha_h = p.alpha_c;
        let r = p.validate();
        assert!(!r.get("alpha_order").unwrap().passed);

        let mut p = modified();
        p.a_hc = 2.0 * p.a_hh;
        let r = p.validate();
        assert!(!r.get("competition").unwrap().passed);
        assert!(r.get("alpha_order").unwrap().passed);
    }

    #[test]
    fn validation_flags_wrong_monotonicity_tag() {
        let mut p = modified();
        p.mu_c.monotonicity = Monotonicity::Decreasing;
        assert!(!p.validate().get("mu_C_monotone").unwrap().passed);
    }

    #[test]
    fn preset_names_round_trip() {
        for preset in Preset::ALL {
            assert_eq!(Preset::from_name(preset.name()).unwrap(), preset);
        }
        assert!(Preset::from_name("nope").is_err());
    }

    #[test]
    fn table_shape_interpolates() {
        let t = RateShape::Table {
            x: vec![0.0, 0.5, 1.0],
            y: vec![2.0, 1.0, 0.0],
        };
        assert_eq!(t.eval(0.25), 1.5);
        assert_eq!(t.eval(1.0), 0.0);
        assert_eq!(t.eval(0.0), 2.0);
    }

    #[test]
    fn params_json_round_trip() {
        let p = modified();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"mu_C\""));
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn affine_in_totals(x in 0.0f64..=1.0, a in 0.0f64..5.0, b in 0.0f64..5.0,
                                u1 in 0.0f64..3.5, u2 in 0.0f64..7.0) {
                let p = modified();
                let dose = DosePair::new(u1, u2);
                let f = |rh: f64| p.growth_rate_h(x, rh, b, dose).unwrap();
                // three collinear points in rho_H
                let (y0, y1, y2) = (f(a), f(a + 1.0), f(a + 2.0));
                prop_assert!(((y2 - y1) - (y1 - y0)).abs() < 1e-12);
                let slope = -p.d_h.eval(x) * p.a_hh;
                prop_assert!(((y1 - y0) - slope).abs() < 1e-12);
                let g = |rc: f64| p.growth_rate_c(x, rc, a, dose).unwrap();
                let slope_c = -p.d_c.eval(x) * p.a_cc;
                prop_assert!(((g(b + 1.0) - g(b)) - slope_c).abs() < 1e-12);
            }

            #[test]
            fn decreasing_in_doses(x in 0.0f64..=1.0, u1 in 0.0f64..3.0, u2 in 0.0f64..6.0) {
                let p = modified();
                let h = 0.25;
                for pop in [Population::Healthy, Population::Cancer] {
                    let rates = p.rates(pop);
                    let base = rates.growth(x, 1.0, 1.0, DosePair::new(u1, u2));
                    let more_u1 = rates.growth(x, 1.0, 1.0, DosePair::new(u1 + h, u2));
                    let more_u2 = rates.growth(x, 1.0, 1.0, DosePair::new(u1, u2 + h));
                    if rates.mu.eval(x) > 0.0 {
                        prop_assert!(more_u1 < base);
                    } else {
                        prop_assert_eq!(more_u1, base);
                    }
                    prop_assert!(more_u2 < base);
                }
            }
        }
    }
}
