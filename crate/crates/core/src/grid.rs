//! Uniform phenotype grid on `[0, 1]` with trapezoidal quadrature, densities
//! on it, and concentration metrics.
//!
//! A Dirac of weight `w` at node `k` is represented by the value
//! `w / weights[k]` at `k` and zero elsewhere, so its total mass is exactly `w`.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RateFn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl PhenotypeGrid {
    pub const DEFAULT_POINTS: usize = 201;

    pub fn uniform(n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 3 points, got {n_points}"
            )));
        }
        let h = 1.0 / (n_points - 1) as f64;
        let nodes = (0..n_points)
            .map(|i| if i == n_points - 1 { 1.0 } else { i as f64 * h })
            .collect();
        let mut weights = vec![h; n_points];
        weights[0] = 0.5 * h;
        weights[n_points - 1] = 0.5 * h;
        Ok(Self { nodes, weights })
    }

    pub fn shared(n_points: usize) -> Result<Arc<Self>> {
        Self::uniform(n_points).map(Arc::new)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }

    /// Trapezoidal integral of node values.
    #[inline]
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Integral of `f(x)` sampled at the nodes.
    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, w)| w * f(x))
            .sum()
    }

    /// Index of the node closest to `x` (ties go to the lower node).
    pub fn nearest(&self, x: f64) -> usize {
        let n = self.len();
        let pos = (x.clamp(0.0, 1.0) * (n - 1) as f64).round() as usize;
        pos.min(n - 1)
    }
}

/// A nonnegative density on a phenotype grid, cells per unit phenotype.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    grid: Arc<PhenotypeGrid>,
    values: Vec<f64>,
}

impl Density {
    pub fn new(grid: Arc<PhenotypeGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "density has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "density value {} at x = {} is not a nonnegative number",
                values[i],
                grid.nodes()[i]
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<PhenotypeGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<PhenotypeGrid>, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    /// Trusted constructor for internal stepping; callers guarantee the invariants.
    pub(crate) fn from_raw(grid: Arc<PhenotypeGrid>, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &Arc<PhenotypeGrid> {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// `a self + b other`; both must live on the same grid.
    pub fn combine(&self, a: f64, other: &Density, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::InvalidInput("densities on different grids".into()));
        }
        Self::new(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    /// Node index of the largest value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,value")?;
        for (x, v) in self.grid.nodes().iter().zip(&self.values) {
            writeln!(out, "{x},{v:e}")?;
        }
        Ok(())
    }
}

pub fn total_mass(d: &Density) -> f64 {
    d.grid.integrate(&d.values)
}

pub fn weighted_mass(d: &Density, weight: &RateFn) -> f64 {
    d.grid
        .nodes()
        .iter()
        .zip(d.grid.weights())
        .zip(&d.values)
        .map(|((&x, w), v)| w * weight.eval(x) * v)
        .sum()
}

/// Sensitive (`∫(1-x) n`) and resistant (`∫x n`) parts of a density.
pub fn sensitive_resistant(d: &Density) -> (f64, f64) {
    let mut s = 0.0;
    let mut r = 0.0;
    for ((&x, w), v) in d.grid.nodes().iter().zip(d.grid.weights()).zip(&d.values) {
        s += w * (1.0 - x) * v;
        r += w * x * v;
    }
    (s, r)
}

/// Density proportional to `exp(-(x - center)²/eps)` with the given total mass.
pub fn gaussian_init(
    grid: Arc<PhenotypeGrid>,
    center: f64,
    eps: f64,
    target_mass: f64,
) -> Result<Density> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("width must be positive, got {eps}")));
    }
    if !(target_mass > 0.0) {
        return Err(Error::InvalidInput(format!(
            "target mass must be positive, got {target_mass}"
        )));
    }
    let shape: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| (-(x - center).powi(2) / eps).exp())
        .collect();
    let mass = grid.integrate(&shape);
    if !(mass > 0.0) {
        return Err(Error::InvalidInput(format!(
            "gaussian centered at {center} underflows on the grid"
        )));
    }
    let k = target_mass / mass;
    Density::new(grid, shape.into_iter().map(|v| v * k).collect())
}

/// Discrete Dirac of the given weight at node `k`.
pub fn dirac(grid: Arc<PhenotypeGrid>, k: usize, weight: f64) -> Result<Density> {
    if k >= grid.len() {
        return Err(Error::InvalidInput(format!("node {k} out of range")));
    }
    let mut values = vec![0.0; grid.len()];
    values[k] = weight / grid.weights()[k];
    Density::new(grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationMetrics {
    pub mass: f64,
    pub mass_outside: f64,
    /// `None` when the density has zero mass.
    pub mean: Option<f64>,
    pub variance: Option<f64>,
}

impl ConcentrationMetrics {
    pub fn defined(&self) -> bool {
        self.mean.is_some()
    }

    pub fn fraction_outside(&self) -> Option<f64> {
        (self.mass > 0.0).then(|| self.mass_outside / self.mass)
    }
}

pub fn concentration_metrics(d: &Density, x_star: f64, eps_ball: f64) -> Result<ConcentrationMetrics> {
    if !(eps_ball > 0.0) {
        return Err(Error::InvalidInput(format!(
            "ball radius must be positive, got {eps_ball}"
        )));
    }
    let grid = &d.grid;
    let mut mass = 0.0;
    let mut outside = 0.0;
    let mut first = 0.0;
    for ((&x, w), v) in grid.nodes().iter().zip(grid.weights()).zip(&d.values) {
        let m = w * v;
        mass += m;
        first += m * x;
        if (x - x_star).abs() > eps_ball {
            outside += m;
        }
    }
    if mass <= 0.0 {
        return Ok(ConcentrationMetrics {
            mass: 0.0,
            mass_outside: 0.0,
            mean: None,
            variance: None,
        });
    }
    let mean = first / mass;
    let var = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .zip(&d.values)
        .map(|((&x, w), v)| w * v * (x - mean).powi(2))
        .sum::<f64>()
        / mass;
    Ok(ConcentrationMetrics {
        mass,
        mass_outside: outside,
        mean: Some(mean),
        variance: Some(var),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_params, Preset};

    fn grid(n: usize) -> Arc<PhenotypeGrid> {
        PhenotypeGrid::shared(n).unwrap()
    }

    #[test]
    fn weights_sum_to_one_and_nodes_increase() {
        for n in [3, 4, 101, 201, 1000] {
            let g = PhenotypeGrid::uniform(n).unwrap();
            let s: f64 = g.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-13, "n = {n}: {s}");
            assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
            assert_eq!(g.nodes()[0], 0.0);
            assert_eq!(*g.nodes().last().unwrap(), 1.0);
        }
        assert!(PhenotypeGrid::uniform(2).is_err());
    }

    #[test]
    fn constant_density_has_unit_mass() {
        let d = Density::constant(grid(57), 1.0).unwrap();
        assert!((total_mass(&d) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reference_initial_masses() {
        let g = grid(201);
        let h = gaussian_init(g.clone(), 0.5, 0.1, 2.7).unwrap();
        let c = gaussian_init(g.clone(), 0.5, 0.1, 0.5).unwrap();
        assert!((total_mass(&h) / 2.7 - 1.0).abs() < 1e-12);
        assert!((total_mass(&c) / 0.5 - 1.0).abs() < 1e-12);
        assert_eq!(h.argmax(), 100);
        let off = gaussian_init(g.clone(), 0.33, 0.02, 1.0).unwrap();
        assert_eq!(off.argmax(), g.nearest(0.33));
    }

    #[test]
    fn dirac_mass_is_its_weight() {
        let g = grid(101);
        for k in [0, 37, 100] {
            let d = dirac(g.clone(), k, 1.7).unwrap();
            assert!((total_mass(&d) - 1.7).abs() < 1e-14);
            let m = concentration_metrics(&d, g.nodes()[k], 0.01).unwrap();
            assert_eq!(m.mass_outside, 0.0);
            assert!(m.variance.unwrap().abs() < 1e-28);
        }
    }

    #[test]
    fn weighted_masses_of_constant_density() {
        let g = grid(201);
        let d = Density::constant(g, 1.0).unwrap();
        let one_minus_x = RateFn::new(
            crate::model::RateShape::Linear {
                scale: 1.0,
                slope: 1.0,
            },
            crate::model::Monotonicity::Decreasing,
        );
        assert!((weighted_mass(&d, &one_minus_x) - 0.5).abs() < 1e-14);
        let (s, r) = sensitive_resistant(&d);
        assert!((s - 0.5).abs() < 1e-14 && (r - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mass_outside_ball_of_constant_density() {
        let d = Density::constant(grid(201), 1.0).unwrap();
        let m = concentration_metrics(&d, 0.5, 0.25).unwrap();
        // nodes at 0.25 and 0.75 are inside the closed ball
        assert!((m.mass_outside - 0.5).abs() < 1e-2, "{}", m.mass_outside);
        let d = Density::constant(grid(2001), 1.0).unwrap();
        let m = concentration_metrics(&d, 0.5, 0.25).unwrap();
        assert!((m.mass_outside - 0.5).abs() < 1e-3);
    }

    #[test]
    fn narrower_gaussian_concentrates_more() {
        let g = grid(201);
        let wide = gaussian_init(g.clone(), 0.5, 0.1, 1.0).unwrap();
        let narrow = gaussian_init(g, 0.5, 0.01, 1.0).unwrap();
        let mw = concentration_metrics(&wide, 0.5, 0.2).unwrap();
        let mn = concentration_metrics(&narrow, 0.5, 0.2).unwrap();
        // independent check: Gaussian tail of exp(-y²/eps) beyond 0.2
        let tail = |eps: f64| {
            let n = 200_000;
            let h = 1.0 / n as f64;
            let (mut inside, mut all) = (0.0, 0.0);
            for i in 0..=n {
                let x = i as f64 * h;
                let w = if i == 0 || i == n { 0.5 * h } else { h };
                let v = (-(x - 0.5f64).powi(2) / eps).exp() * w;
                all += v;
                if (x - 0.5).abs() <= 0.2 {
                    inside += v;
                }
            }
            1.0 - inside / all
        };
        assert!(mn.mass_outside < mw.mass_outside);
        assert!((mw.mass_outside - tail(0.1)).abs() < 0.01);
        assert!((mn.mass_outside - tail(0.01)).abs() < 0.01);
    }

    #[test]
    fn zero_mass_metrics_are_undefined() {
        let d = Density::zeros(grid(11));
        let m = concentration_metrics(&d, 0.5, 0.1).unwrap();
        assert!(!m.defined());
        assert!(m.fraction_outside().is_none());
        assert!(concentration_metrics(&d, 0.5, 0.0).is_err());
    }

    #[test]
    fn trapezoid_richardson_ratio_on_proliferation_rate() {
        let r_h = reference_params(Preset::Modified).r_h;
        let exact = 1.5 * std::f64::consts::FRAC_PI_4;
        let err = |n: usize| {
            let g = PhenotypeGrid::uniform(n).unwrap();
            (g.integrate_fn(|x| r_h.eval(x)) - exact).abs()
        };
        let ratio = err(101) / err(201);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn rejects_negative_values() {
        assert!(Density::new(grid(3), vec![0.0, -1.0, 0.0]).is_err());
        assert!(Density::new(grid(3), vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn csv_has_header() {
        let d = Density::constant(grid(3), 2.0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("x,value\n0,"));
        assert_eq!(s.lines().count(), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mass_is_linear(a in 0.0f64..10.0, b in 0.0f64..10.0,
                              vals in proptest::collection::vec(0.0f64..5.0, 21),
                              c in 0.0f64..1.0, eps in 0.01f64..1.0) {
                let g = grid(21);
                let d1 = Density::new(g.clone(), vals).unwrap();
                let d2 = gaussian_init(g, c, eps, 1.3).unwrap();
                let lhs = total_mass(&d1.combine(a, &d2, b).unwrap());
                let rhs = a * total_mass(&d1) + b * total_mass(&d2);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }

            #[test]
            fn sensitive_plus_resistant_is_total(vals in proptest::collection::vec(0.0f64..5.0, 31)) {
                let d = Density::new(grid(31), vals).unwrap();
                let (s, r) = sensitive_resistant(&d);
                prop_assert!((s + r - total_mass(&d)).abs() <= 1e-12 * (1.0 + total_mass(&d)));
            }
        }
    }
}
