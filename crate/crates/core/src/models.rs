//! Density and binary-regression link maps, divergences between them and the
//! Hellinger bound for compositions of constrained layers.

use std::path::Path;

use crate::composition::{compose_on_grid, lipschitz_bound, stack_distance, DeepGPSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::quadrature::gauss_legendre;
use crate::sampling::check_constraints;

/// Tolerance on the normalization of a density.
pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Quadrature slack allowed by [`hellinger_lipschitz_check`].
pub const HELLINGER_SLACK: f64 = 1e-6;

/// A probability density on `[-1,1]^d` given by its node values; the
/// multilinear interpolant integrates to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOnCube {
    f: GridFunction,
}

impl DensityOnCube {
    /// Validates nonnegative values and unit mass. Zeros are allowed so that
    /// densities vanishing at the boundary can be represented; densities
    /// built from a latent function are strictly positive.
    pub fn new(f: GridFunction) -> Result<Self> {
        if let Some(k) = f.values().iter().position(|&v| v < 0.0) {
            return Err(invalid("density", format!("negative value at node {k}")));
        }
        let mass = f.integrate();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(invalid("density", format!("integrates to {mass}, not 1")));
        }
        Ok(Self { f })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalize(f: GridFunction) -> Result<Self> {
        let mass = f.integrate();
        if !(mass > 0.0) {
            return Err(invalid("density", "mass must be positive"));
        }
        Self::new(f.map(|v| v / mass))
    }

    pub fn uniform(grid: GridSpec) -> Self {
        let v = 0.5f64.powi(grid.dim() as i32);
        Self {
            f: GridFunction::from_fn(grid, |_| v),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.f.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.f.values()
    }

    pub fn as_grid_function(&self) -> &GridFunction {
        &self.f
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.f.eval(x)
    }

    pub fn min(&self) -> f64 {
        self.values().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        self.f.to_csv(true)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (f, normalized) = GridFunction::from_csv(text)?;
        if !normalized {
            return Err(invalid("density", "missing `# normalized` marker"));
        }
        Self::new(f)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// A regression function `t ↦ P(V = 1 | U = t)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryRegression {
    f: GridFunction,
}

impl BinaryRegression {
    pub fn new(f: GridFunction) -> Result<Self> {
        if let Some(k) = f.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("regression", format!("value outside [0,1] at node {k}")));
        }
        Ok(Self { f })
    }

    pub fn grid(&self) -> &GridSpec {
        self.f.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.f.values()
    }

    pub fn as_grid_function(&self) -> &GridFunction {
        &self.f
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.f.eval(x)
    }

    pub fn to_csv(&self) -> String {
        self.f.to_csv(false)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Self::new(GridFunction::from_csv(text)?.0)
    }
}

/// `p = e^z / ∫ e^z`, computed after subtracting `max z`.
pub fn density_from_latent(z: &GridFunction) -> Result<DensityOnCube> {
    let max = z.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(invalid("z", "latent values must be finite"));
    }
    DensityOnCube::normalize(z.map(|v| (v - max).exp()))
}

/// The logistic link `e^x / (1 + e^x)`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Ψ(x)` without cancellation.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn classify_from_latent(z: &GridFunction) -> BinaryRegression {
    BinaryRegression { f: z.map(logistic) }
}

/// Tensor Gauss–Legendre rule on every grid cell, applied to the multilinear
/// interpolants of `fields`. `g` receives the interpolated field values.
pub fn integrate_interpolants(grid: &GridSpec, fields: &[&[f64]], g: impl Fn(&[f64]) -> f64) -> f64 {
    let d = grid.dim();
    let m = grid.points_per_axis();
    let order = match d {
        1 => 8,
        2 => 6,
        _ => 4,
    };
    let (gx, gw) = gauss_legendre(order);
    let h = grid.mesh();
    let corners = 1usize << d;
    let offsets: Vec<usize> = (0..corners)
        .map(|b| (0..d).filter(|a| b >> a & 1 == 1).map(|a| grid.stride(a)).sum())
        .collect();
    // Local tensor nodes: weight and per-corner interpolation coefficients.
    let n_local = order.pow(d as u32);
    let mut local: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n_local);
    for k in 0..n_local {
        let mut idx = k;
        let mut u = vec![0.0; d];
        let mut w = 1.0;
        for a in (0..d).rev() {
            let q = idx % order;
            idx /= order;
            u[a] = 0.5 * (gx[q] + 1.0);
            w *= 0.5 * gw[q] * h;
        }
        let coef = (0..corners)
            .map(|b| (0..d).map(|a| if b >> a & 1 == 1 { u[a] } else { 1.0 - u[a] }).product())
            .collect();
        local.push((w, coef));
    }
    let cells = (m - 1).pow(d as u32);
    let mut total = 0.0;
    let mut vals = vec![0.0; fields.len()];
    for c in 0..cells {
        let mut idx = c;
        let mut base = 0;
        for a in (0..d).rev() {
            base += (idx % (m - 1)) * grid.stride(a);
            idx /= m - 1;
        }
        for (w, coef) in &local {
            for (v, f) in vals.iter_mut().zip(fields) {
                *v = coef.iter().zip(&offsets).map(|(c, o)| c * f[base + o]).sum();
            }
            total += w * g(&vals);
        }
    }
    total
}

fn same_grid(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a != b {
        return Err(invalid("grid", "arguments live on different grids"));
    }
    Ok(())
}

/// Hellinger distance `√∫(√p − √q)²`.
pub fn hellinger(p: &DensityOnCube, q: &DensityOnCube) -> Result<f64> {
    same_grid(p.grid(), q.grid())?;
    let h2 = integrate_interpolants(p.grid(), &[p.values(), q.values()], |v| {
        let d = v[0].max(0.0).sqrt() - v[1].max(0.0).sqrt();
        d * d
    });
    Ok(h2.max(0.0).sqrt())
}

/// `∫ p log(p/q)`; infinite when `q` vanishes where `p` does not.
pub fn kl(p: &DensityOnCube, q: &DensityOnCube) -> Result<f64> {
    same_grid(p.grid(), q.grid())?;
    Ok(integrate_interpolants(p.grid(), &[p.values(), q.values()], |v| {
        if v[0] <= 0.0 {
            0.0
        } else {
            v[0] * (v[0] / v[1]).ln()
        }
    })
    .max(0.0))
}

/// `∫ p (log(p/q))²`.
pub fn v_div(p: &DensityOnCube, q: &DensityOnCube) -> Result<f64> {
    same_grid(p.grid(), q.grid())?;
    Ok(integrate_interpolants(p.grid(), &[p.values(), q.values()], |v| {
        if v[0] <= 0.0 {
            0.0
        } else {
            v[0] * (v[0] / v[1]).ln().powi(2)
        }
    }))
}

fn law_values(grid: &GridSpec, u_law: Option<&DensityOnCube>) -> Result<Vec<f64>> {
    match u_law {
        None => Ok(DensityOnCube::uniform(*grid).values().to_vec()),
        Some(u) => {
            same_grid(grid, u.grid())?;
            Ok(u.values().to_vec())
        }
    }
}

/// `‖f − g‖_{2,U}`; `u_law = None` is the uniform law on the cube.
pub fn l2_u(f: &GridFunction, g: &GridFunction, u_law: Option<&DensityOnCube>) -> Result<f64> {
    same_grid(f.grid(), g.grid())?;
    let u = law_values(f.grid(), u_law)?;
    let s = integrate_interpolants(f.grid(), &[f.values(), g.values(), &u], |v| (v[0] - v[1]).powi(2) * v[2]);
    Ok(s.max(0.0).sqrt())
}

/// Distance between the likelihoods `L_f(t, y) = f(t)^y (1 − f(t))^{1−y}` in
/// `L²(U ⊗ counting measure on {0,1})`.
pub fn likelihood_l2_u(f: &BinaryRegression, g: &BinaryRegression, u_law: Option<&DensityOnCube>) -> Result<f64> {
    same_grid(f.grid(), g.grid())?;
    let u = law_values(f.grid(), u_law)?;
    let s = integrate_interpolants(f.grid(), &[f.values(), g.values(), &u], |v| {
        let one = v[0] - v[1];
        let zero = (1.0 - v[0]) - (1.0 - v[1]);
        (one * one + zero * zero) * v[2]
    });
    Ok(s.max(0.0).sqrt())
}

/// Outcome of the Hellinger bound check for two constrained stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct HellingerReport {
    pub hellinger: f64,
    pub distance: f64,
    pub k_h: f64,
    /// `K_H ‖v − w‖∞ e^{K_H ‖v − w‖∞ / 2}`.
    pub bound: f64,
    pub holds: bool,
    /// Monitoring only: `kl / h²` and `v_div / h²` for the pair.
    pub kl_ratio: f64,
    pub v_ratio: f64,
}

fn require_constrained(spec: &DeepGPSpec, layers: &[Vec<GridFunction>]) -> Result<()> {
    if layers.len() != spec.depth() {
        return Err(Error::DimensionMismatch {
            expected: spec.depth(),
            got: layers.len(),
        });
    }
    for (h, (layer, comps)) in spec.layers.iter().zip(layers).enumerate() {
        for (i, c) in comps.iter().enumerate() {
            if !check_constraints(c, layer, i).passed {
                return Err(invalid("stack", format!("component ({},{}) violates its constraints", h + 1, i + 1)));
            }
        }
    }
    Ok(())
}

/// `h(p_{C_v}, p_{C_w}) ≤ K_H ‖v − w‖∞ e^{K_H ‖v − w‖∞/2}` up to
/// [`HELLINGER_SLACK`], for two stacks that pass all constraints.
pub fn hellinger_lipschitz_check(spec: &DeepGPSpec, v: &[Vec<GridFunction>], w: &[Vec<GridFunction>]) -> Result<HellingerReport> {
    require_constrained(spec, v)?;
    require_constrained(spec, w)?;
    let grid = spec.layers[0].grid;
    let pv = density_from_latent(&compose_on_grid(v, &grid)?)?;
    let pw = density_from_latent(&compose_on_grid(w, &grid)?)?;
    let hel = hellinger(&pv, &pw)?;
    let distance = stack_distance(v, w);
    let k_h = lipschitz_bound(spec);
    let bound = k_h * distance * (k_h * distance / 2.0).exp();
    let h2 = hel * hel;
    let ratio = |x: f64| if h2 > 0.0 { x / h2 } else { 0.0 };
    Ok(HellingerReport {
        hellinger: hel,
        distance,
        k_h,
        bound,
        holds: hel <= bound + HELLINGER_SLACK,
        kl_ratio: ratio(kl(&pv, &pw)?),
        v_ratio: ratio(v_div(&pv, &pw)?),
    })
}
