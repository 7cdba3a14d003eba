//! Covariance functions of the three layer families, Gram assembly and
//! finite-difference derivative operators.
//!
//! * Integrated Brownian motion of order `N` started at `-1` with independent
//!   Gaussian polynomial terms of degree `0..=N`.
//! * Riemann–Liouville process of index `alpha` with Gaussian polynomial
//!   terms of degree `0..=floor(alpha)+1`.
//! * Matérn with smoothness `alpha`, whose spectral density is proportional
//!   to `(1+|λ|²)^-(alpha+d/2)`.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::grid::GridSpec;
use crate::quadrature::{integrate_adaptive, GaussLegendre};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelFamily {
    IntegratedBrownian { order: usize },
    RiemannLiouville { alpha: f64 },
    Matern { alpha: f64 },
}

/// A covariance specification for one univariate layer component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub input_dim: usize,
    /// Multiplies the whole covariance. 1 for the processes as defined.
    pub variance: f64,
    /// Matérn only: `true` scales to `k(0) = 1`, `false` keeps the literal
    /// Fourier integral of the unnormalized spectral density.
    pub variance_normalization: bool,
}

impl KernelSpec {
    pub fn integrated_brownian(order: usize) -> Self {
        Self {
            family: KernelFamily::IntegratedBrownian { order },
            input_dim: 1,
            variance: 1.0,
            variance_normalization: false,
        }
    }

    pub fn riemann_liouville(alpha: f64) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::RiemannLiouville { alpha },
            input_dim: 1,
            variance: 1.0,
            variance_normalization: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn matern(alpha: f64, input_dim: usize) -> Result<Self> {
        let spec = Self {
            family: KernelFamily::Matern { alpha },
            input_dim,
            variance: 1.0,
            variance_normalization: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variance(mut self, variance: f64) -> Self {
        self.variance = variance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(invalid("variance", "must be finite and nonnegative"));
        }
        if self.input_dim == 0 {
            return Err(invalid("input_dim", "must be positive"));
        }
        match self.family {
            KernelFamily::IntegratedBrownian { .. } | KernelFamily::RiemannLiouville { .. }
                if self.input_dim != 1 =>
            {
                Err(invalid(
                    "input_dim",
                    "integrated Brownian and Riemann-Liouville kernels are one-dimensional",
                ))
            }
            KernelFamily::RiemannLiouville { alpha } | KernelFamily::Matern { alpha }
                if !(alpha > 0.0 && alpha.is_finite()) =>
            {
                Err(invalid("alpha", format!("must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether sample paths are continuously differentiable, which the
    /// derivative constraints of inner layers require.
    pub fn has_differentiable_paths(&self) -> bool {
        match self.family {
            KernelFamily::IntegratedBrownian { order } => order >= 1,
            KernelFamily::RiemannLiouville { alpha } | KernelFamily::Matern { alpha } => alpha > 1.0,
        }
    }

    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        let base = match self.family {
            KernelFamily::IntegratedBrownian { order } => ibm_kernel(order, u[0], v[0]),
            KernelFamily::RiemannLiouville { alpha } => rl_kernel_unchecked(alpha, u[0], v[0]),
            KernelFamily::Matern { alpha } => {
                let k = matern_unit(alpha, distance(u, v));
                if self.variance_normalization {
                    k
                } else {
                    k * matern_spectral_mass(alpha, self.input_dim)
                }
            }
        };
        self.variance * base
    }
}

fn distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `Σ_{ℓ=0}^{degree} (a b)^ℓ / (ℓ!)²` with `a = s+1`, `b = t+1`.
fn polynomial_part(degree: usize, a: f64, b: f64) -> f64 {
    let ab = a * b;
    let mut term = 1.0;
    let mut sum = 1.0;
    for l in 1..=degree {
        let l = l as f64;
        term *= ab / (l * l);
        sum += term;
    }
    sum
}

fn gl64() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(64))
}

/// Integral part of the integrated Brownian covariance,
/// `∫_0^{a∧b} (a-u)^N (b-u)^N du / (N!)²`; exact for `N ≤ 63`.
pub fn ibm_integral(order: usize, s: f64, t: f64) -> f64 {
    let (a, b) = (s + 1.0, t + 1.0);
    let m = a.min(b);
    if m <= 0.0 {
        return 0.0;
    }
    let n = order as i32;
    gl64().integrate(0.0, m, |u| ((a - u) * (b - u)).powi(n)) / factorial(order).powi(2)
}

/// Covariance of the `N`-fold integrated Brownian motion with Gaussian
/// polynomial terms, on `[-1,1]`.
pub fn ibm_kernel(order: usize, s: f64, t: f64) -> f64 {
    polynomial_part(order, s + 1.0, t + 1.0) + ibm_integral(order, s, t)
}

/// Integral part of the Riemann–Liouville covariance,
/// `∫_0^{a∧b} (a-u)^{α-1/2} (b-u)^{α-1/2} du`.
pub fn rl_integral(alpha: f64, s: f64, t: f64) -> f64 {
    let (a, b) = (s + 1.0, t + 1.0);
    let m = a.min(b);
    if m <= 0.0 {
        return 0.0;
    }
    let gamma = alpha - 0.5;
    let c = (a - b).abs();
    if c == 0.0 {
        return m.powf(2.0 * gamma + 1.0) / (2.0 * gamma + 1.0);
    }
    // v = m - u = m x^q with q = 1/(γ+1) absorbs the v^γ endpoint factor:
    // I = q m^{γ+1} ∫_0^1 (m x^q + c)^γ dx.
    let q = 1.0 / (gamma + 1.0);
    let f = |x: f64| (m * x.powf(q) + c).powf(gamma);
    let knee = (c / m).powf(1.0 / q).min(1.0);
    let inner = if knee > 0.0 && knee < 1.0 {
        integrate_adaptive(f, 0.0, knee, 1e-13, 0.0) + integrate_adaptive(f, knee, 1.0, 1e-13, 0.0)
    } else {
        integrate_adaptive(f, 0.0, 1.0, 1e-13, 0.0)
    };
    q * m.powf(gamma + 1.0) * inner
}

/// Number of Gaussian polynomial terms beyond the constant for index `alpha`:
/// the polynomial part has degrees `0..=floor(alpha)+1`.
pub fn rl_polynomial_degree(alpha: f64) -> usize {
    alpha.floor() as usize + 1
}

fn rl_kernel_unchecked(alpha: f64, s: f64, t: f64) -> f64 {
    polynomial_part(rl_polynomial_degree(alpha), s + 1.0, t + 1.0) + rl_integral(alpha, s, t)
}

/// Covariance of the Riemann–Liouville process with polynomial terms.
pub fn rl_kernel(alpha: f64, s: f64, t: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    Ok(rl_kernel_unchecked(alpha, s, t))
}

/// Unit-variance Matérn correlation `2^{1-ν}/Γ(ν) r^ν K_ν(r)` with `ν = alpha`.
pub fn matern_kernel(alpha: f64, u: &[f64], v: &[f64]) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(matern_unit(alpha, distance(u, v)))
}

/// `∫ e^{iλ·r}(1+|λ|²)^{-(α+d/2)} dλ` at `r = 0`, i.e. the variance of the
/// unnormalized process: `π^{d/2} Γ(α) / Γ(α+d/2)`.
pub fn matern_spectral_mass(alpha: f64, dim: usize) -> f64 {
    let half_d = dim as f64 / 2.0;
    (half_d * PI.ln() + ln_gamma(alpha) - ln_gamma(alpha + half_d)).exp()
}

fn matern_unit(nu: f64, r: f64) -> f64 {
    if r == 0.0 {
        return 1.0;
    }
    let twice = 2.0 * nu;
    if (twice - twice.round()).abs() < 1e-12 && twice.round() as i64 % 2 == 1 {
        return matern_half_integer((nu - 0.5).round() as usize, r);
    }
    ((1.0 - nu) * LN_2 - ln_gamma(nu) + nu * r.ln() + ln_bessel_k(nu, r)).exp()
}

/// Closed form for `ν = p + 1/2`:
/// `e^{-r} p!/(2p)! Σ_{i=0}^p (p+i)!/(i!(p-i)!) (2r)^{p-i}`.
fn matern_half_integer(p: usize, r: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..=p {
        sum += factorial(p + i) / (factorial(i) * factorial(p - i)) * (2.0 * r).powi((p - i) as i32);
    }
    (-r).exp() * factorial(p) / factorial(2 * p) * sum
}

/// `ln K_ν(x)` from `K_ν(x) = ∫_0^∞ exp(-x cosh t) cosh(ν t) dt`.
///
/// The integrand is analytic in a strip of half-width π/2, so the trapezoid
/// rule with step `h` has error of order `exp(-π²/h)`.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    const STEP: f64 = 0.1;
    let log_term = |t: f64| {
        let y = nu * t;
        let ln_cosh = y + (-2.0 * y).exp().ln_1p() - LN_2;
        -x * t.cosh() + ln_cosh
    };
    let mut terms = Vec::with_capacity(512);
    terms.push(log_term(0.0) + (0.5f64).ln());
    let mut k = 1;
    loop {
        let t = k as f64 * STEP;
        let lt = log_term(t);
        terms.push(lt);
        // past the peak and 40 nats below it
        let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if x * t.sinh() > nu && lt < peak - 40.0 {
            break;
        }
        k += 1;
        if k > 100_000 {
            break;
        }
    }
    let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peak + terms.iter().map(|l| (l - peak).exp()).sum::<f64>().ln() + STEP.ln()
}

/// Covariance matrix of a kernel at a list of input locations.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub points: Vec<Vec<f64>>,
    pub entries: DMatrix<f64>,
    pub jitter: f64,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.entries[(i, j)] - self.entries[(j, i)]).abs());
            }
        }
        worst
    }

    /// Block-diagonal Gram of independent components.
    pub fn block_diagonal(blocks: &[&GramMatrix]) -> GramMatrix {
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        let mut entries = DMatrix::zeros(n, n);
        let mut points = Vec::with_capacity(n);
        let mut offset = 0;
        for b in blocks {
            let k = b.len();
            entries.view_mut((offset, offset), (k, k)).copy_from(&b.entries);
            points.extend(b.points.iter().cloned());
            offset += k;
        }
        GramMatrix {
            points,
            entries,
            jitter: 0.0,
        }
    }
}

/// Assemble the Gram matrix of `kernel` at `points` (rows in parallel).
pub fn gram(kernel: &KernelSpec, points: &[Vec<f64>]) -> Result<GramMatrix> {
    kernel.validate()?;
    for p in points {
        if p.len() != kernel.input_dim {
            return Err(Error::DimensionMismatch {
                expected: kernel.input_dim,
                got: p.len(),
            });
        }
        if p.iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(invalid("points", "inputs must lie in [-1,1]^d"));
        }
    }
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| kernel.eval(&points[i], &points[j])).collect())
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        points: points.to_vec(),
        entries,
        jitter: 0.0,
    })
}

/// Gram matrix over all nodes of a grid.
pub fn grid_gram(kernel: &KernelSpec, grid: &GridSpec) -> Result<GramMatrix> {
    if grid.dim() != kernel.input_dim {
        return Err(Error::DimensionMismatch {
            expected: kernel.input_dim,
            got: grid.dim(),
        });
    }
    gram(kernel, &grid.nodes())
}

/// Finite-difference approximation of `∂/∂x_axis` on a grid: second-order
/// central differences inside, second-order one-sided differences at the
/// boundary. Exact on polynomials of degree ≤ 2 along the axis.
#[derive(Clone, Copy, Debug)]
pub struct FdOperator {
    grid: GridSpec,
    axis: usize,
}

impl FdOperator {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    /// Nonzero coefficients of row `k` as `(column, weight)`.
    pub fn row(&self, k: usize) -> [(usize, f64); 3] {
        let m = self.grid.points_per_axis();
        let stride = self.grid.stride(self.axis);
        let i = (k / stride) % m;
        let inv = 1.0 / (2.0 * self.grid.mesh());
        if i == 0 {
            [(k, -3.0 * inv), (k + stride, 4.0 * inv), (k + 2 * stride, -inv)]
        } else if i == m - 1 {
            [(k, 3.0 * inv), (k - stride, -4.0 * inv), (k - 2 * stride, inv)]
        } else {
            [(k - stride, -inv), (k + stride, inv), (k, 0.0)]
        }
    }

    pub fn apply_into(&self, values: &[f64], out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.grid.len());
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.row(k).iter().map(|&(c, w)| w * values[c]).sum();
        }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        self.apply_into(values, &mut out);
        out
    }

    /// Sup norm of the discrete derivative without allocating.
    pub fn sup_norm(&self, values: &[f64]) -> f64 {
        (0..values.len()).fold(0.0, |acc: f64, k| {
            let d: f64 = self.row(k).iter().map(|&(c, w)| w * values[c]).sum();
            acc.max(d.abs())
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let mut d = DMatrix::zeros(n, n);
        for k in 0..n {
            for (c, w) in self.row(k) {
                d[(k, c)] += w;
            }
        }
        d
    }
}

/// Finite-difference derivative operator along `axis` of `grid`.
pub fn fd_matrix(grid: &GridSpec, axis: usize) -> Result<FdOperator> {
    if grid.points_per_axis() < 3 {
        return Err(Error::GridTooCoarse {
            needed: 3,
            got: grid.points_per_axis(),
        });
    }
    if axis >= grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: axis,
        });
    }
    Ok(FdOperator { grid: *grid, axis })
}
