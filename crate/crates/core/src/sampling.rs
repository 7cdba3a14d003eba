//! Grid sampling of layer processes, constraint checks, rejection sampling of
//! the constrained laws and Monte Carlo constraint probabilities.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::kernels::{fd_matrix, grid_gram, FdOperator, GramMatrix, KernelFamily, KernelSpec};
use crate::linalg::jittered_cholesky;
use crate::rng::{child_rng, rng_from_seed, Rng};

/// Largest diagonal jitter tried by Cholesky samplers, relative to `trace/m`.
pub const MAX_RELATIVE_JITTER: f64 = 1e-8;

/// Default number of fine sub-cells per grid cell for Riemann–Liouville paths.
pub const RL_REFINEMENT: usize = 8;

#[inline]
fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// A sampler of one centered Gaussian process on the nodes of a grid.
///
/// Every variant is a fixed linear map of a standard normal vector, which is
/// what the pCN proposals rely on.
#[derive(Clone, Debug)]
pub enum ProcessSampler {
    /// `(I^N B)(t+1) + Σ_{ℓ≤N} X_ℓ (t+1)^ℓ/ℓ!` from Brownian increments on the grid.
    IntegratedBrownian { order: usize, grid: GridSpec, scale: f64 },
    /// Discretized `∫_0^{t+1} (t+1-s)^{α-1/2} dB(s)` on a refined grid plus
    /// polynomial terms of degree `0..=floor(α)+1`.
    RiemannLiouville {
        alpha: f64,
        grid: GridSpec,
        refine: usize,
        /// Cell-averaged kernel weights indexed by lag in fine cells.
        lag_weights: Vec<f64>,
        scale: f64,
    },
    /// Lower Cholesky factor of a Gram matrix; `None` for the zero process.
    Cholesky {
        grid: GridSpec,
        factor: Option<DMatrix<f64>>,
        jitter: f64,
    },
}

impl ProcessSampler {
    /// The natural sampler for a kernel: path constructions for the
    /// one-dimensional families, Cholesky for Matérn.
    pub fn for_kernel(kernel: &KernelSpec, grid: &GridSpec) -> Result<Self> {
        kernel.validate()?;
        if grid.dim() != kernel.input_dim {
            return Err(Error::DimensionMismatch {
                expected: kernel.input_dim,
                got: grid.dim(),
            });
        }
        let scale = kernel.variance.sqrt();
        match kernel.family {
            KernelFamily::IntegratedBrownian { order } => Ok(Self::IntegratedBrownian {
                order,
                grid: *grid,
                scale,
            }),
            KernelFamily::RiemannLiouville { alpha } => {
                Self::riemann_liouville(alpha, grid, RL_REFINEMENT, kernel.variance)
            }
            KernelFamily::Matern { .. } => Self::from_gram(&grid_gram(kernel, grid)?, grid),
        }
    }

    pub fn riemann_liouville(alpha: f64, grid: &GridSpec, refine: usize, variance: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if refine == 0 {
            return Err(invalid("refine", "refinement factor must be positive"));
        }
        if grid.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: grid.dim(),
            });
        }
        let fine_cells = (grid.points_per_axis() - 1) * refine;
        let hf = 2.0 / fine_cells as f64;
        let g1 = alpha + 0.5;
        // (1/hf) ∫ over the fine cell at lag k of (t-s)^{α-1/2} ds
        let lag_weights = (0..fine_cells)
            .map(|k| {
                let k = k as f64;
                hf.powf(alpha - 0.5) * ((k + 1.0).powf(g1) - k.powf(g1)) / g1
            })
            .collect();
        Ok(Self::RiemannLiouville {
            alpha,
            grid: *grid,
            refine,
            lag_weights,
            scale: variance.sqrt(),
        })
    }

    /// Cholesky sampler for an arbitrary Gram matrix over the nodes of `grid`.
    pub fn from_gram(gram: &GramMatrix, grid: &GridSpec) -> Result<Self> {
        if gram.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: gram.len(),
            });
        }
        if gram.entries.iter().all(|&v| v == 0.0) {
            return Ok(Self::Cholesky {
                grid: *grid,
                factor: None,
                jitter: 0.0,
            });
        }
        let (chol, jitter) = jittered_cholesky(&gram.entries, MAX_RELATIVE_JITTER)?;
        Ok(Self::Cholesky {
            grid: *grid,
            factor: Some(chol.l()),
            jitter,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        match self {
            Self::IntegratedBrownian { grid, .. }
            | Self::RiemannLiouville { grid, .. }
            | Self::Cholesky { grid, .. } => grid,
        }
    }

    /// Length of the standard normal vector consumed by one draw.
    pub fn noise_len(&self) -> usize {
        match self {
            Self::IntegratedBrownian { order, grid, .. } => grid.len() - 1 + order + 1,
            Self::RiemannLiouville {
                alpha, lag_weights, ..
            } => lag_weights.len() + alpha.floor() as usize + 2,
            Self::Cholesky { grid, .. } => grid.len(),
        }
    }

    /// Map a standard normal vector to a path.
    pub fn transform(&self, noise: &[f64], out: &mut [f64]) {
        debug_assert_eq!(noise.len(), self.noise_len());
        match self {
            Self::IntegratedBrownian { order, grid, scale } => {
                let channels = ibm_channels(*order, grid, noise);
                out.copy_from_slice(&channels[*order]);
                add_polynomial(out, grid, &noise[grid.len() - 1..]);
                out.iter_mut().for_each(|v| *v *= scale);
            }
            Self::RiemannLiouville {
                grid,
                refine,
                lag_weights,
                scale,
                ..
            } => {
                let fine_cells = lag_weights.len();
                let hf_sqrt = (2.0 / fine_cells as f64).sqrt();
                let db = &noise[..fine_cells];
                for (i, o) in out.iter_mut().enumerate() {
                    let end = i * refine;
                    let mut acc = 0.0;
                    for k in 0..end {
                        acc += lag_weights[k] * db[end - 1 - k];
                    }
                    *o = acc * hf_sqrt;
                }
                add_polynomial(out, grid, &noise[fine_cells..]);
                out.iter_mut().for_each(|v| *v *= scale);
            }
            Self::Cholesky { factor, .. } => match factor {
                None => out.iter_mut().for_each(|v| *v = 0.0),
                Some(l) => {
                    let n = out.len();
                    for (i, o) in out.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..=i.min(n - 1) {
                            acc += l[(i, j)] * noise[j];
                        }
                        *o = acc;
                    }
                }
            },
        }
    }

    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.noise_len()).map(|_| normal(rng)).collect()
    }

    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let noise = self.draw_noise(rng);
        self.transform(&noise, out);
    }

    pub fn draw(&self, rng: &mut Rng) -> GridFunction {
        let mut values = vec![0.0; self.grid().len()];
        self.draw_into(rng, &mut values);
        GridFunction::from_raw(*self.grid(), values)
    }
}

/// Adds `Σ_ℓ X_ℓ (t+1)^ℓ/ℓ!` with `X_ℓ = coeffs[ℓ]`.
fn add_polynomial(out: &mut [f64], grid: &GridSpec, coeffs: &[f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let a = grid.coord(i) + 1.0;
        let mut pow = 1.0;
        for (l, x) in coeffs.iter().enumerate() {
            *o += x * pow / factorial(l);
            pow *= a;
        }
    }
}

/// Brownian motion on the grid and its first `order` cumulative trapezoid
/// integrals. Channel `k` holds `I^k B`.
fn ibm_channels(order: usize, grid: &GridSpec, noise: &[f64]) -> Vec<Vec<f64>> {
    let m = grid.points_per_axis();
    let h = grid.mesh();
    let sh = h.sqrt();
    let mut b = vec![0.0; m];
    for i in 1..m {
        b[i] = b[i - 1] + sh * noise[i - 1];
    }
    let mut channels = vec![b];
    for k in 0..order {
        let prev = &channels[k];
        let mut next = vec![0.0; m];
        for i in 1..m {
            next[i] = next[i - 1] + 0.5 * h * (prev[i - 1] + prev[i]);
        }
        channels.push(next);
    }
    channels
}

/// One centered Gaussian draw with covariance `gram` over the nodes of `grid`.
pub fn sample_gp(gram: &GramMatrix, grid: &GridSpec, seed: u64) -> Result<GridFunction> {
    let sampler = ProcessSampler::from_gram(gram, grid)?;
    Ok(sampler.draw(&mut rng_from_seed(seed)))
}

/// One integrated Brownian path of order `order` on a one-dimensional grid.
pub fn sample_ibm_path(order: usize, grid: &GridSpec, seed: u64) -> Result<GridFunction> {
    let sampler = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(order), grid)?;
    Ok(sampler.draw(&mut rng_from_seed(seed)))
}

/// Integrated Brownian path together with its lower-order channels
/// `I^k B`, `k = 0..=order`, without the polynomial terms.
pub fn sample_ibm_channels(order: usize, grid: &GridSpec, seed: u64) -> Result<Vec<GridFunction>> {
    if grid.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: grid.dim(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let noise: Vec<f64> = (0..grid.len() - 1).map(|_| normal(&mut rng)).collect();
    Ok(ibm_channels(order, grid, &noise)
        .into_iter()
        .map(|c| GridFunction::from_raw(*grid, c))
        .collect())
}

/// One Riemann–Liouville path with `refine` fine sub-cells per grid cell.
pub fn sample_rl_path(alpha: f64, grid: &GridSpec, refine: usize, seed: u64) -> Result<GridFunction> {
    let sampler = ProcessSampler::riemann_liouville(alpha, grid, refine, 1.0)?;
    Ok(sampler.draw(&mut rng_from_seed(seed)))
}

/// Constraints and processes of one layer `h`: `d_out` independent components
/// on `[-1,1]^{d_in}`.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub kernels: Vec<KernelSpec>,
    /// `|Z_{h,i}| ≤ 1`, active for every layer but the last.
    pub value_bound_active: bool,
    /// `|∂Z_{h,i}/∂x_j| ≤ K_{h,i,j}` as a `d_out × d_in` table, active from
    /// the second layer on.
    pub deriv_bounds: Option<Vec<Vec<f64>>>,
    pub grid: GridSpec,
}

impl LayerSpec {
    pub fn new(
        kernels: Vec<KernelSpec>,
        d_in: usize,
        value_bound_active: bool,
        deriv_bounds: Option<Vec<Vec<f64>>>,
        grid: GridSpec,
    ) -> Result<Self> {
        let spec = Self {
            d_in,
            d_out: kernels.len(),
            kernels,
            value_bound_active,
            deriv_bounds,
            grid,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.kernels.len() != self.d_out {
            return Err(invalid("kernels", "one kernel per output component is required"));
        }
        if self.grid.dim() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: self.grid.dim(),
            });
        }
        for k in &self.kernels {
            k.validate()?;
            if k.input_dim != self.d_in {
                return Err(Error::DimensionMismatch {
                    expected: self.d_in,
                    got: k.input_dim,
                });
            }
        }
        if let Some(bounds) = &self.deriv_bounds {
            if bounds.len() != self.d_out || bounds.iter().any(|r| r.len() != self.d_in) {
                return Err(invalid("deriv_bounds", "table must be d_out × d_in"));
            }
            if bounds.iter().flatten().any(|&k| !(k > 0.0)) {
                return Err(invalid("deriv_bounds", "bounds must be positive"));
            }
            if let Some(k) = self.kernels.iter().find(|k| !k.has_differentiable_paths()) {
                return Err(invalid(
                    "kernels",
                    format!("derivative bounds need differentiable paths, got {:?}", k.family),
                ));
            }
        }
        Ok(())
    }

    pub fn samplers(&self) -> Result<Vec<ProcessSampler>> {
        self.kernels
            .iter()
            .map(|k| ProcessSampler::for_kernel(k, &self.grid))
            .collect()
    }

    pub fn fd_operators(&self) -> Result<Vec<FdOperator>> {
        (0..self.d_in).map(|j| fd_matrix(&self.grid, j)).collect()
    }

    /// The same constraints on another grid.
    pub fn on_grid(&self, grid: GridSpec) -> Self {
        Self { grid, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Violation {
    Value { node: usize, value: f64 },
    Derivative { axis: usize, node: usize, value: f64, bound: f64 },
}

/// Outcome of a constraint check with the worst offending node.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintReport {
    pub passed: bool,
    pub max_abs_value: f64,
    pub max_abs_derivative: Vec<f64>,
    pub violations: Vec<Violation>,
}

/// Checks value and derivative bounds of component `component` on the grid.
pub fn check_constraints(f: &GridFunction, spec: &LayerSpec, component: usize) -> ConstraintReport {
    let values = f.values();
    let (node, max_abs) = values
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    let mut violations = Vec::new();
    if spec.value_bound_active && max_abs > 1.0 {
        violations.push(Violation::Value {
            node,
            value: values[node],
        });
    }
    let mut max_abs_derivative = Vec::new();
    if let Some(bounds) = &spec.deriv_bounds {
        for (axis, &bound) in bounds[component].iter().enumerate() {
            let fd = fd_matrix(f.grid(), axis).expect("layer grid has at least 3 points per axis");
            let d = fd.apply(values);
            let (node, worst) = d
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
            max_abs_derivative.push(worst);
            if worst > bound {
                violations.push(Violation::Derivative {
                    axis,
                    node,
                    value: d[node],
                    bound,
                });
            }
        }
    }
    ConstraintReport {
        passed: violations.is_empty(),
        max_abs_value: max_abs,
        max_abs_derivative,
        violations,
    }
}

/// Allocation-light pass/fail check used inside sampling loops.
pub(crate) fn passes(values: &[f64], spec: &LayerSpec, component: usize, fds: &[FdOperator]) -> bool {
    if spec.value_bound_active && values.iter().any(|v| v.abs() > 1.0) {
        return false;
    }
    if let Some(bounds) = &spec.deriv_bounds {
        for (fd, &bound) in fds.iter().zip(&bounds[component]) {
            if fd.sup_norm(values) > bound {
                return false;
            }
        }
    }
    true
}

/// One constrained draw of every component of a layer.
#[derive(Clone, Debug)]
pub struct LayerSample {
    pub components: Vec<GridFunction>,
    /// Draws spent per component, including the accepted one.
    pub attempts: Vec<usize>,
}

/// Rejection sampler of the constrained law of one component.
pub(crate) fn rejection_sample_component(
    sampler: &ProcessSampler,
    spec: &LayerSpec,
    component: usize,
    fds: &[FdOperator],
    rng: &mut Rng,
    max_attempts: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut values = vec![0.0; spec.grid.len()];
    for attempt in 1..=max_attempts {
        sampler.draw_into(rng, &mut values);
        if passes(&values, spec, component, fds) {
            return Ok((values, attempt));
        }
    }
    Err(Error::BudgetExhausted {
        attempts: max_attempts,
        acceptance: 0.0,
    })
}

/// Draws every component of `spec` from its constrained law by independent
/// rejection. Each component has its own budget of `max_attempts` draws.
pub fn rejection_sample_layer(spec: &LayerSpec, seed: u64, max_attempts: usize) -> Result<LayerSample> {
    if max_attempts == 0 {
        return Err(invalid("max_attempts", "must be at least 1"));
    }
    spec.validate()?;
    let samplers = spec.samplers()?;
    let fds = spec.fd_operators()?;
    let mut rng = rng_from_seed(seed);
    let mut components = Vec::with_capacity(spec.d_out);
    let mut attempts = Vec::with_capacity(spec.d_out);
    for (i, s) in samplers.iter().enumerate() {
        let (values, n) = rejection_sample_component(s, spec, i, &fds, &mut rng, max_attempts)?;
        components.push(GridFunction::from_raw(spec.grid, values));
        attempts.push(n);
    }
    Ok(LayerSample {
        components,
        attempts,
    })
}

/// A Monte Carlo proportion with its 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbabilityEstimate {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
    pub hits: usize,
    pub n: usize,
}

impl ProbabilityEstimate {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let (lo, hi) = wilson_interval(hits, n, 1.959_963_984_540_054);
        Self {
            p: hits as f64 / n as f64,
            lo,
            hi,
            hits,
            n,
        }
    }

    /// Binomial standard error of the proportion.
    pub fn se(&self) -> f64 {
        (self.p * (1.0 - self.p) / self.n as f64).sqrt()
    }
}

pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Draws per parallel chunk; fixed so results do not depend on thread count.
pub(crate) const CHUNK: usize = 1000;

/// Counts draws of `sampler` accepted by `accept`, in parallel chunks with
/// counter-derived seeds.
pub fn count_hits(
    sampler: &ProcessSampler,
    n: usize,
    seed: u64,
    accept: impl Fn(&[f64]) -> bool + Sync,
) -> usize {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let mut values = vec![0.0; sampler.grid().len()];
            let len = CHUNK.min(n - c * CHUNK);
            (0..len)
                .filter(|_| {
                    sampler.draw_into(&mut rng, &mut values);
                    accept(&values)
                })
                .count()
        })
        .sum()
}

/// Plain Monte Carlo probability that component `component` satisfies the
/// constraints of `spec`.
pub fn estimate_constraint_probability(
    spec: &LayerSpec,
    component: usize,
    n_mc: usize,
    seed: u64,
) -> Result<ProbabilityEstimate> {
    spec.validate()?;
    if component >= spec.d_out {
        return Err(invalid("component", format!("layer has {} components", spec.d_out)));
    }
    let sampler = ProcessSampler::for_kernel(&spec.kernels[component], &spec.grid)?;
    estimate_constraint_probability_with(&sampler, spec, component, n_mc, seed)
}

/// As [`estimate_constraint_probability`] with an explicit process sampler.
pub fn estimate_constraint_probability_with(
    sampler: &ProcessSampler,
    spec: &LayerSpec,
    component: usize,
    n_mc: usize,
    seed: u64,
) -> Result<ProbabilityEstimate> {
    if n_mc < 100 {
        return Err(invalid("n_mc", "at least 100 draws are required"));
    }
    let fds = spec.fd_operators()?;
    let hits = count_hits(sampler, n_mc, seed, |v| passes(v, spec, component, &fds));
    Ok(ProbabilityEstimate::from_counts(hits, n_mc))
}

/// Pass/fail agreement between a grid with `m` and one with `2m-1` nodes
/// per axis, on paths drawn on the fine grid (the coarse nodes are nested).
pub fn refinement_agreement(spec: &LayerSpec, component: usize, n: usize, seed: u64) -> Result<f64> {
    let fine = spec.grid.refined(2)?;
    let fine_spec = spec.on_grid(fine);
    let sampler = ProcessSampler::for_kernel(&spec.kernels[component], &fine)?;
    let coarse_fds = spec.fd_operators()?;
    let fine_fds = fine_spec.fd_operators()?;
    let coarse_index: Vec<usize> = (0..spec.grid.len())
        .map(|k| {
            let idx: Vec<usize> = spec.grid.multi_index(k).into_iter().map(|i| 2 * i).collect();
            fine.flat_index(&idx)
        })
        .collect();
    let agree = count_hits(&sampler, n, seed, |v| {
        let coarse: Vec<f64> = coarse_index.iter().map(|&k| v[k]).collect();
        passes(&coarse, spec, component, &coarse_fds) == passes(v, &fine_spec, component, &fine_fds)
    });
    Ok(agree as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, ibm_kernel, rl_kernel};

    fn grid1(m: usize) -> GridSpec {
        GridSpec::new(1, m).unwrap()
    }

    #[test]
    fn zero_gram_gives_zero_draw() {
        let g = grid1(5);
        let gm = GramMatrix {
            points: g.nodes(),
            entries: DMatrix::zeros(5, 5),
            jitter: 0.0,
        };
        assert!(sample_gp(&gm, &g, 3).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samplers_are_deterministic() {
        let g = grid1(21);
        let gm = grid_gram(&KernelSpec::integrated_brownian(1), &g).unwrap();
        assert_eq!(sample_gp(&gm, &g, 9).unwrap(), sample_gp(&gm, &g, 9).unwrap());
        assert_eq!(sample_ibm_path(2, &g, 9).unwrap(), sample_ibm_path(2, &g, 9).unwrap());
        assert_eq!(
            sample_rl_path(0.7, &g, 8, 9).unwrap(),
            sample_rl_path(0.7, &g, 8, 9).unwrap()
        );
    }

    #[test]
    fn paths_start_at_the_constant_term() {
        let g = grid1(11);
        for order in 0..3 {
            let s = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(order), &g).unwrap();
            let noise = s.draw_noise(&mut rng_from_seed(4));
            let mut out = vec![0.0; 11];
            s.transform(&noise, &mut out);
            assert_eq!(out[0], noise[10]);
        }
        let s = ProcessSampler::riemann_liouville(1.3, &g, 8, 1.0).unwrap();
        let noise = s.draw_noise(&mut rng_from_seed(4));
        let mut out = vec![0.0; 11];
        s.transform(&noise, &mut out);
        assert_eq!(out[0], noise[80]);
    }

    // Empirical covariance of n draws at a pair of nodes and its MC standard error.
    fn empirical_cov(sampler: &ProcessSampler, i: usize, j: usize, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = rng_from_seed(seed);
        let mut v = vec![0.0; sampler.grid().len()];
        let mut prods = Vec::with_capacity(n);
        for _ in 0..n {
            sampler.draw_into(&mut rng, &mut v);
            prods.push(v[i] * v[j]);
        }
        let mean = prods.iter().sum::<f64>() / n as f64;
        let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn cholesky_draws_match_gram() {
        let g = grid1(5);
        let gm = grid_gram(&KernelSpec::integrated_brownian(0), &g).unwrap();
        let s = ProcessSampler::from_gram(&gm, &g).unwrap();
        for (i, j) in [(0, 0), (2, 2), (1, 3), (4, 4)] {
            let (c, se) = empirical_cov(&s, i, j, 100_000, 17);
            let want = gm.entries[(i, j)];
            assert!((c - want).abs() <= 3.0 * se, "({i},{j}) {c} vs {want} ± {se}");
        }
    }

    #[test]
    fn ibm_path_variance_matches_kernel() {
        let g = grid1(201);
        let s = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(0), &g).unwrap();
        let (c, se) = empirical_cov(&s, 100, 100, 100_000, 5);
        assert!((c - 2.0).abs() <= 3.0 * se, "{c} ± {se}");
        let s = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(1), &g).unwrap();
        let (c, se) = empirical_cov(&s, 100, 150, 100_000, 6);
        let want = ibm_kernel(1, 0.0, 0.5);
        assert!((c - want).abs() <= 3.0 * se, "{c} vs {want} ± {se}");
    }

    #[test]
    fn rl_path_covariance_matches_kernel() {
        let g = grid1(201);
        let s = ProcessSampler::riemann_liouville(0.5, &g, 8, 1.0).unwrap();
        let (c, se) = empirical_cov(&s, 100, 100, 100_000, 7);
        assert!((c - 3.0).abs() <= 3.0 * se, "{c} ± {se}");
        for alpha in [0.3, 1.4] {
            let s = ProcessSampler::riemann_liouville(alpha, &g, 8, 1.0).unwrap();
            let (c, se) = empirical_cov(&s, 100, 150, 100_000, 8);
            let want = rl_kernel(alpha, 0.0, 0.5).unwrap();
            assert!((c - want).abs() <= 3.0 * se, "alpha={alpha}: {c} vs {want} ± {se}");
        }
    }

    #[test]
    fn derivative_channel_tracks_brownian_motion() {
        // The fd derivative of I B equals B up to the trapezoid error, which
        // shrinks with the mesh.
        let mut errs = Vec::new();
        for m in [201, 801] {
            let g = grid1(m);
            let ch = sample_ibm_channels(1, &g, 21).unwrap();
            let d = fd_matrix(&g, 0).unwrap().apply(ch[1].values());
            let interior = (1..m - 1).map(|i| (d[i] - ch[0].values()[i]).abs()).fold(0.0, f64::max);
            errs.push(interior);
        }
        assert!(errs[0] < 0.2 && errs[1] < errs[0], "{errs:?}");
    }

    fn layer(kernel: KernelSpec, value: bool, k: Option<f64>) -> LayerSpec {
        LayerSpec::new(vec![kernel], 1, value, k.map(|k| vec![vec![k]]), grid1(201)).unwrap()
    }

    #[test]
    fn constraint_check_examples() {
        let spec = layer(KernelSpec::integrated_brownian(1), true, Some(1.0));
        let g = spec.grid;
        assert!(check_constraints(&GridFunction::zeros(g), &spec, 0).passed);
        let r = check_constraints(&GridFunction::from_fn(g, |_| 1.5), &spec, 0);
        assert!(!r.passed && matches!(r.violations[0], Violation::Value { .. }));
        let r = check_constraints(&GridFunction::from_fn(g, |x| 2.0 * x[0]), &spec, 0);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::Derivative { .. })));
        // the value 2 at t=1 is also out of bounds
        assert!(!r.passed);
        let no_value = layer(KernelSpec::integrated_brownian(1), false, Some(1.0));
        let r = check_constraints(&GridFunction::from_fn(g, |x| 2.0 * x[0]), &no_value, 0);
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn derivative_bounds_need_smooth_paths() {
        let bad = LayerSpec::new(
            vec![KernelSpec::integrated_brownian(0)],
            1,
            true,
            Some(vec![vec![1.0]]),
            grid1(51),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn tiny_variance_is_almost_always_accepted() {
        let spec = layer(KernelSpec::integrated_brownian(1).with_variance(1e-6), true, Some(1.0));
        let est = estimate_constraint_probability(&spec, 0, 10_000, 1).unwrap();
        assert!(est.p >= 0.99, "{est:?}");
        let s = rejection_sample_layer(&spec, 2, 10).unwrap();
        assert!(check_constraints(&s.components[0], &spec, 0).passed);
    }

    #[test]
    fn rejected_samples_pass() {
        let spec = layer(KernelSpec::integrated_brownian(1), true, Some(2.0));
        for seed in 0..20 {
            let s = rejection_sample_layer(&spec, seed, 100_000).unwrap();
            assert!(check_constraints(&s.components[0], &spec, 0).passed);
            assert!(s.attempts[0] >= 1);
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let spec = layer(KernelSpec::integrated_brownian(1).with_variance(1e6), true, None);
        assert!(matches!(
            rejection_sample_layer(&spec, 0, 3),
            Err(Error::BudgetExhausted { attempts: 3, .. })
        ));
    }

    #[test]
    fn constant_process_probability_is_gaussian_mass() {
        // Z(t) = X_0 on all nodes: covariance identically 1.
        let g = grid1(11);
        let ones = GramMatrix {
            points: g.nodes(),
            entries: DMatrix::from_element(11, 11, 1.0),
            jitter: 0.0,
        };
        let sampler = ProcessSampler::from_gram(&ones, &g).unwrap();
        let spec = LayerSpec::new(vec![KernelSpec::integrated_brownian(0)], 1, true, None, g).unwrap();
        let est = estimate_constraint_probability_with(&sampler, &spec, 0, 100_000, 3).unwrap();
        let exact = 0.682_689_492_137_085_9;
        assert!(est.lo <= exact && exact <= est.hi, "{est:?}");
        assert!((est.p - exact).abs() < 3.0 * est.se());
        let loose = LayerSpec::new(vec![KernelSpec::integrated_brownian(0)], 1, false, None, g).unwrap();
        let est = estimate_constraint_probability_with(&sampler, &loose, 0, 1000, 3).unwrap();
        assert_eq!(est.p, 1.0);
    }

    #[test]
    fn gram_driven_and_path_samplers_agree() {
        let g = grid1(41);
        let path = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(1), &g).unwrap();
        let chol = ProcessSampler::from_gram(&gram(&KernelSpec::integrated_brownian(1), &g.nodes()).unwrap(), &g).unwrap();
        for node in [5, 20, 40] {
            let (a, sa) = empirical_cov(&path, node, node, 100_000, 31);
            let (b, sb) = empirical_cov(&chol, node, node, 100_000, 32);
            let z = (a - b) / (sa * sa + sb * sb).sqrt();
            assert!(z.abs() <= 4.0, "node {node}: {a} vs {b}");
        }
    }
}
