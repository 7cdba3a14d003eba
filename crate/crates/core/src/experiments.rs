//! Truth construction, data generation and contraction studies.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::composition::DeepGPSpec;
use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::inference::{posterior_radius, run_mcmc, Data, McmcConfig, Truth};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::models::{classify_from_latent, density_from_latent, BinaryRegression, DensityOnCube};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sampling::LayerSpec;

/// Number of terms of the lacunary series beyond the constant frequency.
pub const LACUNARY_TERMS: usize = 12;

/// Bound on `‖log p₀‖∞` for constructed truths.
pub const TRUTH_LOG_BOUND: f64 = 1.5;

/// `Σ_{k=0}^{K} 2^{-kβ} cos(2^k π t)`, a function of exact Hölder order `β`
/// for `β < 1` and the classical smoothness probe beyond.
pub fn lacunary(beta: f64, terms: usize, t: f64) -> f64 {
    (0..=terms)
        .map(|k| {
            let f = (1u64 << k) as f64;
            f.powf(-beta) * (f * std::f64::consts::PI * t).cos()
        })
        .sum()
}

/// A constructed truth: the latent `g₀ = log p₀` on a grid, its density and
/// its regression function `Ψ(g₀)`.
#[derive(Clone, Debug)]
pub struct HolderTruth {
    pub beta: f64,
    pub amplitude: f64,
    pub latent: GridFunction,
    pub density: DensityOnCube,
    pub regression: BinaryRegression,
}

/// `p₀ ∝ exp(a Σ_axes W_β(t_axis))` with the largest amplitude `a ≤ 1` keeping
/// `‖log p₀‖∞ ≤ 1.5`.
pub fn make_truth_holder(beta: f64, grid: &GridSpec) -> Result<HolderTruth> {
    make_truth_holder_with(beta, grid, LACUNARY_TERMS)
}

pub fn make_truth_holder_with(beta: f64, grid: &GridSpec, terms: usize) -> Result<HolderTruth> {
    if !(beta > 0.0) {
        return Err(invalid("beta", "must be positive"));
    }
    let w = GridFunction::from_fn(*grid, |x| x.iter().map(|&t| lacunary(beta, terms, t)).sum());
    let log_density = |a: f64| -> Result<GridFunction> {
        let p = density_from_latent(&w.map(|v| a * v))?;
        Ok(p.as_grid_function().map(f64::ln))
    };
    let fits = |a: f64| -> Result<bool> { Ok(log_density(a)?.sup_norm() <= TRUTH_LOG_BOUND) };
    if !fits(0.0)? {
        return Err(invalid("grid", "the uniform density already violates the log bound"));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    if fits(hi)? {
        lo = hi;
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if fits(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let latent = log_density(lo)?;
    let density = density_from_latent(&latent)?;
    let regression = classify_from_latent(&latent);
    Ok(HolderTruth {
        beta,
        amplitude: lo,
        latent,
        density,
        regression,
    })
}

/// Exact sampling from the multilinear interpolant of a density on
/// `[-1,1]` or `[-1,1]²`.
pub fn sample_data(p0: &DensityOnCube, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_from_seed(seed);
    let grid = *p0.grid();
    match grid.dim() {
        1 => {
            let cdf = cumulative(p0.values(), grid.mesh());
            Ok((0..n).map(|_| vec![sample_piecewise_linear(p0.values(), &cdf, grid.mesh(), &mut rng)]).collect())
        }
        2 => {
            let m = grid.points_per_axis();
            let h = grid.mesh();
            let rows: Vec<&[f64]> = (0..m).map(|i| &p0.values()[i * m..(i + 1) * m]).collect();
            // marginal of axis 0 is piecewise linear with node values equal to
            // the trapezoid integral of each row
            let marginal: Vec<f64> = rows.iter().map(|r| trapezoid(r, h)).collect();
            let cdf = cumulative(&marginal, h);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let x0 = sample_piecewise_linear(&marginal, &cdf, h, &mut rng);
                let (k, frac) = grid.locate(x0);
                let cond: Vec<f64> = rows[k]
                    .iter()
                    .zip(rows[(k + 1).min(m - 1)])
                    .map(|(a, b)| (1.0 - frac) * a + frac * b)
                    .collect();
                let ccdf = cumulative(&cond, h);
                let x1 = sample_piecewise_linear(&cond, &ccdf, h, &mut rng);
                out.push(vec![x0, x1]);
            }
            Ok(out)
        }
        d => Err(invalid("dim", format!("sampling is implemented for d ≤ 2, got {d}"))),
    }
}

fn trapezoid(v: &[f64], h: f64) -> f64 {
    v.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
}

fn cumulative(v: &[f64], h: f64) -> Vec<f64> {
    let mut c = Vec::with_capacity(v.len());
    c.push(0.0);
    for w in v.windows(2) {
        let last = *c.last().unwrap();
        c.push(last + 0.5 * h * (w[0] + w[1]));
    }
    c
}

/// Inverse CDF of the piecewise-linear density with node values `v` on the
/// uniform grid of `[-1,1]` (need not be normalized).
fn sample_piecewise_linear(v: &[f64], cdf: &[f64], h: f64, rng: &mut Rng) -> f64 {
    let total = *cdf.last().unwrap();
    let u = rng.random::<f64>() * total;
    let k = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(v.len() - 2);
    let r = u - cdf[k];
    let (a, b) = (v[k], v[k + 1]);
    let slope = (b - a) / h;
    // solve a s + slope s²/2 = r for s in [0, h]
    let s = if slope.abs() < 1e-14 * a.abs().max(1e-300) {
        if a > 0.0 {
            r / a
        } else {
            0.0
        }
    } else {
        let disc = (a * a + 2.0 * slope * r).max(0.0);
        2.0 * r / (a + disc.sqrt())
    };
    (-1.0 + k as f64 * h + s.clamp(0.0, h)).clamp(-1.0, 1.0)
}

/// Pairs `(U, V)` with `U` from `u_law` (uniform on the cube by default) and
/// `V ~ Bernoulli(f₀(U))`.
pub fn sample_classif_data(
    f0: &BinaryRegression,
    u_law: Option<&DensityOnCube>,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, bool)>> {
    let grid = *f0.grid();
    let us: Vec<Vec<f64>> = match u_law {
        Some(law) => sample_data(law, n, derive_seed(seed, 1))?,
        None => {
            let mut rng = rng_from_seed(derive_seed(seed, 1));
            (0..n)
                .map(|_| (0..grid.dim()).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect()
        }
    };
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    Ok(us
        .into_iter()
        .map(|u| {
            let p = f0.eval(&u);
            let v = rng.random::<f64>() < p;
            (u, v)
        })
        .collect())
}

/// Ordinary least squares fit `y = intercept + slope · x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero for an exact fit or two points.
    pub stderr: f64,
}

pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(invalid("xs", "at least 2 points are required"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("xs", "at least 2 distinct x values are required"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if xs.len() > 2 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit { slope, intercept, stderr })
}

/// Layer families of a study.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorFamily {
    /// Orders `N_1..N_H`.
    IntegratedBrownian(Vec<usize>),
    /// Indices `α_1..α_H`.
    RiemannLiouville(Vec<f64>),
    /// Smoothness `α_h` of each (single-component) layer.
    Matern(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Density,
    Classification,
}

/// A contraction study over a geometric schedule of sample sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub family: PriorFamily,
    /// Input dimension `d`; the first layer maps `[-1,1]^d` to `[-1,1]`.
    pub dim: usize,
    /// Derivative bound of every component of layers `h ≥ 2`.
    pub k: f64,
    pub points_per_axis: usize,
    pub beta: f64,
    pub schedule: Vec<usize>,
    pub replicates: usize,
    pub mcmc: McmcConfig,
    pub quantile: f64,
    pub task: Task,
    pub seed: u64,
}

impl StudyConfig {
    /// Integrated Brownian layers of orders 1 and 2, derivative bound 6 and a
    /// truth of smoothness 1.5.
    pub fn reference() -> Self {
        Self {
            family: PriorFamily::IntegratedBrownian(vec![1, 2]),
            dim: 1,
            k: 6.0,
            points_per_axis: 101,
            beta: 1.5,
            schedule: vec![100, 200, 400, 800, 1600, 3200],
            replicates: 5,
            mcmc: McmcConfig {
                iters: 3000,
                burnin: 1000,
                thin: 10,
                ..McmcConfig::default()
            },
            quantile: 0.9,
            task: Task::Density,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() < 4 {
            return Err(invalid("schedule", "at least 4 sample sizes are required"));
        }
        if self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("schedule", "sample sizes must increase"));
        }
        if self.replicates == 0 {
            return Err(invalid("replicates", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(invalid("quantile", "must lie in [0,1]"));
        }
        if !(self.beta > 0.0) {
            return Err(invalid("beta", "must be positive"));
        }
        let depth = match &self.family {
            PriorFamily::IntegratedBrownian(v) => v.len(),
            PriorFamily::RiemannLiouville(v) => v.len(),
            PriorFamily::Matern(v) => v.len(),
        };
        if depth < 2 {
            return Err(invalid("family", "at least two layers are required"));
        }
        if self.dim > 1 && !matches!(self.family, PriorFamily::Matern(_)) {
            return Err(invalid("dim", "only the Matérn family is defined on cubes of dimension above 1"));
        }
        self.mcmc.validate()
    }

    pub fn kernels(&self) -> Result<Vec<KernelSpec>> {
        match &self.family {
            PriorFamily::IntegratedBrownian(v) => Ok(v.iter().map(|&n| KernelSpec::integrated_brownian(n)).collect()),
            PriorFamily::RiemannLiouville(v) => v.iter().map(|&a| KernelSpec::riemann_liouville(a)).collect(),
            PriorFamily::Matern(v) => v
                .iter()
                .enumerate()
                .map(|(h, &a)| KernelSpec::matern(a, if h == 0 { self.dim } else { 1 }))
                .collect(),
        }
    }

    /// Width-one layers; the first on `[-1,1]^d`, the rest on `[-1,1]`.
    pub fn deep_spec(&self) -> Result<DeepGPSpec> {
        let kernels = self.kernels()?;
        let depth = kernels.len();
        let layers = kernels
            .iter()
            .enumerate()
            .map(|(h, k)| {
                let d_in = if h == 0 { self.dim } else { 1 };
                LayerSpec::new(
                    vec![*k],
                    d_in,
                    h + 1 < depth,
                    (h > 0).then(|| vec![vec![self.k]]),
                    GridSpec::new(d_in, self.points_per_axis)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        DeepGPSpec::new(layers)
    }

    /// The exponent of `n` in the contraction rate of the family.
    pub fn theoretical_exponent(&self) -> f64 {
        match &self.family {
            PriorFamily::IntegratedBrownian(v) => -self.beta / (2.0 * v[0] as f64 + 2.0),
            PriorFamily::RiemannLiouville(v) => -v[0] / (2.0 * v[0] + 1.0),
            PriorFamily::Matern(v) => -self.beta / (2.0 * v[0] + self.dim as f64),
        }
    }

    /// Rate hypotheses with their status.
    pub fn hypotheses(&self) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        match &self.family {
            PriorFamily::IntegratedBrownian(v) => {
                out.push((format!("beta <= N_1 + 1/2 ({} <= {})", self.beta, v[0] as f64 + 0.5), self.beta <= v[0] as f64 + 0.5));
                for (h, &n) in v.iter().enumerate().skip(1) {
                    out.push((format!("beta <= N_{} ({} <= {n})", h + 1, self.beta), self.beta <= n as f64));
                }
            }
            PriorFamily::RiemannLiouville(v) => {
                for (h, &a) in v.iter().enumerate().skip(1) {
                    out.push((format!("alpha_{} >= alpha_1 ({a} >= {})", h + 1, v[0]), a >= v[0]));
                }
            }
            PriorFamily::Matern(v) => {
                for (h, &a) in v.iter().enumerate() {
                    out.push((format!("beta <= alpha_{} ({} <= {a})", h + 1, self.beta), self.beta <= a));
                }
            }
        }
        out
    }
}

/// Targets `z₀` representing a truth with latent `g₀` on a width-one chain:
/// `z₀₁ = g₀ / (2‖g₀‖∞)`, identities in between and `z₀H = 2‖g₀‖∞ · id`.
pub fn chain_targets(spec: &DeepGPSpec, g0: &GridFunction) -> Result<Vec<Vec<GridFunction>>> {
    let m = 2.0 * g0.sup_norm();
    if !(m > 0.0) {
        return Err(invalid("g0", "latent must not vanish identically"));
    }
    let depth = spec.depth();
    let mut out = Vec::with_capacity(depth);
    for (h, layer) in spec.layers.iter().enumerate() {
        if layer.d_out != 1 || (h > 0 && layer.d_in != 1) {
            return Err(invalid("spec", "targets are defined for width-one chains"));
        }
        let f = if h == 0 {
            if *g0.grid() != layer.grid {
                return Err(invalid("g0", "latent must live on the first layer grid"));
            }
            g0.map(|v| v / m)
        } else if h + 1 < depth {
            GridFunction::from_fn(layer.grid, |x| x[0])
        } else {
            GridFunction::from_fn(layer.grid, |x| m * x[0])
        };
        out.push(vec![f]);
    }
    Ok(out)
}

/// One `(n, replicate)` cell of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub replicate: usize,
    pub radius: f64,
    pub seconds: f64,
    /// Set when the chain failed; the row is excluded from the fit.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<StudyRow>,
    pub fit: SlopeFit,
    pub theory: f64,
    pub hypotheses: Vec<(String, bool)>,
    pub excluded: usize,
}

impl ExperimentResult {
    pub fn in_scope(&self) -> bool {
        self.hypotheses.iter().all(|(_, ok)| *ok)
    }

    /// Median radius over replicates for each `n` of the schedule.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.dedup();
        ns.into_iter()
            .filter_map(|n| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.n == n && r.failure.is_none())
                    .map(|r| r.radius)
                    .collect();
                (!v.is_empty()).then(|| (n, crate::inference::quantile(&v, 0.5)))
            })
            .collect()
    }

    /// `n,replicate,radius_q` rows; timings are kept out so the file is
    /// reproducible byte for byte.
    pub fn csv(&self) -> String {
        let mut out = String::from("n,replicate,radius_q\n");
        for r in &self.rows {
            match &r.failure {
                None => {
                    let _ = writeln!(out, "{},{},{}", r.n, r.replicate, r.radius);
                }
                Some(_) => {
                    let _ = writeln!(out, "{},{},NaN", r.n, r.replicate);
                }
            }
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("n,replicate,seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.3}", r.n, r.replicate, r.seconds);
        }
        out
    }

    /// `key = value` summary with the hypothesis checks in the header.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (h, ok) in &self.hypotheses {
            let _ = writeln!(out, "# hypothesis {h}: {}", if *ok { "holds" } else { "violated" });
        }
        let scope = if self.in_scope() { "within rate hypotheses" } else { "outside rate hypotheses" };
        let _ = writeln!(out, "scope = {scope}");
        let _ = writeln!(out, "slope = {}", self.fit.slope);
        let _ = writeln!(out, "stderr = {}", self.fit.stderr);
        let _ = writeln!(out, "theory = {}", self.theory);
        let _ = writeln!(out, "excluded = {}", self.excluded);
        for r in self.rows.iter().filter(|r| r.failure.is_some()) {
            let _ = writeln!(out, "# excluded n={} replicate={}: {}", r.n, r.replicate, r.failure.as_deref().unwrap_or(""));
        }
        out
    }
}

fn run_cell(cfg: &StudyConfig, spec: &DeepGPSpec, truth: &HolderTruth, n: usize, rep: usize, seed: u64) -> Result<f64> {
    let data_seed = derive_seed(seed, 0);
    let (data, target) = match cfg.task {
        Task::Density => (Data::Density(sample_data(&truth.density, n, data_seed)?), Truth::Density(truth.density.clone())),
        Task::Classification => (
            Data::Classification(sample_classif_data(&truth.regression, None, n, data_seed)?),
            Truth::Regression(truth.regression.clone(), None),
        ),
    };
    let mcmc = McmcConfig {
        seed: derive_seed(seed, 1 + rep as u64),
        ..cfg.mcmc
    };
    let chain = run_mcmc(spec, &data, &mcmc)?;
    posterior_radius(&chain, &target, cfg.quantile)
}

/// Runs every `(n, replicate)` cell, then fits `log radius` on `log n`.
pub fn contraction_study(cfg: &StudyConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = cfg.deep_spec()?;
    let truth = make_truth_holder(cfg.beta, &spec.layers[0].grid)?;
    let cells: Vec<(usize, usize, usize)> = cfg
        .schedule
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| (0..cfg.replicates).map(move |r| (k, n, r)))
        .collect();
    let rows: Vec<StudyRow> = cells
        .par_iter()
        .map(|&(k, n, r)| {
            let start = Instant::now();
            let seed = derive_seed(cfg.seed, (k * 10_000 + r) as u64);
            let out = run_cell(cfg, &spec, &truth, n, r, seed);
            let seconds = start.elapsed().as_secs_f64();
            match out {
                Ok(radius) if radius.is_finite() && radius > 0.0 => StudyRow {
                    n,
                    replicate: r,
                    radius,
                    seconds,
                    failure: None,
                },
                Ok(radius) => StudyRow {
                    n,
                    replicate: r,
                    radius,
                    seconds,
                    failure: Some(format!("radius {radius} cannot be fitted on a log scale")),
                },
                Err(e) => StudyRow {
                    n,
                    replicate: r,
                    radius: f64::NAN,
                    seconds,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&StudyRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
    let xs: Vec<f64> = ok.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = ok.iter().map(|r| r.radius.ln()).collect();
    let fit = fit_slope(&xs, &ys)?;
    Ok(ExperimentResult {
        excluded: rows.len() - ok.len(),
        rows,
        fit,
        theory: cfg.theoretical_exponent(),
        hypotheses: cfg.hypotheses(),
    })
}

/// Short config name of a kernel family.
pub fn family_name(k: &KernelSpec) -> &'static str {
    match k.family {
        KernelFamily::IntegratedBrownian { .. } => "ibm",
        KernelFamily::RiemannLiouville { .. } => "rl",
        KernelFamily::Matern { .. } => "matern",
    }
}
