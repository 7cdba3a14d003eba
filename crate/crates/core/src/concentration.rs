//! Small-ball probabilities (plain Monte Carlo and multilevel splitting), the
//! concentration functions `φ`, `φ_c`, `Φ_c`, their ordering checks, the
//! Gaussian correlation inequality and rate extraction.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::composition::{DeepGPSpec, StackedFunction};
use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;
use crate::kernels::{fd_matrix, FdOperator, KernelSpec};
use crate::rkhs::{concentration_infimum, InfimumProblem};
use crate::rng::{child_rng, derive_seed, Rng};
use crate::sampling::ProcessSampler;

/// A rare event `{score(ξ) ≤ 1}` for a standard normal vector `ξ`,
/// optionally reweighted.
///
/// The splitting estimator targets `1{score ≤ τ} · exp(log_weight(ξ, τ))`
/// for a decreasing sequence of thresholds `τ` ending at 1 and returns the
/// expectation of that quantity at `τ = 1` under the standard normal law.
pub trait RareEventTarget: Sync {
    fn dim(&self) -> usize;

    fn score(&self, noise: &[f64]) -> f64;

    /// Log of a nonnegative weight at threshold `tau`. Only called when
    /// `score ≤ tau`.
    fn log_weight(&self, _noise: &[f64], _tau: f64) -> f64 {
        0.0
    }

    fn draw_reference(&self, rng: &mut Rng, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }

    /// Optional target-specific Markov move leaving the law at level `tau`
    /// invariant. Returns the acceptance rate with the new score and log
    /// weight, or `None` to fall back to preconditioned Crank–Nicolson.
    fn local_move(&self, _noise: &mut [f64], _tau: f64, _rng: &mut Rng) -> Option<(f64, f64, f64)> {
        None
    }
}

/// One box constraint on a linear image of a process path: the path itself
/// (`axis = None`) or its finite-difference derivative along `axis`.
#[derive(Clone, Debug)]
pub struct TubeCheck {
    pub axis: Option<usize>,
    /// Center at each node; `None` means zero.
    pub center: Option<Vec<f64>>,
    pub radius: f64,
}

impl TubeCheck {
    pub fn value(radius: f64) -> Self {
        Self {
            axis: None,
            center: None,
            radius,
        }
    }

    pub fn value_around(center: &GridFunction, radius: f64) -> Self {
        Self {
            axis: None,
            center: Some(center.values().to_vec()),
            radius,
        }
    }

    pub fn derivative(axis: usize, radius: f64) -> Self {
        Self {
            axis: Some(axis),
            center: None,
            radius,
        }
    }
}

/// The event that all tube checks hold for a Gaussian process path.
#[derive(Clone, Debug)]
pub struct GaussianTube {
    sampler: ProcessSampler,
    fds: Vec<FdOperator>,
    checks: Vec<TubeCheck>,
}

impl GaussianTube {
    pub fn new(sampler: ProcessSampler, checks: Vec<TubeCheck>) -> Result<Self> {
        let grid = *sampler.grid();
        let fds = (0..grid.dim()).map(|j| fd_matrix(&grid, j)).collect::<Result<Vec<_>>>()?;
        for c in &checks {
            if !(c.radius > 0.0) {
                return Err(invalid("radius", "tube radii must be positive"));
            }
            if c.axis.is_some_and(|a| a >= grid.dim()) {
                return Err(invalid("axis", "derivative axis out of range"));
            }
            if c.center.as_ref().is_some_and(|v| v.len() != grid.len()) {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    got: c.center.as_ref().map_or(0, |v| v.len()),
                });
            }
        }
        if checks.is_empty() {
            return Err(invalid("checks", "at least one check is required"));
        }
        Ok(Self { sampler, fds, checks })
    }

    /// `{‖Z‖∞ < eps}`.
    pub fn small_ball(sampler: ProcessSampler, eps: f64) -> Result<Self> {
        Self::new(sampler, vec![TubeCheck::value(eps)])
    }

    pub fn sampler(&self) -> &ProcessSampler {
        &self.sampler
    }

    fn path_score(&self, path: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.checks {
            let deriv;
            let values: &[f64] = match c.axis {
                None => path,
                Some(j) => {
                    deriv = self.fds[j].apply(path);
                    &deriv
                }
            };
            let m = match &c.center {
                None => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Some(center) => values
                    .iter()
                    .zip(center)
                    .fold(0.0f64, |m, (v, z)| m.max((v - z).abs())),
            };
            worst = worst.max(m / c.radius);
        }
        worst
    }
}

impl RareEventTarget for GaussianTube {
    fn dim(&self) -> usize {
        self.sampler.noise_len()
    }

    fn score(&self, noise: &[f64]) -> f64 {
        let mut path = vec![0.0; self.sampler.grid().len()];
        self.sampler.transform(noise, &mut path);
        self.path_score(&path)
    }
}

/// `{sup_{[0,T]} |B| < eps}` for standard Brownian motion from 0, simulated
/// on `steps` increments. With the bridge correction each path is weighted by
/// the exact probability that the Brownian bridges between grid values stay
/// inside the band, which removes the discretization bias.
#[derive(Clone, Debug)]
pub struct BrownianSmallBall {
    pub steps: usize,
    pub horizon: f64,
    pub eps: f64,
    pub bridge_correction: bool,
}

impl BrownianSmallBall {
    pub fn new(eps: f64, steps: usize) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be positive"));
        }
        Ok(Self {
            steps,
            horizon: 1.0,
            eps,
            bridge_correction: true,
        })
    }

    fn path(&self, noise: &[f64]) -> Vec<f64> {
        let sd = (self.horizon / self.steps as f64).sqrt();
        let mut b = Vec::with_capacity(self.steps + 1);
        b.push(0.0);
        let mut acc = 0.0;
        for z in noise {
            acc += sd * z;
            b.push(acc);
        }
        b
    }
}

/// Probability that a Brownian bridge from `x` to `y` over time `t` stays in
/// `(-c, c)`, by the method of images.
pub fn bridge_stay_probability(x: f64, y: f64, t: f64, c: f64) -> f64 {
    if x.abs() >= c || y.abs() >= c {
        return 0.0;
    }
    // both single-wall crossing probabilities below half an ulp of 1
    if 2.0 * (c - x) * (c - y) / t > 40.0 && 2.0 * (c + x) * (c + y) / t > 40.0 {
        return 1.0;
    }
    let a = -c;
    let w = 2.0 * c;
    let d2 = (y - x) * (y - x);
    let mut p = 0.0;
    for k in -3i32..=3 {
        let k = k as f64;
        let direct = y - x + 2.0 * k * w;
        let image = 2.0 * a - y - x + 2.0 * k * w;
        p += (-(direct * direct - d2) / (2.0 * t)).exp() - (-(image * image - d2) / (2.0 * t)).exp();
    }
    p.clamp(0.0, 1.0)
}

impl RareEventTarget for BrownianSmallBall {
    fn dim(&self) -> usize {
        self.steps
    }

    /// One systematic sweep of single-site updates of the path values: each
    /// `B_k` is redrawn from its Gaussian conditional given the neighbours
    /// and kept with probability `1{|B_k| ≤ τε} · min(1, weight ratio)`.
    fn local_move(&self, noise: &mut [f64], tau: f64, rng: &mut Rng) -> Option<(f64, f64, f64)> {
        let n = self.steps;
        let dt = self.horizon / n as f64;
        let sd = dt.sqrt();
        let c = tau * self.eps;
        let mut b = self.path(noise);
        let cell = |x: f64, y: f64| {
            if self.bridge_correction {
                bridge_stay_probability(x, y, dt, c).ln()
            } else {
                0.0
            }
        };
        // log weight of the bridge over each cell, kept in sync with `b`
        let mut lc: Vec<f64> = b.windows(2).map(|w| cell(w[0], w[1])).collect();
        let mut accepted = 0usize;
        for k in 1..=n {
            let (mean, var) = if k < n {
                (0.5 * (b[k - 1] + b[k + 1]), 0.5 * dt)
            } else {
                (b[n - 1], dt)
            };
            let z: f64 = StandardNormal.sample(rng);
            let prop = mean + var.sqrt() * z;
            let u: f64 = rng.random();
            if prop.abs() > c {
                continue;
            }
            let left = cell(b[k - 1], prop);
            let right = if k < n { cell(prop, b[k + 1]) } else { 0.0 };
            let old = lc[k - 1] + if k < n { lc[k] } else { 0.0 };
            let delta = left + right - old;
            if delta.is_nan() || u.ln() <= delta {
                b[k] = prop;
                lc[k - 1] = left;
                if k < n {
                    lc[k] = right;
                }
                accepted += 1;
            }
        }
        for j in 0..n {
            noise[j] = (b[j + 1] - b[j]) / sd;
        }
        let score = b.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.eps;
        Some((accepted as f64 / n as f64, score, lc.iter().sum()))
    }

    fn score(&self, noise: &[f64]) -> f64 {
        self.path(noise).iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.eps
    }

    fn log_weight(&self, noise: &[f64], tau: f64) -> f64 {
        if !self.bridge_correction {
            return 0.0;
        }
        let b = self.path(noise);
        let dt = self.horizon / self.steps as f64;
        let c = tau * self.eps;
        b.windows(2)
            .map(|w| bridge_stay_probability(w[0], w[1], dt, c).ln())
            .sum()
    }
}

/// Estimate of `log P` with the standard error of the log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogProbEstimate {
    pub log_p: f64,
    pub se: f64,
    /// Number of levels used (1 for plain Monte Carlo).
    pub levels: usize,
    /// Total particles (or draws) spent.
    pub n_total: usize,
}

impl LogProbEstimate {
    pub fn p(&self) -> f64 {
        self.log_p.exp()
    }

    /// Standard error on the probability scale.
    pub fn p_se(&self) -> f64 {
        self.se * self.p()
    }

    /// The estimate of the complementary sum of independent log terms.
    pub fn sum(terms: &[LogProbEstimate]) -> LogProbEstimate {
        LogProbEstimate {
            log_p: terms.iter().map(|t| t.log_p).sum(),
            se: terms.iter().map(|t| t.se * t.se).sum::<f64>().sqrt(),
            levels: terms.iter().map(|t| t.levels).max().unwrap_or(1),
            n_total: terms.iter().map(|t| t.n_total).sum(),
        }
    }
}

/// Plain Monte Carlo estimate of `log E[1{score ≤ 1} · weight]` with a
/// delta-method standard error. Fails with [`Error::ZeroHits`] when no draw
/// hits the event.
pub fn smallball_mc<T: RareEventTarget>(target: &T, n_mc: usize, seed: u64) -> Result<LogProbEstimate> {
    if n_mc < 1000 {
        return Err(invalid("n_mc", "at least 1000 draws are required"));
    }
    const CHUNK: usize = 1000;
    let chunks = n_mc.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let mut noise = vec![0.0; target.dim()];
            let len = CHUNK.min(n_mc - c * CHUNK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..len {
                target.draw_reference(&mut rng, &mut noise);
                if target.score(&noise) <= 1.0 {
                    let w = target.log_weight(&noise, 1.0).exp();
                    s += w;
                    s2 += w * w;
                }
            }
            (s, s2)
        })
        .collect();
    let n = n_mc as f64;
    let (s, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    if s == 0.0 {
        return Err(Error::ZeroHits { n: n_mc });
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(LogProbEstimate {
        log_p: mean.ln(),
        se: (var / n).sqrt() / mean,
        levels: 1,
        n_total: n_mc,
    })
}

/// Tuning of the splitting estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplittingOptions {
    /// Independent replicates; the standard error comes from their spread.
    pub replicates: usize,
    /// pCN sweeps after each resampling step.
    pub moves: usize,
    /// Target conditional survival per level when planning.
    pub survival: f64,
    /// Particles of the planning run.
    pub pilot: usize,
    pub max_levels: usize,
}

impl Default for SplittingOptions {
    fn default() -> Self {
        Self {
            replicates: 10,
            moves: 5,
            survival: 0.2,
            pilot: 2000,
            max_levels: 400,
        }
    }
}

/// Threshold plan: `levels` geometric thresholds from `start` down to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    pub thresholds: Vec<f64>,
}

impl LevelPlan {
    pub fn geometric(start: f64, levels: usize) -> Self {
        if levels <= 1 || start <= 1.0 {
            return Self { thresholds: vec![1.0] };
        }
        let ls = start.ln();
        let thresholds = (0..levels)
            .map(|k| (ls * (levels - 1 - k) as f64 / (levels - 1) as f64).exp())
            .collect::<Vec<_>>();
        Self { thresholds }
    }
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() as f64 - 1.0) * q).round() as usize;
    values[idx]
}

/// Plans the number of levels with an adaptive pilot run: thresholds are
/// set to the `survival` quantile of the current particle scores until 1 is
/// reached. Returns the geometric plan with one extra level of margin.
pub fn plan_levels<T: RareEventTarget>(target: &T, opts: &SplittingOptions, seed: u64) -> Result<LevelPlan> {
    let n = opts.pilot.max(100);
    let mut rng = child_rng(seed, u64::MAX);
    let dim = target.dim();
    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v = vec![0.0; dim];
            target.draw_reference(&mut rng, &mut v);
            v
        })
        .collect();
    let mut scores: Vec<f64> = xs.iter().map(|x| target.score(x)).collect();
    let start = quantile(&mut scores.clone(), opts.survival);
    if start <= 1.0 {
        return Ok(LevelPlan { thresholds: vec![1.0] });
    }
    let mut tau = start;
    let mut count = 1;
    let mut step = 0.5;
    while tau > 1.0 {
        if count >= opts.max_levels {
            return Err(Error::LevelStarvation {
                level: count,
                threshold: tau,
            });
        }
        // Resample survivors and move them at the current level.
        let alive: Vec<usize> = (0..n).filter(|&i| scores[i] <= tau).collect();
        if alive.is_empty() {
            return Err(Error::LevelStarvation {
                level: count,
                threshold: tau,
            });
        }
        let picks: Vec<usize> = (0..n).map(|_| alive[rng.random_range(0..alive.len())]).collect();
        xs = picks.iter().map(|&i| xs[i].clone()).collect();
        scores = picks.iter().map(|&i| scores[i]).collect();
        let mut ws = vec![0.0; n];
        for i in 0..n {
            ws[i] = target.log_weight(&xs[i], tau);
        }
        for _ in 0..opts.moves.max(1) {
            let acc = pcn_sweep(target, &mut xs, &mut scores, &mut ws, tau, step, &mut rng);
            step = adapt_step(step, acc);
        }
        tau = quantile(&mut scores.clone(), opts.survival).max(1.0);
        count += 1;
    }
    Ok(LevelPlan::geometric(start, count + 1))
}

/// Multiplicative adaptation of the pCN step toward 25% acceptance.
fn adapt_step(step: f64, acceptance: f64) -> f64 {
    (step * (2.0 * (acceptance - 0.25)).exp()).clamp(1e-4, 1.0)
}

/// One sweep of the target's own move, or of pCN targeting `1{score ≤ tau} · exp(log_weight(·, tau))`
/// under the standard normal reference. Returns the acceptance rate.
fn pcn_sweep<T: RareEventTarget>(
    target: &T,
    xs: &mut [Vec<f64>],
    scores: &mut [f64],
    log_w: &mut [f64],
    tau: f64,
    step: f64,
    rng: &mut Rng,
) -> f64 {
    if let Some(first) = xs.first_mut() {
        if let Some((acc, s, lw)) = target.local_move(first, tau, rng) {
            scores[0] = s;
            log_w[0] = lw;
            let mut total = acc;
            for i in 1..xs.len() {
                let (acc, s, lw) = target.local_move(&mut xs[i], tau, rng).expect("local moves are all or nothing");
                scores[i] = s;
                log_w[i] = lw;
                total += acc;
            }
            return total / xs.len() as f64;
        }
    }
    let rho = (1.0 - step * step).sqrt();
    let dim = target.dim();
    let mut accepted = 0usize;
    let mut prop = vec![0.0; dim];
    let mut xi = vec![0.0; dim];
    for i in 0..xs.len() {
        target.draw_reference(rng, &mut xi);
        for k in 0..dim {
            prop[k] = rho * xs[i][k] + step * xi[k];
        }
        let s = target.score(&prop);
        let u: f64 = rng.random();
        if s <= tau {
            let lw = target.log_weight(&prop, tau);
            if lw.is_finite() && u.ln() <= lw - log_w[i] {
                xs[i].copy_from_slice(&prop);
                scores[i] = s;
                log_w[i] = lw;
                accepted += 1;
            }
        }
    }
    accepted as f64 / xs.len() as f64
}

/// One replicate of fixed-level splitting; returns `log P̂`.
fn splitting_replicate<T: RareEventTarget>(
    target: &T,
    plan: &LevelPlan,
    n: usize,
    moves: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let dim = target.dim();
    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut v = vec![0.0; dim];
            target.draw_reference(rng, &mut v);
            v
        })
        .collect();
    let mut scores: Vec<f64> = xs.iter().map(|x| target.score(x)).collect();
    let mut prev_lw = vec![0.0; n];
    let mut log_p = 0.0;
    let mut step = 0.5;
    let levels = plan.thresholds.len();
    for (k, &tau) in plan.thresholds.iter().enumerate() {
        let mut lw = vec![f64::NEG_INFINITY; n];
        let mut inc = vec![0.0; n];
        for i in 0..n {
            if scores[i] <= tau {
                lw[i] = target.log_weight(&xs[i], tau);
                inc[i] = (lw[i] - prev_lw[i]).exp();
            }
        }
        let total: f64 = inc.iter().sum();
        if !(total > 0.0) {
            return Err(Error::LevelStarvation {
                level: k + 1,
                threshold: tau,
            });
        }
        log_p += (total / n as f64).ln();
        if k + 1 == levels {
            break;
        }
        // systematic resampling
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut picks = Vec::with_capacity(n);
        let mut cum = 0.0;
        let mut j = 0;
        for i in 0..n {
            let u = u0 + i as f64 / n as f64;
            while j < n - 1 && cum + inc[j] / total < u {
                cum += inc[j] / total;
                j += 1;
            }
            picks.push(j);
        }
        xs = picks.iter().map(|&i| xs[i].clone()).collect();
        scores = picks.iter().map(|&i| scores[i]).collect();
        prev_lw = picks.iter().map(|&i| lw[i]).collect();
        for _ in 0..moves {
            let acc = pcn_sweep(target, &mut xs, &mut scores, &mut prev_lw, tau, step, rng);
            step = adapt_step(step, acc);
        }
    }
    Ok(log_p)
}

/// Multilevel splitting estimate of `log P(score ≤ 1)` (weighted).
///
/// `levels = None` plans the thresholds with a pilot run; `Some(1)` is plain
/// Monte Carlo; `Some(L)` uses `L` geometric thresholds from the pilot's
/// initial quantile down to 1. The estimate is the log of the mean of the
/// replicate estimates, with the standard error from their spread.
pub fn smallball_splitting<T: RareEventTarget>(
    target: &T,
    levels: Option<usize>,
    n_per_level: usize,
    seed: u64,
) -> Result<LogProbEstimate> {
    smallball_splitting_with(target, levels, n_per_level, seed, &SplittingOptions::default())
}

pub fn smallball_splitting_with<T: RareEventTarget>(
    target: &T,
    levels: Option<usize>,
    n_per_level: usize,
    seed: u64,
    opts: &SplittingOptions,
) -> Result<LogProbEstimate> {
    if opts.replicates < 2 {
        return Err(invalid("replicates", "at least two replicates are needed for an error estimate"));
    }
    if n_per_level < 10 {
        return Err(invalid("n_per_level", "at least 10 particles per level are required"));
    }
    let plan = match levels {
        Some(0) => return Err(invalid("levels", "must be at least 1")),
        Some(1) => LevelPlan { thresholds: vec![1.0] },
        Some(l) => {
            let auto = plan_levels(target, opts, seed)?;
            LevelPlan::geometric(auto.thresholds[0], l)
        }
        None => plan_levels(target, opts, seed)?,
    };
    let logs: Vec<f64> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = child_rng(seed, r as u64);
            splitting_replicate(target, &plan, n_per_level, opts.moves, &mut rng)
        })
        .collect::<Result<_>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ratios: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let r = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / r;
    let var = ratios.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok(LogProbEstimate {
        log_p: max + mean.ln(),
        se: (var / r).sqrt() / mean,
        levels: plan.thresholds.len(),
        n_total: n_per_level * plan.thresholds.len() * opts.replicates,
    })
}

/// `P(sup_{[0,1]} |B| ≤ eps)` by the alternating series
/// `(4/π) Σ_k (-1)^k/(2k+1) exp(-(2k+1)²π²/(8 eps²))`.
pub fn brownian_small_ball_exact(eps: f64) -> f64 {
    let mut s = 0.0;
    for k in 0..200 {
        let a = (2 * k + 1) as f64;
        let term = (-(a * a) * std::f64::consts::PI.powi(2) / (8.0 * eps * eps)).exp() / a;
        s += if k % 2 == 0 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    4.0 / std::f64::consts::PI * s
}

/// Monte Carlo budget for concentration estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub particles: usize,
    pub options: SplittingOptions,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            particles: 2000,
            options: SplittingOptions {
                replicates: 8,
                moves: 3,
                survival: 0.2,
                pilot: 1000,
                max_levels: 400,
            },
        }
    }
}

fn estimate_term(target: &GaussianTube, budget: &Budget, seed: u64) -> Result<LogProbEstimate> {
    smallball_splitting_with(target, None, budget.particles, seed, &budget.options)
}

/// Estimated `Φ_c(ε)` with its terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationEstimate {
    pub eps: f64,
    /// `((h, i), inf ‖g‖²)` per component, zero-based.
    pub infimum_terms: Vec<((usize, usize), f64)>,
    /// `((h, i), log P(‖Z_{h,i}‖∞ < ε or ε/2))`.
    pub logp_smallball: Vec<((usize, usize), LogProbEstimate)>,
    /// `((h, i, j), log P(‖∂_j Z_{h,i}‖∞ ≤ K_min/4))`.
    pub logp_deriv: Vec<((usize, usize, usize), LogProbEstimate)>,
    pub total: f64,
    pub total_se: f64,
}

impl ConcentrationEstimate {
    pub fn infimum_total(&self) -> f64 {
        self.infimum_terms.iter().map(|(_, v)| v).sum()
    }

    pub fn logp_total(&self) -> f64 {
        self.logp_smallball.iter().map(|(_, e)| e.log_p).sum::<f64>()
            + self.logp_deriv.iter().map(|(_, e)| e.log_p).sum::<f64>()
    }

    /// `Σ (3/2) inf − 2 Σ log P`, which is `total` by construction.
    pub fn assemble(&self) -> f64 {
        1.5 * self.infimum_total() - 2.0 * self.logp_total()
    }

    /// The estimate without the terms of layer `h` (zero-based).
    pub fn without_layer(&self, h: usize) -> ConcentrationEstimate {
        let mut e = self.clone();
        e.infimum_terms.retain(|((l, _), _)| *l != h);
        e.logp_smallball.retain(|((l, _), _)| *l != h);
        e.logp_deriv.retain(|((l, _, _), _)| *l != h);
        e.total = e.assemble();
        e.total_se = e.se_from_terms();
        e
    }

    fn se_from_terms(&self) -> f64 {
        let v: f64 = self
            .logp_smallball
            .iter()
            .map(|(_, e)| e.se)
            .chain(self.logp_deriv.iter().map(|(_, e)| e.se))
            .map(|s| 4.0 * s * s)
            .sum();
        v.sqrt()
    }
}

/// Margin for the strict inequalities of the hypotheses, also used as
/// round-off slack on the non-strict derivative bounds.
pub const STRICT_MARGIN: f64 = 1e-12;

fn sup_deriv(f: &GridFunction, axis: usize) -> Result<f64> {
    Ok(fd_matrix(f.grid(), axis)?.sup_norm(f.values()))
}

fn check_targets(spec: &DeepGPSpec, z0: &[Vec<GridFunction>]) -> Result<()> {
    if z0.len() != spec.depth() {
        return Err(Error::DimensionMismatch {
            expected: spec.depth(),
            got: z0.len(),
        });
    }
    for (h, (layer, targets)) in spec.layers.iter().zip(z0).enumerate() {
        if targets.len() != layer.d_out {
            return Err(Error::DimensionMismatch {
                expected: layer.d_out,
                got: targets.len(),
            });
        }
        for t in targets {
            if *t.grid() != layer.grid {
                return Err(invalid("z0", format!("target of layer {} is not on the layer grid", h + 1)));
            }
        }
    }
    Ok(())
}

/// Checks `‖z_{0,h,i}‖∞ < 1` for `h ≤ H-1` and
/// `‖∂z_{0,h,i}/∂x_j‖∞ ≤ K_min/2` for `h ≥ 2`.
pub fn check_rate_hypotheses(spec: &DeepGPSpec, z0: &[Vec<GridFunction>]) -> Result<()> {
    check_targets(spec, z0)?;
    let k_min = spec.k_min();
    let depth = spec.depth();
    for (h, targets) in z0.iter().enumerate() {
        for (i, t) in targets.iter().enumerate() {
            if h + 1 < depth && t.sup_norm() >= 1.0 - STRICT_MARGIN {
                return Err(Error::Hypothesis(format!(
                    "‖z0[{},{}]‖∞ = {} is not below 1",
                    h + 1,
                    i + 1,
                    t.sup_norm()
                )));
            }
            if h > 0 {
                for j in 0..t.grid().dim() {
                    let d = sup_deriv(t, j)?;
                    if d > k_min / 2.0 + STRICT_MARGIN {
                        return Err(Error::Hypothesis(format!(
                            "derivative {} of z0[{},{}] is {d}, above K_min/2 = {}",
                            j + 1,
                            h + 1,
                            i + 1,
                            k_min / 2.0
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn component_sampler(kernel: &KernelSpec, spec: &DeepGPSpec, h: usize) -> Result<ProcessSampler> {
    ProcessSampler::for_kernel(kernel, &spec.layers[h].grid)
}

/// `Φ_c(ε)`: first-layer terms at `ε` without derivatives, later layers at
/// `ε/2` with derivative slack `K_min/4`.
pub fn phi_deep(
    spec: &DeepGPSpec,
    z0: &[Vec<GridFunction>],
    eps: f64,
    budget: &Budget,
    seed: u64,
) -> Result<ConcentrationEstimate> {
    if !(eps > 0.0) {
        return Err(invalid("eps", "must be positive"));
    }
    check_rate_hypotheses(spec, z0)?;
    let k_min = spec.k_min();
    let mut infimum_terms = Vec::new();
    let mut logp_smallball = Vec::new();
    let mut logp_deriv = Vec::new();
    let mut stream = 0u64;
    for (h, layer) in spec.layers.iter().enumerate() {
        let (radius, slack) = if h == 0 { (eps, None) } else { (eps / 2.0, Some(k_min / 4.0)) };
        for (i, kernel) in layer.kernels.iter().enumerate() {
            let prob = InfimumProblem::new(*kernel, z0[h][i].clone(), radius, slack)?;
            infimum_terms.push(((h, i), concentration_infimum(&prob)?));
            let sampler = component_sampler(kernel, spec, h)?;
            let ball = GaussianTube::small_ball(sampler.clone(), radius)?;
            logp_smallball.push(((h, i), estimate_term(&ball, budget, derive_seed(seed, stream))?));
            stream += 1;
            if let Some(s) = slack {
                for j in 0..layer.d_in {
                    let tube = GaussianTube::new(sampler.clone(), vec![TubeCheck::derivative(j, s)])?;
                    logp_deriv.push(((h, i, j), estimate_term(&tube, budget, derive_seed(seed, stream))?));
                    stream += 1;
                }
            }
        }
    }
    let mut est = ConcentrationEstimate {
        eps,
        infimum_terms,
        logp_smallball,
        logp_deriv,
        total: 0.0,
        total_se: 0.0,
    };
    est.total = est.assemble();
    est.total_se = est.se_from_terms();
    Ok(est)
}

/// A concentration function value with its Monte Carlo error and terms.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiEstimate {
    pub eps: f64,
    pub infimum: f64,
    /// Named log-probability terms entering with coefficient −1.
    pub log_terms: Vec<(String, LogProbEstimate)>,
    pub value: f64,
    pub se: f64,
}

fn phi_from_terms(eps: f64, infimum: f64, log_terms: Vec<(String, LogProbEstimate)>) -> PhiEstimate {
    let value = infimum - log_terms.iter().map(|(_, t)| t.log_p).sum::<f64>();
    let se = log_terms.iter().map(|(_, t)| t.se * t.se).sum::<f64>().sqrt();
    PhiEstimate {
        eps,
        infimum,
        log_terms,
        value,
        se,
    }
}

/// `inf_{‖h − w₀‖∞ < ε} ‖h‖²_H` for the stacked process: by independence of
/// the components the RKHS norm is additive and the constraint separates, so
/// the infimum is the sum of the per-component infima.
fn stacked_infimum(spec: &DeepGPSpec, w0: &StackedFunction, eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for &(h, i) in &w0.index {
        let target = w0.project(h, i)?;
        let prob = InfimumProblem::new(spec.layers[h].kernels[i], target, eps, None)?;
        total += concentration_infimum(&prob)?;
    }
    Ok(total)
}

fn check_stack(spec: &DeepGPSpec, w0: &StackedFunction) -> Result<()> {
    let expected: Vec<(usize, usize)> = spec
        .layers
        .iter()
        .enumerate()
        .flat_map(|(h, l)| (0..l.d_out).map(move |i| (h, i)))
        .collect();
    if expected != w0.index {
        return Err(invalid("w0", "stacked function does not match the layer structure"));
    }
    Ok(())
}

/// Constraint checks of component `(h, i)` as tube checks.
fn constraint_checks(spec: &DeepGPSpec, h: usize, i: usize) -> Vec<TubeCheck> {
    let layer = &spec.layers[h];
    let mut checks = Vec::new();
    if layer.value_bound_active {
        checks.push(TubeCheck::value(1.0));
    }
    if let Some(b) = &layer.deriv_bounds {
        for (j, &k) in b[i].iter().enumerate() {
            checks.push(TubeCheck::derivative(j, k));
        }
    }
    checks
}

/// `φ(ε) = inf_{‖h − w₀‖∞ < ε} ‖h‖²_H − log P(‖W‖∞ < ε)`.
pub fn phi_single(spec: &DeepGPSpec, w0: &StackedFunction, eps: f64, budget: &Budget, seed: u64) -> Result<PhiEstimate> {
    check_stack(spec, w0)?;
    let infimum = stacked_infimum(spec, w0, eps)?;
    let mut terms = Vec::new();
    for (k, &(h, i)) in w0.index.iter().enumerate() {
        let sampler = component_sampler(&spec.layers[h].kernels[i], spec, h)?;
        let ball = GaussianTube::small_ball(sampler, eps)?;
        let est = estimate_term(&ball, budget, derive_seed(seed, k as u64))?;
        terms.push((format!("log P(|Z[{},{}]| < eps)", h + 1, i + 1), est));
    }
    Ok(phi_from_terms(eps, infimum, terms))
}

/// `φ_c(ε) = inf ‖h‖²_H − log P(‖W_c‖∞ < ε) − log P(‖W − w₀‖∞ < 2ε, W ∈ B_c)`,
/// with `P(‖W_c‖∞ < ε) = P(‖W‖∞ < ε, W ∈ B_c) / P(W ∈ B_c)`, all factorized
/// over the independent components.
pub fn phi_c_single(spec: &DeepGPSpec, w0: &StackedFunction, eps: f64, budget: &Budget, seed: u64) -> Result<PhiEstimate> {
    check_stack(spec, w0)?;
    let infimum = stacked_infimum(spec, w0, eps)?;
    let mut terms = Vec::new();
    let mut stream = 1000u64;
    for &(h, i) in &w0.index {
        let sampler = component_sampler(&spec.layers[h].kernels[i], spec, h)?;
        let constraints = constraint_checks(spec, h, i);
        let name = |s: &str| format!("{s} [{},{}]", h + 1, i + 1);
        // P(‖Z‖ < ε, Z ∈ B_c)
        let mut small = constraints.clone();
        small.push(TubeCheck::value(eps));
        let joint = estimate_term(&GaussianTube::new(sampler.clone(), small)?, budget, derive_seed(seed, stream))?;
        stream += 1;
        // P(Z ∈ B_c), entering with a positive sign
        let in_bc = if constraints.is_empty() {
            LogProbEstimate {
                log_p: 0.0,
                se: 0.0,
                levels: 0,
                n_total: 0,
            }
        } else {
            estimate_term(&GaussianTube::new(sampler.clone(), constraints.clone())?, budget, derive_seed(seed, stream))?
        };
        stream += 1;
        let mut near = constraints.clone();
        let center = w0.project(h, i)?;
        near.push(TubeCheck::value_around(&center, 2.0 * eps));
        let near_est = estimate_term(&GaussianTube::new(sampler, near)?, budget, derive_seed(seed, stream))?;
        stream += 1;
        terms.push((name("log P(|Z| < eps, Z in B_c)"), joint));
        terms.push((
            name("-log P(Z in B_c)"),
            LogProbEstimate {
                log_p: -in_bc.log_p,
                ..in_bc
            },
        ));
        terms.push((name("log P(|Z - w0| < 2 eps, Z in B_c)"), near_est));
    }
    Ok(phi_from_terms(eps, infimum, terms))
}

/// Outcome of the ordering checks `φ ≤ φ_c ≤ Φ_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingReport {
    pub eps: f64,
    pub phi: PhiEstimate,
    pub phi_c: PhiEstimate,
    pub big_phi: ConcentrationEstimate,
    /// `φ̂ ≤ φ̂_c + 3 · combined SE`.
    pub lower_holds: bool,
    /// `φ̂_c ≤ Φ̂_c + 3 · combined SE`.
    pub upper_holds: bool,
}

/// Checks the hypotheses `‖P_{h,i} w₀‖∞ + 2ε ≤ 1` (`h ≤ H-1`) and
/// `‖∂P_{h,i} w₀ / ∂x_j‖∞ ≤ K_min/2` (`h ≥ 2`).
pub fn check_ordering_hypotheses(spec: &DeepGPSpec, w0: &StackedFunction, eps: f64) -> Result<()> {
    check_stack(spec, w0)?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Hypothesis(format!("eps = {eps} is outside (0, 1]")));
    }
    let k_min = spec.k_min();
    let depth = spec.depth();
    for &(h, i) in &w0.index {
        let p = w0.project(h, i)?;
        if h + 1 < depth && p.sup_norm() + 2.0 * eps > 1.0 + STRICT_MARGIN {
            return Err(Error::Hypothesis(format!(
                "‖P[{},{}] w0‖∞ + 2 eps = {} exceeds 1",
                h + 1,
                i + 1,
                p.sup_norm() + 2.0 * eps
            )));
        }
        if h > 0 {
            for j in 0..p.grid().dim() {
                let d = sup_deriv(&p, j)?;
                if d > k_min / 2.0 + STRICT_MARGIN {
                    return Err(Error::Hypothesis(format!(
                        "derivative {} of P[{},{}] w0 is {d}, above K_min/2",
                        j + 1,
                        h + 1,
                        i + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

/// `φ̂ ≤ φ̂_c ≤ Φ̂_c` within three combined standard errors.
pub fn ordering_deep_check(
    spec: &DeepGPSpec,
    w0: &StackedFunction,
    eps: f64,
    budget: &Budget,
    seed: u64,
) -> Result<OrderingReport> {
    check_ordering_hypotheses(spec, w0, eps)?;
    let phi = phi_single(spec, w0, eps, budget, derive_seed(seed, 1))?;
    let phi_c = phi_c_single(spec, w0, eps, budget, derive_seed(seed, 2))?;
    let z0 = w0.unstack()?;
    let big_phi = phi_deep(spec, &z0, eps, budget, derive_seed(seed, 3))?;
    let lower_holds = phi.value <= phi_c.value + 3.0 * (phi.se.powi(2) + phi_c.se.powi(2)).sqrt();
    let upper_holds = phi_c.value <= big_phi.total + 3.0 * (phi_c.se.powi(2) + big_phi.total_se.powi(2)).sqrt();
    Ok(OrderingReport {
        eps,
        phi,
        phi_c,
        big_phi,
        lower_holds,
        upper_holds,
    })
}

/// Result of a correlation inequality check.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub joint: f64,
    pub marginals: Vec<f64>,
    pub product: f64,
    /// Combined standard error of `joint − product`.
    pub se: f64,
    /// `joint ≥ product − 3 se`.
    pub holds: bool,
    pub n: usize,
}

/// Joint and marginal frequencies of the events returned by `events` for `n`
/// independent draws.
pub fn correlation_check(
    n: usize,
    seed: u64,
    events: impl Fn(&mut Rng) -> Vec<bool> + Sync,
) -> Result<CorrelationReport> {
    if n < 100 {
        return Err(invalid("n_mc", "at least 100 draws are required"));
    }
    const CHUNK: usize = 1000;
    let chunks = n.div_ceil(CHUNK);
    let counts: Vec<(usize, Vec<usize>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let mut joint = 0;
            let mut marg: Vec<usize> = Vec::new();
            for _ in 0..CHUNK.min(n - c * CHUNK) {
                let e = events(&mut rng);
                if marg.is_empty() {
                    marg = vec![0; e.len()];
                }
                if e.iter().all(|&b| b) {
                    joint += 1;
                }
                for (m, b) in marg.iter_mut().zip(&e) {
                    *m += *b as usize;
                }
            }
            (joint, marg)
        })
        .collect();
    let k = counts.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    let mut joint = 0;
    let mut marg = vec![0usize; k];
    for (j, m) in counts {
        joint += j;
        for (a, b) in marg.iter_mut().zip(m) {
            *a += b;
        }
    }
    let nf = n as f64;
    let pj = joint as f64 / nf;
    let marginals: Vec<f64> = marg.iter().map(|&m| m as f64 / nf).collect();
    let product: f64 = marginals.iter().product();
    // delta method for the product, variances added conservatively
    let var_prod: f64 = marginals
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| (product / p).powi(2) * p * (1.0 - p) / nf)
        .sum();
    let se = (pj * (1.0 - pj) / nf + var_prod).sqrt();
    Ok(CorrelationReport {
        joint: pj,
        marginals,
        product,
        se,
        holds: pj >= product - 3.0 * se,
        n,
    })
}

/// `P(‖Z‖∞ ≤ a, ‖∂_j Z‖∞ ≤ b_j ∀j) ≥ P(‖Z‖∞ ≤ a) Π_j P(‖∂_j Z‖∞ ≤ b_j)` for a
/// process with differentiable paths.
pub fn correlation_inequality_check(
    kernel: &KernelSpec,
    grid: &crate::grid::GridSpec,
    a: f64,
    b: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    if !kernel.has_differentiable_paths() {
        return Err(invalid("kernel", "the process must have differentiable paths"));
    }
    if b.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: b.len(),
        });
    }
    let sampler = ProcessSampler::for_kernel(kernel, grid)?;
    let fds = (0..grid.dim()).map(|j| fd_matrix(grid, j)).collect::<Result<Vec<_>>>()?;
    correlation_check(n_mc, seed, |rng| {
        let mut path = vec![0.0; grid.len()];
        sampler.draw_into(rng, &mut path);
        let mut e = vec![path.iter().all(|v| v.abs() <= a)];
        for (fd, &bj) in fds.iter().zip(b) {
            e.push(fd.sup_norm(&path) <= bj);
        }
        e
    })
}

/// Contraction rates solved from a concentration curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RateSolution {
    /// `(n, ε_n)` with `Φ(ε_n) = n ε_n²` on the log-log interpolant.
    pub eps_n: Vec<(f64, f64)>,
    /// Least-squares slope of `log ε_n` on `log n`.
    pub exponent: f64,
}

/// Piecewise-linear interpolation of `log Φ` in `log ε`, extrapolated
/// linearly beyond the ends.
fn loglog_interp(log_eps: &[f64], log_phi: &[f64], x: f64) -> f64 {
    let n = log_eps.len();
    let k = match log_eps.iter().position(|&e| e > x) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => n - 2,
    }
    .min(n - 2);
    let t = (x - log_eps[k]) / (log_eps[k + 1] - log_eps[k]);
    log_phi[k] + t * (log_phi[k + 1] - log_phi[k])
}

/// Solves `Φ(ε) = n ε²` for each `n` by bisection on the log-log interpolant
/// of `curve` and fits the rate exponent.
pub fn solve_rate(curve: &[(f64, f64)], n_grid: &[f64]) -> Result<RateSolution> {
    if curve.len() < 6 {
        return Err(invalid("curve", "at least 6 points are required"));
    }
    if n_grid.len() < 2 {
        return Err(invalid("n_grid", "at least 2 sample sizes are required"));
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        if !(w[0].0 < w[1].0) || !(w[1].1 < w[0].1) {
            return Err(Error::NotDecreasing(format!(
                "Φ({}) = {} and Φ({}) = {}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    if pts.iter().any(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(invalid("curve", "eps and Φ must be positive"));
    }
    let log_eps: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let log_phi: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mut eps_n = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        if !(n > 0.0) {
            return Err(invalid("n_grid", "sample sizes must be positive"));
        }
        // F(x) = log Φ(e^x) − log n − 2x is strictly decreasing in x.
        let f = |x: f64| loglog_interp(&log_eps, &log_phi, x) - n.ln() - 2.0 * x;
        let (mut lo, mut hi) = (log_eps[0], log_eps[log_eps.len() - 1]);
        while f(lo) < 0.0 {
            lo -= 1.0 + (hi - lo);
        }
        while f(hi) > 0.0 {
            hi += 1.0 + (hi - lo);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        eps_n.push((n, (0.5 * (lo + hi)).exp()));
    }
    let xs: Vec<f64> = eps_n.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = eps_n.iter().map(|p| p.1.ln()).collect();
    let exponent = crate::experiments::fit_slope(&xs, &ys)?.slope;
    Ok(RateSolution { eps_n, exponent })
}

/// CSV with columns `eps,infimum_total,logp_total,phi_total,phi_se`.
pub fn concentration_csv(estimates: &[ConcentrationEstimate]) -> String {
    let mut out = String::from("eps,infimum_total,logp_total,phi_total,phi_se\n");
    for e in estimates {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.eps,
            e.infimum_total(),
            e.logp_total(),
            e.total,
            e.total_se
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    #[test]
    fn exact_brownian_series() {
        assert!((brownian_small_ball_exact(0.5) - 0.009_16).abs() < 5e-5);
        assert!(brownian_small_ball_exact(10.0) > 0.999_999);
    }

    #[test]
    fn bridge_probability_limits() {
        // wide band: the bridge almost surely stays inside
        assert!((bridge_stay_probability(0.0, 0.0, 0.01, 5.0) - 1.0).abs() < 1e-12);
        assert_eq!(bridge_stay_probability(0.0, 0.6, 0.01, 0.5), 0.0);
        // one-sided limit: P(max of bridge 0→0 over time t < c) = 1 − exp(−2c²/t)
        let t = 0.01;
        let c = 0.05;
        let two_sided = bridge_stay_probability(0.0, 0.0, t, c);
        let one_sided = 1.0 - (-2.0 * c * c / t).exp();
        assert!(two_sided < one_sided && two_sided > 1.0 - 2.0 * (1.0 - one_sided) - 1e-12);
    }

    #[test]
    fn wide_ball_has_log_probability_zero() {
        let t = BrownianSmallBall::new(50.0, 50).unwrap();
        let e = smallball_mc(&t, 2000, 1).unwrap();
        assert!(e.log_p.abs() < 1e-12);
    }

    #[test]
    fn brownian_plain_mc_matches_series() {
        let t = BrownianSmallBall::new(0.5, 200).unwrap();
        let e = smallball_mc(&t, 100_000, 3).unwrap();
        let exact = brownian_small_ball_exact(0.5);
        assert!((e.p() - exact).abs() <= 3.0 * e.p_se(), "{} ± {} vs {exact}", e.p(), e.p_se());
    }

    #[test]
    fn single_level_is_plain_mc() {
        let t = BrownianSmallBall::new(1.0, 100).unwrap();
        let opts = SplittingOptions {
            replicates: 4,
            ..SplittingOptions::default()
        };
        let e = smallball_splitting_with(&t, Some(1), 5000, 9, &opts).unwrap();
        assert_eq!(e.levels, 1);
        let exact = brownian_small_ball_exact(1.0);
        assert!((e.p() - exact).abs() <= 3.0 * e.p_se() + 1e-3, "{} vs {exact}", e.p());
    }

    #[test]
    fn splitting_resolves_small_probabilities() {
        let t = BrownianSmallBall::new(0.3, 100).unwrap();
        let opts = SplittingOptions {
            replicates: 6,
            moves: 3,
            ..SplittingOptions::default()
        };
        let e = smallball_splitting_with(&t, None, 1000, 5, &opts).unwrap();
        let exact = brownian_small_ball_exact(0.3);
        assert!(e.levels > 1);
        assert!((e.log_p - exact.ln()).abs() <= 3.0 * e.se + 0.05, "{} ± {} vs {}", e.log_p, e.se, exact.ln());
    }

    #[test]
    fn rate_solver_on_power_law() {
        let curve: Vec<(f64, f64)> = (0..10).map(|k| {
            let e = 0.01 * 1.7f64.powi(k);
            (e, e.powi(-2))
        }).collect();
        let sol = solve_rate(&curve, &[1e4, 1e5, 1e6]).unwrap();
        assert!((sol.eps_n[0].1 - 0.1).abs() < 1e-10);
        assert!((sol.exponent + 0.25).abs() < 1e-9);
    }

    #[test]
    fn rate_solver_refuses_increasing_curves() {
        let curve: Vec<(f64, f64)> = (1..8).map(|k| (k as f64 * 0.1, k as f64)).collect();
        assert!(matches!(solve_rate(&curve, &[10.0, 100.0]), Err(Error::NotDecreasing(_))));
    }

    #[test]
    fn independent_events_factorize() {
        let r = correlation_check(100_000, 4, |rng| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            vec![a.abs() < 1.0, b.abs() < 0.5]
        })
        .unwrap();
        assert!((r.joint - r.product).abs() <= 2.0 * r.se, "{r:?}");
    }

    #[test]
    fn correlation_inequality_for_smooth_paths() {
        let grid = GridSpec::new(1, 101).unwrap();
        let r = correlation_inequality_check(&KernelSpec::integrated_brownian(1), &grid, 1.0, &[1.0], 20_000, 8).unwrap();
        assert!(r.holds, "{r:?}");
        let loose = correlation_inequality_check(&KernelSpec::integrated_brownian(1), &grid, 1e6, &[1.0], 20_000, 8).unwrap();
        assert!((loose.joint - loose.product).abs() <= loose.se + 1e-12);
    }

    #[test]
    fn csv_layout() {
        let e = ConcentrationEstimate {
            eps: 0.5,
            infimum_terms: vec![((0, 0), 2.0)],
            logp_smallball: vec![(
                (0, 0),
                LogProbEstimate {
                    log_p: -1.0,
                    se: 0.1,
                    levels: 1,
                    n_total: 10,
                },
            )],
            logp_deriv: vec![],
            total: 5.0,
            total_se: 0.2,
        };
        assert_eq!(e.assemble(), 5.0);
        assert_eq!(concentration_csv(&[e]), "eps,infimum_total,logp_total,phi_total,phi_se\n0.5,2,-1,5,0.2\n");
    }
}
