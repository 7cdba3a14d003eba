//! Posterior sampling under the constrained deep prior by
//! preconditioned Crank–Nicolson moves, one component at a time.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::composition::{compose_on_grid, compose_point, DeepGPSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::kernels::FdOperator;
use crate::models::{density_from_latent, hellinger, l2_u, log_logistic, BinaryRegression, DensityOnCube};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sampling::{check_constraints, passes, rejection_sample_layer, ProcessSampler};

/// Observations for one of the two tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    /// i.i.d. points of `[-1,1]^d`.
    Density(Vec<Vec<f64>>),
    /// Pairs `(U_i, V_i)` with `V_i ∈ {0, 1}`.
    Classification(Vec<(Vec<f64>, bool)>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::Density(x) => x.len(),
            Data::Classification(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let points: Box<dyn Iterator<Item = &Vec<f64>>> = match self {
            Data::Density(x) => Box::new(x.iter()),
            Data::Classification(x) => Box::new(x.iter().map(|(u, _)| u)),
        };
        for (k, p) in points.enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(invalid("data", format!("observation {k} lies outside [-1,1]^d")));
            }
        }
        Ok(())
    }
}

fn log_normalizer(latent: &GridFunction) -> f64 {
    let max = latent.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + latent.map(|v| (v - max).exp()).integrate().ln()
}

/// `Σ log p_{C}(X_i)` with `p_C = e^C / ∫ e^C`; the normalizer is the
/// trapezoid integral on `grid`, the latent at each point is the composition
/// of the interpolated layers.
pub fn log_likelihood_density(layers: &[Vec<GridFunction>], points: &[Vec<f64>], grid: &GridSpec) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let log_z = log_normalizer(&compose_on_grid(layers, grid)?);
    let mut s = 0.0;
    for x in points {
        s += compose_point(layers, x, true)? - log_z;
    }
    Ok(s)
}

/// `Σ V_i log Ψ(C(U_i)) + (1 − V_i) log(1 − Ψ(C(U_i)))`.
pub fn log_likelihood_classif(layers: &[Vec<GridFunction>], data: &[(Vec<f64>, bool)]) -> Result<f64> {
    let mut s = 0.0;
    for (u, v) in data {
        let c = compose_point(layers, u, true)?;
        s += if *v { log_logistic(c) } else { log_logistic(-c) };
    }
    Ok(s)
}

/// Tuning of a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McmcConfig {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    /// Initial pCN scale of every component.
    pub beta: f64,
    pub target_acceptance: f64,
    /// Rejection budget per component for the initial state.
    pub max_init_attempts: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            burnin: 500,
            thin: 10,
            beta: 0.08,
            target_acceptance: 0.25,
            max_init_attempts: 100_000,
            seed: 0,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(invalid("beta", "must lie in (0,1)"));
        }
        if self.thin == 0 {
            return Err(invalid("thin", "must be at least 1"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(invalid("target_acceptance", "must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Current layers with their cached log-likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub layers: Vec<Vec<GridFunction>>,
    pub log_lik: f64,
}

/// Likelihood and prior machinery for one data set.
#[derive(Clone, Debug)]
pub struct Posterior<'a> {
    spec: &'a DeepGPSpec,
    data: &'a Data,
    samplers: Vec<Vec<ProcessSampler>>,
    fds: Vec<Vec<FdOperator>>,
}

impl<'a> Posterior<'a> {
    pub fn new(spec: &'a DeepGPSpec, data: &'a Data) -> Result<Self> {
        spec.validate()?;
        data.validate(spec.input_dim())?;
        let samplers = spec.layers.iter().map(|l| l.samplers()).collect::<Result<_>>()?;
        let fds = spec.layers.iter().map(|l| l.fd_operators()).collect::<Result<_>>()?;
        Ok(Self { spec, data, samplers, fds })
    }

    pub fn spec(&self) -> &DeepGPSpec {
        self.spec
    }

    pub fn log_likelihood(&self, layers: &[Vec<GridFunction>]) -> Result<f64> {
        match self.data {
            Data::Density(x) => log_likelihood_density(layers, x, &self.spec.layers[0].grid),
            Data::Classification(x) => log_likelihood_classif(layers, x),
        }
    }

    /// Initial state: every layer by independent rejection.
    pub fn initial_state(&self, seed: u64, max_attempts: usize) -> Result<ChainState> {
        let layers = self
            .spec
            .layers
            .iter()
            .enumerate()
            .map(|(h, l)| rejection_sample_layer(l, derive_seed(seed, h as u64), max_attempts).map(|s| s.components))
            .collect::<Result<Vec<_>>>()?;
        let log_lik = self.log_likelihood(&layers)?;
        Ok(ChainState { layers, log_lik })
    }

    /// One pCN move of component `(h, i)`: `z' = √(1−β²) z + β ξ` with `ξ`
    /// an unconstrained prior draw. Proposals outside the constraints are
    /// rejected; others are accepted with probability
    /// `min(1, exp(Δ log-likelihood))`. Returns whether the move was taken.
    pub fn pcn_step(&self, state: &mut ChainState, h: usize, i: usize, beta: f64, rng: &mut Rng) -> Result<bool> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid("beta", "must lie in (0,1)"));
        }
        let layer = &self.spec.layers[h];
        let sampler = &self.samplers[h][i];
        let mut xi = vec![0.0; layer.grid.len()];
        sampler.draw_into(rng, &mut xi);
        let rho = (1.0 - beta * beta).sqrt();
        let current = state.layers[h][i].values();
        let proposal: Vec<f64> = current.iter().zip(&xi).map(|(z, x)| rho * z + beta * x).collect();
        let u: f64 = rng.random();
        if !passes(&proposal, layer, i, &self.fds[h]) {
            return Ok(false);
        }
        let old = std::mem::replace(&mut state.layers[h][i], GridFunction::new(layer.grid, proposal)?);
        let ll = if self.data.is_empty() { 0.0 } else { self.log_likelihood(&state.layers)? };
        if ll.is_finite() && u.ln() <= ll - state.log_lik {
            state.log_lik = ll;
            Ok(true)
        } else {
            state.layers[h][i] = old;
            Ok(false)
        }
    }
}

/// Thinned post-burn-in states of one chain.
#[derive(Clone, Debug)]
pub struct PosteriorChain {
    pub states: Vec<Vec<Vec<GridFunction>>>,
    /// Log-likelihood of every stored state.
    pub log_post: Vec<f64>,
    /// Post-burn-in acceptance rate per layer (whole run when there is no
    /// post-burn-in phase).
    pub acceptance: Vec<f64>,
    /// Frozen pCN scale per component after tuning.
    pub betas: Vec<Vec<f64>>,
    pub config: McmcConfig,
}

fn store(chain: &mut PosteriorChain, spec: &DeepGPSpec, state: &ChainState) {
    for (h, (layer, comps)) in spec.layers.iter().zip(&state.layers).enumerate() {
        for (i, c) in comps.iter().enumerate() {
            assert!(
                check_constraints(c, layer, i).passed,
                "stored state violates the constraints of component ({h},{i})"
            );
        }
    }
    assert!(state.log_lik.is_finite(), "stored log-likelihood is not finite");
    chain.states.push(state.layers.clone());
    chain.log_post.push(state.log_lik);
}

/// Systematic-scan pCN over all components, starting from a rejection draw.
pub fn run_mcmc(spec: &DeepGPSpec, data: &Data, config: &McmcConfig) -> Result<PosteriorChain> {
    let post = Posterior::new(spec, data)?;
    config.validate()?;
    let init = post.initial_state(derive_seed(config.seed, 0), config.max_init_attempts)?;
    run_mcmc_from(&post, init, config)
}

/// As [`run_mcmc`] from a given state, e.g. the last state of a saved chain.
pub fn run_mcmc_from(post: &Posterior<'_>, init: ChainState, config: &McmcConfig) -> Result<PosteriorChain> {
    config.validate()?;
    let spec = post.spec;
    let mut rng = rng_from_seed(derive_seed(config.seed, 1));
    let mut state = init;
    let mut betas: Vec<Vec<f64>> = spec.layers.iter().map(|l| vec![config.beta; l.d_out]).collect();
    let mut window: Vec<Vec<(usize, usize)>> = spec.layers.iter().map(|l| vec![(0, 0); l.d_out]).collect();
    let mut totals = vec![(0usize, 0usize); spec.depth()];
    let mut post_burn = vec![(0usize, 0usize); spec.depth()];
    let mut chain = PosteriorChain {
        states: Vec::new(),
        log_post: Vec::new(),
        acceptance: Vec::new(),
        betas: Vec::new(),
        config: *config,
    };
    const TUNE_EVERY: usize = 50;
    for it in 0..config.iters {
        for h in 0..spec.depth() {
            for i in 0..spec.layers[h].d_out {
                let acc = post.pcn_step(&mut state, h, i, betas[h][i], &mut rng)?;
                totals[h].0 += acc as usize;
                totals[h].1 += 1;
                if it >= config.burnin {
                    post_burn[h].0 += acc as usize;
                    post_burn[h].1 += 1;
                } else {
                    let w = &mut window[h][i];
                    w.0 += acc as usize;
                    w.1 += 1;
                    if w.1 == TUNE_EVERY {
                        let rate = w.0 as f64 / w.1 as f64;
                        let b = betas[h][i] * ((rate - config.target_acceptance) * 2.0).exp();
                        betas[h][i] = b.clamp(1e-4, 0.99);
                        *w = (0, 0);
                    }
                }
            }
        }
        if it >= config.burnin && (it - config.burnin + 1) % config.thin == 0 {
            store(&mut chain, spec, &state);
        }
    }
    if chain.states.is_empty() {
        store(&mut chain, spec, &state);
    }
    chain.acceptance = post_burn
        .iter()
        .zip(&totals)
        .map(|(p, t)| {
            let (a, n) = if p.1 > 0 { *p } else { *t };
            if n == 0 {
                0.0
            } else {
                a as f64 / n as f64
            }
        })
        .collect();
    chain.betas = betas;
    Ok(chain)
}

/// The target of a posterior radius.
#[derive(Clone, Debug)]
pub enum Truth {
    Density(DensityOnCube),
    /// Regression function with an optional law of `U` (uniform by default).
    Regression(BinaryRegression, Option<DensityOnCube>),
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Distance of every stored state to the truth: Hellinger for densities,
/// `‖f − f₀‖_{2,U}` for classification.
pub fn posterior_distances(chain: &PosteriorChain, truth: &Truth) -> Result<Vec<f64>> {
    chain
        .states
        .iter()
        .map(|s| match truth {
            Truth::Density(p0) => {
                let p = density_from_latent(&compose_on_grid(s, p0.grid())?)?;
                hellinger(&p, p0)
            }
            Truth::Regression(f0, law) => {
                let f = crate::models::classify_from_latent(&compose_on_grid(s, f0.grid())?);
                l2_u(f.as_grid_function(), f0.as_grid_function(), law.as_ref())
            }
        })
        .collect()
}

/// `q`-quantile over stored states of the distance to the truth.
pub fn posterior_radius(chain: &PosteriorChain, truth: &Truth, q: f64) -> Result<f64> {
    if chain.states.is_empty() {
        return Err(invalid("chain", "no stored states"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("q", "must lie in [0,1]"));
    }
    Ok(quantile(&posterior_distances(chain, truth)?, q))
}

/// Effective sample size by batch means with `√n` batches.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let b = (n as f64).sqrt().floor() as usize;
    let k = n / b;
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return n as f64;
    }
    let batch_means: Vec<f64> = (0..k).map(|j| series[j * b..(j + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let bm = batch_means.iter().sum::<f64>() / k as f64;
    let bvar = batch_means.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (k - 1).max(1) as f64;
    let tau = (b as f64 * bvar / var).max(1e-12);
    (n as f64 / tau).min(n as f64)
}

/// Writes the chain to `dir`: `index.csv` with one row per stored state
/// (`state,log_post,files`), one GridFunction CSV per component named
/// `state_<k>_h<h>_i<i>.csv`, and `chain.txt` with `key = value` metadata.
pub fn save_chain(chain: &PosteriorChain, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("state,log_post,files\n");
    for (k, (s, lp)) in chain.states.iter().zip(&chain.log_post).enumerate() {
        let mut files = Vec::new();
        for (h, comps) in s.iter().enumerate() {
            for (i, c) in comps.iter().enumerate() {
                let name = format!("state_{k:05}_h{}_i{}.csv", h + 1, i + 1);
                c.write_csv(dir.join(&name), false)?;
                files.push(name);
            }
        }
        let _ = writeln!(index, "{k},{lp},{}", files.join(";"));
    }
    std::fs::write(dir.join("index.csv"), index)?;
    let c = &chain.config;
    let mut meta = String::new();
    let _ = writeln!(meta, "iters = {}", c.iters);
    let _ = writeln!(meta, "burnin = {}", c.burnin);
    let _ = writeln!(meta, "thin = {}", c.thin);
    let _ = writeln!(meta, "seed = {}", c.seed);
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let _ = writeln!(meta, "acceptance = {}", join(&chain.acceptance));
    for (h, b) in chain.betas.iter().enumerate() {
        let _ = writeln!(meta, "beta.h{} = {}", h + 1, join(b));
    }
    std::fs::write(dir.join("chain.txt"), meta)?;
    Ok(())
}

/// Reads the states and log-likelihoods written by [`save_chain`].
pub fn load_chain_states(dir: impl AsRef<Path>) -> Result<(Vec<Vec<Vec<GridFunction>>>, Vec<f64>)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("index.csv"))?;
    let mut states = Vec::new();
    let mut log_post = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let parse_err = |m: &str| Error::Parse {
            line: no + 1,
            message: m.to_string(),
        };
        let mut parts = line.splitn(3, ',');
        let _k = parts.next().ok_or_else(|| parse_err("missing state"))?;
        let lp: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad log_post"))?;
        let files = parts.next().ok_or_else(|| parse_err("missing files"))?;
        let mut layers: Vec<Vec<GridFunction>> = Vec::new();
        for name in files.split(';') {
            let h: usize = name
                .split("_h")
                .nth(1)
                .and_then(|s| s.split('_').next())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err("bad file name"))?;
            while layers.len() < h {
                layers.push(Vec::new());
            }
            layers[h - 1].push(GridFunction::read_csv(dir.join(name))?.0);
        }
        states.push(layers);
        log_post.push(lp);
    }
    Ok((states, log_post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::DeepGPSpec;

    fn spec() -> DeepGPSpec {
        DeepGPSpec::ibm_chain(&[1, 2], 4.0, 41).unwrap()
    }

    #[test]
    fn empty_and_uniform_likelihoods() {
        let s = spec();
        let grid = s.layers[0].grid;
        let layers = vec![vec![GridFunction::from_fn(grid, |x| 0.5 * x[0])], vec![GridFunction::zeros(grid)]];
        assert_eq!(log_likelihood_density(&layers, &[], &grid).unwrap(), 0.0);
        let pts: Vec<Vec<f64>> = (0..10).map(|k| vec![-0.9 + 0.18 * k as f64]).collect();
        let ll = log_likelihood_density(&layers, &pts, &grid).unwrap();
        assert!((ll - 10.0 * 0.5f64.ln()).abs() < 1e-12);
        let data: Vec<(Vec<f64>, bool)> = pts.iter().map(|p| (p.clone(), p[0] > 0.0)).collect();
        assert!((log_likelihood_classif(&layers, &data).unwrap() - 10.0 * 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(log_likelihood_classif(&layers, &[]).unwrap(), 0.0);
    }

    #[test]
    fn zero_iterations_keep_the_initial_state() {
        let s = spec();
        let data = Data::Density(vec![vec![0.1], vec![-0.3]]);
        let cfg = McmcConfig {
            iters: 0,
            seed: 4,
            ..McmcConfig::default()
        };
        let chain = run_mcmc(&s, &data, &cfg).unwrap();
        assert_eq!(chain.states.len(), 1);
        let post = Posterior::new(&s, &data).unwrap();
        let init = post.initial_state(derive_seed(4, 0), cfg.max_init_attempts).unwrap();
        assert_eq!(chain.states[0], init.layers);
    }

    #[test]
    fn tiny_steps_are_almost_always_accepted() {
        let s = spec();
        let data = Data::Density(vec![vec![0.2]; 5]);
        let post = Posterior::new(&s, &data).unwrap();
        let mut state = post.initial_state(3, 100_000).unwrap();
        let mut rng = rng_from_seed(8);
        let accepted = (0..200).filter(|_| post.pcn_step(&mut state, 1, 0, 1e-6, &mut rng).unwrap()).count();
        assert!(accepted >= 198, "{accepted}");
    }

    #[test]
    fn chains_are_deterministic_and_persist() {
        let s = spec();
        let data = Data::Density(vec![vec![0.5], vec![0.4], vec![-0.1]]);
        let cfg = McmcConfig {
            iters: 60,
            burnin: 20,
            thin: 10,
            seed: 11,
            ..McmcConfig::default()
        };
        let a = run_mcmc(&s, &data, &cfg).unwrap();
        let b = run_mcmc(&s, &data, &cfg).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.states.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        save_chain(&a, dir.path()).unwrap();
        let (states, lp) = load_chain_states(dir.path()).unwrap();
        assert_eq!(states, a.states);
        assert_eq!(lp, a.log_post);
    }

    #[test]
    fn radius_quantiles() {
        let s = spec();
        let grid = s.layers[0].grid;
        let layers = vec![vec![GridFunction::from_fn(grid, |x| 0.5 * x[0])], vec![GridFunction::from_fn(grid, |x| x[0])]];
        let p = density_from_latent(&compose_on_grid(&layers, &grid).unwrap()).unwrap();
        let chain = PosteriorChain {
            states: vec![layers],
            log_post: vec![0.0],
            acceptance: vec![],
            betas: vec![],
            config: McmcConfig::default(),
        };
        assert_eq!(posterior_radius(&chain, &Truth::Density(p), 0.9).unwrap(), 0.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!(quantile(&[3.0, 1.0, 2.0], 1.0) >= quantile(&[3.0, 1.0, 2.0], 0.5));
    }
}
