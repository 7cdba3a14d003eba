//! Subcommand implementations. Each writes its files into the output
//! directory and returns whether every requested operation succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cdgp::checks::{battery_report, run_battery, CheckBudget};
use cdgp::composition::{compose_on_grid, sample_constrained, DeepGPSpec};
use cdgp::concentration::{
    brownian_small_ball_exact, concentration_csv, phi_deep, smallball_splitting_with, solve_rate, BrownianSmallBall,
    Budget, GaussianTube, LogProbEstimate, SplittingOptions,
};
use cdgp::experiments::{
    chain_targets, contraction_study, fit_slope, make_truth_holder, sample_classif_data, sample_data, PriorFamily,
    StudyConfig, Task,
};
use cdgp::inference::{effective_sample_size, posterior_distances, quantile, run_mcmc, save_chain, Data, McmcConfig, Truth};
use cdgp::models::{classify_from_latent, density_from_latent};
use cdgp::rng::derive_seed;
use cdgp::sampling::ProcessSampler;

use crate::config::RunConfig;
use crate::plot;

/// Collects written files so the run can list them.
pub struct Output {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn seed(cfg: &RunConfig) -> u64 {
    cfg.u64("run.seed")
}

/// The study configuration implied by the `prior`, `truth`, `fit` and
/// `study` sections.
pub fn study_config(cfg: &RunConfig) -> StudyConfig {
    let family = match cfg.word("prior.family") {
        "ibm" => PriorFamily::IntegratedBrownian(cfg.usizes("prior.orders")),
        "rl" => PriorFamily::RiemannLiouville(cfg.floats("prior.alphas")),
        _ => PriorFamily::Matern(cfg.floats("prior.alphas")),
    };
    StudyConfig {
        family,
        dim: cfg.usize("prior.dim"),
        k: cfg.f64("prior.k"),
        points_per_axis: cfg.usize("prior.points"),
        beta: cfg.f64("truth.beta"),
        schedule: cfg.usizes("study.schedule"),
        replicates: cfg.usize("study.replicates"),
        mcmc: McmcConfig {
            iters: cfg.usize("fit.iters"),
            burnin: cfg.usize("fit.burnin"),
            thin: cfg.usize("fit.thin"),
            beta: cfg.f64("fit.beta"),
            seed: seed(cfg),
            ..McmcConfig::default()
        },
        quantile: cfg.f64("fit.quantile"),
        task: if cfg.word("study.task") == "density" {
            Task::Density
        } else {
            Task::Classification
        },
        seed: seed(cfg),
    }
}

fn deep_spec(cfg: &RunConfig) -> Result<DeepGPSpec> {
    Ok(study_config(cfg).deep_spec()?)
}

pub fn cmd_sample(cfg: &RunConfig, out: &mut Output) -> Result<bool> {
    let spec = deep_spec(cfg)?;
    let grid = spec.layers[0].grid;
    let mut index = String::from("sample,attempts,sup_norm\n");
    for k in 0..cfg.usize("sample.count") {
        let s = sample_constrained(&spec, derive_seed(seed(cfg), k as u64), cfg.usize("sample.max_attempts"))?;
        for (h, comps) in s.layers.iter().enumerate() {
            for (i, c) in comps.iter().enumerate() {
                out.write(&format!("sample_{k:04}_h{}_i{}.csv", h + 1, i + 1), &c.to_csv(false))?;
            }
        }
        let composed = compose_on_grid(&s.layers, &grid)?;
        out.write(&format!("sample_{k:04}_composed.csv"), &composed.to_csv(false))?;
        let _ = writeln!(index, "{k},{},{}", s.attempts, composed.sup_norm());
    }
    out.write("samples.csv", &index)?;
    Ok(true)
}

fn splitting_options(cfg: &RunConfig, section: &str) -> SplittingOptions {
    SplittingOptions {
        replicates: cfg.usize(&format!("{section}.replicates")),
        moves: cfg.usize(&format!("{section}.moves")),
        ..SplittingOptions::default()
    }
}

pub fn cmd_smallball(cfg: &RunConfig, out: &mut Output) -> Result<bool> {
    let opts = splitting_options(cfg, "smallball");
    let particles = cfg.usize("smallball.particles");
    let brownian = cfg.word("smallball.process") == "brownian";
    let mut csv = String::from("eps,log_p,se,levels,particles,exact_log_p\n");
    let mut pts = Vec::new();
    let mut ok = true;
    for (k, &eps) in cfg.floats("smallball.eps").iter().enumerate() {
        let s = derive_seed(seed(cfg), k as u64);
        let (est, exact): (cdgp::Result<LogProbEstimate>, f64) = if brownian {
            let target = BrownianSmallBall::new(eps, cfg.usize("smallball.steps"))?;
            (smallball_splitting_with(&target, None, particles, s, &opts), brownian_small_ball_exact(eps).ln())
        } else {
            let spec = deep_spec(cfg)?;
            let sampler = ProcessSampler::for_kernel(&spec.layers[0].kernels[0], &spec.layers[0].grid)?;
            let target = GaussianTube::small_ball(sampler, eps)?;
            (smallball_splitting_with(&target, None, particles, s, &opts), f64::NAN)
        };
        match est {
            Ok(e) => {
                let _ = writeln!(csv, "{eps},{},{},{},{},{exact}", e.log_p, e.se, e.levels, e.n_total);
                pts.push((eps, -e.log_p));
            }
            Err(err) => {
                ok = false;
                eprintln!("smallball eps={eps}: {err}");
                let _ = writeln!(csv, "{eps},NaN,NaN,0,0,{exact}");
            }
        }
    }
    out.write("smallball.csv", &csv)?;
    let mut summary = String::new();
    if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        let fit = fit_slope(&xs, &ys)?;
        let _ = writeln!(summary, "slope = {}\nstderr = {}", fit.slope, fit.stderr);
    }
    out.write("smallball_summary.txt", &summary)?;
    let rows: Vec<Vec<f64>> = pts.iter().map(|&(e, v)| vec![e, v]).collect();
    out.write("smallball.dat", &plot::columns(&["eps", "neg_log_p"], &rows))?;
    if cfg.bool("plot.svg") {
        out.write("smallball.svg", &plot::svg("small-ball exponent", "eps", "-log P", &[("estimate", pts)], true))?;
    }
    Ok(ok)
}

pub fn cmd_concentration(cfg: &RunConfig, out: &mut Output) -> Result<bool> {
    let spec = deep_spec(cfg)?;
    let truth = make_truth_holder(cfg.f64("truth.beta"), &spec.layers[0].grid)?;
    let z0 = chain_targets(&spec, &truth.latent)?;
    let budget = Budget {
        particles: cfg.usize("concentration.particles"),
        options: splitting_options(cfg, "concentration"),
    };
    let mut estimates = Vec::new();
    let mut ok = true;
    for (k, &eps) in cfg.floats("concentration.eps").iter().enumerate() {
        match phi_deep(&spec, &z0, eps, &budget, derive_seed(seed(cfg), k as u64)) {
            Ok(e) => estimates.push(e),
            Err(err) => {
                ok = false;
                eprintln!("concentration eps={eps}: {err}");
            }
        }
    }
    out.write("concentration.csv", &concentration_csv(&estimates))?;
    let curve: Vec<(f64, f64)> = estimates.iter().map(|e| (e.eps, e.total)).collect();
    let ns = cfg.floats("concentration.n");
    if curve.len() >= 6 && ns.len() >= 2 {
        match solve_rate(&curve, &ns) {
            Ok(sol) => {
                let mut csv = String::from("n,eps_n\n");
                for (n, e) in &sol.eps_n {
                    let _ = writeln!(csv, "{n},{e}");
                }
                let _ = writeln!(csv, "# exponent = {}", sol.exponent);
                out.write("rate.csv", &csv)?;
            }
            Err(err) => {
                ok = false;
                eprintln!("rate: {err}");
            }
        }
    }
    let rows: Vec<Vec<f64>> = curve.iter().map(|&(e, v)| vec![e, v]).collect();
    out.write("concentration.dat", &plot::columns(&["eps", "phi"], &rows))?;
    if cfg.bool("plot.svg") {
        out.write("concentration.svg", &plot::svg("concentration function", "eps", "phi", &[("estimate", curve)], true))?;
    }
    Ok(ok)
}

pub fn cmd_fit(cfg: &RunConfig, task: Task, out: &mut Output) -> Result<bool> {
    let study = study_config(cfg);
    let spec = study.deep_spec()?;
    let grid = spec.layers[0].grid;
    let truth = make_truth_holder(study.beta, &grid)?;
    let n = cfg.usize("fit.n");
    let data_seed = derive_seed(seed(cfg), 0);
    let (data, target) = match task {
        Task::Density => {
            let pts = sample_data(&truth.density, n, data_seed)?;
            let mut csv = String::from((0..grid.dim()).map(|j| format!("x{}", j + 1)).collect::<Vec<_>>().join(",") + "\n");
            for p in &pts {
                csv.push_str(&p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
                csv.push('\n');
            }
            out.write("data.csv", &csv)?;
            out.write("truth.csv", &truth.density.to_csv())?;
            (Data::Density(pts), Truth::Density(truth.density.clone()))
        }
        Task::Classification => {
            let pts = sample_classif_data(&truth.regression, None, n, data_seed)?;
            let mut csv = String::from((0..grid.dim()).map(|j| format!("x{}", j + 1)).collect::<Vec<_>>().join(",") + ",label\n");
            for (p, y) in &pts {
                csv.push_str(&p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
                let _ = writeln!(csv, ",{}", *y as u8);
            }
            out.write("data.csv", &csv)?;
            out.write("truth.csv", &truth.regression.to_csv())?;
            (Data::Classification(pts), Truth::Regression(truth.regression.clone(), None))
        }
    };
    let mcmc = McmcConfig {
        seed: derive_seed(seed(cfg), 1),
        ..study.mcmc
    };
    let chain = run_mcmc(&spec, &data, &mcmc)?;
    let dist = posterior_distances(&chain, &target)?;
    let mut trace = String::from("state,log_lik,distance\n");
    for (k, (lp, d)) in chain.log_post.iter().zip(&dist).enumerate() {
        let _ = writeln!(trace, "{k},{lp},{d}");
    }
    out.write("posterior.csv", &trace)?;
    // pointwise posterior mean of the induced density or regression function
    let mut mean = vec![0.0; grid.len()];
    for s in &chain.states {
        let latent = compose_on_grid(s, &grid)?;
        let f = match task {
            Task::Density => density_from_latent(&latent)?.values().to_vec(),
            Task::Classification => classify_from_latent(&latent).values().to_vec(),
        };
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / chain.states.len() as f64;
        }
    }
    let mean = cdgp::GridFunction::new(grid, mean)?;
    out.write("posterior_mean.csv", &mean.to_csv(false))?;
    let mut summary = String::new();
    let _ = writeln!(summary, "n = {n}");
    let _ = writeln!(summary, "states = {}", chain.states.len());
    let _ = writeln!(summary, "radius_q = {}", quantile(&dist, study.quantile));
    let _ = writeln!(summary, "quantile = {}", study.quantile);
    let _ = writeln!(summary, "ess_log_lik = {}", effective_sample_size(&chain.log_post));
    let acc: Vec<String> = chain.acceptance.iter().map(|a| a.to_string()).collect();
    let _ = writeln!(summary, "acceptance = {}", acc.join(","));
    out.write("fit_summary.txt", &summary)?;
    if cfg.bool("fit.save_chain") {
        let dir = out.dir().join("chain");
        save_chain(&chain, &dir)?;
        out.written.push(dir);
    }
    Ok(true)
}

pub fn cmd_study(cfg: &RunConfig, out: &mut Output) -> Result<bool> {
    let study = study_config(cfg);
    let r = contraction_study(&study)?;
    out.write("study.csv", &r.csv())?;
    out.write("study_timings.csv", &r.timings_csv())?;
    out.write("study_summary.txt", &r.summary())?;
    let med = r.medians();
    let rows: Vec<Vec<f64>> = med.iter().map(|&(n, m)| vec![n as f64, m]).collect();
    out.write("study.dat", &plot::columns(&["n", "median_radius"], &rows))?;
    if cfg.bool("plot.svg") {
        let pts: Vec<(f64, f64)> = med.iter().map(|&(n, m)| (n as f64, m)).collect();
        let (n0, m0) = pts[0];
        let theory: Vec<(f64, f64)> = pts.iter().map(|&(n, _)| (n, m0 * (n / n0).powf(r.theory))).collect();
        out.write(
            "study.svg",
            &plot::svg("posterior radius", "n", "radius", &[("median", pts), ("theory slope", theory)], true),
        )?;
    }
    Ok(r.excluded == 0)
}

pub fn cmd_check(cfg: &RunConfig, out: &mut Output) -> Result<bool> {
    let spec = deep_spec(cfg)?;
    let budget = CheckBudget {
        rescaling_trials: cfg.usize("check.rescaling_trials"),
        lipschitz_pairs: cfg.usize("check.lipschitz_pairs"),
        positivity_draws: cfg.usize("check.positivity_draws"),
        correlation_draws: cfg.usize("check.correlation_draws"),
        hellinger_pairs: cfg.usize("check.hellinger_pairs"),
        classification_pairs: cfg.usize("check.classification_pairs"),
        ordering_eps: cfg.floats("check.ordering_eps"),
        concentration: Budget {
            particles: cfg.usize("concentration.particles"),
            options: splitting_options(cfg, "concentration"),
        },
    };
    let outcomes = run_battery(&spec, cfg.f64("truth.beta"), &budget, seed(cfg))?;
    let report = battery_report(&outcomes);
    print!("{report}");
    out.write("check_report.txt", &report)?;
    Ok(outcomes.iter().all(|o| o.pass))
}
