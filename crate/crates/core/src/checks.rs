//! The invariant battery: each check draws its own inputs from a seed and
//! reports pass/fail with a one-line summary.

use std::time::Instant;

use rand::Rng as _;

use crate::composition::{
    compose, compose_on_grid, compose_point, rescale_deriv_bounds, rescale_layers, sample_constrained, stack_global,
    verify_lipschitz, Analytic, DeepGPSpec, Field,
};
use crate::concentration::{correlation_inequality_check, ordering_deep_check, Budget};
use crate::error::{invalid, Result};
use crate::experiments::{chain_targets, make_truth_holder};
use crate::models::{classify_from_latent, l2_u, hellinger_lipschitz_check, likelihood_l2_u};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampling::estimate_constraint_probability;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Sizes of the battery. The defaults run in a few minutes on one core.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckBudget {
    pub rescaling_trials: usize,
    pub lipschitz_pairs: usize,
    pub positivity_draws: usize,
    pub correlation_draws: usize,
    pub hellinger_pairs: usize,
    pub classification_pairs: usize,
    /// Radii for the ordering checks; empty skips them.
    pub ordering_eps: Vec<f64>,
    pub concentration: Budget,
}

impl Default for CheckBudget {
    fn default() -> Self {
        Self {
            rescaling_trials: 20,
            lipschitz_pairs: 500,
            positivity_draws: 100_000,
            correlation_draws: 100_000,
            hellinger_pairs: 200,
            classification_pairs: 50,
            ordering_eps: vec![0.2, 0.3, 0.5],
            concentration: Budget::default(),
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Result<CheckOutcome> {
    let start = Instant::now();
    let (pass, detail) = f()?;
    Ok(CheckOutcome {
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Composition of rescaled analytic layers equals the original, and the
/// bound maps are exact, to 1e-12.
pub fn check_rescaling(trials: usize, seed: u64) -> Result<CheckOutcome> {
    timed("rescaling", || {
        let mut rng = rng_from_seed(seed);
        let (mut comp, mut bound, mut deriv) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..trials {
            let l2: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..3.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.random_range(0.5..2.0)).collect();
            let (a0, a1, c0, c1) = (l2[0], l2[1], c[0], c[1]);
            let z: Vec<Vec<Box<dyn Field>>> = vec![
                vec![
                    Box::new(Analytic { dim: 2, f: move |x: &[f64]| a0 * (c0 * (x[0] + x[1]) / 2.0).sin() }),
                    Box::new(Analytic { dim: 2, f: move |x: &[f64]| a1 * (c1 * x[0] * x[1]).tanh() }),
                ],
                vec![Box::new(Analytic { dim: 2, f: |u: &[f64]| u[0] * u[0] - 0.5 * u[1] })],
            ];
            let y = rescale_layers(&z, std::slice::from_ref(&l2))?;
            let inputs: Vec<Vec<f64>> =
                (0..100).map(|_| vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]).collect();
            let cy = compose(&y, &inputs)?;
            for (x, b) in inputs.iter().zip(&cy) {
                comp = comp.max((compose_point(&z, x, false)? - b).abs());
            }
            let k1: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.random_range(0.1..5.0)).collect()).collect();
            let k2: Vec<Vec<f64>> = vec![(0..2).map(|_| rng.random_range(0.1..5.0)).collect()];
            let mapped = rescale_deriv_bounds(&[2, 2, 1], &[k1.clone(), k2.clone()], std::slice::from_ref(&l2))?;
            for i in 0..2 {
                for j in 0..2 {
                    bound = bound.max((mapped[0][i][j] - k1[i][j] / l2[i]).abs());
                }
                bound = bound.max((mapped[1][0][i] - l2[i] * k2[0][i]).abs());
            }
            // the last layer is quadratic, so central differences are exact
            for s in inputs.iter().take(20) {
                let dz = [2.0 * a0 * s[0], -0.5];
                for j in 0..2 {
                    let (mut sp, mut sm) = (s.clone(), s.clone());
                    sp[j] += 0.25;
                    sm[j] -= 0.25;
                    let dy = (y[1][0].eval(&sp) - y[1][0].eval(&sm)) / 0.5;
                    deriv = deriv.max((dy - l2[j] * dz[j]).abs());
                }
            }
        }
        Ok((
            comp <= 1e-12 && bound <= 1e-12 && deriv <= 1e-12,
            format!("{trials} trials: composition {comp:.1e}, bound map {bound:.1e}, derivative map {deriv:.1e}"),
        ))
    })
}

/// Every constrained layer component has a positive acceptance estimate.
pub fn check_positivity(spec: &DeepGPSpec, draws: usize, seed: u64) -> Result<CheckOutcome> {
    timed("constraint positivity", || {
        let mut smallest = f64::INFINITY;
        for (h, layer) in spec.layers.iter().enumerate() {
            for i in 0..layer.d_out {
                let p = estimate_constraint_probability(layer, i, draws, derive_seed(seed, (h * 1000 + i) as u64))?;
                smallest = smallest.min(p.p);
            }
        }
        Ok((smallest > 0.0, format!("smallest acceptance {smallest:.4} over {draws} draws per component")))
    })
}

/// Joint probability of the value and derivative events dominates the
/// product of marginals for three bound settings.
pub fn check_correlation(spec: &DeepGPSpec, draws: usize, seed: u64) -> Result<CheckOutcome> {
    timed("correlation inequality", || {
        let layer = spec
            .layers
            .iter()
            .find(|l| l.kernels[0].has_differentiable_paths())
            .ok_or_else(|| invalid("spec", "no layer has differentiable paths"))?;
        let dim = layer.grid.dim();
        let mut pass = true;
        let mut parts = Vec::new();
        for (k, (a, b)) in [(1.0, 1.0), (0.5, 2.0), (2.0, 0.5)].into_iter().enumerate() {
            let r = correlation_inequality_check(&layer.kernels[0], &layer.grid, a, &vec![b; dim], draws, derive_seed(seed, k as u64))?;
            pass &= r.holds;
            parts.push(format!("(a={a}, b={b}) {:.4} vs {:.4} ± {:.4}", r.joint, r.product, r.se));
        }
        Ok((pass, parts.join("; ")))
    })
}

/// `‖C_w − C_z‖∞ ≤ K_H ‖w − z‖∞ + 10·mesh` for random constrained pairs.
pub fn check_lipschitz(spec: &DeepGPSpec, pairs: usize, seed: u64) -> Result<CheckOutcome> {
    timed("Lipschitz composition", || {
        let mut rng = rng_from_seed(seed);
        let dim = spec.input_dim();
        let (mut violations, mut worst) = (0usize, 0.0f64);
        for k in 0..pairs as u64 {
            let w = sample_constrained(spec, derive_seed(seed, 2 * k + 1), 1_000_000)?;
            let z = sample_constrained(spec, derive_seed(seed, 2 * k + 2), 1_000_000)?;
            let tests: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
            let r = verify_lipschitz(spec, &w.layers, &z.layers, &tests)?;
            violations += !r.holds as usize;
            worst = worst.max(r.ratio);
        }
        Ok((violations == 0, format!("{violations} violations over {pairs} pairs, largest ratio {worst:.3}, K_H = {}", spec.k_h())))
    })
}

/// Hellinger distance of the induced densities is bounded by the sup
/// distance of the layers.
pub fn check_hellinger(spec: &DeepGPSpec, pairs: usize, seed: u64) -> Result<CheckOutcome> {
    timed("Hellinger bound", || {
        let (mut violations, mut worst) = (0usize, 0.0f64);
        for k in 0..pairs as u64 {
            let v = sample_constrained(spec, derive_seed(seed, 2 * k + 1), 1_000_000)?;
            let w = sample_constrained(spec, derive_seed(seed, 2 * k + 2), 1_000_000)?;
            let r = hellinger_lipschitz_check(spec, &v.layers, &w.layers)?;
            violations += !r.holds as usize;
            if r.bound > 0.0 {
                worst = worst.max(r.hellinger / r.bound);
            }
        }
        Ok((violations == 0, format!("{violations} violations over {pairs} pairs, largest h/bound {worst:.2e}")))
    })
}

/// `‖L_v − L_w‖_{2,U} = √2 ‖f_v − f_w‖_{2,U}` to 1e-10.
pub fn check_classification(spec: &DeepGPSpec, pairs: usize, seed: u64) -> Result<CheckOutcome> {
    timed("classification identity", || {
        let grid = spec.layers[0].grid;
        let mut worst = 0.0f64;
        for k in 0..pairs as u64 {
            let v = sample_constrained(spec, derive_seed(seed, 2 * k + 1), 1_000_000)?;
            let w = sample_constrained(spec, derive_seed(seed, 2 * k + 2), 1_000_000)?;
            let fv = classify_from_latent(&compose_on_grid(&v.layers, &grid)?);
            let fw = classify_from_latent(&compose_on_grid(&w.layers, &grid)?);
            let lhs = likelihood_l2_u(&fv, &fw, None)?;
            let rhs = 2f64.sqrt() * l2_u(fv.as_grid_function(), fw.as_grid_function(), None)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok((worst <= 1e-10, format!("{pairs} pairs, largest deviation {worst:.1e}")))
    })
}

/// `φ̂ ≤ φ̂_c` and `φ̂_c ≤ Φ̂_c` within three combined standard errors for a
/// two-layer chain centred on a Hölder truth of smoothness `beta`.
pub fn check_ordering(spec: &DeepGPSpec, beta: f64, eps: &[f64], budget: &Budget, seed: u64) -> Result<Vec<CheckOutcome>> {
    if spec.depth() != 2 || spec.input_dim() != 1 {
        return Err(invalid("spec", "the ordering checks need a two-layer chain on [-1,1]"));
    }
    let start = Instant::now();
    let truth = make_truth_holder(beta, &spec.layers[0].grid)?;
    let base = chain_targets(spec, &truth.latent)?;
    let (mut lower, mut upper) = (true, true);
    let (mut lo_parts, mut up_parts) = (Vec::new(), Vec::new());
    for (k, &e) in eps.iter().enumerate() {
        let amp = 0.9 * (1.0 - 2.0 * e);
        let first = base[0][0].map(|v| v * amp / base[0][0].sup_norm());
        let w0 = stack_global(&[vec![first], base[1].clone()])?;
        let r = ordering_deep_check(spec, &w0, e, budget, derive_seed(seed, k as u64))?;
        lower &= r.lower_holds;
        upper &= r.upper_holds;
        lo_parts.push(format!("ε={e}: {:.2}±{:.2} ≤ {:.2}±{:.2}", r.phi.value, r.phi.se, r.phi_c.value, r.phi_c.se));
        up_parts.push(format!("ε={e}: {:.2}±{:.2} ≤ {:.2}±{:.2}", r.phi_c.value, r.phi_c.se, r.big_phi.total, r.big_phi.total_se));
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(vec![
        CheckOutcome {
            name: "constraints raise concentration",
            pass: lower,
            detail: lo_parts.join("; "),
            seconds,
        },
        CheckOutcome {
            name: "deep concentration upper bound",
            pass: upper,
            detail: up_parts.join("; "),
            seconds,
        },
    ])
}

/// Runs every check on the layers of `spec`; `beta` is the smoothness of the
/// truth centring the ordering checks.
pub fn run_battery(spec: &DeepGPSpec, beta: f64, budget: &CheckBudget, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        check_rescaling(budget.rescaling_trials, derive_seed(seed, 1))?,
        check_positivity(spec, budget.positivity_draws, derive_seed(seed, 2))?,
        check_correlation(spec, budget.correlation_draws, derive_seed(seed, 3))?,
        check_lipschitz(spec, budget.lipschitz_pairs, derive_seed(seed, 4))?,
        check_hellinger(spec, budget.hellinger_pairs, derive_seed(seed, 5))?,
        check_classification(spec, budget.classification_pairs, derive_seed(seed, 6))?,
    ];
    if !budget.ordering_eps.is_empty() {
        out.extend(check_ordering(spec, beta, &budget.ordering_eps, &budget.concentration, derive_seed(seed, 7))?);
    }
    Ok(out)
}

/// Plain-text report, one check per line.
pub fn battery_report(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&format!(
            "{} {}: {} ({:.1} s)\n",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.seconds
        ));
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    s.push_str(&format!("{} checks, {failed} failed\n", outcomes.len()));
    s
}
