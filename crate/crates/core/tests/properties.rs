use cdgp::composition::{compose_on_grid, rescale_layers, Analytic, Field};
use cdgp::concentration::{smallball_mc, solve_rate, GaussianTube};
use cdgp::experiments::fit_slope;
use cdgp::kernels::{gram, KernelSpec};
use cdgp::models::{classify_from_latent, density_from_latent, hellinger, kl, l2_u, likelihood_l2_u};
use cdgp::rkhs::{concentration_infimum, InfimumProblem};
use cdgp::sampling::{check_constraints, LayerSpec, ProcessSampler};
use cdgp::{GridFunction, GridSpec};
use proptest::prelude::*;

fn kernel(k: usize) -> KernelSpec {
    match k % 5 {
        0 => KernelSpec::integrated_brownian(0),
        1 => KernelSpec::integrated_brownian(1),
        2 => KernelSpec::integrated_brownian(2),
        3 => KernelSpec::riemann_liouville(1.3).unwrap(),
        _ => KernelSpec::matern(1.5, 1).unwrap(),
    }
}

/// Smooth random latent: a short cosine series with the given coefficients.
fn latent(grid: GridSpec, coef: &[f64]) -> GridFunction {
    GridFunction::from_fn(grid, |x| {
        coef.iter()
            .enumerate()
            .map(|(k, c)| c * ((k + 1) as f64 * x[0] + k as f64).cos())
            .sum()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gram_matrices_are_symmetric_psd(k in 0usize..5, pts in prop::collection::vec(-1.0f64..1.0, 2..12)) {
        let points: Vec<Vec<f64>> = pts.iter().map(|&p| vec![p]).collect();
        let g = gram(&kernel(k), &points).unwrap();
        prop_assert!(g.max_asymmetry() <= 1e-12);
        let (lo, hi) = cdgp::linalg::symmetric_eigen_range(&g.entries);
        prop_assert!(lo >= -1e-8 * hi.abs().max(1e-300), "eigen range {lo} {hi}");
    }

    #[test]
    fn loosening_bounds_never_fails_a_passing_path(
        coef in prop::collection::vec(-0.5f64..0.5, 1..5),
        k in 0.5f64..6.0,
        extra in 0.0f64..3.0,
    ) {
        let grid = GridSpec::new(1, 41).unwrap();
        let f = latent(grid, &coef);
        let tight = LayerSpec::new(vec![KernelSpec::integrated_brownian(1)], 1, true, Some(vec![vec![k]]), grid).unwrap();
        let loose = LayerSpec::new(vec![KernelSpec::integrated_brownian(1)], 1, true, Some(vec![vec![k + extra]]), grid).unwrap();
        let unbounded = LayerSpec::new(vec![KernelSpec::integrated_brownian(1)], 1, false, Some(vec![vec![k + extra]]), grid).unwrap();
        let a = check_constraints(&f, &tight, 0).passed;
        prop_assert!(!a || check_constraints(&f, &loose, 0).passed);
        prop_assert!(!check_constraints(&f, &loose, 0).passed || check_constraints(&f, &unbounded, 0).passed);
    }

    #[test]
    fn rescaling_back_is_identity(l in prop::collection::vec(0.2f64..4.0, 2), x in prop::collection::vec(-1.0f64..1.0, 2)) {
        let z: Vec<Vec<Box<dyn Field>>> = vec![
            vec![
                Box::new(Analytic { dim: 2, f: |x: &[f64]| (x[0] - x[1]).sin() }),
                Box::new(Analytic { dim: 2, f: |x: &[f64]| x[0] * x[1] }),
            ],
            vec![Box::new(Analytic { dim: 2, f: |u: &[f64]| u[0] + u[1] * u[1] })],
        ];
        let y = rescale_layers(&z, std::slice::from_ref(&l)).unwrap();
        let inv: Vec<f64> = l.iter().map(|v| 1.0 / v).collect();
        let back = rescale_layers(&y, std::slice::from_ref(&inv)).unwrap();
        for (lz, lb) in z.iter().zip(&back) {
            for (cz, cb) in lz.iter().zip(lb) {
                prop_assert!((cz.eval(&x) - cb.eval(&x)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_middle_layer_changes_nothing(coef in prop::collection::vec(-0.3f64..0.3, 1..4)) {
        let grid = GridSpec::new(1, 31).unwrap();
        let inner = latent(grid, &coef).map(|v| v.clamp(-1.0, 1.0));
        let id = GridFunction::from_fn(grid, |x| x[0]);
        let outer = GridFunction::from_fn(grid, |x| x[0] * x[0] - 0.3 * x[0]);
        let two = compose_on_grid(&[vec![inner.clone()], vec![outer.clone()]], &grid).unwrap();
        let three = compose_on_grid(&[vec![inner], vec![id], vec![outer]], &grid).unwrap();
        prop_assert!(two.sup_distance(&three) <= 1e-12);
    }

    #[test]
    fn divergence_ranges(a in prop::collection::vec(-1.5f64..1.5, 1..4), b in prop::collection::vec(-1.5f64..1.5, 1..4)) {
        let grid = GridSpec::new(1, 51).unwrap();
        let p = density_from_latent(&latent(grid, &a)).unwrap();
        let q = density_from_latent(&latent(grid, &b)).unwrap();
        prop_assert!((p.as_grid_function().integrate() - 1.0).abs() <= 1e-10);
        let h = hellinger(&p, &q).unwrap();
        prop_assert!((0.0..=2f64.sqrt()).contains(&h));
        prop_assert!(h * h <= kl(&p, &q).unwrap() + 1e-8);
        prop_assert!(hellinger(&p, &p).unwrap() <= 1e-12);
    }

    #[test]
    fn l2_u_is_a_metric(
        a in prop::collection::vec(-2.0f64..2.0, 1..4),
        b in prop::collection::vec(-2.0f64..2.0, 1..4),
        c in prop::collection::vec(-2.0f64..2.0, 1..4),
    ) {
        let grid = GridSpec::new(1, 51).unwrap();
        let (fa, fb, fc) = (latent(grid, &a), latent(grid, &b), latent(grid, &c));
        let ab = l2_u(&fa, &fb, None).unwrap();
        let ba = l2_u(&fb, &fa, None).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-14);
        prop_assert!(ab <= l2_u(&fa, &fc, None).unwrap() + l2_u(&fc, &fb, None).unwrap() + 1e-12);
        let (ra, rb) = (classify_from_latent(&fa), classify_from_latent(&fb));
        let lhs = likelihood_l2_u(&ra, &rb, None).unwrap();
        let rhs = 2f64.sqrt() * l2_u(ra.as_grid_function(), rb.as_grid_function(), None).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn slope_fit_is_exact_on_lines(slope in -3.0f64..3.0, icpt in -5.0f64..5.0, n in 3usize..12) {
        let xs: Vec<f64> = (0..n).map(|k| k as f64 * 0.7 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| icpt + slope * x).collect();
        let fit = fit_slope(&xs, &ys).unwrap();
        prop_assert!((fit.slope - slope).abs() <= 1e-10);
        prop_assert!((fit.intercept - icpt).abs() <= 1e-10);
        prop_assert!(fit.stderr <= 1e-8);
    }

    #[test]
    fn rate_solver_exact_on_power_laws(a in 0.5f64..4.0, c in 0.1f64..10.0) {
        let curve: Vec<(f64, f64)> = (0..10).map(|k| {
            let e = 0.01 * 1.7f64.powi(k);
            (e, c * e.powf(-a))
        }).collect();
        let sol = solve_rate(&curve, &[1e2, 1e3, 1e4, 1e5]).unwrap();
        let want = -1.0 / (2.0 + a);
        prop_assert!(((sol.exponent - want) / want).abs() <= 1e-10, "{} vs {want}", sol.exponent);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn infimum_nonincreasing_in_eps(e1 in 0.05f64..0.5, de in 0.0f64..0.5) {
        let grid = GridSpec::new(1, 21).unwrap();
        let target = GridFunction::from_fn(grid, |x| 0.6 * (2.0 * x[0]).sin());
        let kernel = KernelSpec::integrated_brownian(1);
        let small = concentration_infimum(&InfimumProblem::new(kernel, target.clone(), e1, None).unwrap()).unwrap();
        let large = concentration_infimum(&InfimumProblem::new(kernel, target, e1 + de, None).unwrap()).unwrap();
        prop_assert!(large <= small * (1.0 + 1e-6) + 1e-9, "{large} > {small}");
    }
}

#[test]
fn small_ball_mc_is_monotone_under_common_draws() {
    let grid = GridSpec::new(1, 51).unwrap();
    let sampler = ProcessSampler::for_kernel(&KernelSpec::integrated_brownian(1), &grid).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for eps in [0.8, 1.0, 1.5, 2.0, 3.0] {
        let t = GaussianTube::small_ball(sampler.clone(), eps).unwrap();
        let e = smallball_mc(&t, 20_000, 99).unwrap();
        assert!(e.log_p <= 0.0);
        assert!(e.log_p >= prev, "log P({eps}) = {} below {prev}", e.log_p);
        prev = e.log_p;
    }
}
