//! RKHS norms on grids, the closed-form integrated Brownian norm, and the
//! constrained minimal-norm problems behind the concentration functions.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::kernels::{fd_matrix, grid_gram, FdOperator, GramMatrix, KernelSpec};
use crate::linalg::jittered_cholesky;

/// Largest jitter accepted when inverting a Gram matrix, relative to `trace/m`.
const NORM_JITTER: f64 = 1e-10;

/// `vᵀ K⁻¹ v`: squared RKHS norm of the minimal-norm interpolant of `values`.
pub fn rkhs_norm_sq(gram: &GramMatrix, values: &[f64]) -> Result<f64> {
    if values.len() != gram.len() {
        return Err(Error::DimensionMismatch {
            expected: gram.len(),
            got: values.len(),
        });
    }
    if values.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let (chol, _) = jittered_cholesky(&gram.entries, NORM_JITTER).map_err(|_| Error::SingularGram)?;
    let v = DVector::from_column_slice(values);
    let w = chol.l().solve_lower_triangular(&v).ok_or(Error::SingularGram)?;
    Ok(w.norm_squared())
}

/// `√(vᵀ K⁻¹ v)` for grid values.
pub fn rkhs_norm_grid(gram: &GramMatrix, values: &GridFunction) -> Result<f64> {
    rkhs_norm_sq(gram, values.values()).map(f64::sqrt)
}

/// `√(∫(g^{(N+1)})² + Σ_{i≤N} g^{(i)}(-1)²)` by repeated finite differences
/// and the trapezoid rule.
pub fn sobolev_norm_ibm(g: &GridFunction, order: usize) -> Result<f64> {
    let grid = g.grid();
    if grid.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: grid.dim(),
        });
    }
    let needed = 2 * order + 3;
    if grid.points_per_axis() < needed {
        return Err(Error::GridTooCoarse {
            needed,
            got: grid.points_per_axis(),
        });
    }
    let fd = fd_matrix(grid, 0)?;
    let mut deriv = g.values().to_vec();
    let mut boundary = 0.0;
    for _ in 0..=order {
        boundary += deriv[0] * deriv[0];
        deriv = fd.apply(&deriv);
    }
    let top = GridFunction::new(*grid, deriv.iter().map(|d| d * d).collect())?;
    Ok((top.integrate() + boundary).sqrt())
}

/// Discrepancy between the squared norm of a block-diagonal stacked Gram
/// and the sum of the per-block squared norms, relative to the sum.
pub fn norm_additivity_check(blocks: &[GramMatrix], values: &[Vec<f64>]) -> Result<f64> {
    if blocks.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: blocks.len(),
            got: values.len(),
        });
    }
    let parts = blocks
        .iter()
        .zip(values)
        .map(|(b, v)| rkhs_norm_sq(b, v))
        .collect::<Result<Vec<_>>>()?;
    let sum: f64 = parts.iter().sum();
    let refs: Vec<&GramMatrix> = blocks.iter().collect();
    let stacked = GramMatrix::block_diagonal(&refs);
    let all: Vec<f64> = values.iter().flatten().copied().collect();
    let total = rkhs_norm_sq(&stacked, &all)?;
    if sum == 0.0 {
        return Ok(total.abs());
    }
    Ok((total - sum).abs() / sum)
}

/// Derivative part of an infimum problem: `|∂(g - z₀)/∂x_j| ≤ slack` on the
/// grid, for every axis `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivConstraint {
    pub slack: f64,
}

/// `inf ‖g‖²_H` over `g` with `‖g - z₀‖∞ < ε` (and optionally derivative
/// slack) at the nodes of `grid`.
#[derive(Clone, Debug)]
pub struct InfimumProblem {
    pub kernel: KernelSpec,
    pub grid: GridSpec,
    pub target: GridFunction,
    pub eps: f64,
    pub deriv_constraint: Option<DerivConstraint>,
}

impl InfimumProblem {
    pub fn new(kernel: KernelSpec, target: GridFunction, eps: f64, deriv_slack: Option<f64>) -> Result<Self> {
        let p = Self {
            kernel,
            grid: *target.grid(),
            target,
            eps,
            deriv_constraint: deriv_slack.map(|slack| DerivConstraint { slack }),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", "must be positive and finite"));
        }
        if let Some(d) = &self.deriv_constraint {
            if !(d.slack > 0.0) {
                return Err(invalid("deriv_slack", "must be positive"));
            }
        }
        if *self.target.grid() != self.grid {
            return Err(invalid("target", "target must live on the problem grid"));
        }
        Ok(())
    }
}

/// Solution of an infimum problem.
#[derive(Clone, Debug)]
pub struct InfimumSolution {
    /// Attained `‖g‖²_H`.
    pub value: f64,
    /// Node values of the minimizer.
    pub minimizer: Vec<f64>,
    /// Number of active box constraints.
    pub active: usize,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Relative shrink applied to the strict inequalities.
pub const STRICT_SHRINK: f64 = 1e-9;

/// Solves the infimum problem and returns the attained squared norm.
pub fn concentration_infimum(prob: &InfimumProblem) -> Result<f64> {
    solve_infimum(prob).map(|s| s.value)
}

/// Solves the infimum problem in its dual.
///
/// With `A = [I; D_1; …; D_d]`, centers `c = A z₀` and radii `r`, the problem
/// `min vᵀK⁻¹v` subject to `|Av - c| ≤ r` has the dual
/// `min ½λᵀQλ - cᵀλ + Σ r_i|λ_i|` with `Q = AKAᵀ` and `v = KAᵀλ`. The dual is
/// solved by a sign-guessing active-set method; the attained value is `λᵀQλ`.
pub fn solve_infimum(prob: &InfimumProblem) -> Result<InfimumSolution> {
    prob.validate()?;
    let gram = grid_gram(&prob.kernel, &prob.grid)?;
    let k = &gram.entries;
    let n = prob.grid.len();
    let z0 = prob.target.values();
    let value_radius = prob.eps * (1.0 - STRICT_SHRINK);
    let fds: Vec<FdOperator> = match &prob.deriv_constraint {
        Some(_) => (0..prob.grid.dim())
            .map(|j| fd_matrix(&prob.grid, j))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    // Rows of A as sparse (column, weight) lists.
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 1.0)]).collect();
    let mut radius = vec![value_radius; n];
    let mut centers = z0.to_vec();
    if let Some(d) = &prob.deriv_constraint {
        let r = d.slack * (1.0 - STRICT_SHRINK);
        for fd in &fds {
            let dz = fd.apply(z0);
            for i in 0..n {
                rows.push(fd.row(i).iter().copied().filter(|&(_, w)| w != 0.0).collect());
                radius.push(r);
                centers.push(dz[i]);
            }
        }
    }
    // Zero is feasible: nothing to minimize.
    if centers.iter().zip(&radius).all(|(c, r)| c.abs() <= *r) {
        return Ok(InfimumSolution {
            value: 0.0,
            minimizer: vec![0.0; n],
            active: 0,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }
    let ka = sparse_right_product(k, &rows); // K Aᵀ, n × rows
    let q = sparse_left_product(&rows, &ka); // A K Aᵀ
    let sol = dual_active_set(&q, &centers, &radius)?;
    let lambda = &sol.lambda;
    let mut minimizer = vec![0.0; n];
    for (col, &l) in lambda.iter().enumerate() {
        if l != 0.0 {
            for (i, m) in minimizer.iter_mut().enumerate() {
                *m += ka[(i, col)] * l;
            }
        }
    }
    let mut value = 0.0;
    for (a, &la) in lambda.iter().enumerate() {
        if la == 0.0 {
            continue;
        }
        for (b, &lb) in lambda.iter().enumerate() {
            if lb != 0.0 {
                value += la * q[(a, b)] * lb;
            }
        }
    }
    Ok(InfimumSolution {
        value: value.max(0.0),
        minimizer,
        active: lambda.iter().filter(|&&l| l != 0.0).count(),
        kkt_residual: sol.residual,
        iterations: sol.iterations,
    })
}

fn sparse_right_product(k: &DMatrix<f64>, rows: &[Vec<(usize, f64)>]) -> DMatrix<f64> {
    let n = k.nrows();
    let mut out = DMatrix::zeros(n, rows.len());
    for (col, row) in rows.iter().enumerate() {
        for &(c, w) in row {
            for i in 0..n {
                out[(i, col)] += k[(i, c)] * w;
            }
        }
    }
    out
}

fn sparse_left_product(rows: &[Vec<(usize, f64)>], ka: &DMatrix<f64>) -> DMatrix<f64> {
    let p = rows.len();
    let mut q = DMatrix::zeros(p, p);
    for (a, row) in rows.iter().enumerate() {
        for b in 0..p {
            q[(a, b)] = row.iter().map(|&(c, w)| w * ka[(c, b)]).sum();
        }
    }
    // symmetrize roundoff
    for a in 0..p {
        for b in 0..a {
            let s = 0.5 * (q[(a, b)] + q[(b, a)]);
            q[(a, b)] = s;
            q[(b, a)] = s;
        }
    }
    q
}

struct DualSolution {
    lambda: Vec<f64>,
    residual: f64,
    iterations: usize,
}

/// KKT tolerance relative to the scale of the centers.
pub const KKT_TOLERANCE: f64 = 1e-7;

/// `min ½λᵀQλ - cᵀλ + Σ r_i|λ_i|` by the feature-sign active-set method.
fn dual_active_set(q: &DMatrix<f64>, c: &[f64], r: &[f64]) -> Result<DualSolution> {
    let p = c.len();
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = KKT_TOLERANCE * scale;
    let max_iter = 50 * p + 1000;
    let mut lambda = vec![0.0; p];
    let mut active: Vec<usize> = Vec::new();
    let mut theta = vec![0.0; p];
    let grad = |lambda: &[f64], active: &[usize], i: usize| -> f64 {
        active.iter().map(|&a| q[(i, a)] * lambda[a]).sum::<f64>() - c[i]
    };
    let objective = |lambda: &[f64], active: &[usize]| -> f64 {
        let mut v = 0.0;
        for &a in active {
            if lambda[a] == 0.0 {
                continue;
            }
            for &b in active {
                v += 0.5 * lambda[a] * q[(a, b)] * lambda[b];
            }
            v += -c[a] * lambda[a] + r[a] * lambda[a].abs();
        }
        v
    };
    let mut iterations = 0;
    loop {
        // Activate the worst violated zero coordinate.
        let mut worst = None;
        let mut worst_excess = tol;
        for i in 0..p {
            if lambda[i] != 0.0 || active.contains(&i) {
                continue;
            }
            let g = grad(&lambda, &active, i);
            let excess = g.abs() - r[i];
            if excess > worst_excess {
                worst_excess = excess;
                worst = Some((i, g));
            }
        }
        match worst {
            None => {
                let residual = kkt_residual(q, c, r, &lambda) / scale;
                if residual <= KKT_TOLERANCE {
                    return Ok(DualSolution {
                        lambda,
                        residual,
                        iterations,
                    });
                }
                if iterations >= max_iter {
                    return Err(Error::Infeasible { residual, iterations });
                }
            }
            Some((i, g)) => {
                theta[i] = if g > 0.0 { -1.0 } else { 1.0 };
                active.push(i);
            }
        }
        // Feature-sign steps until the active coordinates are optimal.
        loop {
            iterations += 1;
            if iterations > max_iter {
                let residual = kkt_residual(q, c, r, &lambda) / scale;
                return Err(Error::Infeasible { residual, iterations });
            }
            let s = active.len();
            let mut qs = DMatrix::zeros(s, s);
            let mut rhs = DVector::zeros(s);
            for (a, &ia) in active.iter().enumerate() {
                for (b, &ib) in active.iter().enumerate() {
                    qs[(a, b)] = q[(ia, ib)];
                }
                rhs[a] = c[ia] - r[ia] * theta[ia];
            }
            let target = solve_psd(qs, rhs);
            // Line search over sign changes between current and target.
            let current: Vec<f64> = active.iter().map(|&i| lambda[i]).collect();
            let mut candidates = vec![1.0];
            for (&x0, &x1) in current.iter().zip(target.iter()) {
                if x0 != 0.0 && x0.signum() != x1.signum() && x1 != x0 {
                    let t = x0 / (x0 - x1);
                    if t > 0.0 && t < 1.0 {
                        candidates.push(t);
                    }
                }
            }
            let mut best_t = 1.0;
            let mut best_val = f64::INFINITY;
            let mut trial = lambda.clone();
            for &t in &candidates {
                for (a, &i) in active.iter().enumerate() {
                    trial[i] = current[a] + t * (target[a] - current[a]);
                }
                let v = objective(&trial, &active);
                if v < best_val {
                    best_val = v;
                    best_t = t;
                }
            }
            for (a, &i) in active.iter().enumerate() {
                let x = current[a] + best_t * (target[a] - current[a]);
                lambda[i] = if x.abs() <= 1e-14 * (1.0 + current[a].abs()) || (best_t < 1.0 && crossing(current[a], target[a], best_t)) {
                    0.0
                } else {
                    x
                };
            }
            active.retain(|&i| lambda[i] != 0.0);
            for &i in &active {
                theta[i] = lambda[i].signum();
            }
            // optimality on the nonzero coordinates
            let optimal = active
                .iter()
                .all(|&i| (grad(&lambda, &active, i) + r[i] * theta[i]).abs() <= tol);
            if optimal {
                break;
            }
        }
    }
}

fn crossing(x0: f64, x1: f64, t: f64) -> bool {
    x0 != x1 && ((x0 / (x0 - x1)) - t).abs() <= 1e-12
}

/// Solves a symmetric positive semidefinite system, falling back to a
/// pseudo-inverse when the matrix is singular.
fn solve_psd(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = max * 1e-13;
    let qt_b = eig.eigenvectors.transpose() * &b;
    let scaled = DVector::from_iterator(
        qt_b.len(),
        qt_b.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(x, &l)| if l > cut { x / l } else { 0.0 }),
    );
    eig.eigenvectors * scaled
}

/// Largest violation of the dual optimality conditions.
fn kkt_residual(q: &DMatrix<f64>, c: &[f64], r: &[f64], lambda: &[f64]) -> f64 {
    let p = c.len();
    let nz: Vec<usize> = (0..p).filter(|&i| lambda[i] != 0.0).collect();
    (0..p)
        .map(|i| {
            let g = nz.iter().map(|&a| q[(i, a)] * lambda[a]).sum::<f64>() - c[i];
            if lambda[i] == 0.0 {
                (g.abs() - r[i]).max(0.0)
            } else {
                (g + r[i] * lambda[i].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram;
    use rand::Rng;

    fn g1(m: usize) -> GridSpec {
        GridSpec::new(1, m).unwrap()
    }

    #[test]
    fn reproducing_property() {
        let grid = g1(21);
        let kernel = KernelSpec::integrated_brownian(1);
        let gm = grid_gram(&kernel, &grid).unwrap();
        let t0 = 7;
        let column: Vec<f64> = (0..21).map(|i| gm.entries[(i, t0)]).collect();
        let n2 = rkhs_norm_sq(&gm, &column).unwrap();
        assert!((n2 - gm.entries[(t0, t0)]).abs() < 1e-8 * gm.entries[(t0, t0)]);
        assert_eq!(rkhs_norm_grid(&gm, &GridFunction::zeros(grid)).unwrap(), 0.0);
    }

    #[test]
    fn sobolev_oracle_examples() {
        let grid = g1(201);
        assert_eq!(sobolev_norm_ibm(&GridFunction::zeros(grid), 1).unwrap(), 0.0);
        let lin = GridFunction::from_fn(grid, |x| 1.0 + 0.5 * x[0]);
        let want = (0.5f64.powi(2) + 0.25).sqrt();
        assert!((sobolev_norm_ibm(&lin, 1).unwrap() - want).abs() < 1e-12);
        let one = GridFunction::from_fn(grid, |_| 1.0);
        assert!((sobolev_norm_ibm(&one, 1).unwrap() - 1.0).abs() < 1e-12);
        let sq = GridFunction::from_fn(grid, |x| x[0] * x[0]);
        assert!((sobolev_norm_ibm(&sq, 1).unwrap().powi(2) - 13.0).abs() < 1e-9);
        assert!(sobolev_norm_ibm(&sq, 1).is_ok());
        assert!(matches!(sobolev_norm_ibm(&GridFunction::zeros(g1(4)), 1), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn gram_norm_converges_to_sobolev_norm() {
        let kernel = KernelSpec::integrated_brownian(1);
        for (m, tol) in [(201, 0.02), (801, 0.005)] {
            let grid = g1(m);
            let gm = grid_gram(&kernel, &grid).unwrap();
            let sq = GridFunction::from_fn(grid, |x| x[0] * x[0]);
            let n2 = rkhs_norm_grid(&gm, &sq).unwrap().powi(2);
            assert!((n2 - 13.0).abs() / 13.0 <= tol, "m={m}: {n2}");
        }
    }

    #[test]
    fn gram_norm_grows_under_refinement() {
        let kernel = KernelSpec::integrated_brownian(1);
        let f = |x: &[f64]| (2.0 * x[0]).sin() + 0.3 * x[0];
        let mut last = 0.0;
        for m in [11, 21, 41, 81] {
            let grid = g1(m);
            let n2 = rkhs_norm_sq(&grid_gram(&kernel, &grid).unwrap(), GridFunction::from_fn(grid, f).values()).unwrap();
            assert!(n2 >= last * (1.0 - 1e-8), "m={m}: {n2} < {last}");
            last = n2;
        }
    }

    #[test]
    fn additivity_of_independent_blocks() {
        let mut rng = crate::rng::rng_from_seed(5);
        let pts: Vec<Vec<f64>> = (0..15).map(|i| vec![-1.0 + 2.0 * i as f64 / 14.0]).collect();
        let a = gram(&KernelSpec::integrated_brownian(1), &pts).unwrap();
        let b = gram(&KernelSpec::integrated_brownian(2), &pts).unwrap();
        let va: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(norm_additivity_check(&[a.clone()], &[va.clone()]).unwrap(), 0.0);
        assert!(norm_additivity_check(&[a.clone(), b.clone()], &[va.clone(), vb.clone()]).unwrap() <= 1e-8);
        let base = rkhs_norm_sq(&a, &va).unwrap();
        let scaled: Vec<f64> = va.iter().map(|v| 3.0 * v).collect();
        assert!((rkhs_norm_sq(&a, &scaled).unwrap() - 9.0 * base).abs() <= 1e-8 * base);
    }

    fn tube(m: usize, eps: f64, slack: Option<f64>, f: impl Fn(f64) -> f64) -> InfimumProblem {
        let grid = g1(m);
        InfimumProblem::new(
            KernelSpec::integrated_brownian(1),
            GridFunction::from_fn(grid, |x| f(x[0])),
            eps,
            slack,
        )
        .unwrap()
    }

    #[test]
    fn zero_is_feasible_for_wide_tubes() {
        let p = tube(41, 0.6, Some(0.6), |t| t / 2.0);
        assert_eq!(concentration_infimum(&p).unwrap(), 0.0);
    }

    #[test]
    fn infimum_is_monotone_in_eps() {
        let f = |t: f64| 0.8 * (2.0 * t).sin();
        let mut last = f64::INFINITY;
        for eps in [0.05, 0.1, 0.2, 0.4] {
            let sol = solve_infimum(&tube(81, eps, None, f)).unwrap();
            assert!(sol.kkt_residual <= KKT_TOLERANCE);
            assert!(sol.value <= last * (1.0 + 1e-9), "eps={eps}");
            last = sol.value;
        }
        let loose = concentration_infimum(&tube(81, 0.1, Some(2.0), f)).unwrap();
        let tight = concentration_infimum(&tube(81, 0.1, Some(0.3), f)).unwrap();
        assert!(loose <= tight * (1.0 + 1e-9));
    }

    #[test]
    fn minimizer_respects_the_tube() {
        let f = |t: f64| 0.8 * (2.0 * t).sin();
        let p = tube(81, 0.1, Some(0.5), f);
        let sol = solve_infimum(&p).unwrap();
        let fd = fd_matrix(&p.grid, 0).unwrap();
        let dg = fd.apply(&sol.minimizer);
        let dz = fd.apply(p.target.values());
        for i in 0..81 {
            assert!((sol.minimizer[i] - p.target.values()[i]).abs() <= 0.1 * (1.0 + 1e-6));
            assert!((dg[i] - dz[i]).abs() <= 0.5 * (1.0 + 1e-6));
        }
        // the attained value is the norm of the minimizer
        let gm = grid_gram(&p.kernel, &p.grid).unwrap();
        let direct = rkhs_norm_sq(&gm, &sol.minimizer).unwrap();
        assert!((direct - sol.value).abs() <= 1e-5 * sol.value, "{direct} vs {}", sol.value);
    }

    #[test]
    fn infimum_refinement_oracle() {
        let solve = |m: usize| {
            let grid = g1(m);
            let p = InfimumProblem::new(
                KernelSpec::integrated_brownian(0),
                GridFunction::from_fn(grid, |x| x[0] / 2.0),
                0.1,
                None,
            )
            .unwrap();
            concentration_infimum(&p).unwrap()
        };
        let coarse = solve(101);
        let fine = solve(201);
        assert!((coarse - fine).abs() <= 0.03 * fine, "{coarse} vs {fine}");
    }
}
