//! Deep composition `Z_H ∘ … ∘ Z_1`, the Lipschitz constant `K_H`, input and
//! output rescaling of layers, and the stacked global process.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, GridSpec};
use crate::kernels::KernelSpec;
use crate::rng::rng_from_seed;
use crate::sampling::{rejection_sample_component, LayerSpec};

/// Layers `h = 1..=H` with `d_1 = d` inputs and a single final output.
#[derive(Clone, Debug)]
pub struct DeepGPSpec {
    pub layers: Vec<LayerSpec>,
}

impl DeepGPSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// One-dimensional chain of width-one layers with integrated Brownian
    /// components of the given orders, all derivative bounds equal to `k`.
    pub fn ibm_chain(orders: &[usize], k: f64, points_per_axis: usize) -> Result<Self> {
        let kernels: Vec<KernelSpec> = orders.iter().map(|&n| KernelSpec::integrated_brownian(n)).collect();
        Self::chain(&kernels, k, points_per_axis)
    }

    /// One-dimensional chain of width-one layers with the given kernels.
    pub fn chain(kernels: &[KernelSpec], k: f64, points_per_axis: usize) -> Result<Self> {
        let grid = GridSpec::new(1, points_per_axis)?;
        let depth = kernels.len();
        let layers = kernels
            .iter()
            .enumerate()
            .map(|(h, kern)| {
                LayerSpec::new(
                    vec![*kern],
                    1,
                    h + 1 < depth,
                    (h > 0).then(|| vec![vec![k]]),
                    grid,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.layers.len();
        if depth < 2 {
            return Err(invalid("layers", "a deep process needs at least two layers"));
        }
        for (h, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if let Some(next) = self.layers.get(h + 1) {
                if next.d_in != layer.d_out {
                    return Err(Error::DimensionMismatch {
                        expected: layer.d_out,
                        got: next.d_in,
                    });
                }
            }
            if layer.value_bound_active != (h + 1 < depth) {
                return Err(invalid("value_bound_active", "value bounds apply to every layer but the last"));
            }
            if layer.deriv_bounds.is_some() != (h > 0) {
                return Err(invalid("deriv_bounds", "derivative bounds apply from the second layer on"));
            }
        }
        if self.layers[depth - 1].d_out != 1 {
            return Err(invalid("layers", "the last layer must have a single output"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    fn deriv_bounds(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .filter_map(|l| l.deriv_bounds.as_ref())
            .flat_map(|b| b.iter().flatten().copied())
    }

    /// Smallest derivative bound over layers `h ≥ 2`.
    pub fn k_min(&self) -> f64 {
        self.deriv_bounds().fold(f64::INFINITY, f64::min)
    }

    /// Largest derivative bound over layers `h ≥ 2`.
    pub fn k_max(&self) -> f64 {
        self.deriv_bounds().fold(0.0, f64::max)
    }

    /// `max_h d_h` over the layer input dimensions.
    pub fn d_max(&self) -> usize {
        self.layers.iter().map(|l| l.d_in).max().unwrap_or(1)
    }

    /// `K_H = (1 + K_max d_max)^H`.
    pub fn k_h(&self) -> f64 {
        (1.0 + self.k_max() * self.d_max() as f64).powi(self.depth() as i32)
    }

    /// Coarsest mesh over the layer grids.
    pub fn mesh(&self) -> f64 {
        self.layers.iter().map(|l| l.grid.mesh()).fold(0.0, f64::max)
    }
}

/// `(1 + K_max d_max)^H`.
pub fn lipschitz_bound(spec: &DeepGPSpec) -> f64 {
    spec.k_h()
}

/// A real function on `[-1,1]^k` (or beyond, for analytic layers).
pub trait Field: Sync {
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
}

impl Field for GridFunction {
    fn input_dim(&self) -> usize {
        self.grid().dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        GridFunction::eval(self, x)
    }
}

impl<T: Field + ?Sized> Field for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (**self).eval(x)
    }
}

impl<T: Field + ?Sized> Field for Box<T> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (**self).eval(x)
    }
}

/// A closed-form layer component.
pub struct Analytic<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Field for Analytic<F> {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// Evaluates `C_H ∘ … ∘ C_1` at `x`. With `check_domain`, intermediate
/// values outside `[-1,1]` are reported as errors.
pub fn compose_point<F: Field>(layers: &[Vec<F>], x: &[f64], check_domain: bool) -> Result<f64> {
    let mut current = x.to_vec();
    let last = layers.len() - 1;
    for (h, layer) in layers.iter().enumerate() {
        let next: Vec<f64> = layer.iter().map(|c| c.eval(&current)).collect();
        if check_domain && h < last {
            if let Some((index, &value)) = next.iter().enumerate().find(|(_, v)| !(v.abs() <= 1.0)) {
                return Err(Error::OutOfDomain {
                    layer: h + 1,
                    index,
                    value,
                });
            }
        }
        current = next;
    }
    Ok(current[0])
}

/// Evaluates the composition of grid layers at each input. Intermediate
/// values must stay in `[-1,1]`.
pub fn compose<F: Field>(layers: &[Vec<F>], inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    validate_layers(layers)?;
    inputs
        .par_iter()
        .map(|x| {
            if x.len() != layers[0][0].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layers[0][0].input_dim(),
                    got: x.len(),
                });
            }
            compose_point(layers, x, true)
        })
        .collect()
}

/// The composition evaluated at every node of `grid`.
pub fn compose_on_grid(layers: &[Vec<GridFunction>], grid: &GridSpec) -> Result<GridFunction> {
    let values = compose(layers, &grid.nodes())?;
    GridFunction::new(*grid, values)
}

fn validate_layers<F: Field>(layers: &[Vec<F>]) -> Result<()> {
    if layers.is_empty() || layers.iter().any(|l| l.is_empty()) {
        return Err(invalid("layers", "every layer needs at least one component"));
    }
    for h in 1..layers.len() {
        for c in &layers[h] {
            if c.input_dim() != layers[h - 1].len() {
                return Err(Error::DimensionMismatch {
                    expected: layers[h - 1].len(),
                    got: c.input_dim(),
                });
            }
        }
    }
    if layers[layers.len() - 1].len() != 1 {
        return Err(invalid("layers", "the last layer must have a single output"));
    }
    Ok(())
}

/// One draw of the constrained deep prior.
#[derive(Clone, Debug)]
pub struct ConstrainedSample {
    pub layers: Vec<Vec<GridFunction>>,
    /// Total draws spent over all components.
    pub attempts: usize,
    pub seed: u64,
}

/// Draws every component of every layer from its constrained law.
pub fn sample_constrained(spec: &DeepGPSpec, seed: u64, max_attempts: usize) -> Result<ConstrainedSample> {
    let mut rng = rng_from_seed(seed);
    let mut layers = Vec::with_capacity(spec.depth());
    let mut attempts = 0;
    for layer in &spec.layers {
        let samplers = layer.samplers()?;
        let fds = layer.fd_operators()?;
        let mut comps = Vec::with_capacity(layer.d_out);
        for (i, s) in samplers.iter().enumerate() {
            let (v, n) = rejection_sample_component(s, layer, i, &fds, &mut rng, max_attempts)?;
            attempts += n;
            comps.push(GridFunction::from_raw(layer.grid, v));
        }
        layers.push(comps);
    }
    Ok(ConstrainedSample { layers, attempts, seed })
}

/// Largest sup-norm distance between matching components of two stacks.
pub fn stack_distance(w: &[Vec<GridFunction>], z: &[Vec<GridFunction>]) -> f64 {
    w.iter()
        .zip(z)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(a, b)| a.sup_distance(b))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzReport {
    /// `‖C_w − C_z‖∞` over the test inputs and the first-layer grid.
    pub output_distance: f64,
    /// `‖w − z‖∞` over all components.
    pub input_distance: f64,
    /// Their ratio, 0 when both vanish.
    pub ratio: f64,
    pub k_h: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Compares `‖C_w − C_z‖∞` with `K_H ‖w − z‖∞ + η`, `η = 10·mesh`.
pub fn verify_lipschitz(
    spec: &DeepGPSpec,
    w: &[Vec<GridFunction>],
    z: &[Vec<GridFunction>],
    test_inputs: &[Vec<f64>],
) -> Result<LipschitzReport> {
    let mut inputs = spec.layers[0].grid.nodes();
    inputs.extend(test_inputs.iter().cloned());
    let cw = compose(w, &inputs)?;
    let cz = compose(z, &inputs)?;
    let output_distance = cw.iter().zip(&cz).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let input_distance = stack_distance(w, z);
    let ratio = if output_distance == 0.0 {
        0.0
    } else {
        output_distance / input_distance
    };
    let k_h = spec.k_h();
    let tolerance = 10.0 * spec.mesh();
    Ok(LipschitzReport {
        output_distance,
        input_distance,
        ratio,
        k_h,
        tolerance,
        holds: output_distance <= k_h * input_distance + tolerance,
    })
}

/// `Y(t) = Z(L_in ⊙ t) / L_out`.
pub struct Rescaled<F> {
    pub inner: F,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
}

impl<F: Field> Field for Rescaled<F> {
    fn input_dim(&self) -> usize {
        self.input_scale.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let scaled: Vec<f64> = x.iter().zip(&self.input_scale).map(|(a, l)| a * l).collect();
        self.inner.eval(&scaled) / self.output_scale
    }
}

/// Full scale table `L_1 = 1, L_2, …, L_H, L_{H+1} = 1` from the inner
/// scales `L_2..L_H` (one vector per hidden output).
fn full_scales(widths: &[usize], inner: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    // widths = [d_1, d_2, ..., d_{H+1}]
    let depth = widths.len() - 1;
    if inner.len() + 1 != depth {
        return Err(invalid("scales", format!("expected {} scale vectors", depth - 1)));
    }
    let mut all = vec![vec![1.0; widths[0]]];
    for (h, l) in inner.iter().enumerate() {
        if l.len() != widths[h + 1] {
            return Err(Error::DimensionMismatch {
                expected: widths[h + 1],
                got: l.len(),
            });
        }
        if l.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid("scales", "scales must be positive and finite"));
        }
        all.push(l.clone());
    }
    all.push(vec![1.0; widths[depth]]);
    Ok(all)
}

fn widths_of<F: Field>(layers: &[Vec<F>]) -> Vec<usize> {
    let mut w = vec![layers[0][0].input_dim()];
    w.extend(layers.iter().map(|l| l.len()));
    w
}

/// Rescaled layers `Y_{h,i}(t) = Z_{h,i}(L_h ⊙ t) / L_{h+1,i}` with
/// `L_1 = 1` and no output division in the last layer. `scales` holds
/// `L_2, …, L_H`.
pub fn rescale_layers<'a, F: Field>(
    layers: &'a [Vec<F>],
    scales: &[Vec<f64>],
) -> Result<Vec<Vec<Rescaled<&'a F>>>> {
    validate_layers(layers)?;
    let all = full_scales(&widths_of(layers), scales)?;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(h, layer)| {
            layer
                .iter()
                .enumerate()
                .map(|(i, c)| Rescaled {
                    inner: c,
                    input_scale: all[h].clone(),
                    output_scale: all[h + 1][i],
                })
                .collect()
        })
        .collect())
}

/// Bounds of the rescaled layers: value bounds `L_{h+1,i}` of `Z` become 1,
/// derivative bounds become `(L_{h,j} / L_{h+1,i}) K_{h,i,j}`.
///
/// `deriv_bounds[h][i][j]` is `K_{h+1,i,j}` in one-based layer numbering.
pub fn rescale_deriv_bounds(
    widths: &[usize],
    deriv_bounds: &[Vec<Vec<f64>>],
    scales: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let all = full_scales(widths, scales)?;
    if deriv_bounds.len() + 1 != widths.len() {
        return Err(invalid("deriv_bounds", "one table per layer is required"));
    }
    Ok(deriv_bounds
        .iter()
        .enumerate()
        .map(|(h, table)| {
            table
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, k)| all[h][j] / all[h + 1][i] * k)
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// The value bound of `Y_{h,i}` given `|Z_{h,i}| ≤ value_bound`.
pub fn rescaled_value_bound(value_bound: f64, output_scale: f64) -> f64 {
    value_bound / output_scale
}

/// All components `(h, i)` of a deep process stacked as functions on the
/// common cube `[-1,1]^{d_max}`, constant along the padded axes.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFunction {
    /// Lexicographic `(h, i)`, zero-based.
    pub index: Vec<(usize, usize)>,
    pub components: Vec<GridFunction>,
    pub d_max: usize,
    dims: Vec<usize>,
}

/// Stacks layer components into one process indexed by `(h, i)`.
pub fn stack_global(layers: &[Vec<GridFunction>]) -> Result<StackedFunction> {
    let d_max = layers
        .iter()
        .flat_map(|l| l.iter().map(|c| c.grid().dim()))
        .max()
        .ok_or_else(|| invalid("layers", "nothing to stack"))?;
    let mut index = Vec::new();
    let mut components = Vec::new();
    let mut dims = Vec::new();
    for (h, layer) in layers.iter().enumerate() {
        for (i, c) in layer.iter().enumerate() {
            let src = c.grid();
            let padded = GridSpec::new(d_max, src.points_per_axis())?;
            let stride_pad = padded.len() / src.len();
            // Row-major with axis 0 slowest: the first d_h axes lead.
            let mut values = Vec::with_capacity(padded.len());
            for &v in c.values() {
                values.extend(std::iter::repeat_n(v, stride_pad));
            }
            index.push((h, i));
            components.push(GridFunction::from_raw(padded, values));
            dims.push(src.dim());
        }
    }
    Ok(StackedFunction {
        index,
        components,
        d_max,
        dims,
    })
}

impl StackedFunction {
    pub fn position(&self, h: usize, i: usize) -> Option<usize> {
        self.index.iter().position(|&p| p == (h, i))
    }

    /// `P_{h,i}`: the component as a function of its own `d_h` inputs.
    pub fn project(&self, h: usize, i: usize) -> Result<GridFunction> {
        let k = self
            .position(h, i)
            .ok_or_else(|| invalid("index", format!("no component ({h},{i})")))?;
        let padded = self.components[k].grid();
        let own = GridSpec::new(self.dims[k], padded.points_per_axis())?;
        let stride = padded.len() / own.len();
        let values = (0..own.len()).map(|n| self.components[k].values()[n * stride]).collect();
        Ok(GridFunction::from_raw(own, values))
    }

    pub fn sup_norm(&self) -> f64 {
        self.components.iter().map(|c| c.sup_norm()).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &StackedFunction) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.sup_distance(b))
            .fold(0.0, f64::max)
    }

    /// Input dimension `d_h` of each stacked component.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Back to per-layer components.
    pub fn unstack(&self) -> Result<Vec<Vec<GridFunction>>> {
        let mut layers: Vec<Vec<GridFunction>> = Vec::new();
        for &(h, i) in &self.index {
            if layers.len() <= h {
                layers.push(Vec::new());
            }
            layers[h].push(self.project(h, i)?);
        }
        Ok(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(m: usize) -> GridSpec {
        GridSpec::new(1, m).unwrap()
    }

    #[test]
    fn deterministic_composition() {
        let exact: Vec<Vec<Box<dyn Field>>> = vec![
            vec![Box::new(Analytic { dim: 1, f: |x: &[f64]| x[0] / 2.0 })],
            vec![Box::new(Analytic { dim: 1, f: |x: &[f64]| x[0] * x[0] })],
        ];
        assert_eq!(compose(&exact, &[vec![0.5]]).unwrap()[0], 0.0625);
        // 0.25 is a node of the 9-point grid, so the interpolant is exact there
        let g = g1(9);
        let layers = vec![
            vec![GridFunction::from_fn(g, |x| x[0] / 2.0)],
            vec![GridFunction::from_fn(g, |x| x[0] * x[0])],
        ];
        let out = compose(&layers, &[vec![0.5]]).unwrap();
        assert!((out[0] - 0.0625).abs() < 1e-15);
        let g = g1(5);
        let constant = vec![
            vec![GridFunction::from_fn(g, |_| 0.5)],
            vec![GridFunction::from_fn(g, |x| 3.0 * x[0])],
        ];
        let out = compose(&constant, &[vec![-1.0], vec![0.3], vec![1.0]]).unwrap();
        assert!(out.iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn out_of_domain_is_reported() {
        let g = g1(5);
        let layers = vec![
            vec![GridFunction::from_fn(g, |x| 2.0 * x[0])],
            vec![GridFunction::from_fn(g, |x| x[0])],
        ];
        assert!(matches!(
            compose(&layers, &[vec![1.0]]),
            Err(Error::OutOfDomain { layer: 1, .. })
        ));
    }

    #[test]
    fn lipschitz_constants() {
        let two = DeepGPSpec::ibm_chain(&[1, 1], 1.0, 11).unwrap();
        assert_eq!(lipschitz_bound(&two), 4.0);
        assert_eq!(two.k_min(), 1.0);
        let spec = DeepGPSpec::ibm_chain(&[1, 1, 2], 0.5, 11).unwrap();
        assert_eq!(spec.k_h(), 1.5f64.powi(3));
    }

    #[test]
    fn lipschitz_identical_stacks() {
        let spec = DeepGPSpec::ibm_chain(&[1, 2], 2.0, 51).unwrap();
        let s = sample_constrained(&spec, 1, 100_000).unwrap();
        let r = verify_lipschitz(&spec, &s.layers, &s.layers, &[vec![0.1]]).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn affine_layers_have_hand_computable_ratio() {
        let g = g1(11);
        let w = vec![
            vec![GridFunction::from_fn(g, |x| 0.5 * x[0])],
            vec![GridFunction::from_fn(g, |x| 2.0 * x[0])],
        ];
        let z = vec![
            vec![GridFunction::from_fn(g, |x| 0.5 * x[0] + 0.1)],
            vec![GridFunction::from_fn(g, |x| 2.0 * x[0])],
        ];
        let spec = DeepGPSpec::ibm_chain(&[1, 1], 2.0, 11).unwrap();
        let r = verify_lipschitz(&spec, &w, &z, &[]).unwrap();
        // outputs differ by 2 * 0.1 everywhere, inputs by 0.1
        assert!((r.ratio - 2.0).abs() < 1e-12, "{r:?}");
        assert!(r.ratio < r.k_h && r.holds);
    }

    #[test]
    fn stacking_round_trips() {
        let g1d = g1(7);
        let g2d = GridSpec::new(2, 7).unwrap();
        let layers = vec![
            vec![
                GridFunction::from_fn(g2d, |x| x[0] * x[1]),
                GridFunction::from_fn(g2d, |x| x[0] - x[1]),
            ],
            vec![GridFunction::from_fn(g2d, |x| 0.3 * x[0] + x[1] * x[1])],
            vec![GridFunction::from_fn(g1d, |x| x[0].sin())],
        ];
        let st = stack_global(&layers).unwrap();
        assert_eq!(st.index, vec![(0, 0), (0, 1), (1, 0), (2, 0)]);
        for (h, layer) in layers.iter().enumerate() {
            for (i, c) in layer.iter().enumerate() {
                assert_eq!(&st.project(h, i).unwrap(), c);
            }
        }
        let max = layers.iter().flatten().map(|c| c.sup_norm()).fold(0.0, f64::max);
        assert_eq!(st.sup_norm(), max);
        // the padded component does not depend on the second coordinate
        let padded = &st.components[3];
        for x in [-1.0, -0.2, 0.6] {
            assert!((padded.eval(&[0.4, x]) - padded.eval(&[0.4, -1.0])).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_scales_are_identity() {
        let a = Analytic { dim: 1, f: |x: &[f64]| 0.3 * x[0] * x[0] - 0.2 };
        let b = Analytic { dim: 1, f: |x: &[f64]| x[0] + 0.5 * x[0].powi(3) };
        let layers: Vec<Vec<Box<dyn Field>>> = vec![vec![Box::new(a)], vec![Box::new(b)]];
        let y = rescale_layers(&layers, &[vec![1.0]]).unwrap();
        for t in [-1.0, -0.3, 0.8] {
            assert_eq!(y[0][0].eval(&[t]), layers[0][0].eval(&[t]));
            assert_eq!(y[1][0].eval(&[t]), layers[1][0].eval(&[t]));
        }
    }
}
