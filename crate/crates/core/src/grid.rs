//! Uniform tensor grids over `[-1,1]^k` and functions sampled on them.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Upper bound on `m^k`; keeps dense Gram matrices and sampled paths in memory.
pub const MAX_NODES: usize = 4_000_000;

/// A uniform grid with `points_per_axis` nodes on each of `dim` axes of `[-1,1]^dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    dim: usize,
    points_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, points_per_axis: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "grid dimension must be positive"));
        }
        if points_per_axis < 3 {
            return Err(Error::GridTooCoarse {
                needed: 3,
                got: points_per_axis,
            });
        }
        let total = (points_per_axis as u128).pow(dim as u32);
        if total > MAX_NODES as u128 {
            return Err(invalid(
                "points_per_axis",
                format!("{points_per_axis}^{dim} nodes exceeds the limit of {MAX_NODES}"),
            ));
        }
        Ok(Self {
            dim,
            points_per_axis,
        })
    }

    /// Default grid for a given input dimension: 201 nodes in 1D, 41 per axis otherwise.
    pub fn default_for_dim(dim: usize) -> Result<Self> {
        Self::new(dim, if dim == 1 { 201 } else { 41 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node spacing along every axis.
    pub fn mesh(&self) -> f64 {
        2.0 / (self.points_per_axis - 1) as f64
    }

    /// Coordinate of node `i` along any axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points_per_axis {
            1.0
        } else {
            -1.0 + self.mesh() * i as f64
        }
    }

    /// Stride of `axis` in the row-major flat layout (axis 0 slowest).
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.points_per_axis.pow((self.dim - 1 - axis) as u32)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        for axis in (0..self.dim).rev() {
            idx[axis] = flat % self.points_per_axis;
            flat /= self.points_per_axis;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .fold(0, |acc, &i| acc * self.points_per_axis + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .into_iter()
            .map(|i| self.coord(i))
            .collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// Locate `x` in `[-1,1]`: returns the left node of its cell and the
    /// fractional position inside the cell. Inputs are clamped to the domain.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let m = self.points_per_axis;
        let u = ((x.clamp(-1.0, 1.0) + 1.0) / self.mesh()).max(0.0);
        let cell = (u.floor() as usize).min(m - 2);
        (cell, (u - cell as f64).clamp(0.0, 1.0))
    }

    /// Refined grid with `factor` sub-intervals per cell (nested nodes).
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.dim, (self.points_per_axis - 1) * factor + 1)
    }

    /// Trapezoid weights for integration over `[-1,1]^dim`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.mesh();
        let m = self.points_per_axis;
        let axis_weight = |i: usize| if i == 0 || i + 1 == m { h / 2.0 } else { h };
        (0..self.len())
            .map(|k| {
                self.multi_index(k)
                    .into_iter()
                    .map(axis_weight)
                    .product::<f64>()
            })
            .collect()
    }
}

/// Values of a real function at the nodes of a [`GridSpec`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: GridSpec,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid("values", format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(&grid.node(k))).collect();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Multilinear interpolation; coordinates are clamped to `[-1,1]`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.grid.dim);
        if self.grid.dim == 1 {
            let (i, w) = self.grid.locate(x[0]);
            return self.values[i] * (1.0 - w) + self.values[i + 1] * w;
        }
        let dim = self.grid.dim;
        let cells: Vec<(usize, f64)> = x.iter().map(|&xi| self.grid.locate(xi)).collect();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut flat = 0;
            for (axis, &(i, w)) in cells.iter().enumerate() {
                let up = (corner >> (dim - 1 - axis)) & 1 == 1;
                weight *= if up { w } else { 1.0 - w };
                flat = flat * self.grid.points_per_axis + i + usize::from(up);
            }
            if weight != 0.0 {
                acc += weight * self.values[flat];
            }
        }
        acc
    }

    /// Trapezoid integral over `[-1,1]^dim`.
    pub fn integrate(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Serialize as `# grid dim=k m=m` followed by one value per line.
    pub fn to_csv(&self, normalized: bool) -> String {
        let mut out = String::with_capacity(self.values.len() * 20 + 32);
        let _ = writeln!(
            out,
            "# grid dim={} m={}",
            self.grid.dim, self.grid.points_per_axis
        );
        if normalized {
            out.push_str("# normalized\n");
        }
        for v in &self.values {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    /// Parse the CSV produced by [`GridFunction::to_csv`]; returns the
    /// function and whether the `# normalized` marker was present.
    pub fn from_csv(text: &str) -> Result<(Self, bool)> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty input".into(),
        })?;
        let grid = parse_header(header)?;
        let mut normalized = false;
        let mut values = Vec::with_capacity(grid.len());
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "# normalized" {
                normalized = true;
                continue;
            }
            let v: f64 = line.parse().map_err(|_| Error::Parse {
                line: no + 1,
                message: format!("not a number: `{line}`"),
            })?;
            values.push(v);
        }
        Ok((Self::new(grid, values)?, normalized))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, normalized: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(normalized))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Self, bool)> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(line: &str) -> Result<GridSpec> {
    let bad = |message: &str| Error::Parse {
        line: 1,
        message: message.to_string(),
    };
    let rest = line
        .trim()
        .strip_prefix("# grid")
        .ok_or_else(|| bad("expected `# grid dim=k m=m` header"))?;
    let mut dim = None;
    let mut m = None;
    for token in rest.split_whitespace() {
        match token.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("m", v)) => m = v.parse().ok(),
            _ => return Err(bad("unexpected header token")),
        }
    }
    match (dim, m) {
        (Some(dim), Some(m)) => GridSpec::new(dim, m),
        _ => Err(bad("header must give dim and m")),
    }
}
