//! Tensor grids on `[-L, L]^d` and functions sampled on them.

use crate::error::{Error, Result};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialGrid {
    pub dim: usize,
    /// truncation radius L
    pub half_width: f64,
    /// nodes per axis
    pub nodes: usize,
    pub dx: f64,
}

impl SpatialGrid {
    /// Grid with spacing as close to `dx` as possible while keeping the origin a node.
    pub fn new(dim: usize, half_width: f64, dx: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Unsupported(format!("finite differences support d <= 2 (got d = {dim})")));
        }
        if !(half_width > 0.0) || !(dx > 0.0) || dx > half_width {
            return Err(Error::Config(format!("grid needs 0 < dx <= L (got L = {half_width}, dx = {dx})")));
        }
        let cells_half = (half_width / dx).round().max(1.0) as usize;
        let nodes = 2 * cells_half + 1;
        Ok(Self {
            dim,
            half_width,
            nodes,
            dx: half_width / cells_half as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx
    }

    /// Axis indices of flat index `k` (first axis fastest).
    #[inline]
    pub fn unflatten(&self, k: usize) -> [usize; 2] {
        if self.dim == 1 {
            [k, 0]
        } else {
            [k % self.nodes, k / self.nodes]
        }
    }

    #[inline]
    pub fn flatten(&self, i: usize, j: usize) -> usize {
        i + self.nodes * j
    }

    pub fn point(&self, k: usize, out: &mut [f64]) {
        let ij = self.unflatten(k);
        for (a, o) in out.iter_mut().enumerate().take(self.dim) {
            *o = self.coord(ij[a]);
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|k| {
                let mut p = vec![0.0; self.dim];
                self.point(k, &mut p);
                p
            })
            .collect()
    }

    /// Same box, spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            nodes: 2 * self.nodes - 1,
            dx: self.dx / 2.0,
            ..*self
        }
    }

    /// Twice the box, same spacing.
    pub fn widened(&self) -> Self {
        Self {
            nodes: 2 * self.nodes - 1,
            half_width: 2.0 * self.half_width,
            ..*self
        }
    }

    /// Flat indices of the nodes with `|x| <= radius`.
    pub fn nodes_within(&self, radius: f64) -> Vec<usize> {
        let mut p = [0.0; 2];
        (0..self.len())
            .filter(|&k| {
                self.point(k, &mut p);
                p[..self.dim].iter().map(|v| v * v).sum::<f64>() <= radius * radius * (1.0 + 1e-12)
            })
            .collect()
    }
}

/// Nodal values of a function at a time stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridFunction {
    pub fn from_fn<F: Fn(&[f64]) -> f64 + ?Sized>(grid: SpatialGrid, time: f64, f: &F) -> Result<Self> {
        let mut p = [0.0; 2];
        let mut values = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            grid.point(k, &mut p);
            let v = f(&p[..grid.dim]);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "initial data", t: time, x: p[..grid.dim].to_vec() });
            }
            values.push(v);
        }
        Ok(Self { grid, values, time })
    }

    /// Multilinear interpolation; points outside the box are clamped onto it.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let locate = |v: f64| -> (usize, f64) {
            let s = ((v + g.half_width) / g.dx).clamp(0.0, (g.nodes - 1) as f64);
            let i = (s.floor() as usize).min(g.nodes - 2);
            (i, s - i as f64)
        };
        let (i, a) = locate(x[0]);
        if g.dim == 1 {
            return (1.0 - a) * self.values[i] + a * self.values[i + 1];
        }
        let (j, c) = locate(x[1]);
        let v = |i, j| self.values[g.flatten(i, j)];
        (1.0 - a) * (1.0 - c) * v(i, j) + a * (1.0 - c) * v(i + 1, j) + (1.0 - a) * c * v(i, j + 1) + a * c * v(i + 1, j + 1)
    }

    /// `max |self - other|` over nodes of `self.grid` with `|x| <= radius`, `other` interpolated.
    pub fn max_diff_within(&self, other: &GridFunction, radius: f64) -> f64 {
        let same = self.grid == other.grid;
        let mut p = [0.0; 2];
        self.grid
            .nodes_within(radius)
            .into_iter()
            .map(|k| {
                if same {
                    return (self.values[k] - other.values[k]).abs();
                }
                self.grid.point(k, &mut p);
                (self.values[k] - other.interpolate(&p[..self.grid.dim])).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Components of ∇u: centered inside, second-order one-sided on the boundary.
    pub fn gradient(&self) -> Vec<GridFunction> {
        let g = &self.grid;
        let n = g.nodes;
        let h = g.dx;
        (0..g.dim)
            .map(|axis| {
                let values = (0..g.len())
                    .map(|k| {
                        let ij = g.unflatten(k);
                        let at = |m: usize| {
                            let mut c = ij;
                            c[axis] = m;
                            self.values[g.flatten(c[0], c[1])]
                        };
                        let i = ij[axis];
                        if i == 0 {
                            (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                        } else if i == n - 1 {
                            (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * h)
                        } else {
                            (at(i + 1) - at(i - 1)) / (2.0 * h)
                        }
                    })
                    .collect();
                GridFunction { grid: *g, values, time: self.time }
            })
            .collect()
    }

    /// `|∇u|` at every node.
    pub fn gradient_norm(&self) -> GridFunction {
        let parts = self.gradient();
        let values = (0..self.grid.len())
            .map(|k| parts.iter().map(|p| p.values[k] * p.values[k]).sum::<f64>().sqrt())
            .collect();
        GridFunction { grid: self.grid, values, time: self.time }
    }

    /// CSV with coordinate columns and a value column, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols: Vec<String> = (1..=self.grid.dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},value", cols.join(","))?;
        let mut p = [0.0; 2];
        for (k, v) in self.values.iter().enumerate() {
            self.grid.point(k, &mut p);
            let row: Vec<String> = p[..self.grid.dim].iter().chain(std::iter::once(v)).map(|c| format!("{c:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}
