//! Uniform space-time grid and node fields.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};

/// Uniform grid on `[0, T] x [0, R]`, nodes include both endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub r: f64,
    pub t: f64,
    pub n_x: usize,
    pub n_t: usize,
}

impl Grid {
    pub fn new(r: f64, t: f64, n_x: usize, n_t: usize) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) || !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(format!("grid box must be positive, got R={r}, T={t}")));
        }
        if n_x < 3 {
            return Err(Error::invalid(format!("n_x must be >= 3, got {n_x}")));
        }
        if n_t < 1 {
            return Err(Error::invalid("n_t must be >= 1"));
        }
        Ok(Grid { r, t, n_x, n_t })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.r / (self.n_x - 1) as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t / self.n_t as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.r * i as f64 / (self.n_x - 1) as f64
    }

    #[inline]
    pub fn time(&self, n: usize) -> f64 {
        self.t * n as f64 / self.n_t as f64
    }

    /// Trapezoid quadrature weights of the spatial nodes.
    pub fn weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.n_x];
        w[0] = 0.5 * dx;
        w[self.n_x - 1] = 0.5 * dx;
        w
    }

    pub fn same_box(&self, r: f64, t: f64) -> bool {
        close(self.r, r) && close(self.t, t)
    }

    /// Left node index and barycentric weight of `x` (clamped into `[0, R]`).
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x / self.dx()).clamp(0.0, (self.n_x - 1) as f64);
        let i = (s.floor() as usize).min(self.n_x - 2);
        (i, s - i as f64)
    }
}

pub(crate) fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Node values on a [`Grid`], one row of `n_x` values per time level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid) -> Self {
        Field { grid, values: vec![0.0; (grid.n_t + 1) * grid.n_x] }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Field { grid, values: vec![value; (grid.n_t + 1) * grid.n_x] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for n in 0..=grid.n_t {
            let t = grid.time(n);
            for i in 0..grid.n_x {
                values.push(f(t, grid.x(i)));
            }
        }
        Field { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != (grid.n_t + 1) * grid.n_x {
            return Err(Error::invalid(format!(
                "field has {} values, grid needs {}",
                values.len(),
                (grid.n_t + 1) * grid.n_x
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self, n: usize) -> &[f64] {
        let nx = self.grid.n_x;
        &self.values[n * nx..(n + 1) * nx]
    }

    pub fn trace_mut(&mut self, n: usize) -> &mut [f64] {
        let nx = self.grid.n_x;
        &mut self.values[n * nx..(n + 1) * nx]
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.values[n * self.grid.n_x + i]
    }

    /// Bilinear interpolation at an arbitrary point of the box.
    pub fn at(&self, t: f64, x: f64) -> f64 {
        let g = &self.grid;
        let s = (t / g.dt()).clamp(0.0, g.n_t as f64);
        let n = (s.floor() as usize).min(g.n_t.saturating_sub(1));
        let lt = s - n as f64;
        let (i, lx) = g.locate(x);
        let row = |n: usize| (1.0 - lx) * self.get(n, i) + lx * self.get(n, i + 1);
        if g.n_t == 0 {
            row(0)
        } else {
            (1.0 - lt) * row(n) + lt * row(n + 1)
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self - other`; both fields must live on the same grid.
    pub fn difference(&self, other: &Field) -> Result<Field> {
        if self.grid != other.grid {
            return Err(Error::DomainMismatch("fields live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Field { grid: self.grid, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Trapezoid `L^2(0,R)` norm of the trace at level `n`.
    pub fn l2_at(&self, n: usize) -> f64 {
        let w = self.grid.weights();
        self.trace(n).iter().zip(&w).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    /// `L^2(0,R)` norm of the piecewise-linear derivative at level `n`.
    pub fn grad_l2_at(&self, n: usize) -> f64 {
        let dx = self.grid.dx();
        self.trace(n).windows(2).map(|p| (p[1] - p[0]).powi(2) / dx).sum::<f64>().sqrt()
    }

    /// Space-time `L^2` norm, rectangle rule in time on levels `1..=n_t`.
    pub fn l2_space_time(&self) -> f64 {
        let dt = self.grid.dt();
        (1..=self.grid.n_t).map(|n| dt * self.l2_at(n).powi(2)).sum::<f64>().sqrt()
    }

    /// Writes one row per time level: `t,<value at x_0>,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "t")?;
        for i in 0..self.grid.n_x {
            write!(out, ",x={:.9}", self.grid.x(i))?;
        }
        writeln!(out)?;
        for n in 0..=self.grid.n_t {
            write!(out, "{:.12e}", self.grid.time(n))?;
            for v in self.trace(n) {
                write!(out, ",{v:.12e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::new(1.0, 1.0, 2, 10).is_err());
        assert!(Grid::new(1.0, 1.0, 3, 0).is_err());
        assert!(Grid::new(-1.0, 1.0, 3, 1).is_err());
        assert!(Grid::new(1.0, 1.0, 3, 1).is_ok());
    }

    #[test]
    fn nodes_cover_both_endpoints() {
        let g = Grid::new(2.0, 3.0, 11, 7).unwrap();
        assert_eq!(g.x(0), 0.0);
        assert_eq!(g.x(10), 2.0);
        assert_eq!(g.time(7), 3.0);
        let w: f64 = g.weights().iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn bilinear_interpolation_is_exact_for_bilinear_data() {
        let g = Grid::new(1.0, 1.0, 5, 4).unwrap();
        let f = Field::from_fn(g, |t, x| 1.0 + 2.0 * t + 3.0 * x + 4.0 * t * x);
        let v = f.at(0.33, 0.61);
        assert!((v - (1.0 + 0.66 + 1.83 + 4.0 * 0.33 * 0.61)).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_level() {
        let g = Grid::new(1.0, 1.0, 3, 2).unwrap();
        let mut buf = Vec::new();
        Field::constant(g, 1.0).write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert!(s.starts_with("t,x=0.000000000,x=0.500000000,x=1.000000000"));
    }
}
